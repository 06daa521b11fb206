//! Model parameters, priors, and the weighted KL objective.
//!
//! The variational family puts Beta distributions on the stick proportions,
//! point masses on the cluster coefficients and the noise precision, and a
//! per-gene multinomial/conditional-normal pair on the local assignment and
//! offset. Local parameters have a closed-form optimum given the globals, so
//! the objective is expressed as a function of the global free vector alone
//! ("marginal KL"). Point-mass entropies are constant and dropped; values
//! are therefore comparable across calls but carry an arbitrary additive
//! offset fixed by that convention.
//!
//! Per-gene weights multiply the gene's entire local free-energy block
//! (likelihood, local priors, local entropies). Integer weights are then
//! exactly equivalent to removing or repeating genes, and the closed-form
//! local optimum does not depend on the weights. The objective is linear in
//! the weights at fixed globals.

use crate::error::{Error, Result};
use crate::scalar::{digamma, ln_gamma, log_sum_exp, Real};
use crate::spline::{BasisMatrix, TimeGrid};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

const LN_2PI: f64 = 1.8378770664093453;

/// Hyperparameters of the generative model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    /// Concentration of the stick-breaking prior Beta(1, alpha).
    pub alpha: f64,
    /// Mean of the normal prior on each spline coefficient.
    pub beta_mean: f64,
    /// Variance of the normal prior on each spline coefficient.
    pub beta_var: f64,
    /// Mean of the normal prior on the per-gene offset.
    pub b_mean: f64,
    /// Variance of the normal prior on the per-gene offset.
    pub b_var: f64,
    /// Shape of the Gamma prior on the noise precision.
    pub tau_shape: f64,
    /// Scale of the Gamma prior on the noise precision.
    pub tau_scale: f64,
}

impl Default for Priors {
    fn default() -> Self {
        // N(m, 0.10^-1) is read as mean m, variance 1/0.10; the Gamma prior
        // uses the shape/scale parameterization.
        Priors {
            alpha: 2.0,
            beta_mean: 0.38,
            beta_var: 10.0,
            b_mean: 0.0,
            b_var: 10.0,
            tau_shape: 0.10,
            tau_scale: 10.00,
        }
    }
}

impl Priors {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && self.beta_var > 0.0
            && self.b_var > 0.0
            && self.tau_shape > 0.0
            && self.tau_scale > 0.0
            && [
                self.alpha,
                self.beta_mean,
                self.beta_var,
                self.b_mean,
                self.b_var,
                self.tau_shape,
                self.tau_scale,
            ]
            .iter()
            .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(
                "priors require alpha > 0, variances > 0, shape/scale > 0".into(),
            ))
        }
    }
}

/// Global variational parameters.
///
/// Stick parameters are stored on the log scale so that packing to and from
/// the unconstrained free vector is an exact copy; the positive Beta
/// parameters are exposed through [`GlobalParams::stick_a`] and
/// [`GlobalParams::stick_b`]. The final stick is fixed at one by the
/// truncation, so only `K-1` Beta factors are parameterized.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalParams {
    stick_log_a: Vec<f64>,
    stick_log_b: Vec<f64>,
    beta: DMatrix<f64>,
    log_tau: f64,
}

impl GlobalParams {
    /// Build from positive stick parameters.
    pub fn new(stick_a: &[f64], stick_b: &[f64], beta: DMatrix<f64>, log_tau: f64) -> Result<Self> {
        if stick_a.len() != stick_b.len() || stick_a.len() + 1 != beta.nrows() {
            return Err(Error::InvalidInput(format!(
                "stick parameter count {} does not match K-1 = {}",
                stick_a.len(),
                beta.nrows().saturating_sub(1)
            )));
        }
        if stick_a
            .iter()
            .chain(stick_b.iter())
            .any(|&v| !(v > 0.0) || !v.is_finite())
        {
            return Err(Error::InvalidInput(
                "stick parameters must be strictly positive and finite".into(),
            ));
        }
        if beta.iter().any(|v| !v.is_finite()) || !log_tau.is_finite() {
            return Err(Error::InvalidInput("non-finite global parameter".into()));
        }
        Ok(GlobalParams {
            stick_log_a: stick_a.iter().map(|v| v.ln()).collect(),
            stick_log_b: stick_b.iter().map(|v| v.ln()).collect(),
            beta,
            log_tau,
        })
    }

    /// Build directly from log-scale stick parameters.
    pub fn from_logs(
        stick_log_a: Vec<f64>,
        stick_log_b: Vec<f64>,
        beta: DMatrix<f64>,
        log_tau: f64,
    ) -> Result<Self> {
        if stick_log_a.len() != stick_log_b.len() || stick_log_a.len() + 1 != beta.nrows() {
            return Err(Error::InvalidInput("stick/beta dimension mismatch".into()));
        }
        if stick_log_a
            .iter()
            .chain(stick_log_b.iter())
            .chain(beta.iter())
            .chain(std::iter::once(&log_tau))
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidInput("non-finite global parameter".into()));
        }
        Ok(GlobalParams {
            stick_log_a,
            stick_log_b,
            beta,
            log_tau,
        })
    }

    pub fn k(&self) -> usize {
        self.beta.nrows()
    }

    pub fn df(&self) -> usize {
        self.beta.ncols()
    }

    /// Dimension of the free vector: `2(K-1) + K*df + 1`.
    pub fn dim(&self) -> usize {
        2 * (self.k() - 1) + self.k() * self.df() + 1
    }

    pub fn stick_a(&self, k: usize) -> f64 {
        self.stick_log_a[k].exp()
    }

    pub fn stick_b(&self, k: usize) -> f64 {
        self.stick_log_b[k].exp()
    }

    pub fn stick_log_a(&self) -> &[f64] {
        &self.stick_log_a
    }

    pub fn stick_log_b(&self) -> &[f64] {
        &self.stick_log_b
    }

    pub fn beta(&self) -> &DMatrix<f64> {
        &self.beta
    }

    pub fn log_tau(&self) -> f64 {
        self.log_tau
    }
}

/// Unconstrained flat parameter vector.
///
/// Layout: `[log stick_a (K-1) | log stick_b (K-1) | beta row-major (K*df) |
/// log tau]`. Positive quantities ride on the log scale, so every real
/// vector of matching dimension is admissible.
#[derive(Clone, Debug, PartialEq)]
pub struct FreeVector(DVector<f64>);

impl FreeVector {
    pub fn new(v: DVector<f64>) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite free vector entry".into()));
        }
        Ok(FreeVector(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.len() == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }
}

/// Number of clusters implied by a free-vector dimension.
pub fn infer_k(dim: usize, df: usize) -> Result<usize> {
    if (dim + 1) % (df + 2) != 0 || dim + 1 < df + 2 {
        return Err(Error::InvalidInput(format!(
            "free vector dimension {dim} incompatible with df {df}"
        )));
    }
    Ok((dim + 1) / (df + 2))
}

/// Flatten globals into the free vector (exact copy; no rounding).
pub fn pack(g: &GlobalParams) -> FreeVector {
    let (k, df) = (g.k(), g.df());
    let mut v = DVector::zeros(g.dim());
    let mut idx = 0;
    for &x in &g.stick_log_a {
        v[idx] = x;
        idx += 1;
    }
    for &x in &g.stick_log_b {
        v[idx] = x;
        idx += 1;
    }
    for r in 0..k {
        for c in 0..df {
            v[idx] = g.beta[(r, c)];
            idx += 1;
        }
    }
    v[idx] = g.log_tau;
    FreeVector(v)
}

/// Rebuild globals from the free vector (exact copy; no rounding).
pub fn unpack(eta: &FreeVector, df: usize) -> Result<GlobalParams> {
    let k = infer_k(eta.len(), df)?;
    let s = eta.as_slice();
    let km1 = k - 1;
    let beta = DMatrix::from_row_slice(k, df, &s[2 * km1..2 * km1 + k * df]);
    GlobalParams::from_logs(
        s[..km1].to_vec(),
        s[km1..2 * km1].to_vec(),
        beta,
        s[2 * km1 + k * df],
    )
}

/// Per-gene local variational parameters at fixed globals.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalParams {
    /// Cluster responsibilities, one row-stochastic row per gene.
    pub zeta: DMatrix<f64>,
    /// Conditional posterior mean of the offset given each assignment.
    pub b_mean: DMatrix<f64>,
    /// Conditional posterior variance of the offset given each assignment.
    pub b_var: DMatrix<f64>,
}

/// Expression matrix with its time grid and basis.
#[derive(Clone, Debug)]
pub struct Dataset {
    y: DMatrix<f64>,
    grid: TimeGrid,
    basis: BasisMatrix,
    gene_ids: Vec<String>,
    stats: DataStats,
}

/// Sufficient statistics of the data reused by every objective evaluation.
#[derive(Clone, Debug)]
pub(crate) struct DataStats {
    /// Per-gene squared norm of the observations.
    pub yy: Vec<f64>,
    /// Per-gene mean observation.
    pub ybar: Vec<f64>,
    /// `Y X`: per-gene inner products with each basis column.
    pub p: DMatrix<f64>,
    /// `X' X`.
    pub gram: DMatrix<f64>,
    /// Column means of the basis.
    pub colmean: Vec<f64>,
}

impl Dataset {
    pub fn new(
        y: DMatrix<f64>,
        grid: TimeGrid,
        basis: BasisMatrix,
        gene_ids: Vec<String>,
    ) -> Result<Self> {
        let (n_g, n_obs) = y.shape();
        if n_obs != grid.n_obs() || n_obs != basis.n_obs() {
            return Err(Error::InvalidInput(format!(
                "observation columns {n_obs} do not match grid ({}) / basis ({})",
                grid.n_obs(),
                basis.n_obs()
            )));
        }
        if gene_ids.len() != n_g {
            return Err(Error::InvalidInput("gene id count mismatch".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("missing or non-finite expression".into()));
        }
        let p = &y * &basis.x;
        let gram = basis.x.transpose() * &basis.x;
        let colmean = basis.x.row_mean().transpose().as_slice().to_vec();
        let yy = (0..n_g).map(|g| y.row(g).norm_squared()).collect();
        let ybar = (0..n_g).map(|g| y.row(g).mean()).collect();
        Ok(Dataset {
            y,
            grid,
            basis,
            gene_ids,
            stats: DataStats {
                yy,
                ybar,
                p,
                gram,
                colmean,
            },
        })
    }

    pub fn n_genes(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_obs(&self) -> usize {
        self.y.ncols()
    }

    pub fn df(&self) -> usize {
        self.basis.df
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn basis(&self) -> &BasisMatrix {
        &self.basis
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    pub(crate) fn stats(&self) -> &DataStats {
        &self.stats
    }

    /// Copy of the dataset with gene `g` appended once more; used to check
    /// the weight/duplication equivalence.
    pub fn with_duplicated_gene(&self, g: usize) -> Result<Dataset> {
        let mut y = DMatrix::zeros(self.n_genes() + 1, self.n_obs());
        y.view_mut((0, 0), self.y.shape()).copy_from(&self.y);
        y.row_mut(self.n_genes()).copy_from(&self.y.row(g));
        let mut ids = self.gene_ids.clone();
        ids.push(format!("{}_dup", self.gene_ids[g]));
        Dataset::new(y, self.grid.clone(), self.basis.clone(), ids)
    }
}

/// Non-negative per-gene weights; all ones reproduces the unweighted model.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector(DVector<f64>);

impl WeightVector {
    pub fn new(w: DVector<f64>) -> Result<Self> {
        if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(
                "weights must be non-negative and finite".into(),
            ));
        }
        Ok(WeightVector(w))
    }

    pub fn ones(n: usize) -> Self {
        WeightVector(DVector::from_element(n, 1.0))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.len() == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }
}

/// Stick-breaking probabilities from `K-1` stick proportions, with the last
/// stick fixed at one so the probabilities absorb the full remaining mass.
pub fn stick_breaking_weights(nu: &[f64]) -> Vec<f64> {
    let mut pi = Vec::with_capacity(nu.len() + 1);
    let mut remaining = 1.0;
    for &v in nu {
        let p = v * remaining;
        pi.push(p);
        remaining -= p;
    }
    pi.push(remaining);
    pi
}

/// View of the free vector split into named blocks, generic over scalar.
pub(crate) struct GlobalsView<'a, T> {
    pub k: usize,
    pub df: usize,
    pub log_a: &'a [T],
    pub log_b: &'a [T],
    pub beta: &'a [T],
    pub log_tau: T,
}

impl<'a, T: Real> GlobalsView<'a, T> {
    pub fn split(eta: &'a [T], k: usize, df: usize) -> Self {
        let km1 = k - 1;
        debug_assert_eq!(eta.len(), 2 * km1 + k * df + 1);
        GlobalsView {
            k,
            df,
            log_a: &eta[..km1],
            log_b: &eta[km1..2 * km1],
            beta: &eta[2 * km1..2 * km1 + k * df],
            log_tau: eta[2 * km1 + k * df],
        }
    }

    pub fn beta_row(&self, k: usize) -> &'a [T] {
        &self.beta[k * self.df..(k + 1) * self.df]
    }
}

/// Quantities shared by every gene at a fixed global parameter.
pub(crate) struct EvalContext<T> {
    pub k: usize,
    pub n_obs: f64,
    /// Expected log stick-breaking probabilities, length K.
    pub elogpi: Vec<T>,
    /// `beta_k' Gram beta_k` per cluster.
    pub quad: Vec<T>,
    /// Mean of the fitted cluster curve, `colmean . beta_k`.
    pub xmean: Vec<T>,
    pub tau: T,
    /// Conditional posterior variance of the offset (common to all genes).
    pub vhat: T,
}

pub(crate) fn eval_context<T: Real>(
    gv: &GlobalsView<'_, T>,
    data: &Dataset,
    priors: &Priors,
) -> EvalContext<T> {
    let k = gv.k;
    let stats = data.stats();
    let n_obs = data.n_obs() as f64;

    // E[log pi_k] under the Beta stick factors; the last stick is fixed at
    // one by the truncation so E[log nu_K] = 0.
    let mut elogpi = Vec::with_capacity(k);
    let mut cum = T::zero();
    for j in 0..k {
        if j < k - 1 {
            let a = gv.log_a[j].exp();
            let b = gv.log_b[j].exp();
            let dg_ab = digamma(a + b);
            elogpi.push(cum + digamma(a) - dg_ab);
            cum = cum + digamma(b) - dg_ab;
        } else {
            elogpi.push(cum);
        }
    }
    debug_assert_eq!(elogpi.len(), k);

    let df = gv.df;
    let mut quad = Vec::with_capacity(k);
    let mut xmean = Vec::with_capacity(k);
    for c in 0..k {
        let beta_c = gv.beta_row(c);
        let mut q = T::zero();
        for i in 0..df {
            let mut gi = T::zero();
            for j in 0..df {
                gi = gi + beta_c[j].scale(stats.gram[(i, j)]);
            }
            q = q + beta_c[i] * gi;
        }
        quad.push(q);
        let mut xm = T::zero();
        for i in 0..df {
            xm = xm + beta_c[i].scale(stats.colmean[i]);
        }
        xmean.push(xm);
    }

    let tau = gv.log_tau.exp();
    let vhat = (tau.scale(n_obs).shift(1.0 / priors.b_var)).recip();
    EvalContext {
        k,
        n_obs,
        elogpi,
        quad,
        xmean,
        tau,
        vhat,
    }
}

/// Assignment scores `s_gk` for one gene, plus the conditional offset means.
///
/// `s_gk = E[log pi_k] + E[log lik | b] - KL(q(b|k) || p(b))` with the
/// conditional offset posterior at its closed-form optimum.
pub(crate) fn gene_scores<T: Real>(
    ctx: &EvalContext<T>,
    gv: &GlobalsView<'_, T>,
    stats: &DataStats,
    priors: &Priors,
    g: usize,
    scores: &mut Vec<T>,
    b_means: &mut Vec<T>,
) {
    scores.clear();
    b_means.clear();
    let n = ctx.n_obs;
    let df = gv.df;
    let prior_prec_mean = priors.b_mean / priors.b_var;
    for c in 0..ctx.k {
        let beta_c = gv.beta_row(c);
        let mut dot = T::zero();
        for i in 0..df {
            dot = dot + beta_c[i].scale(stats.p[(g, i)]);
        }
        let ssr = ctx.quad[c] - dot.scale(2.0) + T::from_f64(stats.yy[g]);
        let rbar = (-ctx.xmean[c]).shift(stats.ybar[g]);
        let m = ctx.vhat * (ctx.tau * rbar.scale(n)).shift(prior_prec_mean);
        // E_q(b|k)[log p(y_g | b, beta_c, tau)]
        let quad_form =
            ssr - m * rbar.scale(2.0 * n) + (m * m + ctx.vhat).scale(n);
        let ell = (gv.log_tau.shift(-LN_2PI)).scale(0.5 * n) - ctx.tau * quad_form.scale(0.5);
        // KL(q(b|k) || p(b))
        let dm = m.shift(-priors.b_mean);
        let klb = ((ctx.vhat + dm * dm).scale(1.0 / priors.b_var)
            - (ctx.vhat.scale(1.0 / priors.b_var)).ln())
        .shift(-1.0)
        .scale(0.5);
        scores.push(ctx.elogpi[c] + ell - klb);
        b_means.push(m);
    }
}

/// Prior and entropy terms that do not depend on the data.
pub(crate) fn global_terms<T: Real>(gv: &GlobalsView<'_, T>, priors: &Priors) -> T {
    let mut total = T::zero();
    // Stick factors: E[log p(nu_k)] + H(q(nu_k)).
    for j in 0..gv.k - 1 {
        let a = gv.log_a[j].exp();
        let b = gv.log_b[j].exp();
        let dg_a = digamma(a);
        let dg_b = digamma(b);
        let dg_ab = digamma(a + b);
        let e_log_1m = dg_b - dg_ab;
        let log_beta_fn = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
        let entropy = log_beta_fn - a.shift(-1.0) * dg_a - b.shift(-1.0) * dg_b
            + (a + b).shift(-2.0) * dg_ab;
        total = total
            + e_log_1m.scale(priors.alpha - 1.0).shift(priors.alpha.ln())
            + entropy;
    }
    // Point-mass coefficient prior.
    let half_log = -0.5 * (LN_2PI + priors.beta_var.ln());
    for &bi in gv.beta {
        let d = bi.shift(-priors.beta_mean);
        total = total + (d * d).scale(-0.5 / priors.beta_var).shift(half_log);
    }
    // Point-mass precision prior (shape/scale Gamma).
    let tau = gv.log_tau.exp();
    total = total + gv.log_tau.scale(priors.tau_shape - 1.0) - tau.scale(1.0 / priors.tau_scale);
    total = total.shift(
        -ln_gamma::<f64>(priors.tau_shape) - priors.tau_shape * priors.tau_scale.ln(),
    );
    total
}

/// Weighted marginal KL objective, generic over the scalar type.
pub(crate) fn eval_objective<T: Real>(
    eta: &[T],
    w: &[T],
    data: &Dataset,
    priors: &Priors,
    k: usize,
) -> T {
    let gv = GlobalsView::split(eta, k, data.df());
    let ctx = eval_context(&gv, data, priors);
    let stats = data.stats();
    let mut scores = Vec::with_capacity(k);
    let mut b_means = Vec::with_capacity(k);
    let mut elbo = global_terms(&gv, priors);
    for g in 0..data.n_genes() {
        gene_scores(&ctx, &gv, stats, priors, g, &mut scores, &mut b_means);
        elbo = elbo + w[g] * log_sum_exp(&scores);
    }
    -elbo
}

/// The optimized free-energy block of a single gene (its contribution to the
/// negative objective per unit weight).
pub(crate) fn eval_gene_block<T: Real>(
    eta: &[T],
    data: &Dataset,
    priors: &Priors,
    k: usize,
    g: usize,
) -> T {
    let gv = GlobalsView::split(eta, k, data.df());
    let ctx = eval_context(&gv, data, priors);
    let mut scores = Vec::with_capacity(k);
    let mut b_means = Vec::with_capacity(k);
    gene_scores(&ctx, &gv, data.stats(), priors, g, &mut scores, &mut b_means);
    log_sum_exp(&scores)
}

/// Exact coordinate minimizer of the weighted KL over local parameters at
/// fixed globals.
///
/// Because weights scale each gene's whole local block, the minimizing
/// locals are weight-free: the conditional offset posterior combines the
/// prior precision with `n_obs * tau`, and the responsibilities are the
/// softmax of `E[log pi_k]` plus the offset-marginalized expected
/// log-likelihood. A zero weight leaves the block degenerate and the same
/// formulas serve as its continuous limit.
pub fn local_update(
    g: &GlobalParams,
    data: &Dataset,
    _w: &WeightVector,
    priors: &Priors,
) -> Result<LocalParams> {
    let eta = pack(g);
    let k = g.k();
    let gv = GlobalsView::split(eta.as_slice(), k, data.df());
    let ctx = eval_context(&gv, data, priors);
    let stats = data.stats();
    let n_g = data.n_genes();
    let mut zeta = DMatrix::zeros(n_g, k);
    let mut b_mean = DMatrix::zeros(n_g, k);
    let vhat = ctx.vhat;
    let b_var = DMatrix::from_element(n_g, k, vhat);
    let mut scores: Vec<f64> = Vec::with_capacity(k);
    let mut means: Vec<f64> = Vec::with_capacity(k);
    for gene in 0..n_g {
        gene_scores(&ctx, &gv, stats, priors, gene, &mut scores, &mut means);
        let lse = log_sum_exp(&scores);
        if !lse.is_finite() {
            return Err(Error::NonFinite {
                term: format!("assignment scores for gene {gene}"),
            });
        }
        for c in 0..k {
            zeta[(gene, c)] = (scores[c] - lse).exp();
            b_mean[(gene, c)] = means[c];
        }
    }
    Ok(LocalParams {
        zeta,
        b_mean,
        b_var,
    })
}

/// Weighted KL objective as a function of the global free vector, with the
/// locals at their closed-form optimum. Reported up to the additive constant
/// fixed by dropping the point-mass entropies.
pub fn marginal_kl(
    eta: &FreeVector,
    w: &WeightVector,
    data: &Dataset,
    priors: &Priors,
) -> Result<f64> {
    let k = infer_k(eta.len(), data.df())?;
    if w.len() != data.n_genes() {
        return Err(Error::InvalidInput(format!(
            "weight length {} does not match {} genes",
            w.len(),
            data.n_genes()
        )));
    }
    let value = eval_objective::<f64>(eta.as_slice(), w.as_slice(), data, priors, k);
    if value.is_finite() {
        return Ok(value);
    }
    // Identify the offending term for the error message.
    let gv = GlobalsView::split(eta.as_slice(), k, data.df());
    if !global_terms(&gv, priors).is_finite() {
        return Err(Error::NonFinite {
            term: "global prior/entropy terms".into(),
        });
    }
    for g in 0..data.n_genes() {
        let block = eval_gene_block(eta.as_slice(), data, priors, k, g);
        if !block.is_finite() {
            return Err(Error::NonFinite {
                term: format!("local free-energy block of gene {g}"),
            });
        }
    }
    Err(Error::NonFinite {
        term: "weighted objective total".into(),
    })
}

/// Cluster responsibilities at a free vector; rows normalized.
pub fn cluster_probs(
    eta: &FreeVector,
    data: &Dataset,
    w: &WeightVector,
    priors: &Priors,
) -> Result<DMatrix<f64>> {
    let globals = unpack(eta, data.df())?;
    Ok(local_update(&globals, data, w, priors)?.zeta)
}

/// Weighted KL evaluated at explicitly supplied local parameters, not the
/// closed-form optimum. Used by optimality checks.
pub fn kl_with_locals(
    eta: &FreeVector,
    w: &WeightVector,
    data: &Dataset,
    priors: &Priors,
    locals: &LocalParams,
) -> Result<f64> {
    let k = infer_k(eta.len(), data.df())?;
    let gv = GlobalsView::split(eta.as_slice(), k, data.df());
    let ctx = eval_context::<f64>(&gv, data, priors);
    let stats = data.stats();
    let n = ctx.n_obs;
    let mut elbo = global_terms(&gv, priors);
    for g in 0..data.n_genes() {
        let mut block = 0.0;
        for c in 0..k {
            let z = locals.zeta[(g, c)];
            if z <= 0.0 {
                continue;
            }
            let m = locals.b_mean[(g, c)];
            let v = locals.b_var[(g, c)];
            if v <= 0.0 {
                return Err(Error::InvalidInput("b_var must be positive".into()));
            }
            let beta_c = gv.beta_row(c);
            let mut dot = 0.0;
            for i in 0..data.df() {
                dot += beta_c[i] * stats.p[(g, i)];
            }
            let ssr = ctx.quad[c] - 2.0 * dot + stats.yy[g];
            let rbar = stats.ybar[g] - ctx.xmean[c];
            let quad_form = ssr - 2.0 * m * n * rbar + n * (m * m + v);
            let ell = 0.5 * n * (gv.log_tau - LN_2PI) - 0.5 * ctx.tau * quad_form;
            let dm = m - priors.b_mean;
            let klb = 0.5 * ((v + dm * dm) / priors.b_var - 1.0 - (v / priors.b_var).ln());
            block += z * (ctx.elogpi[c] + ell - klb - z.ln());
        }
        elbo += w.as_slice()[g] * block;
    }
    Ok(-elbo)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::spline::{basis_matrix, build_knots};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_dataset(n_g: usize, n_obs: usize, df: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let times: Vec<f64> = (0..n_obs).map(|i| i as f64 / (n_obs - 1) as f64).collect();
        let grid = TimeGrid::new(times).unwrap();
        let knots = build_knots(3.min(df - 1), df, &grid).unwrap();
        let basis = basis_matrix(&knots, 3.min(df - 1), &grid).unwrap();
        let y = DMatrix::from_fn(n_g, n_obs, |_, _| rng.gen_range(-2.0..2.0));
        let ids = (0..n_g).map(|g| format!("g{g}")).collect();
        Dataset::new(y, grid, basis, ids).unwrap()
    }

    pub(crate) fn random_eta(k: usize, df: usize, seed: u64) -> FreeVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 2 * (k - 1) + k * df + 1;
        FreeVector::new(DVector::from_fn(dim, |_, _| rng.gen_range(-0.8..0.8))).unwrap()
    }

    #[test]
    fn pack_unpack_round_trip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (k, df) = (4, 5);
        let beta = DMatrix::from_fn(k, df, |_, _| rng.gen_range(-3.0..3.0));
        let g = GlobalParams::new(
            &[0.3, 1.0, 2.7],
            &[1.9, 0.4, 5.5],
            beta,
            rng.gen_range(-1.0..1.0),
        )
        .unwrap();
        let eta = pack(&g);
        let g2 = unpack(&eta, df).unwrap();
        assert_eq!(g, g2);
        let eta2 = pack(&g2);
        assert_eq!(eta.as_slice(), eta2.as_slice());
    }

    #[test]
    fn pack_log_link_unit_stick() {
        let g = GlobalParams::new(&[1.0], &[2.0], DMatrix::zeros(2, 3), 0.0).unwrap();
        let eta = pack(&g);
        assert_eq!(eta.as_slice()[0], 0.0);
    }

    #[test]
    fn free_vector_dimension_paper_scale() {
        // K = 30, df = 7: 2*29 + 210 + 1 = 269.
        let g = GlobalParams::new(&[1.0; 29], &[2.0; 29], DMatrix::zeros(30, 7), 0.0).unwrap();
        assert_eq!(g.dim(), 269);
        assert_eq!(pack(&g).len(), 269);
        assert_eq!(infer_k(269, 7).unwrap(), 30);
    }

    #[test]
    fn stick_breaking_weights_sum_to_one() {
        let nu = [0.3, 0.7, 0.123, 0.9];
        let pi = stick_breaking_weights(&nu);
        assert_eq!(pi.len(), 5);
        assert_relative_eq!(pi.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert!(pi.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn local_update_single_cluster() {
        let data = toy_dataset(4, 12, 4, 11);
        let priors = Priors::default();
        let beta = DMatrix::from_fn(1, 4, |_, c| 0.1 * c as f64);
        let g = GlobalParams::new(&[], &[], beta.clone(), 0.2).unwrap();
        let w = WeightVector::ones(4);
        let locals = local_update(&g, &data, &w, &priors).unwrap();
        for gene in 0..4 {
            assert_relative_eq!(locals.zeta[(gene, 0)], 1.0, epsilon = 1e-14);
            // Conjugate posterior of the offset under the residual likelihood.
            let n = data.n_obs() as f64;
            let tau = 0.2f64.exp();
            let resid_mean = data.y().row(gene).mean()
                - data
                    .basis()
                    .x
                    .row_mean()
                    .transpose()
                    .dot(&beta.row(0).transpose());
            let prec = 1.0 / priors.b_var + n * tau;
            let expect_m = (priors.b_mean / priors.b_var + tau * n * resid_mean) / prec;
            assert_relative_eq!(locals.b_mean[(gene, 0)], expect_m, epsilon = 1e-12);
            assert_relative_eq!(locals.b_var[(gene, 0)], 1.0 / prec, epsilon = 1e-12);
        }
    }

    #[test]
    fn local_update_symmetric_clusters() {
        // Identical coefficient rows and symmetric sticks make the
        // responsibility columns equal.
        let data = toy_dataset(5, 10, 4, 21);
        let priors = Priors::default();
        let row: Vec<f64> = vec![0.3, -0.2, 0.5, 0.1];
        let beta = DMatrix::from_fn(2, 4, |_, c| row[c]);
        let g = GlobalParams::new(&[1.7], &[1.7], beta, -0.1).unwrap();
        let locals = local_update(&g, &data, &WeightVector::ones(5), &priors).unwrap();
        for gene in 0..5 {
            assert_relative_eq!(
                locals.zeta[(gene, 0)],
                locals.zeta[(gene, 1)],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn marginal_kl_matches_locals_at_optimum() {
        let data = toy_dataset(6, 12, 4, 31);
        let priors = Priors::default();
        let eta = random_eta(3, 4, 32);
        let w = WeightVector::new(DVector::from_vec(vec![1.0, 0.5, 2.0, 0.0, 1.3, 0.7])).unwrap();
        let m1 = marginal_kl(&eta, &w, &data, &priors).unwrap();
        let globals = unpack(&eta, 4).unwrap();
        let locals = local_update(&globals, &data, &w, &priors).unwrap();
        let m2 = kl_with_locals(&eta, &w, &data, &priors, &locals).unwrap();
        assert_relative_eq!(m1, m2, epsilon = 1e-10);
    }

    #[test]
    fn local_update_beats_random_perturbations() {
        let data = toy_dataset(5, 12, 4, 41);
        let priors = Priors::default();
        let eta = random_eta(3, 4, 42);
        let w = WeightVector::new(DVector::from_vec(vec![1.0, 2.0, 0.5, 1.0, 3.0])).unwrap();
        let globals = unpack(&eta, 4).unwrap();
        let locals = local_update(&globals, &data, &w, &priors).unwrap();
        let base = kl_with_locals(&eta, &w, &data, &priors, &locals).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for trial in 0..200 {
            let scale = 10f64.powf(-3.0 + 2.0 * (trial as f64 / 199.0));
            let mut pert = locals.clone();
            for g in 0..5 {
                let mut row: Vec<f64> = (0..3)
                    .map(|c| (pert.zeta[(g, c)].max(1e-300)).ln() + rng.gen_range(-1.0..1.0) * scale)
                    .collect();
                let lse = crate::scalar::log_sum_exp(&row);
                for (c, r) in row.iter_mut().enumerate() {
                    pert.zeta[(g, c)] = (*r - lse).exp();
                }
                for c in 0..3 {
                    pert.b_mean[(g, c)] += rng.gen_range(-1.0..1.0) * scale;
                    pert.b_var[(g, c)] *= (rng.gen_range(-1.0..1.0) * scale).exp();
                }
            }
            let v = kl_with_locals(&eta, &w, &data, &priors, &pert).unwrap();
            assert!(
                v + 1e-10 >= base,
                "perturbation at scale {scale} beat the closed form: {v} < {base}"
            );
        }
    }

    #[test]
    fn weighted_objective_equals_duplicated_dataset() {
        let data = toy_dataset(6, 12, 4, 51);
        let priors = Priors::default();
        let eta = random_eta(3, 4, 52);
        let dup = data.with_duplicated_gene(2).unwrap();
        let mut w = vec![1.0; 6];
        w[2] = 2.0;
        let w = WeightVector::new(DVector::from_vec(w)).unwrap();
        let lhs = marginal_kl(&eta, &w, &data, &priors).unwrap();
        let rhs = marginal_kl(&eta, &WeightVector::ones(7), &dup, &priors).unwrap();
        assert_relative_eq!(lhs, rhs, epsilon = 1e-10);
    }

    #[test]
    fn unweighted_equals_all_ones() {
        let data = toy_dataset(5, 10, 4, 61);
        let priors = Priors::default();
        let eta = random_eta(2, 4, 62);
        let a = marginal_kl(&eta, &WeightVector::ones(5), &data, &priors).unwrap();
        let w = WeightVector::new(DVector::from_element(5, 1.0)).unwrap();
        let b = marginal_kl(&eta, &w, &data, &priors).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gene_permutation_invariance() {
        let data = toy_dataset(6, 12, 4, 71);
        let priors = Priors::default();
        let eta = random_eta(3, 4, 72);
        let w_raw = [1.0, 0.3, 2.0, 0.0, 1.5, 0.9];
        let w = WeightVector::new(DVector::from_row_slice(&w_raw)).unwrap();
        let base = marginal_kl(&eta, &w, &data, &priors).unwrap();

        let perm = [3usize, 0, 5, 1, 4, 2];
        let y_perm = DMatrix::from_fn(6, data.n_obs(), |r, c| data.y()[(perm[r], c)]);
        let ids = perm.iter().map(|&g| data.gene_ids()[g].clone()).collect();
        let data_perm =
            Dataset::new(y_perm, data.grid().clone(), data.basis().clone(), ids).unwrap();
        let w_perm =
            WeightVector::new(DVector::from_iterator(6, perm.iter().map(|&g| w_raw[g]))).unwrap();
        let permuted = marginal_kl(&eta, &w_perm, &data_perm, &priors).unwrap();
        assert_relative_eq!(base, permuted, epsilon = 1e-10);
    }

    #[test]
    fn objective_linear_in_weights() {
        let data = toy_dataset(5, 10, 4, 81);
        let priors = Priors::default();
        let eta = random_eta(3, 4, 82);
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        for _ in 0..5 {
            let w1 = WeightVector::new(DVector::from_fn(5, |_, _| rng.gen_range(0.0..3.0))).unwrap();
            let w2 = WeightVector::new(DVector::from_fn(5, |_, _| rng.gen_range(0.0..3.0))).unwrap();
            let alpha = rng.gen_range(0.0..1.0);
            let mid = WeightVector::new(
                w1.as_vector() * alpha + w2.as_vector() * (1.0 - alpha),
            )
            .unwrap();
            let f1 = marginal_kl(&eta, &w1, &data, &priors).unwrap();
            let f2 = marginal_kl(&eta, &w2, &data, &priors).unwrap();
            let fm = marginal_kl(&eta, &mid, &data, &priors).unwrap();
            // Linear, hence also (weakly) concave along segments.
            assert_relative_eq!(fm, alpha * f1 + (1.0 - alpha) * f2, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_weight_detaches_gene() {
        // With a zero weight the gene's block no longer influences the
        // objective: it must equal the objective on the dataset with the
        // gene removed (weights all one).
        let data = toy_dataset(5, 10, 4, 91);
        let priors = Priors::default();
        let eta = random_eta(2, 4, 92);
        let mut w = vec![1.0; 5];
        w[3] = 0.0;
        let w = WeightVector::new(DVector::from_vec(w)).unwrap();
        let lhs = marginal_kl(&eta, &w, &data, &priors).unwrap();

        let keep: Vec<usize> = vec![0, 1, 2, 4];
        let y = DMatrix::from_fn(4, data.n_obs(), |r, c| data.y()[(keep[r], c)]);
        let ids = keep.iter().map(|&g| data.gene_ids()[g].clone()).collect();
        let reduced = Dataset::new(y, data.grid().clone(), data.basis().clone(), ids).unwrap();
        let rhs = marginal_kl(&eta, &WeightVector::ones(4), &reduced, &priors).unwrap();
        assert_relative_eq!(lhs, rhs, epsilon = 1e-10);
    }

    #[test]
    fn overflowing_log_tau_names_the_term() {
        let data = toy_dataset(3, 10, 4, 93);
        let priors = Priors::default();
        let mut v = random_eta(2, 4, 94).into_vector();
        let n = v.len();
        v[n - 1] = 800.0; // exp overflows
        let eta = FreeVector::new(v).unwrap();
        let err = marginal_kl(&eta, &WeightVector::ones(3), &data, &priors).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn zeta_rows_are_probability_vectors(seed in 0u64..1000) {
            let data = toy_dataset(4, 10, 4, seed);
            let priors = Priors::default();
            let eta = random_eta(3, 4, seed.wrapping_add(1));
            let zeta = cluster_probs(&eta, &data, &WeightVector::ones(4), &priors).unwrap();
            for g in 0..4 {
                let row_sum: f64 = zeta.row(g).sum();
                prop_assert!((row_sum - 1.0).abs() < 1e-12);
                prop_assert!(zeta.row(g).iter().all(|&z| (0.0..=1.0).contains(&z)));
            }
        }
    }
}
