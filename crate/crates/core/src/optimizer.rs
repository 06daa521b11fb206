//! Local minimization of the marginal KL objective.
//!
//! The driver runs BFGS for a capped number of iterations, then Newton
//! trust-region steps preconditioned by the Hessian at the BFGS terminal
//! point. The Hessian is refreshed on a fixed cadence or when progress
//! stalls, so most Newton iterations cost one gradient and two triangular
//! solves. `minimize` accepts any objective implementing value/grad/hess;
//! the KL problem is one such objective.

use crate::derivatives::{kl_grad, kl_hessian};
use crate::error::{Error, Result};
use crate::model::{
    marginal_kl, pack, Dataset, FreeVector, GlobalParams, Priors, WeightVector,
};
use crate::spline::ls_fit;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

const ARMIJO_C1: f64 = 1e-4;

/// Twice-differentiable objective consumed by [`minimize`].
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> Result<f64>;
    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    fn hessian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;
}

/// Iteration caps and tolerances for the two optimization stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Cap on BFGS iterations before the Newton stage.
    pub bfgs_iters: usize,
    /// Cap on Newton trust-region iterations.
    pub newton_iters: usize,
    /// Convergence tolerance on the gradient infinity norm.
    pub grad_tol: f64,
    /// Refresh the Newton preconditioner after this many iterations.
    pub precond_refresh: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            bfgs_iters: 300,
            newton_iters: 500,
            grad_tol: 1e-8,
            precond_refresh: 50,
        }
    }
}

/// Outcome of one `minimize` call.
#[derive(Clone, Debug)]
pub struct OptimOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub bfgs_iters: usize,
    pub newton_iters: usize,
    pub converged: bool,
    pub message: Option<String>,
}

/// Result of fitting the KL objective from one initialization.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub eta_star: FreeVector,
    pub kl_value: f64,
    pub grad_norm: f64,
    pub bfgs_iters: usize,
    pub newton_iters: usize,
    pub converged: bool,
    pub wall_time_seconds: f64,
    pub init_seed: u64,
}

/// The weighted KL objective bound to one dataset.
pub struct KlProblem<'a> {
    pub data: &'a Dataset,
    pub w: &'a WeightVector,
    pub priors: &'a Priors,
    pub k: usize,
}

impl Objective for KlProblem<'_> {
    fn dim(&self) -> usize {
        2 * (self.k - 1) + self.k * self.data.df() + 1
    }
    fn value(&self, x: &DVector<f64>) -> Result<f64> {
        marginal_kl(&FreeVector::new(x.clone())?, self.w, self.data, self.priors)
    }
    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        kl_grad(&FreeVector::new(x.clone())?, self.w, self.data, self.priors)
    }
    fn hessian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        kl_hessian(&FreeVector::new(x.clone())?, self.w, self.data, self.priors)
    }
}

fn cholesky_with_ridge(
    hess: &DMatrix<f64>,
    mut ridge: f64,
) -> Option<(Cholesky<f64, Dyn>, f64)> {
    let dim = hess.nrows();
    let scale = hess.diagonal().amax().max(1e-12);
    for _ in 0..80 {
        let shifted = if ridge == 0.0 {
            hess.clone()
        } else {
            let mut h = hess.clone();
            for i in 0..dim {
                h[(i, i)] += ridge;
            }
            h
        };
        if let Some(chol) = Cholesky::new(shifted) {
            return Some((chol, ridge));
        }
        // Indefinite: escalate the ridge; large ridges turn the step into a
        // scaled gradient direction.
        ridge = if ridge == 0.0 { 1e-10 * scale } else { ridge * 10.0 };
        if ridge > 1e12 * scale {
            return None;
        }
    }
    None
}

/// Armijo backtracking line search. Non-finite trial values backtrack like
/// insufficient decrease. Returns the accepted `(step, value)`.
fn line_search(
    obj: &dyn Objective,
    x: &DVector<f64>,
    d: &DVector<f64>,
    f0: f64,
    gd: f64,
    step0: f64,
) -> Option<(f64, f64)> {
    let mut step = step0;
    for _ in 0..60 {
        let trial = x + d * step;
        match obj.value(&trial) {
            Ok(ft) if ft.is_finite() && ft <= f0 + ARMIJO_C1 * step * gd => {
                return Some((step, ft));
            }
            _ => step *= 0.5,
        }
    }
    None
}

/// Two-stage local minimization; see the module docs.
pub fn minimize(obj: &dyn Objective, x0: &DVector<f64>, schedule: &Schedule) -> Result<OptimOutcome> {
    let dim = obj.dim();
    if x0.len() != dim {
        return Err(Error::InvalidInput(format!(
            "initial point dimension {} does not match objective {dim}",
            x0.len()
        )));
    }
    let mut x = x0.clone();
    let mut f = obj.value(&x)?;
    if !f.is_finite() {
        return Err(Error::NonFinite {
            term: "objective at initial point".into(),
        });
    }
    let mut g = obj.gradient(&x)?;
    let mut message = None;

    // Stage 1: BFGS on the inverse Hessian approximation.
    let mut h_inv = DMatrix::identity(dim, dim);
    let mut bfgs_iters = 0;
    let mut first = true;
    for _ in 0..schedule.bfgs_iters {
        if g.amax() <= schedule.grad_tol {
            break;
        }
        let mut d = -(&h_inv * &g);
        let mut gd = g.dot(&d);
        if gd >= 0.0 {
            h_inv = DMatrix::identity(dim, dim);
            d = -g.clone();
            gd = g.dot(&d);
        }
        let step0 = if first { (1.0 / g.amax()).min(1.0) } else { 1.0 };
        let Some((step, ft)) = line_search(obj, &x, &d, f, gd, step0) else {
            message = Some("bfgs line search stalled".into());
            break;
        };
        let s = &d * step;
        let x_new = &x + &s;
        let g_new = obj.gradient(&x_new)?;
        let y = &g_new - &g;
        let ys = y.dot(&s);
        if ys > 1e-10 * y.norm() * s.norm() {
            if first {
                let scale = ys / y.dot(&y);
                h_inv *= scale;
            }
            let rho = 1.0 / ys;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s y'H + Hy s') + rho^2 y'Hy s s' + rho s s'
            h_inv.ger(-rho, &s, &hy, 1.0);
            h_inv.ger(-rho, &hy, &s, 1.0);
            h_inv.ger(rho * rho * yhy + rho, &s, &s, 1.0);
        }
        x = x_new;
        f = ft;
        g = g_new;
        bfgs_iters += 1;
        first = false;
    }

    // Stage 2: Newton trust region, preconditioned by the Hessian at the
    // BFGS terminal point.
    let mut newton_iters = 0;
    let mut converged = g.amax() <= schedule.grad_tol;
    if !converged {
        let mut hess = obj.hessian(&x)?;
        let mut factored = cholesky_with_ridge(&hess, 0.0);
        let mut since_refresh = 0;
        let mut stall = 0;
        'newton: while newton_iters < schedule.newton_iters {
            if g.amax() <= schedule.grad_tol {
                converged = true;
                break;
            }
            if factored.is_none() {
                message = Some("hessian factorization failed".into());
                break;
            }
            if since_refresh >= schedule.precond_refresh || stall >= 3 {
                hess = obj.hessian(&x)?;
                factored = cholesky_with_ridge(&hess, 0.0);
                since_refresh = 0;
                stall = 0;
                if factored.is_none() {
                    message = Some("hessian factorization failed after refresh".into());
                    break;
                }
            }
            let (chol, mut ridge) = factored.take().unwrap();
            let mut d = -chol.solve(&g);
            let mut gd = g.dot(&d);
            let mut chol_current = chol;
            let mut accepted = None;
            // Near the optimum the predicted decrease drops below the
            // floating-point noise of the objective; a step that halves the
            // gradient norm without measurably raising the value still
            // counts as progress.
            let noise_floor = 1e-12 * (1.0 + f.abs());
            for _ in 0..40 {
                let trial = &x + &d;
                match obj.value(&trial) {
                    Ok(ft) if ft.is_finite() && ft <= f + ARMIJO_C1 * gd => {
                        accepted = Some((trial, ft));
                        break;
                    }
                    Ok(ft)
                        if ft.is_finite()
                            && ft <= f + noise_floor
                            && gd.abs() <= noise_floor
                            && obj
                                .gradient(&trial)
                                .map(|gt| gt.amax() <= 0.5 * g.amax())
                                .unwrap_or(false) =>
                    {
                        accepted = Some((trial, ft));
                        break;
                    }
                    _ => {
                        // Shrink the trust region by damping the system.
                        let scale = hess.diagonal().amax().max(1e-12);
                        ridge = if ridge == 0.0 { 1e-8 * scale } else { ridge * 10.0 };
                        match cholesky_with_ridge(&hess, ridge) {
                            Some((c, r)) => {
                                ridge = r;
                                d = -c.solve(&g);
                                gd = g.dot(&d);
                                chol_current = c;
                            }
                            None => {
                                message = Some("trust region damping failed".into());
                                break 'newton;
                            }
                        }
                    }
                }
            }
            let Some((x_new, ft)) = accepted else {
                message = Some("newton step rejected at maximal damping".into());
                break;
            };
            let g_new = obj.gradient(&x_new)?;
            if g_new.amax() > 0.7 * g.amax() {
                stall += 1;
            } else {
                stall = 0;
            }
            x = x_new;
            f = ft;
            g = g_new;
            newton_iters += 1;
            since_refresh += 1;
            // Relax the damping so clean Newton steps return quickly.
            if ridge > 0.0 {
                ridge *= 0.25;
                if ridge < 1e-14 * hess.diagonal().amax().max(1e-12) {
                    ridge = 0.0;
                }
                factored = cholesky_with_ridge(&hess, ridge);
            } else {
                factored = Some((chol_current, 0.0));
            }
        }
        converged = converged || g.amax() <= schedule.grad_tol;
    }

    Ok(OptimOutcome {
        grad_norm: g.amax(),
        x,
        value: f,
        bfgs_iters,
        newton_iters,
        converged,
        message,
    })
}

/// Deterministic stream seed for worker `idx` under one master seed.
pub fn derive_seed(master: u64, idx: u64) -> u64 {
    let mut z = master ^ idx.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Lloyd K-means; returns (centroids, assignment, inertia).
fn kmeans_once(
    points: &DMatrix<f64>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> (DMatrix<f64>, Vec<usize>, f64) {
    let (n, d) = points.shape();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut centroids = DMatrix::zeros(k, d);
    for c in 0..k {
        centroids.row_mut(c).copy_from(&points.row(order[c]));
    }
    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0f64; n];
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dd = (points.row(i) - centroids.row(c)).norm_squared();
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            dist[i] = best_d;
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        // Empty clusters take the point farthest from its centroid.
        for c in 0..k {
            if !assign.contains(&c) {
                let far = (0..n)
                    .max_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap())
                    .unwrap();
                assign[far] = c;
                dist[far] = 0.0;
                changed = true;
            }
        }
        for c in 0..k {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = DVector::zeros(d);
            for &i in &members {
                mean += points.row(i).transpose();
            }
            mean /= members.len() as f64;
            centroids.row_mut(c).copy_from(&mean.transpose());
        }
        if !changed {
            break;
        }
    }
    let inertia: f64 = (0..n)
        .map(|i| (points.row(i) - centroids.row(assign[i])).norm_squared())
        .sum();
    (centroids, assign, inertia)
}

/// K-means initialization of the global parameters.
///
/// Per-gene least-squares coefficients are clustered (ten internal reseeds,
/// best inertia kept); centroids initialize the coefficient rows, sticks
/// start at `(1, alpha)`, and the precision starts from the pooled residual
/// variance of the per-gene fits.
pub fn kmeans_init(data: &Dataset, k: usize, priors: &Priors, seed: u64) -> Result<GlobalParams> {
    if k < 1 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if k > data.n_genes() {
        return Err(Error::InvalidInput(format!(
            "k = {k} exceeds the number of genes {}",
            data.n_genes()
        )));
    }
    let (n_g, df) = (data.n_genes(), data.df());
    let mut coefs = DMatrix::zeros(n_g, df);
    let mut total_ss = 0.0;
    for g in 0..n_g {
        let y = data.y().row(g).transpose();
        let (coef, offset) = ls_fit(data.basis(), &y)?;
        let resid = &y - &data.basis().x * &coef - DVector::from_element(data.n_obs(), offset);
        total_ss += resid.norm_squared();
        coefs.row_mut(g).copy_from(&coef.transpose());
    }
    let sigma2 = (total_ss / (n_g * data.n_obs()) as f64).max(1e-12);
    let log_tau = -sigma2.ln();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(DMatrix<f64>, f64)> = None;
    for _ in 0..10 {
        let (centroids, _, inertia) = kmeans_once(&coefs, k, &mut rng);
        if best.as_ref().map_or(true, |(_, b)| inertia < *b) {
            best = Some((centroids, inertia));
        }
    }
    let beta = best.unwrap().0;
    let sticks_a = vec![1.0; k - 1];
    let sticks_b = vec![priors.alpha; k - 1];
    GlobalParams::new(&sticks_a, &sticks_b, beta, log_tau)
}

/// Optimize the KL objective from an explicit starting point.
pub fn optimize(
    eta0: &FreeVector,
    w: &WeightVector,
    data: &Dataset,
    priors: &Priors,
    schedule: &Schedule,
) -> Result<FitResult> {
    let k = crate::model::infer_k(eta0.len(), data.df())?;
    let problem = KlProblem {
        data,
        w,
        priors,
        k,
    };
    let start = Instant::now();
    let out = minimize(&problem, eta0.as_vector(), schedule)?;
    Ok(FitResult {
        eta_star: FreeVector::new(out.x)?,
        kl_value: out.value,
        grad_norm: out.grad_norm,
        bfgs_iters: out.bfgs_iters,
        newton_iters: out.newton_iters,
        converged: out.converged,
        wall_time_seconds: start.elapsed().as_secs_f64().max(1e-9),
        init_seed: 0,
    })
}

/// One K-means-initialized fit.
pub fn fit_from_seed(
    data: &Dataset,
    w: &WeightVector,
    priors: &Priors,
    k: usize,
    seed: u64,
    schedule: &Schedule,
) -> Result<FitResult> {
    let start = Instant::now();
    let init = kmeans_init(data, k, priors, seed)?;
    let mut fit = optimize(&pack(&init), w, data, priors, schedule)?;
    fit.init_seed = seed;
    fit.wall_time_seconds = start.elapsed().as_secs_f64().max(1e-9);
    Ok(fit)
}

/// Best converged fit over `n_restarts` K-means seeds; ties broken by the
/// lowest seed. Restarts run on the ambient rayon pool when `parallel`.
pub fn multi_restart(
    data: &Dataset,
    w: &WeightVector,
    priors: &Priors,
    k: usize,
    n_restarts: usize,
    master_seed: u64,
    schedule: &Schedule,
    parallel: bool,
) -> Result<FitResult> {
    if n_restarts < 1 {
        return Err(Error::InvalidInput("n_restarts must be at least 1".into()));
    }
    let run = |r: usize| {
        let seed = derive_seed(master_seed, r as u64);
        fit_from_seed(data, w, priors, k, seed, schedule)
    };
    let results: Vec<Result<FitResult>> = if parallel {
        use rayon::prelude::*;
        (0..n_restarts).into_par_iter().map(run).collect()
    } else {
        (0..n_restarts).map(run).collect()
    };
    let mut best: Option<FitResult> = None;
    let mut diagnostics = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(fit) if fit.converged => {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        fit.kl_value < b.kl_value
                            || (fit.kl_value == b.kl_value && fit.init_seed < b.init_seed)
                    }
                };
                if better {
                    best = Some(fit);
                }
            }
            Ok(fit) => diagnostics.push(format!(
                "restart {r} (seed {}): not converged, grad_norm {:.3e}",
                fit.init_seed, fit.grad_norm
            )),
            Err(e) => diagnostics.push(format!("restart {r}: {e}")),
        }
    }
    best.ok_or_else(|| {
        Error::OptimizationFailed(format!(
            "all {n_restarts} restarts failed: [{}]",
            diagnostics.join("; ")
        ))
    })
}
