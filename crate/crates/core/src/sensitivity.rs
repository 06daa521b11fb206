//! Weight-sensitivity matrix and the linear bootstrap.
//!
//! At a strict local minimum of the weighted KL, the optimal parameters
//! respond to weight perturbations with Jacobian `S = -H^{-1} C`, where `H`
//! is the Hessian in the free parameters and `C` the mixed second derivative
//! in parameters and weights. One symmetric positive-definite factorization
//! and `n_g` solves produce `S`; afterwards each bootstrap draw costs a
//! single matrix-vector product.

use crate::derivatives::DerivativeBundle;
use crate::error::{Error, Result};
use crate::model::{cluster_probs, Dataset, FreeVector, Priors, WeightVector};
use nalgebra::{DMatrix, DVector};

/// Jacobian of the optimum with respect to the weights at the all-ones
/// point, with the base optimum it was computed at.
#[derive(Clone, Debug)]
pub struct SensitivityMatrix {
    s: DMatrix<f64>,
    eta_star: FreeVector,
    /// Relative residual of `H S = -C` achieved by the factorization.
    residual: f64,
}

impl SensitivityMatrix {
    /// Solve `H S = -C` from a derivative bundle evaluated at the base
    /// optimum under all-ones weights.
    ///
    /// Fails with a "not a strict local minimum" error when `H` has no
    /// Cholesky factorization, which signals an unconverged or saddle base
    /// fit.
    pub fn compute(bundle: &DerivativeBundle, eta_star: &FreeVector) -> Result<Self> {
        let dim = eta_star.len();
        if bundle.hess.shape() != (dim, dim) || bundle.cross.nrows() != dim {
            return Err(Error::InvalidInput(
                "derivative bundle shape does not match the free vector".into(),
            ));
        }
        let chol = nalgebra::Cholesky::new(bundle.hess.clone()).ok_or_else(|| {
            Error::NotStrictLocalMinimum(
                "the KL Hessian at the base fit is not positive definite".into(),
            )
        })?;
        let s = -chol.solve(&bundle.cross);
        // H S + C should vanish up to factorization error.
        let resid_num = (&bundle.hess * &s + &bundle.cross).norm();
        let resid_den = bundle.hess.norm() * s.norm() + bundle.cross.norm();
        let residual = if resid_den > 0.0 {
            resid_num / resid_den
        } else {
            0.0
        };
        if residual > 1e-8 {
            return Err(Error::NotStrictLocalMinimum(format!(
                "sensitivity solve residual {residual:.3e} exceeds 1e-8; \
                 the Hessian is numerically singular"
            )));
        }
        Ok(SensitivityMatrix {
            s,
            eta_star: eta_star.clone(),
            residual,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn eta_star(&self) -> &FreeVector {
        &self.eta_star
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn n_genes(&self) -> usize {
        self.s.ncols()
    }

    /// Rebuild from stored parts (archive loading); re-checks shapes only.
    pub fn from_parts(s: DMatrix<f64>, eta_star: FreeVector, residual: f64) -> Result<Self> {
        if s.nrows() != eta_star.len() {
            return Err(Error::InvalidInput(
                "sensitivity matrix rows do not match the free vector".into(),
            ));
        }
        Ok(SensitivityMatrix {
            s,
            eta_star,
            residual,
        })
    }

    /// First-order prediction of the optimum at weights `w`:
    /// `eta* + S (w - 1)`.
    pub fn eta_lin(&self, w: &WeightVector) -> Result<FreeVector> {
        if w.len() != self.n_genes() {
            return Err(Error::InvalidInput(format!(
                "weight length {} does not match {} genes",
                w.len(),
                self.n_genes()
            )));
        }
        let delta = w.as_vector() - DVector::from_element(w.len(), 1.0);
        FreeVector::new(self.eta_star.as_vector() + &self.s * delta)
    }
}

/// Cluster responsibilities at the linearized parameters and replicate
/// weights. Rows are softmax-normalized, so the output is a valid
/// responsibility matrix however far the linearization strays.
pub fn predict_clustering(
    eta_lin: &FreeVector,
    data: &Dataset,
    w: &WeightVector,
    priors: &Priors,
) -> Result<DMatrix<f64>> {
    cluster_probs(eta_lin, data, w, priors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{pack, unpack};
    use crate::scalar::{Dual, Dual2, Real};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Weighted quadratic with a closed-form optimum and sensitivity:
    /// `KL(eta, W) = sum_g w_g (eta - y_g)^2 / 2` gives
    /// `eta*(W) = sum w_g y_g / sum w_g` and, at the all-ones point,
    /// `S_g = (y_g - eta*) / n_g`. Written generically so the same dual
    /// machinery under test produces H and C.
    fn toy_objective<T: Real>(eta: T, w: &[T], ys: &[f64]) -> T {
        let mut total = T::zero();
        for (g, &y) in ys.iter().enumerate() {
            let d = eta.shift(-y);
            total = total + w[g] * d * d.scale(0.5);
        }
        total
    }

    #[test]
    fn analytic_quadratic_sensitivity() {
        let ys = [0.4, -1.3, 2.2, 0.9, -0.5];
        let n = ys.len();
        let eta_star: f64 = ys.iter().sum::<f64>() / n as f64;

        // H and C from nested duals over the generic toy objective.
        let mut hess = DMatrix::zeros(1, 1);
        let w2: Vec<Dual2> = vec![Dual2::constant(1.0); n];
        let e2 = Dual2::seeded2(eta_star, 1.0, 1.0);
        hess[(0, 0)] = toy_objective(e2, &w2, &ys).second();
        let mut cross = DMatrix::zeros(1, n);
        for g in 0..n {
            let mut wg: Vec<Dual2> = vec![Dual2::constant(1.0); n];
            wg[g].re.dx = 1.0;
            let e = Dual2::seeded2(eta_star, 1.0, 0.0);
            cross[(0, g)] = toy_objective(e, &wg, &ys).second();
        }
        let bundle = DerivativeBundle {
            grad: DVector::zeros(1),
            hess,
            cross,
        };
        let eta = FreeVector::new(DVector::from_vec(vec![eta_star])).unwrap();
        let sens = SensitivityMatrix::compute(&bundle, &eta).unwrap();
        for g in 0..n {
            let expect = (ys[g] - eta_star) / n as f64;
            assert_relative_eq!(sens.matrix()[(0, g)], expect, epsilon = 1e-12);
        }
        // eta_lin reproduces the exact optimum of this linear-response toy.
        let mut w = vec![1.0; n];
        w[2] = 1.7;
        let wv = WeightVector::new(DVector::from_vec(w.clone())).unwrap();
        let lin = sens.eta_lin(&wv).unwrap();
        let direct: f64 = toy_argmin(&w, &ys);
        // First-order agreement only; check the Taylor direction.
        let fd = {
            let mut wp = vec![1.0; n];
            wp[2] = 1.0 + 1e-6;
            (toy_argmin(&wp, &ys) - eta_star) / 1e-6
        };
        assert_relative_eq!(sens.matrix()[(0, 2)], fd, max_relative = 1e-5);
        assert!((lin.as_slice()[0] - direct).abs() < 0.7 * (1.7f64 - 1.0).powi(2));
    }

    fn toy_argmin(w: &[f64], ys: &[f64]) -> f64 {
        let num: f64 = w.iter().zip(ys).map(|(wi, yi)| wi * yi).sum();
        let den: f64 = w.iter().sum();
        num / den
    }

    #[test]
    fn non_positive_definite_hessian_rejected() {
        let bundle = DerivativeBundle {
            grad: DVector::zeros(2),
            hess: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]),
            cross: DMatrix::zeros(2, 3),
        };
        let eta = FreeVector::new(DVector::zeros(2)).unwrap();
        let err = SensitivityMatrix::compute(&bundle, &eta).unwrap_err();
        assert!(matches!(err, Error::NotStrictLocalMinimum(_)), "{err}");
        assert!(err.to_string().contains("not a strict local minimum"));
    }

    fn fitted_instance() -> (Dataset, Priors, crate::optimizer::FitResult) {
        let data = crate::model::tests::toy_dataset(10, 12, 4, 200);
        let priors = Priors::default();
        let schedule = crate::optimizer::Schedule {
            bfgs_iters: 80,
            ..Default::default()
        };
        let fit = crate::optimizer::multi_restart(
            &data,
            &WeightVector::ones(10),
            &priors,
            3,
            3,
            77,
            &schedule,
            false,
        )
        .unwrap();
        (data, priors, fit)
    }

    #[test]
    fn sensitivity_residual_within_bound() {
        let (data, priors, fit) = fitted_instance();
        let w1 = WeightVector::ones(10);
        let bundle = DerivativeBundle::evaluate(&fit.eta_star, &w1, &data, &priors).unwrap();
        let sens = SensitivityMatrix::compute(&bundle, &fit.eta_star).unwrap();
        assert!(sens.residual() <= 1e-8);
        // w = 1 returns eta* exactly; a unit bump extracts a column.
        let lin = sens.eta_lin(&w1).unwrap();
        assert_eq!(lin.as_slice(), fit.eta_star.as_slice());
        let mut w = DVector::from_element(10, 1.0);
        let eps = 0.35;
        w[4] += eps;
        let lin = sens.eta_lin(&WeightVector::new(w).unwrap()).unwrap();
        for i in 0..fit.eta_star.len() {
            assert_relative_eq!(
                lin.as_slice()[i],
                fit.eta_star.as_slice()[i] + eps * sens.matrix()[(i, 4)],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn duplicated_genes_share_sensitivity_columns() {
        let (data, priors, fit) = fitted_instance();
        let dup = data.with_duplicated_gene(3).unwrap();
        // Refit not needed: evaluate the bundle at the same eta with the
        // duplicated gene at weight zero on one copy... simpler: evaluate at
        // all-ones on the duplicated dataset; duplicated genes get identical
        // columns by exchangeability.
        let w = WeightVector::ones(11);
        let bundle = DerivativeBundle::evaluate(&fit.eta_star, &w, &dup, &priors).unwrap();
        for i in 0..fit.eta_star.len() {
            assert_relative_eq!(
                bundle.cross[(i, 3)],
                bundle.cross[(i, 10)],
                epsilon = 1e-13
            );
        }
    }

    #[test]
    fn eta_lin_matches_warm_refits_to_first_order() {
        // Taylor-remainder check: halving the perturbation shrinks the
        // linearization error superlinearly.
        let (data, priors, fit) = fitted_instance();
        let w1 = WeightVector::ones(10);
        let bundle = DerivativeBundle::evaluate(&fit.eta_star, &w1, &data, &priors).unwrap();
        let sens = SensitivityMatrix::compute(&bundle, &fit.eta_star).unwrap();
        let tight = crate::optimizer::Schedule {
            bfgs_iters: 0,
            grad_tol: 1e-11,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dir = DVector::from_fn(10, |_, _| rng.gen_range(-1.0f64..1.0));
        let mut errs = Vec::new();
        for &eps in &[0.2, 0.1, 0.05] {
            let w = WeightVector::new(DVector::from_fn(10, |g, _| 1.0 + eps * dir[g])).unwrap();
            let refit = crate::optimizer::optimize(&fit.eta_star, &w, &data, &priors, &tight)
                .unwrap();
            assert!(refit.converged);
            let lin = sens.eta_lin(&w).unwrap();
            errs.push((lin.as_vector() - refit.eta_star.as_vector()).norm());
        }
        // Superlinear decay: quartering when eps halves, with slack.
        assert!(
            errs[1] <= 0.35 * errs[0] && errs[2] <= 0.35 * errs[1],
            "linearization errors {errs:?} do not decay quadratically"
        );
    }

    #[test]
    fn eta_lin_is_affine() {
        let (data, priors, fit) = fitted_instance();
        let w1 = WeightVector::ones(10);
        let bundle = DerivativeBundle::evaluate(&fit.eta_star, &w1, &data, &priors).unwrap();
        let sens = SensitivityMatrix::compute(&bundle, &fit.eta_star).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let wa = DVector::from_fn(10, |_, _| rng.gen_range(0.0f64..2.5));
        let wb = DVector::from_fn(10, |_, _| rng.gen_range(0.0f64..2.5));
        let alpha = 0.37;
        let la = sens.eta_lin(&WeightVector::new(wa.clone()).unwrap()).unwrap();
        let lb = sens.eta_lin(&WeightVector::new(wb.clone()).unwrap()).unwrap();
        let lmid = sens
            .eta_lin(&WeightVector::new(&wa * alpha + &wb * (1.0 - alpha)).unwrap())
            .unwrap();
        for i in 0..fit.eta_star.len() {
            assert_relative_eq!(
                lmid.as_slice()[i],
                alpha * la.as_slice()[i] + (1.0 - alpha) * lb.as_slice()[i],
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn predicted_clusterings_are_row_stochastic_far_from_base() {
        let (data, priors, fit) = fitted_instance();
        let w1 = WeightVector::ones(10);
        let bundle = DerivativeBundle::evaluate(&fit.eta_star, &w1, &data, &priors).unwrap();
        let sens = SensitivityMatrix::compute(&bundle, &fit.eta_star).unwrap();
        // Extreme weights, far outside the trust region.
        let w = WeightVector::new(DVector::from_fn(10, |g, _| if g % 2 == 0 { 5.0 } else { 0.0 }))
            .unwrap();
        let lin = sens.eta_lin(&w).unwrap();
        let zeta = predict_clustering(&lin, &data, &w, &priors).unwrap();
        for g in 0..10 {
            assert_relative_eq!(zeta.row(g).sum(), 1.0, epsilon = 1e-12);
        }
        // At the all-ones weights the prediction is the base clustering.
        let zeta_base = cluster_probs(&fit.eta_star, &data, &w1, &priors).unwrap();
        let lin_base = sens.eta_lin(&w1).unwrap();
        let zeta_lin = predict_clustering(&lin_base, &data, &w1, &priors).unwrap();
        assert_relative_eq!((zeta_base - zeta_lin).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn round_trip_through_parts() {
        let (_, _, fit) = fitted_instance();
        let s = DMatrix::from_fn(fit.eta_star.len(), 10, |i, j| (i * 10 + j) as f64 * 0.01);
        let sens = SensitivityMatrix::from_parts(s.clone(), fit.eta_star.clone(), 1e-12).unwrap();
        assert_eq!(sens.matrix(), &s);
        // unpack/pack stability of the stored optimum.
        let g = unpack(&fit.eta_star, 4).unwrap();
        assert_eq!(pack(&g).as_slice(), fit.eta_star.as_slice());
    }

    #[test]
    fn toy_dual_first_derivative_sanity() {
        // The toy objective exercised with first-order duals: gradient in
        // eta equals sum w_g (eta - y_g).
        let ys = [1.0, -2.0, 0.3];
        let w: Vec<Dual<f64>> = vec![
            Dual::constant(1.0),
            Dual::constant(0.5),
            Dual::constant(2.0),
        ];
        let eta = Dual::seeded(0.7);
        let out = toy_objective(eta, &w, &ys);
        let expect: f64 = [1.0, 0.5, 2.0]
            .iter()
            .zip(&ys)
            .map(|(wi, yi)| wi * (0.7 - yi))
            .sum();
        assert_relative_eq!(out.dx, expect, epsilon = 1e-14);
    }
}
