//! Slip learning with Bayesian linear regression.
//!
//! Each slip dimension is regressed on its own dynamics-aware features with
//! no intercept:
//!
//! | dimension    | features                  |
//! |--------------|---------------------------|
//! | longitudinal | `[f_x]`                   |
//! | lateral      | `[ψ]`, `ψ = f_x f_ω`      |
//! | angular      | `[ψ, f_x, f_ω]`           |
//!
//! The weights `γ` and noise variance `σ²` have a Normal-Inverse-Gamma
//! posterior `NIG(γ, K, a, b)`:
//!
//! ```text
//! K = (K0⁻¹ + XᵀX)⁻¹
//! γ = K (K0⁻¹ γ0 + Xᵀg)
//! a = a0 + n / 2
//! b = b0 + ½ (γ0ᵀ K0⁻¹ γ0 + gᵀg − γᵀ K⁻¹ γ)
//! ```
//!
//! and predictions at test features `X̃` are Student-t with mean `X̃γ`,
//! scale matrix `(b/a)(I + X̃ K X̃ᵀ)` and `2a` degrees of freedom.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    diff_drive_body_velocity, BodyVelocity, RobotGeometry, SlipVelocity, WheelSpeeds,
};

/// Smallest accepted ratio between the extreme eigenvalues of `XᵀX`.
pub const MIN_RECIPROCAL_CONDITION: f64 = 1e-12;

/// Default prior scale: large enough that the posterior mean is the
/// least-squares solution to six digits.
pub const DEFAULT_PHI: f64 = 1e6;

/// Tag written to model files for the feature set above.
pub const BASIS_TAG: &str = "slip-basis-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlipDimension {
    Longitudinal,
    Lateral,
    Angular,
}

impl SlipDimension {
    pub const ALL: [SlipDimension; 3] = [
        SlipDimension::Longitudinal,
        SlipDimension::Lateral,
        SlipDimension::Angular,
    ];

    /// Number of features.
    pub fn arity(self) -> usize {
        match self {
            SlipDimension::Longitudinal | SlipDimension::Lateral => 1,
            SlipDimension::Angular => 3,
        }
    }

    pub fn index(self) -> usize {
        match self {
            SlipDimension::Longitudinal => 0,
            SlipDimension::Lateral => 1,
            SlipDimension::Angular => 2,
        }
    }
}

/// Features of one commanded body velocity for one slip dimension.
pub fn slip_features(dim: SlipDimension, f: &BodyVelocity) -> Vec<f64> {
    let psi = f.vx_m_s * f.omega_rad_s;
    match dim {
        SlipDimension::Longitudinal => vec![f.vx_m_s],
        SlipDimension::Lateral => vec![psi],
        SlipDimension::Angular => vec![psi, f.vx_m_s, f.omega_rad_s],
    }
}

/// Stacks the features of many body velocities into an `n × k` design matrix.
pub fn design_matrix(dim: SlipDimension, velocities: &[BodyVelocity]) -> DMatrix<f64> {
    let k = dim.arity();
    let mut x = DMatrix::zeros(velocities.len(), k);
    for (i, f) in velocities.iter().enumerate() {
        for (j, v) in slip_features(dim, f).into_iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    x
}

/// Prior `NIG(γ0, K0, a0, b0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NigPrior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub shape: f64,
    pub scale: f64,
}

fn check_excitation(gram: &DMatrix<f64>) -> Result<()> {
    if gram.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite regressors".into()));
    }
    let eig = SymmetricEigen::new(gram.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || !(min > max * MIN_RECIPROCAL_CONDITION) {
        return Err(Error::InsufficientExcitation(format!(
            "gram matrix eigenvalues span [{min:e}, {max:e}]"
        )));
    }
    Ok(())
}

fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Cholesky::new(m.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| Error::InsufficientExcitation(format!("{what} is not positive definite")))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m = (&*m + t) * 0.5;
}

/// `a0 = b0 = 0`, `γ0 = 0` and `K0 = φ (XᵀX)⁻¹` for the design `x`.
pub fn uninformative_prior(k: usize, x: &DMatrix<f64>, phi: f64) -> Result<NigPrior> {
    if x.ncols() != k {
        return Err(Error::LengthMismatch {
            expected: k,
            actual: x.ncols(),
        });
    }
    if !(phi > 0.0 && phi.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "phi must be positive, got {phi}"
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::InsufficientExcitation("empty design matrix".into()));
    }
    let gram = x.transpose() * x;
    check_excitation(&gram)?;
    let mut covariance = spd_inverse(&gram, "XᵀX")? * phi;
    symmetrize(&mut covariance);
    Ok(NigPrior {
        mean: DVector::zeros(k),
        covariance,
        shape: 0.0,
        scale: 0.0,
    })
}

/// Normal-Inverse-Gamma posterior of one slip dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct NigPosterior {
    pub weights: DVector<f64>,
    pub scatter: DMatrix<f64>,
    pub shape: f64,
    pub scale: f64,
    pub obs_count: usize,
}

impl NigPosterior {
    pub fn arity(&self) -> usize {
        self.weights.len()
    }

    /// Posterior used as the prior of a later batch.
    pub fn as_prior(&self) -> NigPrior {
        NigPrior {
            mean: self.weights.clone(),
            covariance: self.scatter.clone(),
            shape: self.shape,
            scale: self.scale,
        }
    }

    /// Expected noise variance `b / (a − 1)`, defined for `a > 1`.
    pub fn noise_variance(&self) -> Option<f64> {
        (self.shape > 1.0).then(|| self.scale / (self.shape - 1.0))
    }

    /// Marginal posterior standard deviation of each weight (`a > 1`).
    pub fn weight_std(&self) -> Option<DVector<f64>> {
        let var = self.noise_variance()?;
        Some(self.scatter.diagonal().map(|d| (var * d).sqrt()))
    }
}

/// Conjugate update of `prior` with the batch `(x, g)`.
pub fn blr_fit(prior: &NigPrior, x: &DMatrix<f64>, g: &DVector<f64>) -> Result<NigPosterior> {
    blr_fit_counted(prior, x, g, 0)
}

fn blr_fit_counted(
    prior: &NigPrior,
    x: &DMatrix<f64>,
    g: &DVector<f64>,
    prior_count: usize,
) -> Result<NigPosterior> {
    let k = prior.mean.len();
    if x.ncols() != k {
        return Err(Error::LengthMismatch {
            expected: k,
            actual: x.ncols(),
        });
    }
    if x.nrows() != g.len() {
        return Err(Error::LengthMismatch {
            expected: x.nrows(),
            actual: g.len(),
        });
    }
    let prior_precision = spd_inverse(&prior.covariance, "prior covariance")?;
    let xt = x.transpose();
    let mut precision = &prior_precision + &xt * x;
    symmetrize(&mut precision);
    let chol = Cholesky::new(precision.clone()).ok_or_else(|| {
        Error::InsufficientExcitation("posterior precision is not positive definite".into())
    })?;
    let rhs = &prior_precision * &prior.mean + &xt * g;
    let weights = chol.solve(&rhs);
    let mut scatter = chol.inverse();
    symmetrize(&mut scatter);

    let n = x.nrows();
    let prior_term = prior.mean.dot(&(&prior_precision * &prior.mean));
    let fit_term = weights.dot(&(&precision * &weights));
    let scale = prior.scale + 0.5 * (prior_term + g.dot(g) - fit_term);
    Ok(NigPosterior {
        weights,
        scatter,
        shape: prior.shape + n as f64 / 2.0,
        scale,
        obs_count: prior_count + n,
    })
}

/// Sequential update: the current posterior acts as the prior of the new batch.
pub fn blr_update(
    post: &NigPosterior,
    x_new: &DMatrix<f64>,
    g_new: &DVector<f64>,
) -> Result<NigPosterior> {
    if x_new.nrows() == 0 {
        if x_new.ncols() != post.arity() && x_new.ncols() != 0 {
            return Err(Error::LengthMismatch {
                expected: post.arity(),
                actual: x_new.ncols(),
            });
        }
        return Ok(post.clone());
    }
    blr_fit_counted(&post.as_prior(), x_new, g_new, post.obs_count)
}

/// Multivariate Student-t predictive distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentTPrediction {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub dof: f64,
}

pub fn blr_predict(post: &NigPosterior, x_test: &DMatrix<f64>) -> Result<StudentTPrediction> {
    if !(post.shape > 0.0) {
        return Err(Error::Untrained("posterior shape is zero".into()));
    }
    if x_test.ncols() != post.arity() {
        return Err(Error::LengthMismatch {
            expected: post.arity(),
            actual: x_test.ncols(),
        });
    }
    let m = x_test.nrows();
    let mean = x_test * &post.weights;
    let mut covariance = (DMatrix::identity(m, m) + x_test * &post.scatter * x_test.transpose())
        * (post.scale / post.shape);
    symmetrize(&mut covariance);
    Ok(StudentTPrediction {
        mean,
        covariance,
        dof: 2.0 * post.shape,
    })
}

/// Trained slip posteriors for the three body dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct SlipModel {
    pub longitudinal: NigPosterior,
    pub lateral: NigPosterior,
    pub angular: NigPosterior,
    pub basis: String,
    pub phi: f64,
}

impl SlipModel {
    pub fn posterior(&self, dim: SlipDimension) -> &NigPosterior {
        match dim {
            SlipDimension::Longitudinal => &self.longitudinal,
            SlipDimension::Lateral => &self.lateral,
            SlipDimension::Angular => &self.angular,
        }
    }

    /// Fits each dimension with an uninformative prior seeded by its own
    /// design matrix.
    pub fn fit(designs: [&DMatrix<f64>; 3], targets: [&DVector<f64>; 3], phi: f64) -> Result<Self> {
        let mut posts = Vec::with_capacity(3);
        for dim in SlipDimension::ALL {
            let i = dim.index();
            let prior = uninformative_prior(dim.arity(), designs[i], phi).map_err(|e| match e {
                Error::InsufficientExcitation(m) => {
                    Error::InsufficientExcitation(format!("{dim:?} slip: {m}"))
                }
                other => other,
            })?;
            posts.push(blr_fit(&prior, designs[i], targets[i])?);
        }
        let angular = posts.pop().unwrap();
        let lateral = posts.pop().unwrap();
        let longitudinal = posts.pop().unwrap();
        let model = Self {
            longitudinal,
            lateral,
            angular,
            basis: BASIS_TAG.to_string(),
            phi,
        };
        model.validate()?;
        Ok(model)
    }

    /// A noise-free model with the given weights, as if trained on exact data.
    pub fn from_weights(longitudinal: f64, lateral: f64, angular: [f64; 3]) -> Self {
        let point = |w: &[f64]| NigPosterior {
            weights: DVector::from_column_slice(w),
            scatter: DMatrix::zeros(w.len(), w.len()),
            shape: 1.0,
            scale: 0.0,
            obs_count: 2,
        };
        Self {
            longitudinal: point(&[longitudinal]),
            lateral: point(&[lateral]),
            angular: point(&angular),
            basis: BASIS_TAG.to_string(),
            phi: DEFAULT_PHI,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for dim in SlipDimension::ALL {
            let p = self.posterior(dim);
            if p.arity() != dim.arity() || p.scatter.shape() != (dim.arity(), dim.arity()) {
                return Err(Error::InvalidParameter(format!(
                    "{dim:?} posterior must have {} weights",
                    dim.arity()
                )));
            }
        }
        let n = self.longitudinal.obs_count;
        if self.lateral.obs_count != n || self.angular.obs_count != n {
            return Err(Error::InvalidParameter(
                "slip posteriors were trained on different sample counts".into(),
            ));
        }
        if !(self.longitudinal.shape > 0.0 && self.lateral.shape > 0.0 && self.angular.shape > 0.0)
        {
            return Err(Error::Untrained("slip model has no observations".into()));
        }
        Ok(())
    }

    /// Posterior-mean slip for a commanded body velocity.
    pub fn mean_slip(&self, f: &BodyVelocity) -> SlipVelocity {
        let dot = |dim: SlipDimension| {
            slip_features(dim, f)
                .iter()
                .zip(self.posterior(dim).weights.iter())
                .fold(0.0, |acc, (x, w)| acc + x * w)
        };
        SlipVelocity::new(
            dot(SlipDimension::Longitudinal),
            dot(SlipDimension::Lateral),
            dot(SlipDimension::Angular),
        )
    }

    /// Predictive distribution of each slip component for a commanded body
    /// velocity: `(mean, variance, dof)` per dimension.
    pub fn predictive(&self, f: &BodyVelocity) -> Result<[(f64, f64, f64); 3]> {
        let mut out = [(0.0, 0.0, 0.0); 3];
        for dim in SlipDimension::ALL {
            let x = DMatrix::from_row_slice(1, dim.arity(), &slip_features(dim, f));
            let p = blr_predict(self.posterior(dim), &x)?;
            out[dim.index()] = (p.mean[0], p.covariance[(0, 0)], p.dof);
        }
        Ok(out)
    }
}

/// Body velocity predicted from (powertrain-filtered) wheel speeds: the ideal
/// differential-drive velocity minus the posterior-mean slip.
pub fn predict_body_velocity(
    model: &SlipModel,
    geom: &RobotGeometry,
    wheels_hat: WheelSpeeds,
) -> Result<BodyVelocity> {
    model.validate()?;
    let f = diff_drive_body_velocity(geom, wheels_hat);
    Ok(f - model.mean_slip(&f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Least squares via the normal equations, solved by Gaussian elimination
    /// with partial pivoting. Independent of the Cholesky path under test.
    fn ols_oracle(x: &DMatrix<f64>, g: &DVector<f64>) -> Vec<f64> {
        let k = x.ncols();
        let mut a = vec![vec![0.0; k + 1]; k];
        for i in 0..k {
            for j in 0..k {
                a[i][j] = (0..x.nrows()).map(|r| x[(r, i)] * x[(r, j)]).sum();
            }
            a[i][k] = (0..x.nrows()).map(|r| x[(r, i)] * g[r]).sum();
        }
        for col in 0..k {
            let piv = (col..k)
                .max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))
                .unwrap();
            a.swap(col, piv);
            for row in col + 1..k {
                let f = a[row][col] / a[col][col];
                for c in col..=k {
                    a[row][c] -= f * a[col][c];
                }
            }
        }
        let mut sol = vec![0.0; k];
        for row in (0..k).rev() {
            let s: f64 = (row + 1..k).map(|c| a[row][c] * sol[c]).sum();
            sol[row] = (a[row][k] - s) / a[row][row];
        }
        sol
    }

    #[test]
    fn feature_examples() {
        let f = BodyVelocity::new(1.0, 0.0, 2.0);
        assert_eq!(
            slip_features(SlipDimension::Angular, &f),
            vec![2.0, 1.0, 2.0]
        );
        let f = BodyVelocity::new(0.0, 0.0, 3.0);
        assert_eq!(slip_features(SlipDimension::Lateral, &f), vec![0.0]);
        let f = BodyVelocity::new(1.5, 0.0, 0.0);
        assert_eq!(slip_features(SlipDimension::Longitudinal, &f), vec![1.5]);
    }

    #[test]
    fn prior_examples() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let p = uninformative_prior(1, &x, 1.0).unwrap();
        assert_abs_diff_eq!(p.covariance[(0, 0)], 0.2, epsilon = 1e-15);
        assert_eq!((p.shape, p.scale, p.mean[0]), (0.0, 0.0, 0.0));

        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -2.0, 1.0, 0.3, 3.0]);
        let p = uninformative_prior(2, &x, 1e6).unwrap();
        let prec = p.covariance.clone().try_inverse().unwrap();
        let expect = x.transpose() * &x * 1e-6;
        assert!((prec - expect).abs().max() < 1e-15);

        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        assert!(matches!(
            uninformative_prior(2, &x, 1e6),
            Err(Error::InsufficientExcitation(_))
        ));
    }

    #[test]
    fn exact_fit_posterior() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let g = DVector::from_column_slice(&[1.0, 2.0]);
        let prior = uninformative_prior(1, &x, 1e6).unwrap();
        let post = blr_fit(&prior, &x, &g).unwrap();
        // Direct evaluation: γ = φ/(1+φ) γ_OLS with γ_OLS = 1,
        // b = ½ (gᵀg − γ²(1+1/φ) XᵀX) = 2.5 / (1 + φ).
        assert_abs_diff_eq!(post.weights[0], 1e6 / (1e6 + 1.0), epsilon = 1e-15);
        assert_eq!(post.shape, 1.0);
        assert_abs_diff_eq!(post.scale, 2.5 / (1e6 + 1.0), epsilon = 1e-12);
        assert_eq!(post.obs_count, 2);
    }

    #[test]
    fn zero_targets() {
        let x = DMatrix::from_row_slice(3, 1, &[1.0, -2.0, 0.5]);
        let g = DVector::zeros(3);
        let prior = uninformative_prior(1, &x, 1e6).unwrap();
        let post = blr_fit(&prior, &x, &g).unwrap();
        assert_eq!(post.weights[0], 0.0);
        assert_eq!(post.scale, prior.scale);
    }

    #[test]
    fn noisy_slope_recovery_over_seeds() {
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut inside = 0;
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<f64> = (0..200).map(|_| rng.random_range(-2.0..2.0)).collect();
            let gs: Vec<f64> = xs
                .iter()
                .map(|x| 0.3 * x + noise.sample(&mut rng))
                .collect();
            let x = DMatrix::from_column_slice(200, 1, &xs);
            let g = DVector::from_column_slice(&gs);
            let post = blr_fit(&uninformative_prior(1, &x, 1e6).unwrap(), &x, &g).unwrap();

            let ols = ols_oracle(&x, &g)[0];
            assert!((post.weights[0] - ols * 1e6 / (1e6 + 1.0)).abs() < 1e-12);
            let resid: f64 = xs.iter().zip(&gs).map(|(x, g)| (g - ols * x).powi(2)).sum();
            let sigma2 = post.noise_variance().unwrap();
            assert!((sigma2 - resid / 198.0).abs() / (resid / 198.0) < 0.02);
            assert!((sigma2 - 0.01).abs() < 0.3 * 0.01, "seed {seed}: {sigma2}");
            if (post.weights[0] - 0.3).abs() < 3.0 * post.weight_std().unwrap()[0] {
                inside += 1;
            }
        }
        // A 3σ interval should miss at most a couple of times in 50 draws.
        assert!(inside >= 48, "{inside}/50 within 3σ");
    }

    #[test]
    fn empty_update_is_identity() {
        let x = DMatrix::from_row_slice(3, 1, &[1.0, -2.0, 0.5]);
        let g = DVector::from_column_slice(&[0.4, -0.5, 0.2]);
        let post = blr_fit(&uninformative_prior(1, &x, 1e6).unwrap(), &x, &g).unwrap();
        let same = blr_update(&post, &DMatrix::zeros(0, 1), &DVector::zeros(0)).unwrap();
        assert_eq!(same, post);
    }

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, k: usize) -> (DMatrix<f64>, DVector<f64>) {
        let x = DMatrix::from_fn(n, k, |_, _| rng.random_range(-3.0..3.0));
        let g = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        (x, g)
    }

    fn assert_posteriors_close(a: &NigPosterior, b: &NigPosterior, tol: f64) {
        let rel = |u: f64, v: f64| (u - v).abs() / (1.0 + u.abs().max(v.abs()));
        for (u, v) in a.weights.iter().zip(b.weights.iter()) {
            assert!(rel(*u, *v) < tol, "weights {a:?} vs {b:?}");
        }
        for (u, v) in a.scatter.iter().zip(b.scatter.iter()) {
            assert!(rel(*u, *v) < tol, "scatter {a:?} vs {b:?}");
        }
        assert!(rel(a.shape, b.shape) < tol);
        assert!(
            rel(a.scale, b.scale) < tol,
            "scale {} vs {}",
            a.scale,
            b.scale
        );
        assert_eq!(a.obs_count, b.obs_count);
    }

    #[test]
    fn fit_then_update_matches_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (x, g) = random_problem(&mut rng, 40, 3);
        let prior = uninformative_prior(3, &x, 1e6).unwrap();
        let batch = blr_fit(&prior, &x, &g).unwrap();
        let first = blr_fit(&prior, &x.rows(0, 15).into(), &g.rows(0, 15).into()).unwrap();
        let seq = blr_update(&first, &x.rows(15, 25).into(), &g.rows(15, 25).into()).unwrap();
        assert_posteriors_close(&seq, &batch, 1e-9);
    }

    #[test]
    fn single_sample_updates_match_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, g) = random_problem(&mut rng, 100, 2);
        let prior = uninformative_prior(2, &x, 1e6).unwrap();
        let batch = blr_fit(&prior, &x, &g).unwrap();
        let mut post = blr_fit(&prior, &DMatrix::zeros(0, 2), &DVector::zeros(0)).unwrap();
        for i in 0..100 {
            post = blr_update(&post, &x.rows(i, 1).into(), &g.rows(i, 1).into()).unwrap();
        }
        assert_posteriors_close(&post, &batch, 1e-8);
    }

    #[test]
    fn prediction_examples() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -2.0, 1.0, 0.3, 3.0]);
        let g = DVector::from_column_slice(&[0.2, 0.1, -0.4]);
        let post = blr_fit(&uninformative_prior(2, &x, 1e6).unwrap(), &x, &g).unwrap();
        let p = blr_predict(&post, &DMatrix::zeros(1, 2)).unwrap();
        assert_eq!(p.mean[0], 0.0);
        assert_abs_diff_eq!(
            p.covariance[(0, 0)],
            post.scale / post.shape,
            epsilon = 1e-15
        );
        assert_eq!(p.dof, 3.0);

        let post = NigPosterior {
            weights: DVector::from_column_slice(&[0.5]),
            scatter: DMatrix::identity(1, 1),
            shape: 2.0,
            scale: 0.1,
            obs_count: 4,
        };
        let p = blr_predict(&post, &DMatrix::from_row_slice(1, 1, &[2.0])).unwrap();
        assert_eq!(p.mean[0], 1.0);

        let untrained = NigPosterior { shape: 0.0, ..post };
        assert!(matches!(
            blr_predict(&untrained, &DMatrix::from_row_slice(1, 1, &[2.0])),
            Err(Error::Untrained(_))
        ));
    }

    #[test]
    fn exact_data_collapses_predictive_variance() {
        let x = DMatrix::from_row_slice(4, 1, &[1.0, 2.0, -1.0, 0.5]);
        let g = &x.column(0) * 0.7;
        let post = blr_fit(&uninformative_prior(1, &x, 1e12).unwrap(), &x, &g.into()).unwrap();
        let p = blr_predict(&post, &DMatrix::from_row_slice(1, 1, &[3.0])).unwrap();
        assert!(p.covariance[(0, 0)] < 1e-10);
    }

    #[test]
    fn body_velocity_prediction() {
        let geom = RobotGeometry::new(0.3, 0.6).unwrap();
        let wheels = WheelSpeeds::new(1.0, 3.0);
        let f = diff_drive_body_velocity(&geom, wheels);
        let ideal = SlipModel::from_weights(0.0, 0.0, [0.0; 3]);
        assert_eq!(predict_body_velocity(&ideal, &geom, wheels).unwrap(), f);
        let skid = SlipModel::from_weights(0.0, 0.0, [0.0, 0.0, 0.5]);
        let v = predict_body_velocity(&skid, &geom, wheels).unwrap();
        assert_abs_diff_eq!(v.omega_rad_s, 0.5 * f.omega_rad_s, epsilon = 1e-15);
    }

    #[test]
    fn untrained_model_is_rejected() {
        let mut m = SlipModel::from_weights(0.0, 0.0, [0.0; 3]);
        m.angular.shape = 0.0;
        assert!(
            predict_body_velocity(&m, &RobotGeometry::default(), WheelSpeeds::default()).is_err()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn posterior_mean_is_shrunk_least_squares(seed in 0u64..10_000, n in 4usize..50, k in 1usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, g) = random_problem(&mut rng, n, k);
            let phi = 1e6;
            let post = blr_fit(&uninformative_prior(k, &x, phi).unwrap(), &x, &g).unwrap();
            let ols = ols_oracle(&x, &g);
            for j in 0..k {
                let expect = phi / (1.0 + phi) * ols[j];
                prop_assert!((post.weights[j] - expect).abs() <= 1e-9 * expect.abs().max(1e-3));
            }
            prop_assert!(post.scale >= -1e-9);
        }

        #[test]
        fn sequential_equals_batch_for_any_split(seed in 0u64..10_000, n in 6usize..40, cut in 0.0..1.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, g) = random_problem(&mut rng, n, 3);
            let prior = uninformative_prior(3, &x, 1e6).unwrap();
            let batch = blr_fit(&prior, &x, &g).unwrap();
            let c = ((n as f64) * cut) as usize;
            let a = blr_fit(&prior, &x.rows(0, c).into(), &g.rows(0, c).into()).unwrap();
            let b = blr_update(&a, &x.rows(c, n - c).into(), &g.rows(c, n - c).into()).unwrap();
            assert_posteriors_close(&b, &batch, 1e-9);
        }

        #[test]
        fn scatter_trace_contracts(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 0.05).unwrap();
            let x = DMatrix::from_fn(60, 3, |_, _| rng.random_range(-3.0..3.0));
            let truth = DVector::from_column_slice(&[0.1, -0.2, 0.4]);
            let g = &x * &truth + DVector::from_fn(60, |_, _| noise.sample(&mut rng));
            let prior = uninformative_prior(3, &x.rows(0, 10).into(), 1e6).unwrap();
            let mut post = blr_fit(&prior, &x.rows(0, 10).into(), &g.rows(0, 10).into()).unwrap();
            let mut trace = post.scatter.trace();
            for i in 10..60 {
                post = blr_update(&post, &x.rows(i, 1).into(), &g.rows(i, 1).into()).unwrap();
                prop_assert!(post.scatter.trace() <= trace * (1.0 + 1e-12));
                prop_assert!(post.scale >= -1e-9);
                trace = post.scatter.trace();
            }
        }

        #[test]
        fn predictive_covariance_is_psd(seed in 0u64..10_000, m in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, g) = random_problem(&mut rng, 20, 3);
            let post = blr_fit(&uninformative_prior(3, &x, 1e6).unwrap(), &x, &g).unwrap();
            let xt = DMatrix::from_fn(m, 3, |_, _| rng.random_range(-5.0..5.0));
            let p = blr_predict(&post, &xt).unwrap();
            prop_assert!((&p.covariance - p.covariance.transpose()).abs().max() == 0.0);
            let eig = SymmetricEigen::new(p.covariance.clone());
            prop_assert!(eig.eigenvalues.min() >= -1e-12 * eig.eigenvalues.max().max(1.0));
        }
    }
}
