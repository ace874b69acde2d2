//! Closed-form analytics for Gaussian-mixture data distributions under the
//! variance-preserving diffusion.
//!
//! A [`MixtureModel`] plays two roles at once: it is the data distribution
//! (components grouped into classes, so a class region can be non-Gaussian)
//! and, through [`MixtureModel::marginal_at`], the exact time-t marginal of
//! the forward diffusion. Score, score divergence and the Bayes class
//! posterior are all available in closed form, which is what makes the flow
//! verifiers in [`crate::flow`] exact rather than learned.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normal_vector;

const LN_2PI: f64 = 1.8378770664093453;

/// β(t) on `[0, horizon]`. Restricted to forms with closed-form ∫β so that
/// ᾱ_t is exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "lowercase")]
pub enum ScheduleForm {
    Constant { beta: f64 },
    Linear { beta_start: f64, beta_end: f64 },
}

/// Variance-preserving noise schedule: x_t | x_0 ~ N(√ᾱ_t x_0, (1−ᾱ_t)I)
/// with ᾱ_t = exp(−∫₀ᵗ β).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    form: ScheduleForm,
    horizon: f64,
}

impl NoiseSchedule {
    pub fn new(form: ScheduleForm, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidModel(format!(
                "schedule horizon must be positive and finite, got {horizon}"
            )));
        }
        match form {
            ScheduleForm::Constant { beta } if !(beta > 0.0) => {
                return Err(Error::InvalidModel(format!(
                    "constant schedule needs beta > 0, got {beta}"
                )))
            }
            ScheduleForm::Linear {
                beta_start,
                beta_end,
            } if !(beta_start > 0.0 && beta_end > 0.0) => {
                return Err(Error::InvalidModel(format!(
                    "linear schedule needs positive endpoints, got {beta_start}..{beta_end}"
                )))
            }
            _ => {}
        }
        Ok(Self { form, horizon })
    }

    /// Constant β ≡ `beta`.
    pub fn constant(beta: f64, horizon: f64) -> Result<Self> {
        Self::new(ScheduleForm::Constant { beta }, horizon)
    }

    /// Linear β from `beta_start` at t=0 to `beta_end` at t=horizon.
    pub fn linear(beta_start: f64, beta_end: f64, horizon: f64) -> Result<Self> {
        Self::new(
            ScheduleForm::Linear {
                beta_start,
                beta_end,
            },
            horizon,
        )
    }

    /// The customary VP schedule: linear 0.1 → 20 on horizon 1.
    pub fn default_vp() -> Self {
        Self::linear(0.1, 20.0, 1.0).expect("valid by construction")
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn form(&self) -> ScheduleForm {
        self.form
    }

    pub fn beta(&self, t: f64) -> f64 {
        match self.form {
            ScheduleForm::Constant { beta } => beta,
            ScheduleForm::Linear {
                beta_start,
                beta_end,
            } => beta_start + (beta_end - beta_start) * t / self.horizon,
        }
    }

    /// ∫₀ᵗ β(s) ds, exact.
    fn integrated_beta(&self, t: f64) -> f64 {
        match self.form {
            ScheduleForm::Constant { beta } => beta * t,
            ScheduleForm::Linear {
                beta_start,
                beta_end,
            } => beta_start * t + (beta_end - beta_start) * t * t / (2.0 * self.horizon),
        }
    }

    /// ᾱ_t = exp(−∫₀ᵗ β) in (0, 1].
    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        if !t.is_finite() || t < 0.0 || t > self.horizon {
            return Err(Error::Domain(format!(
                "time {t} outside schedule range [0, {}]",
                self.horizon
            )));
        }
        Ok((-self.integrated_beta(t)).exp())
    }
}

/// One validated mixture component with its factorizations cached.
#[derive(Debug, Clone)]
pub struct MixtureComponent {
    weight: f64,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    // Cached at construction: lower Cholesky factor, inverse, trace of the
    // inverse, and the Gaussian log-normalizer −½(d ln2π + ln det Σ).
    chol_lower: DMatrix<f64>,
    inverse: DMatrix<f64>,
    inverse_trace: f64,
    log_norm: f64,
}

impl MixtureComponent {
    fn new(index: usize, weight: f64, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::Dimension {
                expected: d,
                got: covariance.nrows(),
            });
        }
        if !(weight >= 0.0) {
            return Err(Error::InvalidModel(format!(
                "component {index} has negative weight {weight}"
            )));
        }
        let asym = (&covariance - covariance.transpose()).abs().max();
        if asym > 1e-10 {
            return Err(Error::Numeric {
                component: index,
                reason: format!("covariance not symmetric (max asymmetry {asym:.3e})"),
            });
        }
        let chol = nalgebra::Cholesky::new(covariance.clone()).ok_or(Error::Numeric {
            component: index,
            reason: "covariance is not positive definite (Cholesky failed)".into(),
        })?;
        let chol_lower = chol.l();
        let inverse = chol.inverse();
        let inverse_trace = inverse.trace();
        let log_det: f64 = 2.0 * chol_lower.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_norm = -0.5 * (d as f64 * LN_2PI + log_det);
        Ok(Self {
            weight,
            mean,
            covariance,
            chol_lower,
            inverse,
            inverse_trace,
            log_norm,
        })
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// log N(x; μ, Σ) and the score contribution Σ⁻¹(μ − x), which shares
    /// the single matrix-vector product both need.
    fn log_density_and_pull(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let diff = &self.mean - x;
        let pull = &self.inverse * &diff;
        let quad = diff.dot(&pull);
        (self.log_norm - 0.5 * quad, pull)
    }
}

/// Class posterior h(x): probabilities over the C classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosterior {
    probabilities: Vec<f64>,
}

impl ClassPosterior {
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::InvalidModel("posterior must be non-empty".into()));
        }
        let sum: f64 = probabilities.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidModel(format!(
                "posterior sums to {sum}, expected 1"
            )));
        }
        if probabilities.iter().any(|&p| !(-1e-12..=1.0 + 1e-12).contains(&p)) {
            return Err(Error::InvalidModel("posterior entry outside [0,1]".into()));
        }
        let probabilities = probabilities
            .into_iter()
            .map(|p| p.clamp(0.0, 1.0))
            .collect();
        Ok(Self { probabilities })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }
}

/// Weighted Gaussian mixture with a component → class map.
#[derive(Debug, Clone)]
pub struct MixtureModel {
    components: Vec<MixtureComponent>,
    class_of: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl MixtureModel {
    /// Builds and validates a mixture. Weights must sum to 1 within 1e-12.
    pub fn new(
        components: Vec<(f64, DVector<f64>, DMatrix<f64>)>,
        class_of: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let sum: f64 = components.iter().map(|(w, _, _)| *w).sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidModel(format!(
                "component weights sum to {sum}, expected 1"
            )));
        }
        Self::build(components, class_of, num_classes)
    }

    /// Like [`Self::new`] but divides all weights by their sum first, so any
    /// common positive rescaling of the weights yields the same model.
    pub fn new_normalized(
        components: Vec<(f64, DVector<f64>, DMatrix<f64>)>,
        class_of: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let sum: f64 = components.iter().map(|(w, _, _)| *w).sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::InvalidModel(format!(
                "weights must have positive finite sum, got {sum}"
            )));
        }
        let components = components
            .into_iter()
            .map(|(w, m, c)| (w / sum, m, c))
            .collect();
        Self::build(components, class_of, num_classes)
    }

    fn build(
        components: Vec<(f64, DVector<f64>, DMatrix<f64>)>,
        class_of: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidModel("mixture needs ≥ 1 component".into()));
        }
        if class_of.len() != components.len() {
            return Err(Error::InvalidModel(format!(
                "class map covers {} components, mixture has {}",
                class_of.len(),
                components.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::InvalidModel("need ≥ 1 class".into()));
        }
        let dim = components[0].1.len();
        let mut built = Vec::with_capacity(components.len());
        for (k, (w, mean, cov)) in components.into_iter().enumerate() {
            if mean.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: mean.len(),
                });
            }
            built.push(MixtureComponent::new(k, w, mean, cov)?);
        }
        let mut class_hit = vec![false; num_classes];
        for (k, &c) in class_of.iter().enumerate() {
            if c >= num_classes {
                return Err(Error::InvalidModel(format!(
                    "component {k} maps to class {c}, only {num_classes} classes declared"
                )));
            }
            class_hit[c] = true;
        }
        if let Some(missing) = class_hit.iter().position(|hit| !hit) {
            return Err(Error::InvalidModel(format!(
                "class {missing} has no component"
            )));
        }
        Ok(Self {
            components: built,
            class_of,
            dim,
            num_classes,
        })
    }

    /// Equal-weight isotropic mixture, one component per entry of `means`.
    pub fn isotropic(means: Vec<DVector<f64>>, variance: f64, class_of: Vec<usize>, num_classes: usize) -> Result<Self> {
        let k = means.len();
        let dim = means.first().map_or(0, |m| m.len());
        let cov = DMatrix::identity(dim, dim) * variance;
        let components = means
            .into_iter()
            .map(|m| (1.0 / k as f64, m, cov.clone()))
            .collect();
        Self::new_normalized(components, class_of, num_classes)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn class_of(&self, component: usize) -> usize {
        self.class_of[component]
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// The exact time-t marginal under the VP forward process: each
    /// component (w, μ, Σ) becomes (w, √ᾱ_t μ, ᾱ_t Σ + (1−ᾱ_t)I).
    pub fn marginal_at(&self, schedule: &NoiseSchedule, t: f64) -> Result<MixtureModel> {
        let alpha = schedule.alpha_bar(t)?;
        let sqrt_alpha = alpha.sqrt();
        let eye = DMatrix::identity(self.dim, self.dim);
        let components = self
            .components
            .iter()
            .map(|c| {
                (
                    c.weight,
                    c.mean.clone() * sqrt_alpha,
                    &c.covariance * alpha + &eye * (1.0 - alpha),
                )
            })
            .collect();
        Self::build(components, self.class_of.clone(), self.num_classes)
    }

    /// Per-component joint terms ln w_k + ln N_k(x), with −∞ for zero-weight
    /// components, plus the score pulls Σ_k⁻¹(μ_k − x).
    fn joint_terms(&self, x: &DVector<f64>) -> (Vec<f64>, Vec<DVector<f64>>) {
        let mut terms = Vec::with_capacity(self.components.len());
        let mut pulls = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let (log_density, pull) = c.log_density_and_pull(x);
            terms.push(if c.weight > 0.0 {
                c.weight.ln() + log_density
            } else {
                f64::NEG_INFINITY
            });
            pulls.push(pull);
        }
        (terms, pulls)
    }

    fn log_sum_exp(terms: &[f64]) -> f64 {
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return max;
        }
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    /// log Σ_k w_k N(x; μ_k, Σ_k), evaluated via log-sum-exp.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_dim(x)?;
        let (terms, _) = self.joint_terms(x);
        Ok(Self::log_sum_exp(&terms))
    }

    /// ∇ log p(x) = Σ_k r_k(x) Σ_k⁻¹(μ_k − x).
    pub fn score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        let (terms, pulls) = self.joint_terms(x);
        let lse = Self::log_sum_exp(&terms);
        let mut score = DVector::zeros(self.dim);
        for (term, pull) in terms.iter().zip(&pulls) {
            let r = (term - lse).exp();
            if r > 0.0 {
                score.axpy(r, pull, 1.0);
            }
        }
        Ok(score)
    }

    /// Δ log p(x) = Σ_k r_k(‖G_k‖² − tr Σ_k⁻¹) − ‖Σ_k r_k G_k‖²
    /// with G_k = Σ_k⁻¹(μ_k − x).
    pub fn score_divergence(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_dim(x)?;
        let (terms, pulls) = self.joint_terms(x);
        let lse = Self::log_sum_exp(&terms);
        let mut mean_pull = DVector::zeros(self.dim);
        let mut acc = 0.0;
        for ((term, pull), c) in terms.iter().zip(&pulls).zip(&self.components) {
            let r = (term - lse).exp();
            if r > 0.0 {
                acc += r * (pull.norm_squared() - c.inverse_trace);
                mean_pull.axpy(r, pull, 1.0);
            }
        }
        Ok(acc - mean_pull.norm_squared())
    }

    /// Score and its divergence from one pass over the components. Same
    /// values as [`Self::score`] / [`Self::score_divergence`].
    pub fn score_and_divergence(&self, x: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        self.check_dim(x)?;
        let (terms, pulls) = self.joint_terms(x);
        let lse = Self::log_sum_exp(&terms);
        let mut score = DVector::zeros(self.dim);
        let mut acc = 0.0;
        for ((term, pull), c) in terms.iter().zip(&pulls).zip(&self.components) {
            let r = (term - lse).exp();
            if r > 0.0 {
                acc += r * (pull.norm_squared() - c.inverse_trace);
                score.axpy(r, pull, 1.0);
            }
        }
        let div = acc - score.norm_squared();
        Ok((score, div))
    }

    /// The Bayes classifier h: P(class c | x), computed in log space so it
    /// never underflows to NaN even far from the support.
    pub fn class_posterior(&self, x: &DVector<f64>) -> Result<ClassPosterior> {
        self.check_dim(x)?;
        let (terms, _) = self.joint_terms(x);
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut class_mass = vec![0.0; self.num_classes];
        for (k, term) in terms.iter().enumerate() {
            if term.is_finite() {
                class_mass[self.class_of[k]] += (term - max).exp();
            }
        }
        let total: f64 = class_mass.iter().sum();
        ClassPosterior::new(class_mass.into_iter().map(|m| m / total).collect())
    }

    /// i.i.d. draws with ground-truth class labels.
    pub fn sample_data(&self, rng: &mut impl Rng, n: usize) -> Vec<(DVector<f64>, usize)> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let component = self.pick_component(rng);
            let c = &self.components[component];
            let noise = standard_normal_vector(rng, self.dim);
            let x = &c.mean + &c.chol_lower * noise;
            out.push((x, self.class_of[component]));
        }
        out
    }

    fn pick_component(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        for (k, c) in self.components.iter().enumerate() {
            cum += c.weight;
            if u < cum {
                return k;
            }
        }
        // u landed in the rounding slack past the last positive weight
        self.components
            .iter()
            .rposition(|c| c.weight > 0.0)
            .unwrap_or(self.components.len() - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, substream};

    fn standard_normal(d: usize) -> MixtureModel {
        MixtureModel::new(
            vec![(1.0, DVector::zeros(d), DMatrix::identity(d, d))],
            vec![0],
            1,
        )
        .unwrap()
    }

    fn random_mixture(seed: u64, k: usize, d: usize) -> MixtureModel {
        let mut rng = substream(seed, domain::MIXTURE, 0);
        let mut components = Vec::new();
        for _ in 0..k {
            let mean = standard_normal_vector(&mut rng, d) * 2.0;
            // SPD via A Aᵀ + I
            let a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
            let cov = &a * a.transpose() + DMatrix::identity(d, d);
            components.push((1.0, mean, cov));
        }
        let class_of = (0..k).collect();
        MixtureModel::new_normalized(components, class_of, k).unwrap()
    }

    /// Adaptive Simpson quadrature, used as an independent oracle for ᾱ.
    fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
            (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
        }
        fn recurse(f: &impl Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64) -> f64 {
            let m = 0.5 * (a + b);
            let left = simpson(f, a, m);
            let right = simpson(f, m, b);
            if (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                recurse(f, a, m, left, tol / 2.0) + recurse(f, m, b, right, tol / 2.0)
            }
        }
        recurse(f, a, b, simpson(f, a, b), tol)
    }

    #[test]
    fn alpha_bar_empty_integral_is_one() {
        let s = NoiseSchedule::constant(1.0, 2.0).unwrap();
        assert_eq!(s.alpha_bar(0.0).unwrap(), 1.0);
    }

    #[test]
    fn alpha_bar_constant_closed_form() {
        let s = NoiseSchedule::constant(1.0, 2.0).unwrap();
        let t = 4.0f64.ln();
        assert!((s.alpha_bar(t).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_linear_matches_quadrature_oracle() {
        let s = NoiseSchedule::linear(0.1, 20.0, 1.0).unwrap();
        for &t in &[0.25, 0.5, 0.75, 1.0] {
            let integral = adaptive_simpson(&|u| s.beta(u), 0.0, t, 1e-13);
            let oracle = (-integral).exp();
            let got = s.alpha_bar(t).unwrap();
            assert!(
                ((got - oracle) / oracle).abs() < 1e-10,
                "t={t}: got {got}, oracle {oracle}"
            );
        }
        // the t=1 endpoint has a closed form we can state directly
        let expected = (-10.05f64).exp();
        assert!((s.alpha_bar(1.0).unwrap() - expected).abs() / expected < 1e-12);
    }

    #[test]
    fn alpha_bar_rejects_out_of_range_time() {
        let s = NoiseSchedule::constant(1.0, 1.0).unwrap();
        assert!(s.alpha_bar(-0.1).is_err());
        assert!(s.alpha_bar(1.5).is_err());
    }

    #[test]
    fn alpha_bar_strictly_decreasing_from_one() {
        let s = NoiseSchedule::default_vp();
        let mut prev = s.alpha_bar(0.0).unwrap();
        assert_eq!(prev, 1.0);
        for i in 1..=64 {
            let a = s.alpha_bar(i as f64 / 64.0).unwrap();
            assert!(a < prev && a > 0.0);
            prev = a;
        }
    }

    #[test]
    fn marginal_quarter_alpha_shrinks_mean_keeps_unit_cov() {
        let m = MixtureModel::new(
            vec![(
                1.0,
                DVector::from_vec(vec![2.0, 0.0]),
                DMatrix::identity(2, 2),
            )],
            vec![0],
            1,
        )
        .unwrap();
        let s = NoiseSchedule::constant(1.0, 2.0).unwrap();
        let t = 4.0f64.ln(); // ᾱ = 0.25
        let mt = m.marginal_at(&s, t).unwrap();
        let c = &mt.components()[0];
        assert!((c.mean()[0] - 1.0).abs() < 1e-12);
        assert!((c.mean()[1]).abs() < 1e-12);
        // 0.25·1 + 0.75 = 1
        assert!((c.covariance().clone() - DMatrix::identity(2, 2)).abs().max() < 1e-12);
    }

    #[test]
    fn marginal_at_zero_is_identity() {
        let m = random_mixture(3, 3, 4);
        let s = NoiseSchedule::default_vp();
        let mt = m.marginal_at(&s, 0.0).unwrap();
        for (a, b) in m.components().iter().zip(mt.components()) {
            assert_eq!(a.weight(), b.weight());
            assert_eq!(a.mean(), b.mean());
            assert_eq!(a.covariance(), b.covariance());
        }
    }

    #[test]
    fn log_density_standard_normal_at_origin() {
        let m = standard_normal(2);
        let got = m.log_density(&DVector::zeros(2)).unwrap();
        assert!((got - (-LN_2PI)).abs() < 1e-12); // −ln(2π) ≈ −1.8379
    }

    #[test]
    fn log_density_symmetric_pair_collapses() {
        let mu = DVector::from_vec(vec![1.5, -0.5]);
        let m = MixtureModel::new(
            vec![
                (0.5, mu.clone(), DMatrix::identity(2, 2)),
                (0.5, -mu.clone(), DMatrix::identity(2, 2)),
            ],
            vec![0, 1],
            2,
        )
        .unwrap();
        let at_zero = m.log_density(&DVector::zeros(2)).unwrap();
        let single = standard_normal(2)
            .log_density(&DVector::from_vec(vec![mu.norm(), 0.0]))
            .unwrap();
        assert!((at_zero - single).abs() < 1e-12);
    }

    #[test]
    fn log_density_matches_naive_summation() {
        let m = random_mixture(11, 3, 3);
        let mut rng = substream(12, domain::MIXTURE, 1);
        for _ in 0..20 {
            let x = standard_normal_vector(&mut rng, 3) * 2.0;
            // naive direct summation oracle
            let mut direct = 0.0;
            for c in m.components() {
                let diff = &x - c.mean();
                let chol = nalgebra::Cholesky::new(c.covariance().clone()).unwrap();
                let quad = diff.dot(&chol.solve(&diff));
                let det = c.covariance().determinant();
                direct += c.weight() * (-0.5 * quad).exp()
                    / ((2.0 * std::f64::consts::PI).powi(3).sqrt() * det.sqrt());
            }
            let got = m.log_density(&x).unwrap();
            assert!((got - direct.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn score_of_standard_normal_is_negative_x() {
        let m = standard_normal(2);
        let x = DVector::from_vec(vec![2.0, 0.0]);
        let s = m.score(&x).unwrap();
        assert!((s[0] + 2.0).abs() < 1e-14);
        assert!(s[1].abs() < 1e-14);
    }

    #[test]
    fn score_vanishes_at_symmetry_point() {
        let mu = DVector::from_vec(vec![1.0, 2.0]);
        let m = MixtureModel::new(
            vec![
                (0.5, mu.clone(), DMatrix::identity(2, 2)),
                (0.5, -mu, DMatrix::identity(2, 2)),
            ],
            vec![0, 1],
            2,
        )
        .unwrap();
        assert!(m.score(&DVector::zeros(2)).unwrap().norm() < 1e-14);
    }

    #[test]
    fn score_matches_finite_difference_gradient() {
        let m = random_mixture(21, 3, 3);
        let mut rng = substream(22, domain::MIXTURE, 2);
        let h = 1e-5;
        for _ in 0..100 {
            let x = standard_normal_vector(&mut rng, 3) * 2.0;
            let analytic = m.score(&x).unwrap();
            for i in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd =
                    (m.log_density(&xp).unwrap() - m.log_density(&xm).unwrap()) / (2.0 * h);
                assert!(
                    (analytic[i] - fd).abs() < 1e-6,
                    "coord {i}: analytic {} vs fd {fd}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn divergence_of_standard_normal_is_minus_dim() {
        for d in [2usize, 8] {
            let m = standard_normal(d);
            let mut rng = substream(31, domain::MIXTURE, d as u64);
            let x = standard_normal_vector(&mut rng, d);
            let div = m.score_divergence(&x).unwrap();
            assert!((div + d as f64).abs() < 1e-12, "d={d}: {div}");
        }
    }

    #[test]
    fn divergence_matches_finite_difference_laplacian() {
        let m = random_mixture(41, 3, 3);
        let mut rng = substream(42, domain::MIXTURE, 3);
        let h = 1e-4;
        for _ in 0..100 {
            let x = standard_normal_vector(&mut rng, 3) * 1.5;
            let analytic = m.score_divergence(&x).unwrap();
            let f0 = m.log_density(&x).unwrap();
            let mut lap = 0.0;
            for i in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                lap += (m.log_density(&xp).unwrap() - 2.0 * f0 + m.log_density(&xm).unwrap())
                    / (h * h);
            }
            assert!(
                ((analytic - lap) / lap.abs()).abs() < 1e-4,
                "analytic {analytic} vs laplacian {lap}"
            );
        }
    }

    #[test]
    fn score_and_divergence_agree_with_separate_paths() {
        let m = random_mixture(43, 4, 3);
        let mut rng = substream(44, domain::MIXTURE, 4);
        let x = standard_normal_vector(&mut rng, 3);
        let (s, d) = m.score_and_divergence(&x).unwrap();
        assert_eq!(s, m.score(&x).unwrap());
        assert_eq!(d, m.score_divergence(&x).unwrap());
    }

    #[test]
    fn posterior_symmetric_two_class_is_half_half() {
        let mu = DVector::from_vec(vec![2.0, 0.0]);
        let m = MixtureModel::new(
            vec![
                (0.5, mu.clone(), DMatrix::identity(2, 2)),
                (0.5, -mu, DMatrix::identity(2, 2)),
            ],
            vec![0, 1],
            2,
        )
        .unwrap();
        let p = m.class_posterior(&DVector::zeros(2)).unwrap();
        assert!((p.probabilities()[0] - 0.5).abs() < 1e-12);
        assert!((p.probabilities()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn posterior_single_class_is_one() {
        let m = standard_normal(3);
        let p = m.class_posterior(&DVector::from_vec(vec![5.0, 5.0, 5.0])).unwrap();
        assert_eq!(p.probabilities(), &[1.0]);
    }

    #[test]
    fn posterior_at_component_mean_dominates_ten_sigma_rival() {
        let near = DVector::from_vec(vec![0.0, 0.0]);
        let far = DVector::from_vec(vec![10.0, 0.0]);
        let m = MixtureModel::new(
            vec![
                (0.5, near.clone(), DMatrix::identity(2, 2)),
                (0.5, far, DMatrix::identity(2, 2)),
            ],
            vec![0, 1],
            2,
        )
        .unwrap();
        let p = m.class_posterior(&near).unwrap();
        // density ratio bound: rival term is exp(−50)
        assert!(p.probabilities()[0] >= 1.0 - 1e-9);
    }

    #[test]
    fn posterior_never_nan_far_from_support() {
        let m = random_mixture(51, 3, 2);
        let x = DVector::from_vec(vec![1e5, -1e5]);
        let p = m.class_posterior(&x).unwrap();
        assert!(p.probabilities().iter().all(|v| v.is_finite()));
        let sum: f64 = p.probabilities().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_invariant_under_weight_rescaling() {
        let mut rng = substream(61, domain::MIXTURE, 5);
        let means: Vec<DVector<f64>> =
            (0..3).map(|_| standard_normal_vector(&mut rng, 2) * 2.0).collect();
        let base: Vec<_> = means
            .iter()
            .map(|m| (0.2 + rng.random::<f64>(), m.clone(), DMatrix::identity(2, 2)))
            .collect();
        let scaled: Vec<_> = base
            .iter()
            .map(|(w, m, c)| (w * 3.7, m.clone(), c.clone()))
            .collect();
        let m1 = MixtureModel::new_normalized(base, vec![0, 1, 1], 2).unwrap();
        let m2 = MixtureModel::new_normalized(scaled, vec![0, 1, 1], 2).unwrap();
        let x = standard_normal_vector(&mut rng, 2);
        let p1 = m1.class_posterior(&x).unwrap();
        let p2 = m2.class_posterior(&x).unwrap();
        for (a, b) in p1.probabilities().iter().zip(p2.probabilities()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_data_single_draw_carries_component_label() {
        let mu = DVector::from_vec(vec![4.0, 0.0]);
        let m = MixtureModel::new(
            vec![
                (0.5, mu.clone(), DMatrix::identity(2, 2)),
                (0.5, -mu, DMatrix::identity(2, 2)),
            ],
            vec![0, 1],
            2,
        )
        .unwrap();
        let mut rng = substream(71, domain::MIXTURE, 6);
        let draws = m.sample_data(&mut rng, 1);
        assert_eq!(draws.len(), 1);
        let (x, label) = &draws[0];
        // the point must be near the mean of its labelled component
        let dist0 = (x - m.components()[0].mean()).norm();
        let dist1 = (x - m.components()[1].mean()).norm();
        if *label == 0 {
            assert!(dist0 < dist1);
        } else {
            assert!(dist1 < dist0);
        }
    }

    #[test]
    fn sample_data_excludes_zero_weight_components() {
        let m = MixtureModel::new(
            vec![
                (1.0, DVector::zeros(2), DMatrix::identity(2, 2)),
                (0.0, DVector::from_vec(vec![100.0, 0.0]), DMatrix::identity(2, 2)),
            ],
            vec![0, 1],
            2,
        )
        .unwrap();
        let mut rng = substream(72, domain::MIXTURE, 7);
        for (_, label) in m.sample_data(&mut rng, 200) {
            assert_eq!(label, 0);
        }
    }

    #[test]
    fn sample_data_class_frequencies_within_binomial_bound() {
        let mu = DVector::from_vec(vec![1.0, 0.0]);
        let m = MixtureModel::new(
            vec![
                (0.5, mu.clone(), DMatrix::identity(2, 2)),
                (0.5, -mu, DMatrix::identity(2, 2)),
            ],
            vec![0, 1],
            2,
        )
        .unwrap();
        let mut rng = substream(73, domain::MIXTURE, 8);
        let n = 100_000;
        let ones = m
            .sample_data(&mut rng, n)
            .iter()
            .filter(|(_, l)| *l == 0)
            .count();
        let frac = ones as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.005, "class-0 fraction {frac}");
    }

    #[test]
    fn rejects_bad_weights_and_non_spd_covariance() {
        let eye = DMatrix::identity(2, 2);
        assert!(MixtureModel::new(
            vec![(0.9, DVector::zeros(2), eye.clone())],
            vec![0],
            1
        )
        .is_err());
        let indefinite = DMatrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0]);
        let err = MixtureModel::new(vec![(1.0, DVector::zeros(2), indefinite)], vec![0], 1)
            .unwrap_err();
        assert!(matches!(err, Error::Numeric { component: 0, .. }));
    }

    #[test]
    fn rejects_unreferenced_class() {
        let eye = DMatrix::identity(2, 2);
        let err = MixtureModel::new(
            vec![(1.0, DVector::zeros(2), eye)],
            vec![0],
            2, // class 1 never hit
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidModel(_)));
    }
}
