//! Diffusion-process arithmetic: the beta/alpha tables, forward noising,
//! and the shared reverse step.
//!
//! Timesteps are 1-based: `t = 1..=T`, with `alpha_bar(0) == 1` by
//! convention so that diffusing to `t = 0` is the identity.

use ndarray::{ArrayBase, Data, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Scalar;
use crate::volume::Volume;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Serializable schedule description (linear betas).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Precomputed noise schedule tables.
///
/// Tables are kept in f64; the recurrence `alpha_bar[t] = alpha_bar[t-1] *
/// alpha[t]` holds exactly against a direct running product.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a linear schedule: `betas` interpolate from `beta_start`
    /// (t = 1) to `beta_end` (t = T).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidSchedule(format!(
                "need at least 2 steps, got {steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let n = steps as f64;
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (n - 1.0))
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut running = 1.0f64;
        for a in &alphas {
            running *= a;
            alpha_bars.push(running);
        }
        Ok(NoiseSchedule { betas, alphas, alpha_bars })
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::TimestepOutOfRange { t, t_max: self.steps() })
        } else {
            Ok(())
        }
    }

    /// `beta_t`, 1-based.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_t = 1 - beta_t`, 1-based.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Reverse-step noise scale. Fixed to `sqrt(beta_t)`, matching the
    /// reverse process variance `beta_t * I`; centralized here so an
    /// alternative (e.g. posterior variance) is a one-line change.
    pub fn sigma(&self, t: usize) -> f64 {
        self.beta(t).sqrt()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Coefficients of the reverse step at `t`:
    /// `(1/sqrt(alpha_t), (1-alpha_t)/sqrt(1-alpha_bar_t), sigma_t)`.
    pub fn reverse_coeffs(&self, t: usize) -> (f64, f64, f64) {
        let a = self.alpha(t);
        let ab = self.alpha_bar(t);
        (1.0 / a.sqrt(), (1.0 - a) / (1.0 - ab).sqrt(), self.sigma(t))
    }
}

/// `y_t = sqrt(alpha_bar_t) * y0 + sqrt(1 - alpha_bar_t) * eps` on any array.
pub fn diffuse_arr<F, S, D>(
    y0: &ArrayBase<S, D>,
    t: usize,
    eps: &ArrayBase<S, D>,
    schedule: &NoiseSchedule,
) -> Result<ndarray::Array<F, D>>
where
    F: Scalar,
    S: Data<Elem = F>,
    D: Dimension,
{
    schedule.check_t(t)?;
    if y0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!(
            "diffuse: y0 {:?} vs eps {:?}",
            y0.shape(),
            eps.shape()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let c0 = F::from_f64(ab.sqrt());
    let c1 = F::from_f64((1.0 - ab).sqrt());
    let mut out = y0.to_owned();
    out.zip_mut_with(eps, |y, e| *y = c0 * *y + c1 * *e);
    Ok(out)
}

/// One ancestral reverse step:
/// `(1/sqrt(alpha_t)) * (y_t - ((1-alpha_t)/sqrt(1-alpha_bar_t)) * eps_hat) + sigma_t * z`.
pub fn reverse_step_arr<F, S, D>(
    y_t: &ArrayBase<S, D>,
    eps_hat: &ArrayBase<S, D>,
    t: usize,
    z: &ArrayBase<S, D>,
    schedule: &NoiseSchedule,
) -> Result<ndarray::Array<F, D>>
where
    F: Scalar,
    S: Data<Elem = F>,
    D: Dimension,
{
    schedule.check_t(t)?;
    if y_t.shape() != eps_hat.shape() || y_t.shape() != z.shape() {
        return Err(Error::ShapeMismatch(format!(
            "reverse_step: y_t {:?}, eps_hat {:?}, z {:?}",
            y_t.shape(),
            eps_hat.shape(),
            z.shape()
        )));
    }
    let (c_rescale, c_eps, sigma) = schedule.reverse_coeffs(t);
    let c_rescale = F::from_f64(c_rescale);
    let c_eps = F::from_f64(c_eps);
    let sigma = F::from_f64(sigma);
    let mut out = y_t.to_owned();
    ndarray::Zip::from(&mut out)
        .and(eps_hat)
        .and(z)
        .for_each(|y, &e, &zz| *y = c_rescale * (*y - c_eps * e) + sigma * zz);
    Ok(out)
}

/// Forward-noises a volume to level `t`.
pub fn diffuse(y0: &Volume, t: usize, eps: &Volume, schedule: &NoiseSchedule) -> Result<Volume> {
    let data = diffuse_arr(y0.data(), t, eps.data(), schedule)?;
    Volume::from_parts(data, y0.meta().clone())
}

/// Applies one reverse step to a volume. `z` must be all-zeros at `t = 1`.
pub fn reverse_step(
    y_t: &Volume,
    eps_hat: &Volume,
    t: usize,
    z: &Volume,
    schedule: &NoiseSchedule,
) -> Result<Volume> {
    let data = reverse_step_arr(y_t.data(), eps_hat.data(), t, z.data(), schedule)?;
    Volume::from_parts(data, y_t.meta().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn toy() -> NoiseSchedule {
        NoiseSchedule::linear(4, 0.1, 0.4).unwrap()
    }

    #[test]
    fn linear_betas_interpolate_endpoints() {
        let s = toy();
        let expect = [0.1, 0.2, 0.3, 0.4];
        for (t, e) in (1..=4).zip(expect) {
            assert!((s.beta(t) - e).abs() < 1e-15, "beta({t})");
        }
    }

    #[test]
    fn alpha_bars_match_direct_product() {
        // independent oracle: recompute each alpha_bar from scratch
        let s = toy();
        let expect = [0.9, 0.72, 0.504, 0.3024];
        for (t, e) in (1..=4).zip(expect) {
            let direct: f64 = (1..=t).map(|i| 1.0 - s.beta(i)).product();
            assert!((s.alpha_bar(t) - direct).abs() < 1e-15);
            assert!((s.alpha_bar(t) - e).abs() < 1e-12, "alpha_bar({t})");
        }
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn default_schedule_has_1000_steps() {
        assert_eq!(NoiseSchedule::default_linear().steps(), 1000);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::linear(1, 0.1, 0.4).is_err());
        assert!(NoiseSchedule::linear(10, 0.4, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.4).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn diffuse_noise_free_is_pure_rescale() {
        let s = toy();
        let y0 = Volume::new(Array3::from_elem((3, 4, 5), 2.0)).unwrap();
        let eps = Volume::zeros((3, 4, 5));
        for t in 1..=4 {
            let y = diffuse(&y0, t, &eps, &s).unwrap();
            let want = (s.alpha_bar(t).sqrt() * 2.0) as f32;
            for &v in y.data() {
                assert!((v - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn diffuse_constant_example() {
        // hand evaluation at t=2 on the toy schedule: sqrt(0.72) + sqrt(0.28)
        let s = toy();
        let y0 = Volume::new(Array3::from_elem((2, 2, 2), 1.0)).unwrap();
        let eps = Volume::new(Array3::from_elem((2, 2, 2), 1.0)).unwrap();
        let y = diffuse(&y0, 2, &eps, &s).unwrap();
        for &v in y.data() {
            assert!((v - 1.377_68).abs() < 1e-5, "got {v}");
        }
    }

    #[test]
    fn reverse_step_constant_example() {
        // hand evaluation of the reverse step at t=2 (toy schedule)
        let s = toy();
        let y2 = Volume::new(Array3::from_elem((2, 2, 2), 1.377_68)).unwrap();
        let eps_hat = Volume::new(Array3::from_elem((2, 2, 2), 1.0)).unwrap();
        let z = Volume::zeros((2, 2, 2));
        let y1 = reverse_step(&y2, &eps_hat, 2, &z, &s).unwrap();
        let want = (1.0 / 0.8f64.sqrt()) * (1.377_68 - (0.2 / 0.28f64.sqrt()));
        assert!((want - 1.117_716).abs() < 1e-5);
        for &v in y1.data() {
            assert!((v as f64 - want).abs() < 1e-5, "got {v}");
        }
    }

    #[test]
    fn reverse_step_zero_prediction_is_rescale() {
        let s = toy();
        let y = Volume::new(Array3::from_elem((2, 2, 2), 0.5)).unwrap();
        let zero = Volume::zeros((2, 2, 2));
        let out = reverse_step(&y, &zero, 3, &zero, &s).unwrap();
        let want = 0.5 / s.alpha(3).sqrt() as f32;
        for &v in out.data() {
            assert!((v - want).abs() < 1e-6);
        }
    }

    #[test]
    fn t1_round_trip_recovers_y0() {
        use rand::SeedableRng;
        let s = NoiseSchedule::default_linear();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let y0 = Volume::random_normal((6, 5, 4), &mut rng);
        let eps = Volume::random_normal((6, 5, 4), &mut rng);
        let y1 = diffuse(&y0, 1, &eps, &s).unwrap();
        let z = Volume::zeros((6, 5, 4));
        let back = reverse_step(&y1, &eps, 1, &z, &s).unwrap();
        let max_ref = y0.data().iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1.0);
        for (a, b) in back.data().iter().zip(y0.data()) {
            assert!((a - b).abs() / max_ref < 1e-5);
        }
    }

    #[test]
    fn out_of_range_t_rejected() {
        let s = toy();
        let v = Volume::zeros((2, 2, 2));
        assert!(matches!(
            diffuse(&v, 0, &v.clone(), &s),
            Err(Error::TimestepOutOfRange { .. })
        ));
        assert!(matches!(
            diffuse(&v, 5, &v.clone(), &s),
            Err(Error::TimestepOutOfRange { .. })
        ));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let s = toy();
        let a = Volume::zeros((2, 2, 2));
        let b = Volume::zeros((2, 2, 3));
        assert!(matches!(diffuse(&a, 1, &b, &s), Err(Error::ShapeMismatch(_))));
    }
}
