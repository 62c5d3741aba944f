//! Noise schedule, forward process, DDIM sampler and the toy denoiser.

mod denoiser;
mod sampler;
mod train;

pub use denoiser::{DenoiserCache, ModelGrads, PromptKind, ToyDenoiser, ToyModel, MlpWeights, PaletteEntry};
pub use sampler::{sample, sample_with, GenerationResult, SampleOptions};
pub use train::{
    default_palette, generate_canvas, make_batch, rec_loss, train_toy, Canvas, DatasetConfig, ExampleSubject, TrainConfig, TrainExample, TrainReport,
};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Linear β schedule and its cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Schedule {
    /// Number of training timesteps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Rebuilds a schedule from stored betas, re-validating them.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Invalid("schedule needs T >= 1".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) || betas.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Invalid("betas must be non-decreasing within (0, 1)".into()));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Schedule { betas, alpha_bars })
    }
}

/// Linear β interpolation from `beta_start` to `beta_end` over `T` steps.
pub fn make_schedule(t_total: usize, beta_start: f64, beta_end: f64) -> Result<Schedule> {
    if t_total == 0 {
        return Err(Error::Invalid("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Invalid(format!("need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")));
    }
    let betas = (0..t_total)
        .map(|i| {
            if t_total == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_total - 1) as f64
            }
        })
        .collect();
    Schedule::from_betas(betas)
}

/// `z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·ε`.
pub fn forward_diffuse(z0: &Matrix, t: usize, eps: &Matrix, schedule: &Schedule) -> Result<Matrix> {
    if t == 0 || t > schedule.len() {
        return Err(Error::Invalid(format!("timestep {t} outside 1..={}", schedule.len())));
    }
    if z0.shape() != eps.shape() {
        return Err(Error::shape("forward_diffuse", format!("z0 {:?} vs eps {:?}", z0.shape(), eps.shape())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = z0.scale(a);
    out.add_scaled_assign(eps, b)?;
    Ok(out)
}

/// One deterministic (η = 0) DDIM update from `t` to `t_prev`.
pub fn ddim_step(z_t: &Matrix, eps_hat: &Matrix, t: usize, t_prev: usize, schedule: &Schedule) -> Result<Matrix> {
    if t_prev >= t || t > schedule.len() {
        return Err(Error::Invalid(format!("DDIM step needs T >= t > t_prev >= 0, got t={t}, t_prev={t_prev}")));
    }
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::shape("ddim_step", format!("z_t {:?} vs eps {:?}", z_t.shape(), eps_hat.shape())));
    }
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let mut x0 = z_t.clone();
    x0.add_scaled_assign(eps_hat, -(1.0 - ab).sqrt())?;
    let x0 = x0.scale(1.0 / ab.sqrt());
    if t_prev == 0 {
        return Ok(x0);
    }
    let mut out = x0.scale(ab_prev.sqrt());
    out.add_scaled_assign(eps_hat, (1.0 - ab_prev).sqrt())?;
    Ok(out)
}

/// Evenly strided `(t, t_prev)` pairs from `T` down to 0 in `steps` updates.
pub fn timesteps(t_total: usize, steps: usize) -> Result<Vec<(usize, usize)>> {
    if steps == 0 || steps > t_total {
        return Err(Error::Invalid(format!("steps must be in 1..={t_total}, got {steps}")));
    }
    Ok((1..=steps).rev().map(|k| (k * t_total / steps, (k - 1) * t_total / steps)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(make_schedule(10, 0.0, 0.0).is_err());
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        assert!(Schedule::from_betas(vec![0.2, 0.1]).is_err());
    }

    #[test]
    fn default_schedule_matches_product_oracle() {
        let s = make_schedule(200, 1e-4, 0.02).unwrap();
        let mut prod = 1.0;
        for t in 1..=200 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 199.0);
        }
        assert!((s.alpha_bar(200) - prod).abs() < 1e-12);
        assert!((s.beta(200) - 0.02).abs() < 1e-15);
        for t in 1..=200 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn forward_diffuse_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = gaussian(&mut rng, 4, 3);
        let eps = gaussian(&mut rng, 4, 3);
        // β tiny enough that ᾱ rounds to 1 in f64.
        let s = make_schedule(1, 1e-17, 1e-17).unwrap();
        assert_eq!(forward_diffuse(&z0, 1, &eps, &s).unwrap(), z0);
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let zt = forward_diffuse(&Matrix::zeros(4, 3), 30, &eps, &s).unwrap();
        assert!(zt.max_abs_diff(&eps.scale((1.0 - s.alpha_bar(30)).sqrt())) < 1e-15);
        assert!(forward_diffuse(&z0, 0, &eps, &s).is_err());
        assert!(forward_diffuse(&z0, 51, &eps, &s).is_err());
    }

    #[test]
    fn forward_variance_matches_monte_carlo() {
        let s = make_schedule(200, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 20_000;
        let z0 = Matrix::from_vec(n, 1, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
        let z0 = z0.scale(2.0);
        let eps = gaussian(&mut rng, n, 1);
        let t = 120;
        let zt = forward_diffuse(&z0, t, &eps, &s).unwrap();
        let ab = s.alpha_bar(t);
        let expect = ab * 4.0 + (1.0 - ab);
        let mean = zt.as_slice().iter().sum::<f64>() / n as f64;
        let var = zt.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Sample variance of a Gaussian has sd σ²·√(2/(n−1)).
        let sd = expect * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - expect).abs() < 3.0 * sd, "var {var} vs {expect}");
    }

    #[test]
    fn ddim_inverts_forward_with_true_noise() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = gaussian(&mut rng, 5, 3);
        let eps = gaussian(&mut rng, 5, 3);
        let zt = forward_diffuse(&z0, 77, &eps, &s).unwrap();
        assert!(ddim_step(&zt, &eps, 77, 0, &s).unwrap().max_abs_diff(&z0) < 1e-10);
        let mid = ddim_step(&zt, &eps, 77, 40, &s).unwrap();
        assert!(mid.max_abs_diff(&forward_diffuse(&z0, 40, &eps, &s).unwrap()) < 1e-12);
        assert!(ddim_step(&zt, &eps, 40, 40, &s).is_err());
        assert!(ddim_step(&zt, &eps, 101, 3, &s).is_err());
    }

    #[test]
    fn strided_timesteps() {
        assert_eq!(timesteps(10, 5).unwrap(), vec![(10, 8), (8, 6), (6, 4), (4, 2), (2, 0)]);
        assert_eq!(timesteps(200, 50).unwrap().len(), 50);
        assert_eq!(timesteps(7, 7).unwrap().last(), Some(&(1, 0)));
        assert_eq!(timesteps(10, 3).unwrap(), vec![(10, 6), (6, 3), (3, 0)]);
        assert!(timesteps(10, 0).is_err());
        assert!(timesteps(10, 11).is_err());
    }
}
