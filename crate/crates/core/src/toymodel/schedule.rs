use crate::autodiff::Mat;
use crate::error::{Error, Result};

/// Discrete forward-diffusion noise schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::contract("betas must be non-empty and lie in (0,1)"));
        }
        let alphas_bar = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas_bar })
    }

    /// Betas spaced linearly from `start` to `end` over `steps` steps.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    start
                } else {
                    start + (end - start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative signal fraction for 1-based step `t`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps() {
            return Err(Error::contract(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(self.alphas_bar[t - 1])
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(50, 1e-4, 0.02).expect("valid default schedule")
    }
}

/// `√ᾱ·z0 + √(1-ᾱ)·eps`.
pub fn mix(z0: &Mat, eps: &Mat, alpha_bar: f64) -> Mat {
    z0 * alpha_bar.sqrt() + eps * (1.0 - alpha_bar).sqrt()
}

pub fn add_noise(z0: &Mat, eps: &Mat, t: usize, sched: &DiffusionSchedule) -> Result<Mat> {
    if z0.dim() != eps.dim() {
        return Err(Error::contract("latent and noise shapes differ"));
    }
    Ok(mix(z0, eps, sched.alpha_bar(t)?))
}
