//! Cosine variance schedule and the coefficient tables derived from it.
//!
//! Index convention: `t = 0` is clean data, the model only ever sees
//! `t in 1..=T`. Per-step tables (`beta`, `alpha`, `posterior_variance`)
//! still have `T + 1` entries; slot 0 is unused and holds 0.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

pub const DEFAULT_OFFSET: f64 = 0.008;
pub const DEFAULT_TIMESTEPS: usize = 250;
pub const MAX_BETA: f64 = 0.999;

fn validate(timesteps: usize, offset: f64) -> Result<()> {
    if timesteps < 1 {
        return Err(Error::Domain("timesteps must be at least 1".into()));
    }
    if !(offset >= 0.0 && offset.is_finite()) {
        return Err(Error::Domain(format!(
            "schedule offset must be >= 0, got {offset}"
        )));
    }
    Ok(())
}

fn cosine_f(t: usize, timesteps: usize, offset: f64) -> f64 {
    let phase = (t as f64 / timesteps as f64 + offset) / (1.0 + offset) * FRAC_PI_2;
    let c = phase.cos();
    c * c
}

/// `f(t) / f(0)` with `f(t) = cos²(((t/T + s) / (1 + s)) · π/2)`.
///
/// The endpoint `t = T` is returned as exactly 0: the phase is π/2 there,
/// and `cos` of the rounded π/2 would otherwise leave a ~1e-33 residue.
pub fn cosine_alpha_bar(t: usize, timesteps: usize, offset: f64) -> Result<f64> {
    validate(timesteps, offset)?;
    if t > timesteps {
        return Err(Error::Domain(format!("t = {t} exceeds T = {timesteps}")));
    }
    if t == timesteps {
        return Ok(0.0);
    }
    if t == 0 {
        return Ok(1.0);
    }
    Ok((cosine_f(t, timesteps, offset) / cosine_f(0, timesteps, offset)).clamp(0.0, 1.0))
}

/// Precomputed schedule tables. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    timesteps: usize,
    offset: f64,
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    sqrt_alpha_bar: Vec<f64>,
    sqrt_one_minus_alpha_bar: Vec<f64>,
    posterior_variance: Vec<f64>,
    clipped: Vec<bool>,
}

impl NoiseSchedule {
    pub fn cosine(timesteps: usize, offset: f64) -> Result<Self> {
        validate(timesteps, offset)?;
        let alpha_bar = (0..=timesteps)
            .map(|t| cosine_alpha_bar(t, timesteps, offset))
            .collect::<Result<Vec<_>>>()?;
        let mut beta = vec![0.0; timesteps + 1];
        let mut clipped = vec![false; timesteps + 1];
        for t in 1..=timesteps {
            let raw = 1.0 - alpha_bar[t] / alpha_bar[t - 1];
            clipped[t] = raw > MAX_BETA;
            beta[t] = raw.min(MAX_BETA);
        }
        let mut alpha = vec![0.0; timesteps + 1];
        let mut posterior_variance = vec![0.0; timesteps + 1];
        for t in 1..=timesteps {
            alpha[t] = 1.0 - beta[t];
            posterior_variance[t] = beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]);
        }
        Ok(NoiseSchedule {
            timesteps,
            offset,
            sqrt_alpha_bar: alpha_bar.iter().map(|a| a.sqrt()).collect(),
            sqrt_one_minus_alpha_bar: alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect(),
            alpha_bar,
            beta,
            alpha,
            posterior_variance,
            clipped,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.sqrt_alpha_bar[t]
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        self.sqrt_one_minus_alpha_bar[t]
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variance[t]
    }

    /// Whether `beta(t)` hit the 0.999 ceiling.
    pub fn is_clipped(&self, t: usize) -> bool {
        self.clipped[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps {
            return Err(Error::Domain(format!(
                "timestep {t} outside 1..={}",
                self.timesteps
            )));
        }
        Ok(())
    }
}
