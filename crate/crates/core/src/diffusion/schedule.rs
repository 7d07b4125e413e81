//! Variance schedules and the closed-form forward (noising) process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of a linear β schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    /// The default endpoints rescaled by `1000 / steps`, which keeps ᾱ_T
    /// small when T is shortened.
    pub fn scaled(steps: usize) -> Self {
        let k = 1000.0 / steps as f64;
        Self {
            steps,
            beta_start: 1e-4 * k,
            beta_end: (0.02 * k).min(0.999),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Per-step β, α = 1 − β and ᾱ = Πα, indexed by `t ∈ 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit β values, `betas[0]` being β_1.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta_{} = {b} outside (0, 1)", i + 1)));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        if alpha_bars.last().is_some_and(|ab| *ab <= 0.0) {
            return Err(Error::Config("alpha_bar underflows to zero".into()));
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Config(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// β_t; panics when `t` is out of range.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }
}

/// Linear β from `beta_start` to `beta_end`, both endpoints included.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start ≤ beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let span = beta_end - beta_start;
        (0..steps)
            .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε`.
pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_step(t)?;
    forward_diffuse_with(x0, eps, schedule.alpha_bar(t))
}

/// Forward noising at an explicit ᾱ ∈ [0, 1].
pub fn forward_diffuse_with(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    check_same_shape("forward_diffuse", x0, eps)?;
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::Domain {
            op: "forward_diffuse",
            detail: format!("alpha_bar {alpha_bar} outside [0, 1]"),
        });
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(blend(x0, eps, a, b))
}

/// One step of the forward chain, `q(x_t | x_{t−1})`:
/// `x_t = √α_t · x_{t−1} + √β_t · ε`.
pub fn step_diffuse(x_prev: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_step(t)?;
    check_same_shape("step_diffuse", x_prev, eps)?;
    Ok(blend(x_prev, eps, schedule.alpha(t).sqrt(), schedule.beta(t).sqrt()))
}

fn blend(x: &Tensor, eps: &Tensor, a: f64, b: f64) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| (a * *x as f64 + b * *e as f64) as f32)
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Mean squared error between predicted and true noise.
pub fn simple_loss(eps_pred: &Tensor, eps: &Tensor) -> Result<f64> {
    check_same_shape("simple_loss", eps_pred, eps)?;
    let n = eps.numel();
    if n == 0 {
        return Err(Error::shape("simple_loss", "empty tensors".to_string()));
    }
    let sum: f64 = eps_pred
        .data()
        .iter()
        .zip(eps.data())
        .map(|(p, e)| {
            let d = *p as f64 - *e as f64;
            d * d
        })
        .sum();
    Ok(sum / n as f64)
}
