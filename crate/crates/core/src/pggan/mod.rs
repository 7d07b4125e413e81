//! Progressive-growing GAN: generator and discriminator start at 4×4 and
//! gain one resolution-doubling stage at a time, fading each new stage in
//! linearly.

mod latents;
mod nets;
mod train;

pub use latents::{derive_class_latents, ClassLatent};
pub use nets::{
    blended_forward, grow, Discriminator, GanConfig, Generator, BASE_RESOLUTION, LEAK, SCORE_EPS,
};
pub use train::{GanStepLog, GanTrainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthStage {
    pub resolution: usize,
    /// Fade-in length after the grow that created this stage. Ignored for
    /// the base stage.
    pub steps_fade: u64,
    pub steps_stable: u64,
}

impl GrowthStage {
    pub fn total_steps(&self, is_base: bool) -> u64 {
        if is_base {
            self.steps_stable
        } else {
            self.steps_fade + self.steps_stable
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthSchedule {
    pub stages: Vec<GrowthStage>,
}

impl GrowthSchedule {
    pub fn new(stages: Vec<GrowthStage>) -> Result<Self> {
        let s = Self { stages };
        s.validate()?;
        Ok(s)
    }

    /// Base 4×4 up to `final_resolution`, the same step counts at every stage.
    pub fn doubling(final_resolution: usize, steps_fade: u64, steps_stable: u64) -> Result<Self> {
        let mut stages = Vec::new();
        let mut r = BASE_RESOLUTION;
        while r <= final_resolution {
            stages.push(GrowthStage {
                resolution: r,
                steps_fade: if r == BASE_RESOLUTION { 0 } else { steps_fade },
                steps_stable,
            });
            r *= 2;
        }
        Self::new(stages)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .stages
            .first()
            .ok_or_else(|| Error::Config("growth schedule has no stages".into()))?;
        if first.resolution != BASE_RESOLUTION {
            return Err(Error::Config(format!(
                "growth schedule must start at {BASE_RESOLUTION}x{BASE_RESOLUTION}"
            )));
        }
        for w in self.stages.windows(2) {
            if w[1].resolution != 2 * w[0].resolution {
                return Err(Error::Config(format!(
                    "stage resolution {} does not double {}",
                    w[1].resolution, w[0].resolution
                )));
            }
        }
        Ok(())
    }

    pub fn final_resolution(&self) -> usize {
        self.stages.last().map_or(BASE_RESOLUTION, |s| s.resolution)
    }

    pub fn total_steps(&self) -> u64 {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| s.total_steps(i == 0))
            .sum()
    }
}

/// Discriminator and non-saturating generator losses from raw scores.
///
/// `loss_D = −mean(log d_real) − mean(log(1 − d_fake))`,
/// `loss_G = −mean(log d_fake)`; scores are clamped to
/// `[1e-7, 1 − 1e-7]` first.
pub fn gan_losses(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::Config("GAN losses need nonempty score batches".into()));
    }
    let eps = SCORE_EPS as f64;
    let clamp = |v: f64| v.clamp(eps, 1.0 - eps);
    let mean = |xs: &[f64], f: &dyn Fn(f64) -> f64| xs.iter().map(|&x| f(clamp(x))).sum::<f64>() / xs.len() as f64;
    let real = mean(d_real, &|d| -d.ln());
    let fake = mean(d_fake, &|d| -(1.0 - d).ln());
    let gen = mean(d_fake, &|d| -d.ln());
    Ok((real + fake, gen))
}
