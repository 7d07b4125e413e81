use crate::autodiff::Tape;
use crate::data::{PromptedExample, TrainSet};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::schedule::{forward_diffuse, NoiseSchedule, ScheduleConfig};
use super::unet::DenoiserNet;

/// One optimisation step on L_simple. Per example: `t ~ U{1..T}`, `ε ~ N(0, I)`.
pub fn train_step(
    batch: &[&PromptedExample],
    net: &mut DenoiserNet,
    schedule: &NoiseSchedule,
    opt: &mut AdamState,
    rng: &mut Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty diffusion batch".into()));
    }
    let mut noisy = Vec::with_capacity(batch.len());
    let mut noise = Vec::with_capacity(batch.len());
    let mut steps = Vec::with_capacity(batch.len());
    let mut tokens = Vec::with_capacity(batch.len());
    for ex in batch {
        let t = 1 + rng.below(schedule.steps());
        let eps = Tensor::new(ex.image.shape().to_vec(), rng.normal_vec(ex.image.numel()))?;
        noisy.push(forward_diffuse(&ex.image, t, &eps, schedule)?);
        noise.push(eps);
        steps.push(t);
        tokens.push(net.encode(&ex.prompt)?);
    }
    let x_t = Tensor::stack(&noisy.iter().collect::<Vec<_>>())?;
    let eps = Tensor::stack(&noise.iter().collect::<Vec<_>>())?;

    let mut tape = Tape::new();
    let bound = net.params().bind(&mut tape, true);
    let x = tape.constant(x_t);
    let target = tape.constant(eps);
    let pred = net.forward(&mut tape, &bound, x, &steps, &tokens)?;
    let loss_var = tape.mse(pred, target)?;
    let loss = tape.value(loss_var).data()[0] as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("diffusion loss became {loss}")));
    }
    let grads = tape.backward(loss_var)?;
    net.params_mut().accumulate_grads(&grads, &bound)?;
    opt.step(net.params_mut())?;
    if !net.params().all_finite() {
        return Err(Error::Numeric("denoiser parameters became non-finite".into()));
    }
    Ok(loss)
}

/// Resumable training loop state: everything needed to continue bit-exactly.
pub struct DiffusionTrainer {
    pub net: DenoiserNet,
    pub schedule_config: ScheduleConfig,
    pub schedule: NoiseSchedule,
    pub opt: AdamState,
    pub rng: Rng,
    pub step: u64,
    pub batch_size: usize,
}

impl DiffusionTrainer {
    pub fn new(
        net: DenoiserNet,
        schedule_config: ScheduleConfig,
        adam: AdamConfig,
        batch_size: usize,
        rng: Rng,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let schedule = schedule_config.build()?;
        let opt = AdamState::new(adam, net.params());
        Ok(Self {
            net,
            schedule_config,
            schedule,
            opt,
            rng,
            step: 0,
            batch_size,
        })
    }

    /// Draws a batch (with replacement) from the training partition and
    /// performs one step.
    pub fn train_step(&mut self, data: &TrainSet<PromptedExample>) -> Result<f64> {
        let items = data.items();
        if items.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let batch: Vec<&PromptedExample> = (0..self.batch_size)
            .map(|_| &items[self.rng.below(items.len())])
            .collect();
        let loss = train_step(&batch, &mut self.net, &self.schedule, &mut self.opt, &mut self.rng)?;
        self.step += 1;
        Ok(loss)
    }
}
