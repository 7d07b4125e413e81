use crate::autodiff::Tape;
use crate::data::{downsample, TrainSet};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::nets::{grow, Discriminator, GanConfig, Generator};
use super::GrowthSchedule;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanStepLog {
    pub step: u64,
    pub stage: usize,
    pub resolution: usize,
    pub alpha: f32,
    pub loss_d: f64,
    pub loss_g: f64,
}

/// Real images resized for one stage: current resolution and, for the
/// fade-in blend, the half-resolution version upsampled back.
struct StageImages {
    stage: usize,
    sharp: Vec<Tensor>,
    coarse: Vec<Tensor>,
}

/// Alternating discriminator/generator training over a growth schedule.
/// Both optimisers restart after every grow.
pub struct GanTrainer {
    pub gen: Generator,
    pub disc: Discriminator,
    pub schedule: GrowthSchedule,
    pub adam: AdamConfig,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
    pub rng: Rng,
    pub batch_size: usize,
    pub step: u64,
    /// Steps completed in the current stage.
    pub stage_step: u64,
    cache: Option<StageImages>,
}

impl GanTrainer {
    pub fn new(
        config: GanConfig,
        schedule: GrowthSchedule,
        adam: AdamConfig,
        batch_size: usize,
        mut rng: Rng,
    ) -> Result<Self> {
        schedule.validate()?;
        if schedule.stages.len() > config.channels.len() {
            return Err(Error::Config(format!(
                "{} growth stages but only {} channel widths",
                schedule.stages.len(),
                config.channels.len()
            )));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let gen = Generator::new(config.clone(), &mut rng)?;
        let disc = Discriminator::new(config, &mut rng)?;
        let opt_g = AdamState::new(adam, gen.params());
        let opt_d = AdamState::new(adam, disc.params());
        Ok(Self {
            gen,
            disc,
            schedule,
            adam,
            opt_g,
            opt_d,
            rng,
            batch_size,
            step: 0,
            stage_step: 0,
            cache: None,
        })
    }

    pub fn stage(&self) -> usize {
        self.gen.stage()
    }

    /// Fade coefficient: `stage_step / steps_fade` while fading, else 1.
    pub fn alpha(&self) -> f32 {
        let stage = self.stage();
        let fade = self.schedule.stages[stage].steps_fade;
        if stage == 0 || fade == 0 || self.stage_step >= fade {
            1.0
        } else {
            (self.stage_step as f64 / fade as f64) as f32
        }
    }

    pub fn finished(&self) -> bool {
        self.step >= self.schedule.total_steps()
    }

    /// Grows both networks (fresh parameters drawn from the trainer's stream)
    /// and resets the optimisers.
    pub fn grow(&mut self) -> Result<()> {
        grow(&mut self.gen, &mut self.disc, &mut self.rng)?;
        self.stage_step = 0;
        self.opt_g = AdamState::new(self.adam, self.gen.params());
        self.opt_d = AdamState::new(self.adam, self.disc.params());
        Ok(())
    }

    fn stage_images(&mut self, data: &[Tensor]) -> Result<&StageImages> {
        let stage = self.stage();
        if self.cache.as_ref().is_none_or(|c| c.stage != stage) {
            let r = self.gen.resolution();
            let mut sharp = Vec::with_capacity(data.len());
            let mut coarse = Vec::with_capacity(data.len());
            for img in data {
                sharp.push(downsample(img, r)?);
                if stage > 0 {
                    let half = downsample(img, r / 2)?;
                    coarse.push(upsample_nearest(&half));
                }
            }
            self.cache = Some(StageImages { stage, sharp, coarse });
        }
        Ok(self.cache.as_ref().expect("filled above"))
    }

    fn real_batch(&mut self, data: &[Tensor], alpha: f32) -> Result<Tensor> {
        let picks: Vec<usize> = (0..self.batch_size).map(|_| self.rng.below(data.len())).collect();
        let fading = self.stage() > 0 && alpha < 1.0;
        let images = self.stage_images(data)?;
        let mut batch = Vec::with_capacity(picks.len());
        for i in picks {
            if fading {
                let (c, s) = (&images.coarse[i], &images.sharp[i]);
                let blended = c
                    .data()
                    .iter()
                    .zip(s.data())
                    .map(|(c, s)| (1.0 - alpha) * c + alpha * s)
                    .collect();
                batch.push(Tensor::new(s.shape().to_vec(), blended)?);
            } else {
                batch.push(images.sharp[i].clone());
            }
        }
        Tensor::stack(&batch.iter().collect::<Vec<_>>())
    }

    /// One discriminator step then one generator step. Grows first when the
    /// current stage is complete.
    pub fn train_step(&mut self, data: &TrainSet<Tensor>) -> Result<GanStepLog> {
        let data = data.items();
        if data.is_empty() {
            return Err(Error::Config("empty GAN training set".into()));
        }
        let stage = self.stage();
        if stage + 1 < self.schedule.stages.len()
            && self.stage_step >= self.schedule.stages[stage].total_steps(stage == 0)
        {
            self.grow()?;
        }
        let alpha = self.alpha();
        let real = self.real_batch(data, alpha)?;
        let n = self.batch_size;
        let dim = self.gen.config().latent_dim;

        let z = Tensor::new(vec![n, dim], self.rng.normal_vec(n * dim))?;
        let mut tape = Tape::new();
        let gb = self.gen.params().bind(&mut tape, false);
        let db = self.disc.params().bind(&mut tape, true);
        let zv = tape.constant(z);
        let fake = self.gen.forward(&mut tape, &gb, zv, alpha)?;
        let rv = tape.constant(real);
        let d_real = self.disc.forward(&mut tape, &db, rv, alpha)?;
        let d_fake = self.disc.forward(&mut tape, &db, fake, alpha)?;
        let l_real = tape.bce(d_real, vec![1.0; n])?;
        let l_fake = tape.bce(d_fake, vec![0.0; n])?;
        let loss_d_var = tape.add(l_real, l_fake)?;
        let loss_d = tape.value(loss_d_var).data()[0] as f64;
        check_finite("discriminator", loss_d, self.step)?;
        let grads = tape.backward(loss_d_var)?;
        self.disc.params_mut().accumulate_grads(&grads, &db)?;
        self.opt_d.step(self.disc.params_mut())?;

        let z = Tensor::new(vec![n, dim], self.rng.normal_vec(n * dim))?;
        let mut tape = Tape::new();
        let gb = self.gen.params().bind(&mut tape, true);
        let db = self.disc.params().bind(&mut tape, false);
        let zv = tape.constant(z);
        let fake = self.gen.forward(&mut tape, &gb, zv, alpha)?;
        let d_fake = self.disc.forward(&mut tape, &db, fake, alpha)?;
        let loss_g_var = tape.bce(d_fake, vec![1.0; n])?;
        let loss_g = tape.value(loss_g_var).data()[0] as f64;
        check_finite("generator", loss_g, self.step)?;
        let grads = tape.backward(loss_g_var)?;
        self.gen.params_mut().accumulate_grads(&grads, &gb)?;
        self.opt_g.step(self.gen.params_mut())?;

        if !(self.gen.params().all_finite() && self.disc.params().all_finite()) {
            return Err(Error::Numeric(format!(
                "GAN parameters became non-finite at step {}",
                self.step + 1
            )));
        }
        self.step += 1;
        self.stage_step += 1;
        Ok(GanStepLog {
            step: self.step,
            stage,
            resolution: self.gen.resolution(),
            alpha,
            loss_d,
            loss_g,
        })
    }
}

fn check_finite(which: &str, loss: f64, step: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "{which} loss became {loss} at step {}",
            step + 1
        )))
    }
}

fn upsample_nearest(image: &Tensor) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = Vec::with_capacity(4 * h * w);
    for y in 0..2 * h {
        for x in 0..2 * w {
            out.push(image.data()[(y / 2) * w + x / 2]);
        }
    }
    Tensor::new(vec![1, 2 * h, 2 * w], out).expect("doubled shape")
}
