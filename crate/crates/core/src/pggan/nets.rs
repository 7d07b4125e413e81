use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Linear, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LEAK: f32 = 0.2;
pub const BASE_RESOLUTION: usize = 4;
/// Scores are kept inside `[SCORE_EPS, 1 − SCORE_EPS]` before any logarithm.
pub const SCORE_EPS: f32 = 1e-7;
const NEW_HEAD_GAIN: f32 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub latent_dim: usize,
    /// Feature width per stage, base stage first. Its length fixes the final
    /// resolution at `4 · 2^(len − 1)`.
    pub channels: Vec<usize>,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            channels: vec![16, 16, 8, 8],
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(
                "GAN needs a positive latent size and nonzero channel widths".into(),
            ));
        }
        Ok(())
    }

    pub fn resolution(&self, stage: usize) -> usize {
        BASE_RESOLUTION << stage
    }

    pub fn final_resolution(&self) -> usize {
        self.resolution(self.channels.len() - 1)
    }
}

fn check_alpha(alpha: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("fade coefficient {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `(1 − α)·old + α·new`, recorded as scale, scale, add.
fn fade(tape: &mut Tape, old: Var, new: Var, alpha: f32) -> Result<Var> {
    let a = tape.scale(old, 1.0 - alpha);
    let b = tape.scale(new, alpha);
    tape.add(a, b)
}

#[derive(Clone, Debug)]
struct GenStage {
    convs: Vec<Conv2d>,
    to_image: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GanConfig,
    params: Params,
    input: Linear,
    stages: Vec<GenStage>,
}

impl Generator {
    pub fn new(config: GanConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let c0 = config.channels[0];
        let area = BASE_RESOLUTION * BASE_RESOLUTION;
        let input = Linear::new(&mut params, "gen.input", config.latent_dim, c0 * area, 1.0, rng);
        let stage = GenStage {
            convs: vec![Conv2d::new(&mut params, "gen.s0.conv0", c0, c0, 3, 1.0, rng)],
            to_image: Conv2d::new(&mut params, "gen.s0.to_image", c0, 1, 1, 1.0, rng),
        };
        Ok(Self {
            config,
            params,
            input,
            stages: vec![stage],
        })
    }

    pub fn config(&self) -> &GanConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Index of the newest stage.
    pub fn stage(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution(self.stage())
    }

    fn grow(&mut self, rng: &mut Rng) -> Result<()> {
        let s = self.stages.len();
        if s >= self.config.channels.len() {
            return Err(Error::Config("schedule exhausted".into()));
        }
        let (cin, c) = (self.config.channels[s - 1], self.config.channels[s]);
        let p = &mut self.params;
        let stage = GenStage {
            convs: vec![
                Conv2d::new(p, &format!("gen.s{s}.conv0"), cin, c, 3, 1.0, rng),
                Conv2d::new(p, &format!("gen.s{s}.conv1"), c, c, 3, 1.0, rng),
            ],
            to_image: Conv2d::new(p, &format!("gen.s{s}.to_image"), c, 1, 1, NEW_HEAD_GAIN, rng),
        };
        self.stages.push(stage);
        Ok(())
    }

    fn features(&self, tape: &mut Tape, p: &Bound, stage: usize, h: Var) -> Result<Var> {
        let mut h = h;
        for conv in &self.stages[stage].convs {
            h = conv.forward(tape, p, h)?;
            h = tape.leaky_relu(h, LEAK);
        }
        Ok(h)
    }

    /// `z: [N, latent]` → images `[N, 1, r, r]` at the current stage,
    /// faded against the previous stage by `alpha`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var, alpha: f32) -> Result<Var> {
        check_alpha(alpha)?;
        let n = tape.shape(z)[0];
        let h = self.input.forward(tape, p, z)?;
        let h = tape.reshape(h, &[n, self.config.channels[0], BASE_RESOLUTION, BASE_RESOLUTION])?;
        let h = tape.leaky_relu(h, LEAK);
        let mut h = self.features(tape, p, 0, h)?;
        let mut prev = h;
        for s in 1..self.stages.len() {
            prev = h;
            let up = tape.upsample2x(h)?;
            h = self.features(tape, p, s, up)?;
        }
        let cur = self.stage();
        let new = self.stages[cur].to_image.forward(tape, p, h)?;
        if cur == 0 {
            return Ok(new);
        }
        let old = self.stages[cur - 1].to_image.forward(tape, p, prev)?;
        let old = tape.upsample2x(old)?;
        fade(tape, old, new, alpha)
    }

    /// Images for a batch of latents without recording gradients.
    pub fn generate(&self, z: &Tensor, alpha: f32) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let out = self.forward(&mut tape, &bound, zv, alpha)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Clone, Debug)]
struct DiscStage {
    from_image: Conv2d,
    convs: Vec<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: GanConfig,
    params: Params,
    stages: Vec<DiscStage>,
    output: Linear,
}

impl Discriminator {
    pub fn new(config: GanConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let c0 = config.channels[0];
        let stage = DiscStage {
            from_image: Conv2d::new(&mut params, "disc.s0.from_image", 1, c0, 1, 1.0, rng),
            convs: vec![Conv2d::new(&mut params, "disc.s0.conv0", c0, c0, 3, 1.0, rng)],
        };
        let area = BASE_RESOLUTION * BASE_RESOLUTION;
        let output = Linear::new(&mut params, "disc.output", c0 * area, 1, 1.0, rng);
        Ok(Self {
            config,
            params,
            stages: vec![stage],
            output,
        })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn stage(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution(self.stage())
    }

    fn grow(&mut self, rng: &mut Rng) -> Result<()> {
        let s = self.stages.len();
        if s >= self.config.channels.len() {
            return Err(Error::Config("schedule exhausted".into()));
        }
        let (c, cout) = (self.config.channels[s], self.config.channels[s - 1]);
        let p = &mut self.params;
        let stage = DiscStage {
            from_image: Conv2d::new(p, &format!("disc.s{s}.from_image"), 1, c, 1, NEW_HEAD_GAIN, rng),
            convs: vec![
                Conv2d::new(p, &format!("disc.s{s}.conv0"), c, c, 3, 1.0, rng),
                Conv2d::new(p, &format!("disc.s{s}.conv1"), c, cout, 3, 1.0, rng),
            ],
        };
        self.stages.push(stage);
        Ok(())
    }

    fn from_image(&self, tape: &mut Tape, p: &Bound, stage: usize, x: Var) -> Result<Var> {
        let h = self.stages[stage].from_image.forward(tape, p, x)?;
        Ok(tape.leaky_relu(h, LEAK))
    }

    /// Runs stage `s`'s convolutions; every stage above the base ends by
    /// halving the resolution.
    fn block(&self, tape: &mut Tape, p: &Bound, stage: usize, h: Var) -> Result<Var> {
        let mut h = h;
        for conv in &self.stages[stage].convs {
            h = conv.forward(tape, p, h)?;
            h = tape.leaky_relu(h, LEAK);
        }
        if stage > 0 {
            h = tape.avg_pool2x(h)?;
        }
        Ok(h)
    }

    /// Probability that each image is real, clamped to
    /// `[SCORE_EPS, 1 − SCORE_EPS]`; shape `[N, 1]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, alpha: f32) -> Result<Var> {
        check_alpha(alpha)?;
        let shape = tape.shape(x).to_vec();
        let r = self.resolution();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != r || shape[3] != r {
            return Err(Error::shape(
                "discriminator",
                format!("expects [N, 1, {r}, {r}], got {shape:?}"),
            ));
        }
        let cur = self.stage();
        let h = self.from_image(tape, p, cur, x)?;
        let mut h = self.block(tape, p, cur, h)?;
        if cur > 0 {
            let down = tape.avg_pool2x(x)?;
            let old = self.from_image(tape, p, cur - 1, down)?;
            h = fade(tape, old, h, alpha)?;
        }
        for s in (0..cur).rev() {
            h = self.block(tape, p, s, h)?;
        }
        let n = shape[0];
        let flat = tape.reshape(h, &[n, self.config.channels[0] * BASE_RESOLUTION * BASE_RESOLUTION])?;
        let logit = self.output.forward(tape, p, flat)?;
        let score = tape.sigmoid(logit);
        Ok(tape.clamp(score, SCORE_EPS, 1.0 - SCORE_EPS))
    }

    pub fn score(&self, x: &Tensor, alpha: f32) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xv, alpha)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Appends one stage to both networks; existing parameters are untouched.
pub fn grow(gen: &mut Generator, disc: &mut Discriminator, rng: &mut Rng) -> Result<()> {
    if gen.stage() != disc.stage() {
        return Err(Error::Config(format!(
            "generator at stage {} but discriminator at stage {}",
            gen.stage(),
            disc.stage()
        )));
    }
    if gen.stage() + 1 >= gen.config.channels.len() {
        return Err(Error::Config("schedule exhausted".into()));
    }
    gen.grow(rng)?;
    disc.grow(rng)
}

/// Generator output at fade coefficient `alpha`.
pub fn blended_forward(gen: &Generator, z: &Tensor, alpha: f32) -> Result<Tensor> {
    gen.generate(z, alpha)
}
