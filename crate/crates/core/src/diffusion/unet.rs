//! Small conditional U-Net predicting the noise in `x_t`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{Prompt, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, GroupNorm, Linear, ParamId, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Square image side; must be divisible by `2^(widths.len() - 1)`.
    pub resolution: usize,
    /// Channel width per level, finest first. Length 3 gives two
    /// downsampling stages.
    pub widths: Vec<usize>,
    /// Sinusoidal timestep embedding size.
    pub time_dim: usize,
    /// Shared width of the time and condition embeddings.
    pub embed_dim: usize,
    pub groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            resolution: 28,
            widths: vec![16, 32, 32],
            time_dim: 32,
            embed_dim: 64,
            groups: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.widths.len()) {
            return Err(Error::Config("denoiser needs 2 to 4 width levels".into()));
        }
        let factor = 1 << (self.widths.len() - 1);
        if self.resolution == 0 || self.resolution % factor != 0 {
            return Err(Error::Config(format!(
                "resolution {} not divisible by {factor}",
                self.resolution
            )));
        }
        if self.widths.contains(&0) || self.groups == 0 {
            return Err(Error::Config("widths and group count must be positive".into()));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 || self.embed_dim == 0 {
            return Err(Error::Config("time_dim must be even and embed_dim positive".into()));
        }
        Ok(())
    }
}

/// Anything that predicts ε from `(x_t, t, prompt tokens)`.
pub trait NoisePredictor {
    fn vocabulary(&self) -> &Vocabulary;
    /// `[C, H, W]` of one image.
    fn image_shape(&self) -> [usize; 3];
    /// `x_t: [N, C, H, W]`, one timestep and token list per batch item.
    fn predict(&self, x_t: &Tensor, steps: &[usize], tokens: &[Vec<usize>]) -> Result<Tensor>;
}

/// Pre-activation residual block:
/// `x + conv(SiLU(GN(conv(SiLU(GN(x))) + emb)))`, with a 1×1 projection on
/// the skip path when the width changes.
#[derive(Clone, Debug)]
struct Block {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl Block {
    fn new(p: &mut Params, name: &str, cin: usize, cout: usize, cfg: &DenoiserConfig, rng: &mut Rng) -> Self {
        Self {
            norm1: GroupNorm::new(p, &format!("{name}.norm1"), cin, group_count(cin, cfg.groups)),
            conv1: Conv2d::new(p, &format!("{name}.conv1"), cin, cout, 3, 1.0, rng),
            emb: Linear::new(p, &format!("{name}.emb"), cfg.embed_dim, cout, 1.0, rng),
            norm2: GroupNorm::new(p, &format!("{name}.norm2"), cout, group_count(cout, cfg.groups)),
            conv2: Conv2d::new(p, &format!("{name}.conv2"), cout, cout, 3, 1.0, rng),
            skip: (cin != cout).then(|| Conv2d::new(p, &format!("{name}.skip"), cin, cout, 1, 1.0, rng)),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, emb: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let h = tape.silu(h);
        let h = self.conv1.forward(tape, p, h)?;
        let e = self.emb.forward(tape, p, emb)?;
        let h = tape.add_channel_vec(h, e)?;
        let h = self.norm2.forward(tape, p, h)?;
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, p, h)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(tape, p, x)?,
            None => x,
        };
        tape.add(h, skip)
    }
}

/// Largest divisor of `channels` not above `wanted`.
fn group_count(channels: usize, wanted: usize) -> usize {
    (1..=wanted.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct DenoiserNet {
    config: DenoiserConfig,
    vocabulary: Vocabulary,
    params: Params,
    tokens: ParamId,
    time1: Linear,
    time2: Linear,
    stem: Conv2d,
    down: Vec<Block>,
    mid: Block,
    up: Vec<Block>,
    head_norm: GroupNorm,
    head: Conv2d,
}

impl DenoiserNet {
    pub fn new(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let vocabulary = Vocabulary::default();
        let mut p = Params::new();
        let c = &config;
        let e = c.embed_dim;
        let tokens = p.add("cond.table", Tensor::randn(&[vocabulary.len(), e], 0.5, rng));
        let time1 = Linear::new(&mut p, "time.fc1", c.time_dim, e, 1.0, rng);
        let time2 = Linear::new(&mut p, "time.fc2", e, e, 1.0, rng);
        let w = &c.widths;
        let stem = Conv2d::new(&mut p, "stem", 1, w[0], 3, 1.0, rng);
        let levels = w.len() - 1;
        let mut down = Vec::new();
        for i in 0..levels {
            let cin = if i == 0 { w[0] } else { w[i - 1] };
            down.push(Block::new(&mut p, &format!("down{i}"), cin, w[i], c, rng));
        }
        let mid = Block::new(&mut p, "mid", w[levels - 1], w[levels], c, rng);
        let mut up = Vec::new();
        for i in (0..levels).rev() {
            up.push(Block::new(&mut p, &format!("up{i}"), w[i + 1] + w[i], w[i], c, rng));
        }
        let head_norm = GroupNorm::new(&mut p, "head.norm", w[0], group_count(w[0], c.groups));
        let head = Conv2d::new(&mut p, "head.conv", w[0], 1, 3, 0.1, rng);
        Ok(Self {
            config,
            vocabulary,
            params: p,
            tokens,
            time1,
            time2,
            stem,
            down,
            mid,
            up,
            head_norm,
            head,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn encode(&self, prompt: &Prompt) -> Result<Vec<usize>> {
        self.vocabulary.encode(prompt)
    }

    /// Records the network on `tape`; returns ε̂ with the shape of `x`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        steps: &[usize],
        tokens: &[Vec<usize>],
    ) -> Result<Var> {
        let n = tape.shape(x)[0];
        if steps.len() != n || tokens.len() != n {
            return Err(Error::shape(
                "denoiser",
                format!("batch {n} with {} steps and {} prompts", steps.len(), tokens.len()),
            ));
        }
        let temb = tape.constant(timestep_embedding(steps, self.config.time_dim));
        let h = self.time1.forward(tape, p, temb)?;
        let h = tape.silu(h);
        let t = self.time2.forward(tape, p, h)?;
        let cond = tape.embedding_sum(p[self.tokens], tokens.to_vec())?;
        let emb = tape.add(t, cond)?;
        let emb = tape.silu(emb);

        let mut h = self.stem.forward(tape, p, x)?;
        let mut skips = Vec::new();
        for (i, block) in self.down.iter().enumerate() {
            if i > 0 {
                h = tape.avg_pool2x(h)?;
            }
            h = block.forward(tape, p, h, emb)?;
            skips.push(h);
        }
        h = tape.avg_pool2x(h)?;
        h = self.mid.forward(tape, p, h, emb)?;
        for block in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = tape.upsample2x(h)?;
            h = tape.concat_channels(h, skip)?;
            h = block.forward(tape, p, h, emb)?;
        }
        let h = self.head_norm.forward(tape, p, h)?;
        let h = tape.silu(h);
        self.head.forward(tape, p, h)
    }
}

impl NoisePredictor for DenoiserNet {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    fn image_shape(&self) -> [usize; 3] {
        [1, self.config.resolution, self.config.resolution]
    }

    fn predict(&self, x_t: &Tensor, steps: &[usize], tokens: &[Vec<usize>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(x_t.clone());
        let out = self.forward(&mut tape, &bound, x, steps, tokens)?;
        Ok(tape.value(out).clone())
    }
}

/// `[sin(t·f_0), …, sin(t·f_{k−1}), cos(t·f_0), …]` with
/// `f_i = 10000^(−i/k)`, `k = dim/2`.
pub fn timestep_embedding(steps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let t = t as f64;
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        data.extend(freqs.clone().map(|f| (t * f).sin() as f32));
        data.extend(freqs.map(|f| (t * f).cos() as f32));
    }
    Tensor::new(vec![steps.len(), dim], data).expect("embedding shape")
}
