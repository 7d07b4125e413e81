use crate::data::Finding;
use crate::error::{Error, Result};
use crate::eval::Classify;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::nets::Generator;

const PROBE_BATCH: usize = 64;

/// Mean latent of generator samples the classifier most associates with a class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassLatent {
    pub class: Finding,
    pub latent: Vec<f32>,
    /// Latents averaged into `latent`.
    pub count: usize,
}

/// Draws `n_probe` latents, scores their images, keeps the top tenth
/// (rounded up) by the probability of `class` and averages them. Ties keep
/// draw order.
pub fn derive_class_latents(
    gen: &Generator,
    scorer: &impl Classify,
    class: Finding,
    n_probe: usize,
    rng: &mut Rng,
) -> Result<ClassLatent> {
    if n_probe < 10 {
        return Err(Error::Config(format!("n_probe must be at least 10, got {n_probe}")));
    }
    let index = scorer
        .classes()
        .iter()
        .position(|c| *c == class)
        .ok_or_else(|| Error::Config(format!("scorer has no class {class}")))?;
    let dim = gen.config().latent_dim;
    let mut latents = Vec::with_capacity(n_probe);
    let mut scores = Vec::with_capacity(n_probe);
    while latents.len() < n_probe {
        let n = PROBE_BATCH.min(n_probe - latents.len());
        let z = rng.normal_vec(n * dim);
        let images = gen.generate(&Tensor::new(vec![n, dim], z.clone())?, 1.0)?;
        for (row, probs) in z.chunks(dim).zip(scorer.probabilities(&images)?) {
            latents.push(row.to_vec());
            scores.push(probs[index]);
        }
    }
    let mut order: Vec<usize> = (0..n_probe).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let keep = n_probe.div_ceil(10);
    let mut mean = vec![0.0f64; dim];
    for &i in &order[..keep] {
        for (m, v) in mean.iter_mut().zip(&latents[i]) {
            *m += *v as f64;
        }
    }
    Ok(ClassLatent {
        class,
        latent: mean.into_iter().map(|m| (m / keep as f64) as f32).collect(),
        count: keep,
    })
}
