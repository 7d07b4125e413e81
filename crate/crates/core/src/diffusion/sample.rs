use crate::data::Prompt;
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::schedule::NoiseSchedule;
use super::unet::NoisePredictor;

/// Ancestral DDPM sampling of `n` images for one prompt.
///
/// `x_T ~ N(0, I)`, then for `t = T..1`:
/// `x_{t−1} = (x_t − β_t/√(1−ᾱ_t) · ε̂) / √α_t + √β_t · z`, with `z = 0` at
/// `t = 1`. The result is clamped to `[−1, 1]`.
pub fn sample(
    net: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    prompt: &Prompt,
    seed: u64,
    n: usize,
) -> Result<Vec<Tensor>> {
    let ids = net.vocabulary().encode(prompt)?;
    let mut rng = Rng::seed_from_u64(seed);
    let [c, h, w] = net.image_shape();
    let per = c * h * w;
    let tokens = vec![ids; n];
    let mut x: Vec<f64> = (0..n * per).map(|_| rng.normal_f64()).collect();
    for t in (1..=schedule.steps()).rev() {
        let current = Tensor::new(vec![n, c, h, w], x.iter().map(|v| *v as f32).collect())?;
        let eps = net.predict(&current, &vec![t; n], &tokens)?;
        let (alpha, beta, ab) = (schedule.alpha(t), schedule.beta(t), schedule.alpha_bar(t));
        let coef = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / alpha.sqrt();
        let sigma = beta.sqrt();
        for (xi, e) in x.iter_mut().zip(eps.data()) {
            *xi = inv * (*xi - coef * *e as f64);
        }
        if t > 1 {
            for xi in x.iter_mut() {
                *xi += sigma * rng.normal_f64();
            }
        }
    }
    x.chunks(per)
        .map(|img| {
            Tensor::new(
                vec![c, h, w],
                img.iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect(),
            )
        })
        .collect()
}
