use std::path::Path;

use synthrad_core::checkpoint::{restore_classifier, restore_diffusion, restore_gan, Checkpoint};
use synthrad_core::data::{encode_pgm, Prompt, Vocabulary};
use synthrad_core::diffusion;
use synthrad_core::pggan::{derive_class_latents, Generator};
use synthrad_core::{Error, Rng, Tensor};

use crate::args::{ImageFormat, SampleArgs};
use crate::config::RunConfig;
use crate::dataset::{create_dir, write_file};
use crate::error::{CliError, CliResult};

/// Vocabulary tokens close to `token`, nearest first.
pub fn suggest_tokens(token: &str, vocabulary: &Vocabulary) -> Vec<String> {
    let mut scored: Vec<(usize, &String)> = vocabulary
        .tokens()
        .iter()
        .map(|t| (strsim::levenshtein(token, t), t))
        .filter(|(d, t)| *d <= 2.max(t.len() / 3))
        .collect();
    scored.sort();
    scored.into_iter().take(3).map(|(_, t)| t.clone()).collect()
}

/// Rejects unknown prompt tokens with suggestions and the full vocabulary.
pub(crate) fn check_prompt(prompt: &Prompt, vocabulary: &Vocabulary) -> CliResult<()> {
    for token in prompt.tokens() {
        if vocabulary.token_id(token).is_err() {
            let near = suggest_tokens(token, vocabulary);
            let hint = if near.is_empty() {
                String::new()
            } else {
                format!("; did you mean {}?", near.iter().map(|t| format!("{t:?}")).collect::<Vec<_>>().join(" or "))
            };
            return Err(Error::data(
                "prompt",
                format!(
                    "unknown token {token:?}{hint} vocabulary: {}",
                    vocabulary.tokens().join(", ")
                ),
            )
            .into());
        }
    }
    Ok(())
}

pub(crate) fn encode(image: &Tensor, format: ImageFormat) -> CliResult<Vec<u8>> {
    match format {
        ImageFormat::Pgm => Ok(encode_pgm(image)?),
        #[cfg(feature = "png")]
        ImageFormat::Png => Ok(synthrad_core::data::encode_png(image)?),
        #[cfg(not(feature = "png"))]
        ImageFormat::Png => Err(CliError::usage("this build has no PNG support; use --format pgm")),
    }
}

/// GAN images for a prompt: unconditional for an empty prompt, otherwise
/// perturbations of the class latent found with `scorer`.
pub(crate) fn gan_images(
    gen: &Generator,
    prompt: &Prompt,
    scorer: Option<&Path>,
    n_probe: usize,
    spread: f32,
    count: usize,
    rng: &mut Rng,
) -> CliResult<Vec<Tensor>> {
    let dim = gen.config().latent_dim;
    let z = if prompt.tokens().is_empty() {
        rng.normal_vec(count * dim)
    } else {
        let findings = prompt.findings();
        let class = match (&findings[..], prompt.position()) {
            ([f], None) if prompt.tokens().len() == 1 => *f,
            _ => return Err(CliError::usage("GAN prompts must name exactly one finding and no position")),
        };
        let scorer = scorer.ok_or_else(|| CliError::usage("a GAN prompt needs --scorer <classifier checkpoint>"))?;
        let classifier = restore_classifier(&Checkpoint::load(scorer)?)?;
        let latent = derive_class_latents(gen, &classifier, class, n_probe, rng)?.latent;
        (0..count)
            .flat_map(|_| latent.iter().map(|m| *m + spread * rng.normal()).collect::<Vec<_>>())
            .collect()
    };
    let images = gen.generate(&Tensor::new(vec![count, dim], z)?, 1.0)?;
    (0..count).map(|i| Ok(images.batch_item(i)?)).collect()
}

pub fn sample(args: &SampleArgs) -> CliResult<()> {
    let mut config = RunConfig::load_or_default(args.common.config.as_deref())?;
    let seed = config.resolve_seed(args.common.seed)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let prompt = Prompt::parse(&args.prompt);
    let images = match ck.kind.as_str() {
        "diffusion" => {
            let trainer = restore_diffusion(&ck)?;
            check_prompt(&prompt, &Vocabulary::default())?;
            diffusion::sample(&trainer.net, &trainer.schedule, &prompt, seed, args.count)?
        }
        "pggan" => {
            let trainer = restore_gan(&ck)?;
            check_prompt(&prompt, &Vocabulary::default())?;
            let mut rng = Rng::seed_from_u64(seed);
            gan_images(
                &trainer.gen,
                &prompt,
                args.scorer.as_deref(),
                config.pggan.n_probe,
                config.pggan.spread,
                args.count,
                &mut rng,
            )?
        }
        other => {
            return Err(CliError::usage(format!(
                "{}: a {other} checkpoint cannot generate images",
                args.checkpoint.display()
            )))
        }
    };
    create_dir(&args.out)?;
    let stem = if prompt.tokens().is_empty() { "sample".to_string() } else { prompt.file_stem() };
    let ext = match args.format {
        ImageFormat::Pgm => "pgm",
        ImageFormat::Png => "png",
    };
    for (i, image) in images.iter().enumerate() {
        write_file(&args.out.join(format!("{stem}_{i:03}.{ext}")), &encode(image, args.format)?)?;
    }
    println!("wrote {} images to {}", images.len(), args.out.display());
    Ok(())
}
