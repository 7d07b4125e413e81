use synthrad_core::checkpoint::{restore_diffusion, restore_gan, Checkpoint};
use synthrad_core::data::{prompt_from_findings, Finding, Position, PromptedExample};
use synthrad_core::diffusion;
use synthrad_core::eval::{label_of, run_augmentation_experiment, ExperimentConfig, RowSpec};
use synthrad_core::{Error, Result, Rng, Tensor};

use super::sample::gan_images;
use crate::args::{ExperimentArgs, SynthSource};
use crate::config::RunConfig;
use crate::dataset::{create_dir, load_prepared, write_file};
use crate::error::{CliError, CliResult};

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_TEXT: &str = "results.txt";

const SAMPLE_CHUNK: usize = 64;

fn experiment_config(config: &mut RunConfig, args: &ExperimentArgs, seed: u64) -> CliResult<ExperimentConfig> {
    let e = &mut config.experiment;
    if let Some(rows) = &args.rows {
        e.rows = rows.clone();
    }
    if let Some(d) = &args.disease {
        e.disease = d.clone();
    }
    e.test_size = args.test_size.unwrap_or(e.test_size);
    config.classifier.epochs = args.epochs.unwrap_or(config.classifier.epochs);
    let disease = Finding::from_label(&e.disease)
        .ok_or_else(|| CliError::usage(format!("unknown disease {:?}", e.disease)))?;
    let rows = RowSpec::parse_list(&e.rows).map_err(|err| CliError::usage(err.to_string()))?;
    let exp = ExperimentConfig {
        disease,
        rows,
        test_size: e.test_size,
        classifier: config.classifier.clone(),
        seed,
    };
    exp.validate()?;
    Ok(exp)
}

pub fn experiment(args: &ExperimentArgs) -> CliResult<()> {
    let mut config = RunConfig::load_or_default(args.common.config.as_deref())?;
    let seed = config.resolve_seed(args.common.seed)?;
    let exp = experiment_config(&mut config, args, seed)?;
    let checkpoint = match args.synth_source {
        SynthSource::Diffusion | SynthSource::Pggan => Some(Checkpoint::load(args.checkpoint.as_deref().ok_or_else(
            || CliError::usage("--synth-source diffusion and pggan need --checkpoint <path>"),
        )?)?),
        SynthSource::Replay | SynthSource::Noise => None,
    };
    if args.synth_source == SynthSource::Pggan && args.scorer.is_none() {
        return Err(CliError::usage("--synth-source pggan needs --scorer <classifier checkpoint>"));
    }
    let data = load_prepared(&args.data)?;
    let table = match (args.synth_source, checkpoint) {
        (SynthSource::Diffusion, Some(ck)) => {
            let trainer = restore_diffusion(&ck)?;
            let positions = args.positions;
            let mut source = |class: Finding, n: usize, rng: &mut Rng| -> Result<Vec<Tensor>> {
                let mut out = Vec::with_capacity(n);
                if positions {
                    for _ in 0..n {
                        let pos = Position::all().nth(rng.below(9));
                        let prompt = prompt_from_findings(&[class], pos)?;
                        out.extend(diffusion::sample(&trainer.net, &trainer.schedule, &prompt, rng.next_u64(), 1)?);
                    }
                } else {
                    let prompt = prompt_from_findings(&[class], None)?;
                    while out.len() < n {
                        let k = SAMPLE_CHUNK.min(n - out.len());
                        out.extend(diffusion::sample(&trainer.net, &trainer.schedule, &prompt, rng.next_u64(), k)?);
                    }
                }
                Ok(out)
            };
            run_augmentation_experiment(&exp, &mut source, &data.train, &data.test)?
        }
        (SynthSource::Pggan, Some(ck)) => {
            let trainer = restore_gan(&ck)?;
            let scorer = args.scorer.clone();
            let (n_probe, spread) = (config.pggan.n_probe, config.pggan.spread);
            let mut source = |class: Finding, n: usize, rng: &mut Rng| -> Result<Vec<Tensor>> {
                let prompt = prompt_from_findings(&[class], None)?;
                gan_images(&trainer.gen, &prompt, scorer.as_deref(), n_probe, spread, n, rng).map_err(|e| match e {
                    CliError::Core(e) => e,
                    CliError::Usage(m) => Error::Config(m),
                })
            };
            run_augmentation_experiment(&exp, &mut source, &data.train, &data.test)?
        }
        (SynthSource::Replay, _) => {
            let classes = exp.classes();
            let pools: Vec<Vec<&PromptedExample>> = (0..2)
                .map(|l| {
                    data.train
                        .items()
                        .iter()
                        .filter(|e| label_of(&e.prompt, &classes) == Some(l))
                        .collect()
                })
                .collect();
            let mut source = |class: Finding, n: usize, rng: &mut Rng| -> Result<Vec<Tensor>> {
                let pool = &pools[classes.iter().position(|c| *c == class).expect("class from config")];
                if pool.is_empty() {
                    return Err(Error::data("replay", format!("no {class} images to replay")));
                }
                Ok((0..n).map(|_| pool[rng.below(pool.len())].image.clone()).collect())
            };
            run_augmentation_experiment(&exp, &mut source, &data.train, &data.test)?
        }
        (SynthSource::Noise, _) => {
            let shape = data
                .train
                .items()
                .first()
                .ok_or_else(|| Error::data("experiment", "training partition is empty"))?
                .image
                .shape()
                .to_vec();
            let mut source = |_: Finding, n: usize, rng: &mut Rng| -> Result<Vec<Tensor>> {
                (0..n)
                    .map(|_| {
                        let t = Tensor::randn(&shape, 1.0, rng);
                        Tensor::new(shape.clone(), t.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect())
                    })
                    .collect()
            };
            run_augmentation_experiment(&exp, &mut source, &data.train, &data.test)?
        }
        _ => unreachable!("generator sources load a checkpoint above"),
    };
    create_dir(&args.out)?;
    write_file(&args.out.join(RESULTS_CSV), table.to_csv().as_bytes())?;
    let text = table.to_text();
    write_file(&args.out.join(RESULTS_TEXT), text.as_bytes())?;
    print!("{text}");
    Ok(())
}
