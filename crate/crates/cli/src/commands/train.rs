use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use synthrad_core::checkpoint::{
    restore_diffusion, restore_gan, save_classifier, save_diffusion, save_gan, Checkpoint,
};
use synthrad_core::data::{image_dims, TrainSet};
use synthrad_core::diffusion::{DenoiserNet, DiffusionTrainer, ScheduleConfig};
use synthrad_core::eval::{evaluate, label_of, train_classifier, LabeledImage};
use synthrad_core::pggan::{GanTrainer, GrowthSchedule};
use synthrad_core::{Error, Rng};

use super::{parse_findings, parse_widths};
use crate::args::{ModelKind, TrainArgs};
use crate::config::RunConfig;
use crate::dataset::{create_dir, load_prepared, write_file, Prepared};
use crate::error::{CliError, CliResult};

pub const LOSS_FILE: &str = "loss.csv";
pub const RUN_FILE: &str = "run.toml";
pub const CLASSIFIER_FILE: &str = "classifier.sxr";

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:06}.sxr")
}

fn apply_overrides(config: &mut RunConfig, args: &TrainArgs) -> CliResult<()> {
    let t = &mut config.train;
    t.steps = args.steps.unwrap_or(t.steps);
    t.batch_size = args.batch_size.unwrap_or(t.batch_size);
    t.ckpt_every = args.ckpt_every.unwrap_or(t.ckpt_every);
    if let Some(lr) = args.lr {
        match args.kind {
            ModelKind::Diffusion => config.diffusion.adam.lr = lr,
            ModelKind::Pggan => config.pggan.adam.lr = lr,
            ModelKind::Classifier => config.classifier.lr = lr,
        }
    }
    if let Some(widths) = &args.widths {
        let w = parse_widths(widths)?;
        match args.kind {
            ModelKind::Diffusion => config.diffusion.model.widths = w,
            ModelKind::Pggan => config.pggan.model.channels = w,
            ModelKind::Classifier => config.classifier.widths = w,
        }
    }
    if let Some(t) = args.timesteps {
        config.diffusion.schedule = ScheduleConfig::scaled(t);
    }
    config.pggan.steps_fade = args.steps_fade.unwrap_or(config.pggan.steps_fade);
    config.pggan.steps_stable = args.steps_stable.unwrap_or(config.pggan.steps_stable);
    config.classifier.epochs = args.epochs.unwrap_or(config.classifier.epochs);
    Ok(())
}

/// Appends rows to `loss.csv`, writing the header when the file is new.
struct LossLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl LossLog {
    fn open(path: PathBuf, header: &str, append: bool) -> CliResult<Self> {
        let fresh = !append || !path.exists();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut log = Self {
            out: BufWriter::new(file),
            path,
        };
        if fresh {
            log.row(header)?;
        }
        Ok(log)
    }

    fn row(&mut self, line: &str) -> CliResult<()> {
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e).into())
    }

    fn flush(&mut self) -> CliResult<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e).into())
    }
}

fn save(out: &Path, step: u64, ck: &Checkpoint) -> CliResult<()> {
    ck.save(&out.join(checkpoint_name(step)))?;
    Ok(())
}

fn data_resolution(data: &Prepared) -> CliResult<usize> {
    let first = data
        .train
        .items()
        .first()
        .ok_or_else(|| Error::data("train", "training partition is empty"))?;
    Ok(image_dims(&first.image)?.0)
}

fn progress(step: u64, every: u64, text: impl FnOnce() -> String) {
    if step % every == 0 {
        eprintln!("{}", text());
    }
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let mut config = RunConfig::load_or_default(args.common.config.as_deref())?;
    let seed = config.resolve_seed(args.common.seed)?;
    apply_overrides(&mut config, args)?;
    let data = load_prepared(&args.data)?;
    let resolution = data_resolution(&data)?;
    config.diffusion.model.resolution = resolution;
    create_dir(&args.out)?;
    write_file(&args.out.join(RUN_FILE), config.to_toml().as_bytes())?;
    println!("run {} (seed {seed})", config.hash());
    match args.kind {
        ModelKind::Diffusion => train_diffusion(args, &config, seed, data),
        ModelKind::Pggan => train_gan(args, &config, seed, resolution, data),
        ModelKind::Classifier => train_classifier_cmd(args, &config, seed, data),
    }
}

fn train_diffusion(args: &TrainArgs, config: &RunConfig, seed: u64, data: Prepared) -> CliResult<()> {
    let settings = &config.diffusion;
    let mut trainer = match &args.resume {
        Some(path) => restore_diffusion(&Checkpoint::load(path)?)?,
        None => {
            let mut rng = Rng::seed_from_u64(seed);
            let net = DenoiserNet::new(settings.model.clone(), &mut rng)?;
            DiffusionTrainer::new(net, settings.schedule, settings.adam, config.train.batch_size, rng)?
        }
    };
    if trainer.net.config().resolution != settings.model.resolution {
        return Err(Error::data(
            "train",
            format!(
                "checkpoint model is {0}x{0} but the data is {1}x{1}",
                trainer.net.config().resolution,
                settings.model.resolution
            ),
        )
        .into());
    }
    let mut log = LossLog::open(args.out.join(LOSS_FILE), "step,loss", args.resume.is_some())?;
    let (steps, every) = (config.train.steps, config.train.ckpt_every);
    let mut saved_at = None;
    while trainer.step < steps {
        let loss = trainer.train_step(&data.train)?;
        let step = trainer.step;
        log.row(&format!("{step},{loss}"))?;
        progress(step, 100, || format!("step {step} loss {loss:.5}"));
        if every > 0 && step % every == 0 {
            log.flush()?;
            save(&args.out, step, &save_diffusion(&trainer))?;
            saved_at = Some(step);
        }
    }
    log.flush()?;
    if saved_at != Some(trainer.step) {
        save(&args.out, trainer.step, &save_diffusion(&trainer))?;
    }
    println!("diffusion: {} steps, checkpoint {}", trainer.step, checkpoint_name(trainer.step));
    Ok(())
}

fn train_gan(args: &TrainArgs, config: &RunConfig, seed: u64, resolution: usize, data: Prepared) -> CliResult<()> {
    let settings = &config.pggan;
    let mut trainer = match &args.resume {
        Some(path) => restore_gan(&Checkpoint::load(path)?)?,
        None => {
            let schedule = GrowthSchedule::doubling(resolution, settings.steps_fade, settings.steps_stable)?;
            if schedule.final_resolution() != resolution {
                return Err(CliError::usage(format!(
                    "pggan grows by doubling from 4x4 and cannot reach {resolution}x{resolution}"
                )));
            }
            GanTrainer::new(
                settings.model.clone(),
                schedule,
                settings.adam,
                config.train.batch_size,
                Rng::seed_from_u64(seed),
            )?
        }
    };
    if trainer.schedule.final_resolution() != resolution {
        return Err(Error::data(
            "train",
            format!(
                "checkpoint grows to {0}x{0} but the data is {1}x{1}",
                trainer.schedule.final_resolution(),
                resolution
            ),
        )
        .into());
    }
    let images = TrainSet::from_training_corpus(data.train.into_inner().into_iter().map(|e| e.image).collect());
    let mut log = LossLog::open(
        args.out.join(LOSS_FILE),
        "step,stage,resolution,alpha,loss_d,loss_g",
        args.resume.is_some(),
    )?;
    let (steps, every) = (config.train.steps, config.train.ckpt_every);
    let mut saved_at = None;
    while trainer.step < steps && !trainer.finished() {
        let l = trainer.train_step(&images)?;
        log.row(&format!(
            "{},{},{},{},{},{}",
            l.step, l.stage, l.resolution, l.alpha, l.loss_d, l.loss_g
        ))?;
        progress(l.step, 100, || {
            format!(
                "step {} {}x{} alpha {:.2} loss_d {:.4} loss_g {:.4}",
                l.step, l.resolution, l.resolution, l.alpha, l.loss_d, l.loss_g
            )
        });
        if every > 0 && l.step % every == 0 {
            log.flush()?;
            save(&args.out, l.step, &save_gan(&trainer))?;
            saved_at = Some(l.step);
        }
    }
    log.flush()?;
    if saved_at != Some(trainer.step) {
        save(&args.out, trainer.step, &save_gan(&trainer))?;
    }
    println!(
        "pggan: {} steps, {}x{}, checkpoint {}",
        trainer.step,
        trainer.gen.resolution(),
        trainer.gen.resolution(),
        checkpoint_name(trainer.step)
    );
    Ok(())
}

fn train_classifier_cmd(args: &TrainArgs, config: &RunConfig, seed: u64, data: Prepared) -> CliResult<()> {
    if args.resume.is_some() {
        return Err(CliError::usage("classifier training cannot be resumed; it runs in one pass"));
    }
    let classes = match &args.classes {
        Some(list) => parse_findings(list)?,
        None => {
            let mut present: Vec<_> = data
                .train
                .items()
                .iter()
                .filter_map(|e| match e.prompt.findings()[..] {
                    [f] => Some(f),
                    _ => None,
                })
                .collect();
            present.sort();
            present.dedup();
            present
        }
    };
    let labelled = |items: &[synthrad_core::data::PromptedExample]| -> Vec<LabeledImage> {
        items
            .iter()
            .filter_map(|e| {
                label_of(&e.prompt, &classes).map(|label| LabeledImage {
                    image: e.image.clone(),
                    label,
                })
            })
            .collect()
    };
    let train = labelled(data.train.items());
    let test = labelled(data.test.items());
    let mut rng = Rng::seed_from_u64(seed);
    let (init_seed, shuffle_seed) = (rng.next_u64(), rng.next_u64());
    let net = train_classifier(&train, classes.clone(), &config.classifier, init_seed, shuffle_seed)?;
    save_classifier(&net).save(&args.out.join(CLASSIFIER_FILE))?;
    let names: Vec<&str> = classes.iter().map(|c| c.label()).collect();
    println!("classifier over [{}] trained on {} images", names.join(", "), train.len());
    println!("train accuracy {:.4}", evaluate(&net, &train)?);
    if !test.is_empty() {
        println!("test accuracy {:.4} on {} images", evaluate(&net, &test)?, test.len());
    }
    Ok(())
}
