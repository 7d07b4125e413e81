use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use synthrad_core::data::{
    decode_pgm, downsample, generate_toy_dataset, image_dims, parse_bboxes, parse_metadata, position_phrase,
    prompt_from_findings, read_manifest, split_train_test, BBoxRecord, PromptedExample, SplitRule,
    ToyDatasetSpec,
};
use synthrad_core::{Error, Tensor};

use super::parse_findings;
use crate::args::PrepareArgs;
use crate::config::RunConfig;
use crate::dataset::{read_file, write_prepared};
use crate::error::{CliError, CliResult};

fn open(path: &Path) -> CliResult<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

fn decode_image(path: &Path) -> CliResult<Tensor> {
    let bytes = read_file(path)?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let image = match ext.as_str() {
        #[cfg(feature = "png")]
        "png" => synthrad_core::data::decode_png(&bytes),
        "pgm" => decode_pgm(&bytes),
        _ => {
            return Err(Error::data(
                path.display().to_string(),
                "unsupported image format (expected .pgm or .png)",
            )
            .into())
        }
    };
    image.map_err(|e| Error::data(path.display().to_string(), e.to_string()).into())
}

/// `dir/<image id>`, or the same stem with a `.pgm` extension.
fn find_image(dir: &Path, image_id: &str) -> CliResult<std::path::PathBuf> {
    let direct = dir.join(image_id);
    if direct.is_file() {
        return Ok(direct);
    }
    let pgm = direct.with_extension("pgm");
    if pgm.is_file() {
        return Ok(pgm);
    }
    Err(Error::data(image_id, format!("no image file in {}", dir.display())).into())
}

fn real_examples(args: &PrepareArgs) -> CliResult<(Vec<PromptedExample>, Vec<BBoxRecord>)> {
    let metadata_path = args.metadata.as_deref().expect("clap requires --metadata");
    let images = args.images.as_deref().expect("clap requires --images");
    let metadata = parse_metadata(open(metadata_path)?)
        .map_err(|e| Error::data(metadata_path.display().to_string(), e.to_string()))?;
    let bboxes = match &args.bboxes {
        Some(p) => parse_bboxes(open(p)?).map_err(|e| Error::data(p.display().to_string(), e.to_string()))?,
        None => Vec::new(),
    };
    let mut first_box: HashMap<&str, &BBoxRecord> = HashMap::new();
    for b in &bboxes {
        first_box.entry(b.image_id.as_str()).or_insert(b);
    }
    let mut examples = Vec::new();
    for record in &metadata {
        let bbox = first_box.get(record.image_id.as_str());
        if args.bbox_subset && bbox.is_none() {
            continue;
        }
        let position = bbox.map(|b| position_phrase(b)).transpose()?;
        let prompt = prompt_from_findings(&record.findings, position)?;
        let path = find_image(images, &record.image_id)?;
        let full = decode_image(&path)?;
        let (h, _) = image_dims(&full)?;
        let image = if h == args.resolution { full } else { downsample(&full, args.resolution)? };
        examples.push(PromptedExample {
            image_id: record.image_id.clone(),
            image,
            prompt,
        });
    }
    let kept: Vec<BBoxRecord> = bboxes
        .into_iter()
        .filter(|b| examples.iter().any(|e| e.image_id == b.image_id))
        .collect();
    Ok((examples, kept))
}

pub fn prepare_data(args: &PrepareArgs) -> CliResult<()> {
    let mut config = RunConfig::load_or_default(args.common.config.as_deref())?;
    let seed = config.resolve_seed(args.common.seed)?;
    let (examples, bboxes) = if args.toy {
        let spec = ToyDatasetSpec {
            resolution: args.resolution,
            classes: parse_findings(&args.toy_classes)?,
            samples_per_class: args.per_class,
            positions: !args.no_positions,
            noise_level: args.noise_level,
            amplitude: args.amplitude,
            seed,
        };
        let ds = generate_toy_dataset(&spec)?;
        (ds.examples, ds.bboxes)
    } else if args.metadata.is_some() {
        real_examples(args)?
    } else {
        return Err(CliError::usage("prepare-data needs --toy or --metadata with --images"));
    };
    let rule = match &args.test_manifest {
        Some(p) => SplitRule::Manifest(read_manifest(open(p)?)?),
        None => SplitRule::Ratio(args.train_ratio),
    };
    let (train, test) = split_train_test(examples, &rule, seed)?;
    write_prepared(&args.out, &train, &test, &bboxes)?;
    println!(
        "prepared {} images ({} train, {} test) in {}",
        train.len() + test.len(),
        train.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}
