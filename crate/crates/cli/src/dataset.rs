//! Prepared dataset directories.
//!
//! ```text
//! <dir>/images/<id>__<prompt stem>.pgm
//! <dir>/prompts.csv     file, image_id, prompt, partition
//! <dir>/metadata.csv    Image Index, Finding Labels
//! <dir>/bboxes.csv      only when boxes are known
//! <dir>/test_ids.txt    the test partition as a split manifest
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use synthrad_core::data::{
    decode_pgm, encode_pgm, read_manifest, split_train_test, write_bboxes, write_metadata, BBoxRecord,
    MetadataRecord, Prompt, PromptedExample, SplitRule, TestSet, TrainSet,
};
use synthrad_core::Error;

use crate::error::CliResult;

pub const IMAGES_DIR: &str = "images";
pub const PROMPTS_FILE: &str = "prompts.csv";
pub const METADATA_FILE: &str = "metadata.csv";
pub const BBOXES_FILE: &str = "bboxes.csv";
pub const TEST_IDS_FILE: &str = "test_ids.txt";

const TRAIN: &str = "train";
const TEST: &str = "test";

/// `<id without extension>__<prompt stem>.pgm`.
pub fn image_file_name(image_id: &str, prompt: &Prompt) -> String {
    let stem = Path::new(image_id)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(image_id);
    format!("{stem}__{}.pgm", prompt.file_stem())
}

/// Recovers the prompt from a prepared image file name.
pub fn prompt_from_file_name(name: &str) -> Option<Prompt> {
    let stem = name.strip_suffix(".pgm")?;
    let (_, prompt) = stem.split_once("__")?;
    Some(Prompt::from_file_stem(prompt))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

pub(crate) fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

pub(crate) fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e).into())
}

pub fn write_prepared(
    dir: &Path,
    train: &TrainSet<PromptedExample>,
    test: &TestSet<PromptedExample>,
    bboxes: &[BBoxRecord],
) -> CliResult<()> {
    let images = dir.join(IMAGES_DIR);
    create_dir(&images)?;
    let mut index = csv::Writer::from_writer(Vec::new());
    index
        .write_record(["file", "image_id", "prompt", "partition"])
        .map_err(Error::from)?;
    let mut metadata = Vec::new();
    let all = train
        .items()
        .iter()
        .map(|e| (e, TRAIN))
        .chain(test.items().iter().map(|e| (e, TEST)));
    for (ex, partition) in all {
        let name = image_file_name(&ex.image_id, &ex.prompt);
        write_file(&images.join(&name), &encode_pgm(&ex.image)?)?;
        index
            .write_record([name.as_str(), &ex.image_id, &ex.prompt.to_string(), partition])
            .map_err(Error::from)?;
        metadata.push(MetadataRecord {
            image_id: ex.image_id.clone(),
            findings: ex.prompt.findings(),
        });
    }
    let index = index.into_inner().map_err(|e| Error::io(dir.join(PROMPTS_FILE), e.into_error()))?;
    write_file(&dir.join(PROMPTS_FILE), &index)?;

    let mut buf = Vec::new();
    write_metadata(&metadata, &mut buf)?;
    write_file(&dir.join(METADATA_FILE), &buf)?;
    if !bboxes.is_empty() {
        let mut buf = Vec::new();
        write_bboxes(bboxes, &mut buf)?;
        write_file(&dir.join(BBOXES_FILE), &buf)?;
    }
    let mut ids: String = test.items().iter().map(|e| format!("{}\n", e.image_id)).collect();
    if ids.is_empty() {
        ids.push('\n');
    }
    write_file(&dir.join(TEST_IDS_FILE), ids.as_bytes())
}

pub struct Prepared {
    pub train: TrainSet<PromptedExample>,
    pub test: TestSet<PromptedExample>,
}

/// Loads a prepared directory. The partition is rebuilt from the test
/// manifest, so training code only ever sees the train handle.
pub fn load_prepared(dir: &Path) -> CliResult<Prepared> {
    let index_path = dir.join(PROMPTS_FILE);
    let bytes = read_file(&index_path)?;
    let mut rdr = csv::Reader::from_reader(&bytes[..]);
    let mut examples = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(Error::from)?;
        let context = || format!("{} line {}", index_path.display(), i + 2);
        let (file, image_id, prompt) = match (record.get(0), record.get(1), record.get(2)) {
            (Some(f), Some(id), Some(p)) => (f, id, Prompt::parse(p)),
            _ => return Err(Error::data(context(), "expected file, image_id, prompt, partition").into()),
        };
        if prompt_from_file_name(file).as_ref() != Some(&prompt) {
            return Err(Error::data(context(), format!("file name {file:?} does not carry prompt {prompt:?}")).into());
        }
        let path: PathBuf = dir.join(IMAGES_DIR).join(file);
        let image = decode_pgm(&read_file(&path)?).map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
        examples.push(PromptedExample {
            image_id: image_id.to_string(),
            image,
            prompt,
        });
    }
    let manifest_path = dir.join(TEST_IDS_FILE);
    let test_ids = read_manifest(&read_file(&manifest_path)?[..])?;
    let (train, test) = split_train_test(examples, &SplitRule::Manifest(test_ids), 0)?;
    Ok(Prepared { train, test })
}
