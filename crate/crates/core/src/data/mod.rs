//! Dataset records, prompts, splits and the procedural toy corpus.

mod image_io;
mod records;
mod split;
mod toy;
mod vocab;

pub use image_io::{decode_pgm, downsample, encode_pgm, from_byte, image_dims, to_byte, write_pgm};
#[cfg(feature = "png")]
pub use image_io::{decode_png, encode_png};
pub use records::{
    parse_bboxes, parse_metadata, position_phrase, write_bboxes, write_metadata, BBoxRecord,
    MetadataRecord, DEFAULT_IMAGE_SIZE,
};
pub use split::{read_manifest, split_train_test, ImageId, SplitRule, TestSet, TrainSet};
pub use toy::{generate_toy_dataset, ShapeKind, ToyDataset, ToyDatasetSpec, TOY_RESOLUTIONS};
pub use vocab::{prompt_from_findings, Finding, Position, Prompt, Vocabulary, NULL_TOKEN};

use crate::tensor::Tensor;

/// One grayscale image in `[-1, 1]` (shape `[1, H, W]`) with its prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptedExample {
    pub image_id: String,
    pub image: Tensor,
    pub prompt: Prompt,
}

impl ImageId for PromptedExample {
    fn image_id(&self) -> &str {
        &self.image_id
    }
}

impl ImageId for MetadataRecord {
    fn image_id(&self) -> &str {
        &self.image_id
    }
}

impl ImageId for BBoxRecord {
    fn image_id(&self) -> &str {
        &self.image_id
    }
}
