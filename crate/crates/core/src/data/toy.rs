//! Procedural stand-in for chest radiographs: a noisy dark background with
//! one class-specific bright shape per diseased image.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::records::{position_phrase, BBoxRecord, MetadataRecord};
use super::vocab::{prompt_from_findings, Finding};
use super::PromptedExample;

pub const TOY_RESOLUTIONS: [usize; 4] = [16, 28, 32, 64];
const BACKGROUND_LEVEL: f32 = -0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDatasetSpec {
    pub resolution: usize,
    /// Classes in generation order; `NoFinding` images carry no shape.
    pub classes: Vec<Finding>,
    pub samples_per_class: usize,
    /// Scatter shapes over the whole image and add position tokens to prompts.
    pub positions: bool,
    /// Standard deviation of the Gaussian background.
    pub noise_level: f32,
    /// Brightness added on shape pixels.
    pub amplitude: f32,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            resolution: 28,
            classes: vec![Finding::NoFinding, Finding::Edema, Finding::Mass, Finding::Nodule],
            samples_per_class: 64,
            positions: true,
            noise_level: 0.1,
            amplitude: 1.2,
            seed: 0,
        }
    }
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !TOY_RESOLUTIONS.contains(&self.resolution) {
            return Err(Error::Config(format!(
                "toy resolution {} not one of {TOY_RESOLUTIONS:?}",
                self.resolution
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples per class must be at least 1".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("toy dataset needs at least one class".into()));
        }
        let mut sorted = self.classes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.classes.len() {
            return Err(Error::Config("duplicate toy class".into()));
        }
        if self.diseased_classes().count() > ShapeKind::ALL.len() {
            return Err(Error::Config(format!(
                "at most {} diseased toy classes",
                ShapeKind::ALL.len()
            )));
        }
        if !(self.noise_level >= 0.0 && self.amplitude > 0.0) {
            return Err(Error::Config("noise level must be ≥ 0 and amplitude > 0".into()));
        }
        Ok(())
    }

    fn diseased_classes(&self) -> impl Iterator<Item = Finding> + '_ {
        self.classes.iter().copied().filter(|c| *c != Finding::NoFinding)
    }

    /// Shape drawn for a class, if any.
    pub fn shape_of(&self, class: Finding) -> Option<ShapeKind> {
        self.diseased_classes()
            .position(|c| c == class)
            .map(|i| ShapeKind::ALL[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Bar,
    Ring,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Disk, ShapeKind::Bar, ShapeKind::Ring, ShapeKind::Cross];

    /// Half-extent of the shape in pixels for a given resolution.
    fn radius(self, res: f32) -> f32 {
        match self {
            ShapeKind::Disk => 0.15 * res,
            ShapeKind::Bar => 0.25 * res,
            ShapeKind::Ring => 0.2 * res,
            ShapeKind::Cross => 0.2 * res,
        }
    }

    /// Whether the point `(dx, dy)` relative to the centre is inside.
    fn contains(self, dx: f32, dy: f32, res: f32) -> bool {
        let r = self.radius(res);
        let d2 = dx * dx + dy * dy;
        match self {
            ShapeKind::Disk => d2 <= r * r,
            ShapeKind::Bar => dx.abs() <= r && dy.abs() <= 0.08 * res,
            ShapeKind::Ring => d2 <= r * r && d2 >= (0.6 * r) * (0.6 * r),
            ShapeKind::Cross => {
                let t = 0.06 * res;
                (dx.abs() <= r && dy.abs() <= t) || (dy.abs() <= r && dx.abs() <= t)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub examples: Vec<PromptedExample>,
    pub bboxes: Vec<BBoxRecord>,
}

impl ToyDataset {
    pub fn metadata(&self) -> Vec<MetadataRecord> {
        self.examples
            .iter()
            .map(|e| MetadataRecord {
                image_id: e.image_id.clone(),
                findings: e.prompt.findings(),
            })
            .collect()
    }
}

/// Generates `samples_per_class` images per class, interleaved by class.
/// Entirely determined by the spec (including its seed).
pub fn generate_toy_dataset(spec: &ToyDatasetSpec) -> Result<ToyDataset> {
    spec.validate()?;
    let mut rng = Rng::seed_from_u64(spec.seed);
    let res = spec.resolution;
    let resf = res as f32;
    let mut examples = Vec::new();
    let mut bboxes = Vec::new();
    for _ in 0..spec.samples_per_class {
        for &class in &spec.classes {
            let image_id = format!("toy{:05}", examples.len());
            let mut pixels: Vec<f32> = (0..res * res)
                .map(|_| BACKGROUND_LEVEL + spec.noise_level * rng.normal())
                .collect();
            let prompt = match spec.shape_of(class) {
                None => prompt_from_findings(&[class], None)?,
                Some(shape) => {
                    let margin = shape.radius(resf) + 1.0;
                    let (cx, cy) = if spec.positions {
                        let span = resf - 2.0 * margin;
                        (
                            margin + span * rng.uniform() as f32,
                            margin + span * rng.uniform() as f32,
                        )
                    } else {
                        let jitter = 0.1 * resf;
                        (
                            0.5 * resf + jitter * (2.0 * rng.uniform() as f32 - 1.0),
                            0.5 * resf + jitter * (2.0 * rng.uniform() as f32 - 1.0),
                        )
                    };
                    let (mut x0, mut y0, mut x1, mut y1) = (res, res, 0, 0);
                    for py in 0..res {
                        for px in 0..res {
                            let dx = px as f32 + 0.5 - cx;
                            let dy = py as f32 + 0.5 - cy;
                            if shape.contains(dx, dy, resf) {
                                pixels[py * res + px] += spec.amplitude;
                                x0 = x0.min(px);
                                y0 = y0.min(py);
                                x1 = x1.max(px);
                                y1 = y1.max(py);
                            }
                        }
                    }
                    debug_assert!(x1 >= x0 && y1 >= y0, "shape rasterised to nothing");
                    let bbox = BBoxRecord {
                        image_id: image_id.clone(),
                        finding: class,
                        x: x0 as f64,
                        y: y0 as f64,
                        w: (x1 - x0 + 1) as f64,
                        h: (y1 - y0 + 1) as f64,
                        image_width: res as f64,
                        image_height: res as f64,
                    };
                    let position = if spec.positions {
                        Some(position_phrase(&bbox)?)
                    } else {
                        None
                    };
                    bboxes.push(bbox);
                    prompt_from_findings(&[class], position)?
                }
            };
            pixels.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
            examples.push(PromptedExample {
                image_id,
                image: Tensor::new(vec![1, res, res], pixels)?,
                prompt,
            });
        }
    }
    Ok(ToyDataset { examples, bboxes })
}
