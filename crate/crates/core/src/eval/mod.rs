//! Classifier-based evaluation of synthetic data: a small conv classifier,
//! the fixed-size real/synthetic augmentation experiment and class-balance
//! statistics.

mod balance;
mod classifier;
mod experiment;

pub use balance::{class_balance_report, BalanceReport};
pub use classifier::{fit, train_classifier, ClassifierConfig, ClassifierNet};
pub use experiment::{
    row_label, run_augmentation_experiment, ExperimentConfig, ResultRow, ResultsTable, RowSpec,
};

use crate::data::{Finding, Prompt};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image with a class index into some class list.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[1, H, W]`.
    pub image: Tensor,
    pub label: usize,
}

/// Anything that assigns class probabilities to images.
pub trait Classify {
    fn classes(&self) -> &[Finding];

    /// One probability row per image of `images: [N, 1, H, W]`.
    fn probabilities(&self, images: &Tensor) -> Result<Vec<Vec<f64>>>;

    /// Argmax class index per image; the first maximum wins.
    fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        Ok(self
            .probabilities(images)?
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, p)| if *p > best.1 { (i, *p) } else { best })
                    .0
            })
            .collect())
    }
}

/// Class index of a single-finding prompt, `None` for prompts with several
/// findings or a finding outside `classes`.
pub fn label_of(prompt: &Prompt, classes: &[Finding]) -> Option<usize> {
    match prompt.findings()[..] {
        [f] => classes.iter().position(|c| *c == f),
        _ => None,
    }
}

const EVAL_BATCH: usize = 64;

/// Fraction of images whose argmax prediction equals the label.
pub fn evaluate(net: &impl Classify, test: &[LabeledImage]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty test set".into()));
    }
    let mut correct = 0usize;
    for chunk in test.chunks(EVAL_BATCH) {
        let images: Vec<&Tensor> = chunk.iter().map(|e| &e.image).collect();
        let predicted = net.predict(&Tensor::stack(&images)?)?;
        correct += predicted.iter().zip(chunk).filter(|(p, e)| **p == e.label).count();
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Mean predicted probability of each class, per group of images:
/// `matrix[g][c]` averages `p(c | image)` over `groups[g]`.
pub fn confidence_matrix(net: &impl Classify, groups: &[Vec<Tensor>]) -> Result<Vec<Vec<f64>>> {
    let k = net.classes().len();
    groups
        .iter()
        .map(|images| {
            if images.is_empty() {
                return Err(Error::Config("empty image group".into()));
            }
            let mut sums = vec![0.0; k];
            for chunk in images.chunks(EVAL_BATCH) {
                let batch = Tensor::stack(&chunk.iter().collect::<Vec<_>>())?;
                for row in net.probabilities(&batch)? {
                    sums.iter_mut().zip(row).for_each(|(s, p)| *s += p);
                }
            }
            Ok(sums.into_iter().map(|s| s / images.len() as f64).collect())
        })
        .collect()
}
