use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{Finding, PromptedExample, TestSet, TrainSet};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::classifier::{train_classifier, ClassifierConfig, ClassifierNet};
use super::{evaluate, label_of, LabeledImage};

pub const HEADER_INDEX: &str = "S. No";
pub const HEADER_DATA: &str = "Size and Type of Data";
pub const HEADER_ACCURACY: &str = "Accuracy on test set";

/// Real and synthetic image counts of one training set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowSpec {
    pub n_real: usize,
    pub n_synth: usize,
}

impl RowSpec {
    pub fn total(&self) -> usize {
        self.n_real + self.n_synth
    }

    /// Parses a comma-separated list such as `1000:0,500:500`.
    pub fn parse_list(text: &str) -> Result<Vec<RowSpec>> {
        text.split(',').map(str::parse).collect()
    }
}

impl FromStr for RowSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("row spec {s:?} is not <real>:<synthetic>"));
        let (r, y) = s.trim().split_once(':').ok_or_else(bad)?;
        Ok(RowSpec {
            n_real: r.trim().parse().map_err(|_| bad())?,
            n_synth: y.trim().parse().map_err(|_| bad())?,
        })
    }
}

/// Table label of a row: "1000 Real", "500 Real + 500 Synthesised" or
/// "1000 Synthesised".
pub fn row_label(row: RowSpec) -> String {
    match (row.n_real, row.n_synth) {
        (r, 0) => format!("{r} Real"),
        (0, s) => format!("{s} Synthesised"),
        (r, s) => format!("{r} Real + {s} Synthesised"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Positive class; the negative class is always "No Finding".
    pub disease: Finding,
    pub rows: Vec<RowSpec>,
    pub test_size: usize,
    pub classifier: ClassifierConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            disease: Finding::Edema,
            rows: vec![
                RowSpec { n_real: 1000, n_synth: 0 },
                RowSpec { n_real: 500, n_synth: 500 },
            ],
            test_size: 300,
            classifier: ClassifierConfig::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn classes(&self) -> [Finding; 2] {
        [Finding::NoFinding, self.disease]
    }

    pub fn validate(&self) -> Result<()> {
        if self.disease == Finding::NoFinding {
            return Err(Error::Config("experiment disease must not be No Finding".into()));
        }
        let first = self
            .rows
            .first()
            .ok_or_else(|| Error::Config("experiment needs at least one row".into()))?;
        if first.total() == 0 {
            return Err(Error::Config("experiment rows must train on at least one image".into()));
        }
        if let Some(r) = self.rows.iter().find(|r| r.total() != first.total()) {
            return Err(Error::Config(format!(
                "row {} totals {} images but the first row totals {}",
                row_label(*r),
                r.total(),
                first.total()
            )));
        }
        if self.test_size == 0 {
            return Err(Error::Config("test subset size must be positive".into()));
        }
        self.classifier.validate()
    }

    /// Stable key=value text identifying the configuration.
    pub fn canonical(&self) -> String {
        let rows: Vec<String> = self.rows.iter().map(|r| format!("{}:{}", r.n_real, r.n_synth)).collect();
        let c = &self.classifier;
        format!(
            "disease={}\nrows={}\ntest_size={}\nclassifier.widths={:?}\nclassifier.epochs={}\nclassifier.batch_size={}\nclassifier.lr={:e}\nseed={}\n",
            self.disease.token(),
            rows.join(","),
            self.test_size,
            c.widths,
            c.epochs,
            c.batch_size,
            c.lr,
            self.seed
        )
    }

    pub fn hash(&self) -> String {
        short_hash(self.canonical().as_bytes())
    }
}

fn short_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub label: String,
    pub n_real: usize,
    pub n_synth: usize,
    pub accuracy: f64,
    /// Fingerprint of the classifier before training.
    pub init_hash: String,
    /// Fingerprint of the test subset evaluated on.
    pub test_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
    pub seed: u64,
    pub config_hash: String,
    pub test_size: usize,
}

impl ResultsTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{HEADER_INDEX},{HEADER_DATA},{HEADER_ACCURACY}\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(out, "{},{},{:.4}", i + 1, r.label, r.accuracy);
        }
        out
    }

    /// Aligned plain-text table with a metadata footer.
    pub fn to_text(&self) -> String {
        let w0 = HEADER_INDEX.len().max(self.rows.len().to_string().len());
        let w1 = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain([HEADER_DATA.len()])
            .max()
            .unwrap_or(0);
        let mut out = format!("{HEADER_INDEX:<w0$}  {HEADER_DATA:<w1$}  {HEADER_ACCURACY}\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(out, "{:<w0$}  {:<w1$}  {:.2}", i + 1, r.label, r.accuracy);
        }
        let first = self.rows.first();
        let _ = write!(
            out,
            "\nseed {}  config {}  test subset {} images ({})  classifier init {}\n",
            self.seed,
            self.config_hash,
            self.test_size,
            first.map_or("-", |r| &r.test_hash),
            first.map_or("-", |r| &r.init_hash),
        );
        out
    }
}

/// Source of synthetic images: `(class, count, rng) → images [1, H, W]`.
pub type SyntheticSource<'a> = dyn FnMut(Finding, usize, &mut Rng) -> Result<Vec<Tensor>> + 'a;

/// Splits `n` over two classes, the first class taking any remainder.
fn per_class(n: usize) -> [usize; 2] {
    [n - n / 2, n / 2]
}

/// Trains one classifier per row and reports test accuracy.
///
/// Every row sees the same test subset, the same initial classifier
/// parameters and the same minibatch stream; only the training images
/// differ. Real images are drawn class-balanced from one fixed shuffled
/// order, so smaller real counts are prefixes of larger ones.
pub fn run_augmentation_experiment(
    config: &ExperimentConfig,
    generator: &mut SyntheticSource<'_>,
    real_pool: &TrainSet<PromptedExample>,
    test_pool: &TestSet<PromptedExample>,
) -> Result<ResultsTable> {
    config.validate()?;
    let classes = config.classes();
    let mut base = Rng::seed_from_u64(config.seed);
    let mut real_rng = base.fork();
    let mut test_rng = base.fork();
    let synth_seed = base.next_u64();
    let init_seed = base.next_u64();
    let shuffle_seed = base.next_u64();

    let mut by_class: [Vec<&PromptedExample>; 2] = [Vec::new(), Vec::new()];
    for ex in real_pool.items() {
        if let Some(l) = label_of(&ex.prompt, &classes) {
            by_class[l].push(ex);
        }
    }
    by_class.iter_mut().for_each(|list| real_rng.shuffle(list));

    let mut test: Vec<(&PromptedExample, usize)> = test_pool
        .items()
        .iter()
        .filter_map(|ex| label_of(&ex.prompt, &classes).map(|l| (ex, l)))
        .collect();
    if test.len() < config.test_size {
        return Err(Error::data(
            "experiment",
            format!(
                "test partition has {} labelled images, need {}",
                test.len(),
                config.test_size
            ),
        ));
    }
    test_rng.shuffle(&mut test);
    test.truncate(config.test_size);
    let mut hasher = Sha256::new();
    for (ex, l) in &test {
        hasher.update(ex.image_id.as_bytes());
        hasher.update([0, *l as u8]);
    }
    let test_hash = hex::encode(&hasher.finalize()[..8]);
    let test: Vec<LabeledImage> = test
        .into_iter()
        .map(|(ex, label)| LabeledImage {
            image: ex.image.clone(),
            label,
        })
        .collect();
    let shape = test[0].image.shape().to_vec();

    let init_hash = {
        let net = ClassifierNet::new(
            config.classifier.clone(),
            classes.to_vec(),
            &mut Rng::seed_from_u64(init_seed),
        )?;
        net.params().fingerprint()[..16].to_string()
    };

    let mut rows = Vec::with_capacity(config.rows.len());
    for &spec in &config.rows {
        let mut train = Vec::with_capacity(spec.total());
        for (label, n) in per_class(spec.n_real).into_iter().enumerate() {
            let pool = &by_class[label];
            if pool.len() < n {
                return Err(Error::data(
                    "experiment",
                    format!(
                        "insufficient real pool: {} {} images, row {} needs {n}",
                        pool.len(),
                        classes[label],
                        row_label(spec)
                    ),
                ));
            }
            train.extend(pool[..n].iter().map(|ex| LabeledImage {
                image: ex.image.clone(),
                label,
            }));
        }
        let mut synth_rng = Rng::seed_from_u64(synth_seed);
        for (label, n) in per_class(spec.n_synth).into_iter().enumerate() {
            if n == 0 {
                continue;
            }
            let images = generator(classes[label], n, &mut synth_rng)?;
            if images.len() != n {
                return Err(Error::data(
                    "experiment",
                    format!("generator returned {} images, expected {n}", images.len()),
                ));
            }
            for image in images {
                if image.shape() != &shape[..] {
                    return Err(Error::data(
                        "experiment",
                        format!("synthetic image shape {:?}, test images are {shape:?}", image.shape()),
                    ));
                }
                train.push(LabeledImage { image, label });
            }
        }
        let net = train_classifier(&train, classes.to_vec(), &config.classifier, init_seed, shuffle_seed)?;
        let accuracy = evaluate(&net, &test)?;
        rows.push(ResultRow {
            label: row_label(spec),
            n_real: spec.n_real,
            n_synth: spec.n_synth,
            accuracy,
            init_hash: init_hash.clone(),
            test_hash: test_hash.clone(),
        });
    }
    Ok(ResultsTable {
        rows,
        seed: config.seed,
        config_hash: config.hash(),
        test_size: config.test_size,
    })
}
