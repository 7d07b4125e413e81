use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Finding;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, GroupNorm, Linear, Params};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{Classify, LabeledImage};

const NORM_GROUPS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// Output width of each conv block (2 or 3 blocks).
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 32],
            epochs: 20,
            batch_size: 16,
            lr: 3e-3,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.widths.len()) || self.widths.contains(&0) {
            return Err(Error::Config("classifier needs 2 or 3 nonzero conv widths".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("epochs, batch size and lr must be positive".into()));
        }
        Ok(())
    }
}

/// Conv blocks (3×3 conv, group norm, leaky ReLU, 2×2 average pool while
/// the size is even) followed by global average pooling and a linear head.
#[derive(Clone, Debug)]
pub struct ClassifierNet {
    config: ClassifierConfig,
    classes: Vec<Finding>,
    params: Params,
    convs: Vec<Conv2d>,
    norms: Vec<GroupNorm>,
    head: Linear,
}

impl ClassifierNet {
    pub fn new(config: ClassifierConfig, classes: Vec<Finding>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if classes.len() < 2 {
            return Err(Error::Config("classifier needs at least two classes".into()));
        }
        let mut params = Params::new();
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = 1;
        for (i, &w) in config.widths.iter().enumerate() {
            convs.push(Conv2d::new(&mut params, &format!("cls.conv{i}"), cin, w, 3, 1.0, rng));
            let groups = (1..=NORM_GROUPS.min(w)).rev().find(|g| w % g == 0).unwrap_or(1);
            norms.push(GroupNorm::new(&mut params, &format!("cls.norm{i}"), w, groups));
            cin = w;
        }
        let head = Linear::new(&mut params, "cls.head", cin, classes.len(), 1.0, rng);
        Ok(Self {
            config,
            classes,
            params,
            convs,
            norms,
            head,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Logits `[N, classes]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(tape, p, h)?;
            h = norm.forward(tape, p, h)?;
            h = tape.leaky_relu(h, 0.2);
            let s = tape.shape(h);
            if s[2] % 2 == 0 && s[3] % 2 == 0 {
                h = tape.avg_pool2x(h)?;
            }
        }
        let pooled = tape.mean_spatial(h)?;
        self.head.forward(tape, p, pooled)
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(out).clone())
    }
}

impl Classify for ClassifierNet {
    fn classes(&self) -> &[Finding] {
        &self.classes
    }

    fn probabilities(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let logits = self.logits(images)?;
        let k = self.classes.len();
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                let max = row.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v)) as f64;
                let exps: Vec<f64> = row.iter().map(|v| (*v as f64 - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                exps.into_iter().map(|e| e / z).collect()
            })
            .collect())
    }
}

/// Trains a fresh classifier. Initial parameters depend only on `init_seed`;
/// minibatch order only on `shuffle_seed`.
pub fn train_classifier(
    train: &[LabeledImage],
    classes: Vec<Finding>,
    config: &ClassifierConfig,
    init_seed: u64,
    shuffle_seed: u64,
) -> Result<ClassifierNet> {
    let net = ClassifierNet::new(config.clone(), classes, &mut Rng::seed_from_u64(init_seed))?;
    fit(net, train, shuffle_seed)
}

/// Cross-entropy training with Adam for `config.epochs` passes.
pub fn fit(mut net: ClassifierNet, train: &[LabeledImage], shuffle_seed: u64) -> Result<ClassifierNet> {
    if train.is_empty() {
        return Err(Error::Config("empty classifier training set".into()));
    }
    let k = net.classes.len();
    if let Some(bad) = train.iter().find(|e| e.label >= k) {
        return Err(Error::Config(format!("label {} outside {k} classes", bad.label)));
    }
    let mut present = vec![false; k];
    train.iter().for_each(|e| present[e.label] = true);
    if present.iter().filter(|p| **p).count() < 2 {
        return Err(Error::Config("classifier training set contains a single class".into()));
    }
    let cfg = net.config.clone();
    let mut opt = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &net.params,
    );
    let mut rng = Rng::seed_from_u64(shuffle_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<&Tensor> = chunk.iter().map(|&i| &train[i].image).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            let mut tape = Tape::new();
            let bound = net.params.bind(&mut tape, true);
            let x = tape.constant(Tensor::stack(&images)?);
            let logits = net.forward(&mut tape, &bound, x)?;
            let loss = tape.cross_entropy(logits, labels)?;
            if !tape.value(loss).is_finite() {
                return Err(Error::Numeric("classifier loss became non-finite".into()));
            }
            let grads = tape.backward(loss)?;
            net.params.accumulate_grads(&grads, &bound)?;
            opt.step(&mut net.params)?;
        }
    }
    Ok(net)
}
