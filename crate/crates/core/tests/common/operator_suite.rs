//! Finite-difference suite for every tape operator. Each operator is
//! checked against an independent `f64` reference implementation.

use synthrad_core::autodiff::{Operator, Tape, GROUP_NORM_EPS};
use synthrad_core::{Rng, Tensor};

pub const H: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
pub const CASES: usize = 12;

/// Worst relative gradient error of one operator over its random cases.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub name: String,
    pub cases: usize,
    pub worst: f64,
}

#[derive(Clone)]
pub struct Input {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub differentiable: bool,
}

fn input(shape: &[usize], data: Vec<f32>) -> Input {
    Input {
        shape: shape.to_vec(),
        data: data.into_iter().map(f64::from).collect(),
        differentiable: true,
    }
}

fn randn(rng: &mut Rng, shape: &[usize], std: f32) -> Input {
    let n = shape.iter().product();
    input(shape, (0..n).map(|_| rng.normal() * std).collect())
}

/// Normal draws nudged at least `gap` away from `kink`.
fn randn_away(rng: &mut Rng, shape: &[usize], kink: f32, gap: f32) -> Input {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.normal();
            if (v - kink).abs() > gap {
                break v;
            }
        })
        .collect();
    input(shape, data)
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Input {
    let n = shape.iter().product();
    input(shape, (0..n).map(|_| (lo + (hi - lo) * rng.uniform()) as f32).collect())
}

fn dims(s: &[usize]) -> (usize, usize, usize, usize) {
    (s[0], s[1], s[2], s[3])
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Straightforward f64 forward pass for each operator.
pub fn reference(op: &Operator, xs: &[Input]) -> Vec<f64> {
    let a = &xs[0].data;
    match op {
        Operator::MatMul => {
            let (m, k) = (xs[0].shape[0], xs[0].shape[1]);
            let n = xs[1].shape[1];
            let b = &xs[1].data;
            let mut c = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    for p in 0..k {
                        c[i * n + j] += a[i * k + p] * b[p * n + j];
                    }
                }
            }
            c
        }
        Operator::Conv2d { pad } => {
            let (n, c, h, w) = dims(&xs[0].shape);
            let (o, _, k, _) = dims(&xs[1].shape);
            let wt = &xs[1].data;
            let (oh, ow) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
            let mut out = vec![0.0; n * o * oh * ow];
            for s in 0..n {
                for oc in 0..o {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut acc = 0.0;
                            for ic in 0..c {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = y as isize + ky as isize - *pad as isize;
                                        let ix = x as isize + kx as isize - *pad as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        acc += a[((s * c + ic) * h + iy as usize) * w + ix as usize]
                                            * wt[((oc * c + ic) * k + ky) * k + kx];
                                    }
                                }
                            }
                            out[((s * o + oc) * oh + y) * ow + x] = acc;
                        }
                    }
                }
            }
            out
        }
        Operator::Upsample2x => {
            let (n, c, h, w) = dims(&xs[0].shape);
            let mut out = Vec::new();
            for p in 0..n * c {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        out.push(a[p * h * w + (y / 2) * w + x / 2]);
                    }
                }
            }
            out
        }
        Operator::AvgPool2x => {
            let (n, c, h, w) = dims(&xs[0].shape);
            let mut out = Vec::new();
            for p in 0..n * c {
                for y in 0..h / 2 {
                    for x in 0..w / 2 {
                        let at = |yy: usize, xx: usize| a[p * h * w + yy * w + xx];
                        out.push(
                            (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1))
                                / 4.0,
                        );
                    }
                }
            }
            out
        }
        Operator::Add => a.iter().zip(&xs[1].data).map(|(x, y)| x + y).collect(),
        Operator::Sub => a.iter().zip(&xs[1].data).map(|(x, y)| x - y).collect(),
        Operator::Mul => a.iter().zip(&xs[1].data).map(|(x, y)| x * y).collect(),
        Operator::Scale(s) => a.iter().map(|x| x * *s as f64).collect(),
        Operator::ConcatChannels => {
            let (n, ca, h, w) = dims(&xs[0].shape);
            let cb = xs[1].shape[1];
            let mut out = Vec::new();
            for s in 0..n {
                out.extend_from_slice(&a[s * ca * h * w..(s + 1) * ca * h * w]);
                out.extend_from_slice(&xs[1].data[s * cb * h * w..(s + 1) * cb * h * w]);
            }
            out
        }
        Operator::LeakyRelu(slope) => a
            .iter()
            .map(|x| if *x > 0.0 { *x } else { *slope as f64 * x })
            .collect(),
        Operator::Silu => a.iter().map(|x| x * sig(*x)).collect(),
        Operator::Sigmoid => a.iter().map(|x| sig(*x)).collect(),
        Operator::GroupNorm { groups } => {
            let (n, c, h, w) = dims(&xs[0].shape);
            let (gamma, beta) = (&xs[1].data, &xs[2].data);
            let cg = c / groups;
            let mut out = vec![0.0; a.len()];
            for s in 0..n {
                for g in 0..*groups {
                    let idx: Vec<usize> = (g * cg..(g + 1) * cg)
                        .flat_map(|ch| (0..h * w).map(move |i| (s * c + ch) * h * w + i))
                        .collect();
                    let m = idx.len() as f64;
                    let mean = idx.iter().map(|&i| a[i]).sum::<f64>() / m;
                    let var = idx.iter().map(|&i| (a[i] - mean).powi(2)).sum::<f64>() / m;
                    for &i in &idx {
                        let ch = (i / (h * w)) % c;
                        out[i] = (a[i] - mean) / (var + GROUP_NORM_EPS).sqrt() * gamma[ch] + beta[ch];
                    }
                }
            }
            out
        }
        Operator::EmbeddingSum { bags } => {
            let e = xs[0].shape[1];
            let mut out = vec![0.0; bags.len() * e];
            for (b, bag) in bags.iter().enumerate() {
                for &id in bag {
                    for j in 0..e {
                        out[b * e + j] += a[id * e + j];
                    }
                }
            }
            out
        }
        Operator::Mse => {
            let s: f64 = a.iter().zip(&xs[1].data).map(|(x, y)| (x - y).powi(2)).sum();
            vec![s / a.len() as f64]
        }
        Operator::Bce { targets } => {
            let s: f64 = a
                .iter()
                .zip(targets)
                .map(|(p, t)| {
                    let t = *t as f64;
                    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
                })
                .sum();
            vec![s / a.len() as f64]
        }
        Operator::CrossEntropy { labels } => {
            let k = xs[0].shape[1];
            let mut total = 0.0;
            for (row, &l) in a.chunks(k).zip(labels) {
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                total += z.ln() - row[l];
            }
            vec![total / labels.len() as f64]
        }
        Operator::AddChannelBias => {
            let (_, c, h, w) = dims(&xs[0].shape);
            a.iter()
                .enumerate()
                .map(|(i, v)| v + xs[1].data[(i / (h * w)) % c])
                .collect()
        }
        Operator::AddChannelVec => {
            let (_, _, h, w) = dims(&xs[0].shape);
            a.iter()
                .enumerate()
                .map(|(i, v)| v + xs[1].data[i / (h * w)])
                .collect()
        }
        Operator::AddRowBias => {
            let f = xs[1].data.len();
            a.iter().enumerate().map(|(i, v)| v + xs[1].data[i % f]).collect()
        }
        Operator::Reshape(_) => a.clone(),
        Operator::Sum => vec![a.iter().sum()],
        Operator::Mean => vec![a.iter().sum::<f64>() / a.len() as f64],
        Operator::MeanSpatial => {
            let (_, _, h, w) = dims(&xs[0].shape);
            a.chunks(h * w).map(|p| p.iter().sum::<f64>() / (h * w) as f64).collect()
        }
        Operator::Clamp(lo, hi) => a.iter().map(|v| v.clamp(*lo as f64, *hi as f64)).collect(),
    }
}

fn weighted_loss(op: &Operator, xs: &[Input], weights: &[f64]) -> f64 {
    reference(op, xs).iter().zip(weights).map(|(o, w)| o * w).sum()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Runs one case; returns the worst relative error over differentiable inputs.
fn check(op: &Operator, xs: &[Input], rng: &mut Rng) -> f64 {
    let ref_out = reference(op, xs);
    let weights: Vec<f64> = (0..ref_out.len()).map(|_| rng.normal() as f64).collect();

    let mut tape = Tape::new();
    let vars: Vec<_> = xs
        .iter()
        .map(|x| {
            let t = Tensor::new(x.shape.clone(), x.data.iter().map(|v| *v as f32).collect()).unwrap();
            if x.differentiable {
                tape.variable(t)
            } else {
                tape.constant(t)
            }
        })
        .collect();
    let out = tape.apply(op.clone(), &vars).unwrap();
    let engine_out: Vec<f64> = tape.value(out).data().iter().map(|v| *v as f64).collect();
    if rel_err(&engine_out, &ref_out) >= 1e-5 {
        return f64::INFINITY;
    }
    let w = tape.constant(
        Tensor::new(
            tape.shape(out).to_vec(),
            weights.iter().map(|v| *v as f32).collect(),
        )
        .unwrap(),
    );
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    // The weights were rounded to f32 on the tape; use those exact values.
    let weights: Vec<f64> = weights.iter().map(|v| *v as f32 as f64).collect();

    let mut worst: f64 = 0.0;
    for (k, x) in xs.iter().enumerate() {
        if !x.differentiable {
            continue;
        }
        let analytic: Vec<f64> = grads.get_or_zeros(vars[k]).into_iter().map(f64::from).collect();
        let mut numeric = vec![0.0; x.data.len()];
        for j in 0..x.data.len() {
            let mut plus = xs.to_vec();
            plus[k].data[j] += H;
            let mut minus = xs.to_vec();
            minus[k].data[j] -= H;
            numeric[j] = (weighted_loss(op, &plus, &weights) - weighted_loss(op, &minus, &weights)) / (2.0 * H);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn image_shape(rng: &mut Rng) -> [usize; 4] {
    [1 + rng.below(2), 1 + rng.below(3), 2 * (1 + rng.below(2)), 2 * (1 + rng.below(3))]
}

fn run(out: &mut Vec<Outcome>, name: &str, mut make: impl FnMut(&mut Rng) -> (Operator, Vec<Input>)) {
    let mut rng = Rng::seed_from_u64(name.bytes().map(u64::from).sum());
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let (op, xs) = make(&mut rng);
        worst = worst.max(check(&op, &xs, &mut rng));
    }
    out.push(Outcome {
        name: name.to_string(),
        cases: CASES,
        worst,
    });
}

fn matmul(out: &mut Vec<Outcome>) {
    run(out, "matmul", |r| {
        let (m, k, n) = (1 + r.below(4), 1 + r.below(5), 1 + r.below(4));
        (Operator::MatMul, vec![randn(r, &[m, k], 1.0), randn(r, &[k, n], 1.0)])
    });
}

fn conv2d(out: &mut Vec<Outcome>) {
    run(out, "conv2d", |r| {
        let [n, c, h, w] = image_shape(r);
        let k = if r.below(2) == 0 { 1 } else { 3 };
        let pad = if r.below(2) == 0 { k / 2 } else { 0 };
        let (h, w) = (h + 2, w + 2);
        let o = 1 + r.below(3);
        (
            Operator::Conv2d { pad },
            vec![randn(r, &[n, c, h, w], 1.0), randn(r, &[o, c, k, k], 0.5)],
        )
    });
}

fn upsample_and_pool(out: &mut Vec<Outcome>) {
    run(out, "upsample2x", |r| (Operator::Upsample2x, vec![rand_image(r, 1.0)]));
    run(out, "avg_pool2x", |r| (Operator::AvgPool2x, vec![rand_image(r, 1.0)]));
}

fn elementwise_binary(out: &mut Vec<Outcome>) {
    for op in [Operator::Add, Operator::Sub, Operator::Mul] {
        run(out, &format!("{op:?}"), |r| {
            let s = image_shape(r);
            (op.clone(), vec![randn(r, &s, 1.0), randn(r, &s, 1.0)])
        });
    }
    run(out, "scale", |r| {
        let s = r.normal();
        (Operator::Scale(s), vec![rand_image(r, 1.0)])
    });
}

fn concat_channels(out: &mut Vec<Outcome>) {
    run(out, "concat", |r| {
        let [n, c, h, w] = image_shape(r);
        let c2 = 1 + r.below(3);
        (
            Operator::ConcatChannels,
            vec![randn(r, &[n, c, h, w], 1.0), randn(r, &[n, c2, h, w], 1.0)],
        )
    });
}

fn activations(out: &mut Vec<Outcome>) {
    run(out, "leaky_relu", |r| {
        (Operator::LeakyRelu(0.2), vec![{ let s = image_shape(r); randn_away(r, &s, 0.0, 0.01) }])
    });
    run(out, "silu", |r| (Operator::Silu, vec![rand_image(r, 2.0)]));
    run(out, "sigmoid", |r| (Operator::Sigmoid, vec![rand_image(r, 2.0)]));
    run(out, "clamp", |r| {
        let s = image_shape(r);
        let n = s.iter().product();
        // keep samples clear of both clamp edges
        let data = (0..n)
            .map(|_| loop {
                let v = r.normal();
                if (v + 0.5).abs() > 0.01 && (v - 0.5).abs() > 0.01 {
                    break v;
                }
            })
            .collect();
        (Operator::Clamp(-0.5, 0.5), vec![input(&s, data)])
    });
}

fn group_norm(out: &mut Vec<Outcome>) {
    run(out, "group_norm", |r| {
        let n = 1 + r.below(2);
        let groups = 1 + r.below(2);
        let c = groups * (1 + r.below(3));
        let (h, w) = (2 + r.below(3), 2 + r.below(3));
        let gamma = input(&[c], (0..c).map(|_| 1.0 + 0.3 * r.normal()).collect());
        (
            Operator::GroupNorm { groups },
            vec![randn(r, &[n, c, h, w], 1.5), gamma, randn(r, &[c], 0.5)],
        )
    });
}

fn embedding_sum(out: &mut Vec<Outcome>) {
    run(out, "embedding_sum", |r| {
        let (v, e) = (3 + r.below(5), 1 + r.below(6));
        let bags = (0..1 + r.below(4))
            .map(|_| (0..1 + r.below(3)).map(|_| r.below(v)).collect())
            .collect();
        (Operator::EmbeddingSum { bags }, vec![randn(r, &[v, e], 1.0)])
    });
}

fn losses(out: &mut Vec<Outcome>) {
    run(out, "mse", |r| {
        let s = image_shape(r);
        (Operator::Mse, vec![randn(r, &s, 1.0), randn(r, &s, 1.0)])
    });
    run(out, "bce", |r| {
        let n = 1 + r.below(8);
        let targets = (0..n).map(|_| r.uniform() as f32).collect();
        (Operator::Bce { targets }, vec![uniform(r, &[n], 0.05, 0.95)])
    });
    run(out, "cross_entropy", |r| {
        let (n, k) = (1 + r.below(5), 2 + r.below(4));
        let labels = (0..n).map(|_| r.below(k)).collect();
        (Operator::CrossEntropy { labels }, vec![randn(r, &[n, k], 2.0)])
    });
}

fn broadcasting_adds(out: &mut Vec<Outcome>) {
    run(out, "add_channel_bias", |r| {
        let s = image_shape(r);
        (Operator::AddChannelBias, vec![randn(r, &s, 1.0), randn(r, &[s[1]], 1.0)])
    });
    run(out, "add_channel_vec", |r| {
        let s = image_shape(r);
        (Operator::AddChannelVec, vec![randn(r, &s, 1.0), randn(r, &[s[0], s[1]], 1.0)])
    });
    run(out, "add_row_bias", |r| {
        let (n, f) = (1 + r.below(4), 1 + r.below(5));
        (Operator::AddRowBias, vec![randn(r, &[n, f], 1.0), randn(r, &[f], 1.0)])
    });
}

fn reductions_and_reshape(out: &mut Vec<Outcome>) {
    run(out, "sum", |r| (Operator::Sum, vec![rand_image(r, 1.0)]));
    run(out, "mean", |r| (Operator::Mean, vec![rand_image(r, 1.0)]));
    run(out, "mean_spatial", |r| (Operator::MeanSpatial, vec![rand_image(r, 1.0)]));
    run(out, "reshape", |r| {
        let s = image_shape(r);
        let flat = vec![s[0], s[1] * s[2] * s[3]];
        (Operator::Reshape(flat), vec![randn(r, &s, 1.0)])
    });
}

fn rand_image(rng: &mut Rng, std: f32) -> Input {
    let s = image_shape(rng);
    randn(rng, &s, std)
}

/// Runs every operator suite.
pub fn all_operators() -> Vec<Outcome> {
    let mut out = Vec::new();
    matmul(&mut out);
    conv2d(&mut out);
    upsample_and_pool(&mut out);
    elementwise_binary(&mut out);
    concat_channels(&mut out);
    activations(&mut out);
    group_norm(&mut out);
    embedding_sum(&mut out);
    losses(&mut out);
    broadcasting_adds(&mut out);
    reductions_and_reshape(&mut out);
    out
}
