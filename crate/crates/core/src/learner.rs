//! Desk-scale classifiers trained with plain mini-batch SGD.
//!
//! The default model is softmax regression with parameters stored
//! class-major: for class `c`, the `dim` feature weights followed by the
//! bias, so `P = (dim + 1) * classes`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SamplePool;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub weights: Vec<f64>,
    /// Samples behind the most recent update; the aggregation weight.
    pub sample_weight: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyperParams {
    pub batch_size: usize,
    pub epochs_per_round: usize,
    pub initial_lr: f64,
    /// Multiplicative decay per global round.
    pub lr_decay: f64,
}

impl Default for TrainHyperParams {
    fn default() -> Self {
        Self {
            batch_size: 50,
            epochs_per_round: 5,
            initial_lr: 0.25,
            lr_decay: 0.99,
        }
    }
}

impl TrainHyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("hp.batch_size must be >= 1".into()));
        }
        if self.epochs_per_round == 0 {
            return Err(Error::Config("hp.epochs_per_round must be >= 1".into()));
        }
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!(
                "hp.initial_lr must be >= 0, got {}",
                self.initial_lr
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "hp.lr_decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        Ok(())
    }

    pub fn learning_rate(&self, round: usize) -> f64 {
        self.initial_lr * self.lr_decay.powi(round as i32)
    }
}

/// Which classifier the learner trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    #[default]
    Softmax,
    Mlp {
        hidden: usize,
    },
}

/// Shape of the classifier. With `hidden == 0` this is multinomial softmax
/// regression; otherwise a one-hidden-layer `tanh` network.
///
/// Layout: hidden rows `(dim weights, bias)` first, then output rows
/// `(inputs weights, bias)` where `inputs` is `hidden` or `dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Classifier {
    pub dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

struct Scratch {
    h: Vec<f64>,
    z: Vec<f64>,
    dh: Vec<f64>,
}

impl Classifier {
    pub fn new(dim: usize, classes: usize) -> Self {
        Self {
            dim,
            hidden: 0,
            classes,
        }
    }

    pub fn mlp(dim: usize, hidden: usize, classes: usize) -> Self {
        Self {
            dim,
            hidden,
            classes,
        }
    }

    pub fn from_spec(spec: ModelSpec, dim: usize, classes: usize) -> Self {
        match spec {
            ModelSpec::Softmax => Self::new(dim, classes),
            ModelSpec::Mlp { hidden } => Self::mlp(dim, hidden, classes),
        }
    }

    fn inputs(&self) -> usize {
        if self.hidden == 0 {
            self.dim
        } else {
            self.hidden
        }
    }

    fn hidden_params(&self) -> usize {
        self.hidden * (self.dim + 1)
    }

    pub fn param_count(&self) -> usize {
        self.hidden_params() + (self.inputs() + 1) * self.classes
    }

    /// Softmax weights drawn uniformly from `[-0.01, 0.01]`; MLP layers
    /// from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(&self, seed: u64) -> Result<ModelParams> {
        if self.dim == 0 || self.classes == 0 {
            return Err(Error::EmptyModel);
        }
        let mut rng = seed::rng_from(seed, &[seed::stream::INIT]);
        let weights = if self.hidden == 0 {
            (0..self.param_count())
                .map(|_| rng.random_range(-0.01..=0.01))
                .collect()
        } else {
            let a = 1.0 / (self.dim as f64).sqrt();
            let b = 1.0 / (self.hidden as f64).sqrt();
            let mut w: Vec<f64> = (0..self.hidden_params())
                .map(|_| rng.random_range(-a..=a))
                .collect();
            w.extend((0..(self.hidden + 1) * self.classes).map(|_| rng.random_range(-b..=b)));
            w
        };
        Ok(ModelParams {
            weights,
            sample_weight: 0,
        })
    }

    fn check(&self, m: &ModelParams) -> Result<()> {
        if m.weights.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                actual: m.weights.len(),
            });
        }
        Ok(())
    }

    fn scratch(&self) -> Scratch {
        Scratch {
            h: vec![0.0; self.hidden],
            z: vec![0.0; self.classes],
            dh: vec![0.0; self.hidden],
        }
    }

    fn affine(rows: &[f64], x: &[f64], out: &mut [f64]) {
        let stride = x.len() + 1;
        for (c, z) in out.iter_mut().enumerate() {
            let row = &rows[c * stride..(c + 1) * stride];
            *z = row[..x.len()]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + row[x.len()];
        }
    }

    /// Fills `s.h` (MLP only) and `s.z`.
    fn forward(&self, w: &[f64], x: &[f64], s: &mut Scratch) {
        let (first, out) = w.split_at(self.hidden_params());
        if self.hidden == 0 {
            Self::affine(out, x, &mut s.z);
        } else {
            Self::affine(first, x, &mut s.h);
            s.h.iter_mut().for_each(|v| *v = v.tanh());
            Self::affine(out, &s.h, &mut s.z);
        }
    }

    pub fn logits(&self, w: &[f64], x: &[f64], out: &mut [f64]) {
        let mut s = self.scratch();
        self.forward(w, x, &mut s);
        out.copy_from_slice(&s.z);
    }

    /// Turns logits into probabilities in place; returns `log(sum exp)`.
    fn softmax(z: &mut [f64]) -> f64 {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in z.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in z.iter_mut() {
            *v /= sum;
        }
        max + sum.ln()
    }

    /// Mean cross-entropy over `batch` and its gradient, written to `grad`.
    pub fn loss_and_grad(
        &self,
        w: &[f64],
        pool: &SamplePool,
        batch: &[usize],
        grad: &mut [f64],
    ) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let split = self.hidden_params();
        let inputs = self.inputs();
        let stride = inputs + 1;
        let out_w = &w[split..];
        let mut s = self.scratch();
        let mut loss = 0.0;
        for &i in batch {
            let x = pool.features(i);
            let y = pool.label(i);
            self.forward(w, x, &mut s);
            let zy = s.z[y];
            let lse = Self::softmax(&mut s.z);
            loss += lse - zy;
            s.z[y] -= 1.0;
            let a: &[f64] = if self.hidden == 0 { x } else { &s.h };
            let (g_first, g_out) = grad.split_at_mut(split);
            s.dh.iter_mut().for_each(|v| *v = 0.0);
            for (c, &dz) in s.z.iter().enumerate() {
                let row = &mut g_out[c * stride..(c + 1) * stride];
                for (g, ai) in row[..inputs].iter_mut().zip(a) {
                    *g += dz * ai;
                }
                row[inputs] += dz;
                if self.hidden > 0 {
                    let wrow = &out_w[c * stride..c * stride + inputs];
                    for (d, wi) in s.dh.iter_mut().zip(wrow) {
                        *d += dz * wi;
                    }
                }
            }
            if self.hidden > 0 {
                let hs = self.dim + 1;
                for (j, (&d, &h)) in s.dh.iter().zip(&s.h).enumerate() {
                    let dpre = d * (1.0 - h * h);
                    let row = &mut g_first[j * hs..(j + 1) * hs];
                    for (g, xi) in row[..self.dim].iter_mut().zip(x) {
                        *g += dpre * xi;
                    }
                    row[self.dim] += dpre;
                }
            }
        }
        let n = batch.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        loss / n
    }

    pub fn predict(&self, w: &[f64], x: &[f64]) -> usize {
        let mut s = self.scratch();
        self.forward(w, x, &mut s);
        // First maximum wins.
        let mut best = 0;
        for c in 1..self.classes {
            if s.z[c] > s.z[best] {
                best = c;
            }
        }
        best
    }

    /// Runs `epochs_per_round` shuffled mini-batch SGD epochs over
    /// `samples` (pool indices). Returns the mean loss of the last epoch.
    pub fn train<R: Rng + ?Sized>(
        &self,
        model: &ModelParams,
        pool: &SamplePool,
        samples: &[usize],
        hp: &TrainHyperParams,
        round: usize,
        rng: &mut R,
        client: Option<usize>,
    ) -> Result<(ModelParams, f64)> {
        self.check(model)?;
        let lr = hp.learning_rate(round);
        let mut w = model.weights.clone();
        let mut grad = vec![0.0; w.len()];
        let mut order = samples.to_vec();
        let mut last = 0.0;
        for _ in 0..hp.epochs_per_round {
            order.shuffle(rng);
            let mut total = 0.0;
            for batch in order.chunks(hp.batch_size) {
                let loss = self.loss_and_grad(&w, pool, batch, &mut grad);
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { round, client });
                }
                total += loss * batch.len() as f64;
                for (wi, gi) in w.iter_mut().zip(&grad) {
                    *wi -= lr * gi;
                }
            }
            last = total / order.len().max(1) as f64;
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { round, client });
        }
        Ok((
            ModelParams {
                weights: w,
                sample_weight: samples.len() as u64,
            },
            last,
        ))
    }

    /// Mean cross-entropy of `model` on `samples`.
    pub fn loss(&self, model: &ModelParams, pool: &SamplePool, samples: &[usize]) -> f64 {
        let mut grad = vec![0.0; self.param_count()];
        self.loss_and_grad(&model.weights, pool, samples, &mut grad)
    }
}

/// A client's local update on its own samples.
pub fn local_update<R: Rng + ?Sized>(
    arch: &Classifier,
    model: &ModelParams,
    pool: &SamplePool,
    samples: &[usize],
    hp: &TrainHyperParams,
    round: usize,
    rng: &mut R,
    client: usize,
) -> Result<ModelParams> {
    if samples.is_empty() {
        return Ok(ModelParams {
            weights: model.weights.clone(),
            sample_weight: 0,
        });
    }
    Ok(arch
        .train(model, pool, samples, hp, round, rng, Some(client))?
        .0)
}

/// The server's update on the uploaded data; identity with zero weight
/// when nothing has been uploaded yet.
pub fn server_update<R: Rng + ?Sized>(
    arch: &Classifier,
    model: &ModelParams,
    pool: &SamplePool,
    samples: &[usize],
    hp: &TrainHyperParams,
    round: usize,
    rng: &mut R,
) -> Result<ModelParams> {
    if samples.is_empty() {
        return Ok(ModelParams {
            weights: model.weights.clone(),
            sample_weight: 0,
        });
    }
    Ok(arch.train(model, pool, samples, hp, round, rng, None)?.0)
}

/// Sample-weighted parameter average. If every weight is zero the models
/// are averaged uniformly.
pub fn aggregate(models: &[ModelParams]) -> Result<ModelParams> {
    let first = models.first().ok_or(Error::NothingToAggregate)?;
    let p = first.weights.len();
    if let Some(m) = models.iter().find(|m| m.weights.len() != p) {
        return Err(Error::DimensionMismatch {
            expected: p,
            actual: m.weights.len(),
        });
    }
    let total: u64 = models.iter().map(|m| m.sample_weight).sum();
    let weighted: Vec<(f64, &ModelParams)> = if total == 0 {
        models.iter().map(|m| (1.0, m)).collect()
    } else {
        models
            .iter()
            .filter(|m| m.sample_weight > 0)
            .map(|m| (m.sample_weight as f64, m))
            .collect()
    };
    // Running weighted mean: exact on identical inputs, stays in the hull.
    let mut out = weighted[0].1.weights.clone();
    let mut acc = weighted[0].0;
    for &(w, m) in &weighted[1..] {
        acc += w;
        let t = w / acc;
        for (o, v) in out.iter_mut().zip(&m.weights) {
            *o += t * (v - *o);
        }
    }
    Ok(ModelParams {
        weights: out,
        sample_weight: total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Accuracy per class; `NaN` for classes absent from the test set.
    pub per_class: Vec<f64>,
    pub class_counts: Vec<usize>,
}

pub fn evaluate(arch: &Classifier, model: &ModelParams, test: &SamplePool) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    arch.check(model)?;
    let mut correct = vec![0usize; arch.classes];
    let mut counts = vec![0usize; arch.classes];
    for i in 0..test.len() {
        let y = test.label(i);
        counts[y] += 1;
        if arch.predict(&model.weights, test.features(i)) == y {
            correct[y] += 1;
        }
    }
    let per_class = correct
        .iter()
        .zip(&counts)
        .map(|(&c, &n)| {
            if n == 0 {
                f64::NAN
            } else {
                c as f64 / n as f64
            }
        })
        .collect();
    Ok(Evaluation {
        accuracy: correct.iter().sum::<usize>() as f64 / test.len() as f64,
        per_class,
        class_counts: counts,
    })
}

pub const CHECKPOINT_MAGIC: &str = "hybridfl-model";

/// Text checkpoint: a header line `hybridfl-model v1 params=<P>
/// sample_weight=<n>` followed by one parameter per line in shortest
/// round-trip decimal form.
pub fn write_checkpoint(model: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!(
        "{CHECKPOINT_MAGIC} v1 params={} sample_weight={}\n",
        model.weights.len(),
        model.sample_weight
    );
    for w in &model.weights {
        writeln!(out, "{w}").unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty checkpoint"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (params, sample_weight) = match fields.as_slice() {
        [CHECKPOINT_MAGIC, "v1", p, s] => (
            p.strip_prefix("params=")
                .and_then(|v| v.parse::<usize>().ok()),
            s.strip_prefix("sample_weight=")
                .and_then(|v| v.parse::<u64>().ok()),
        ),
        _ => (None, None),
    };
    let (Some(params), Some(sample_weight)) = (params, sample_weight) else {
        return Err(bad("malformed header"));
    };
    let weights = lines
        .map(|l| {
            l.trim()
                .parse::<f64>()
                .map_err(|_| bad("bad parameter value"))
        })
        .collect::<Result<Vec<_>>>()?;
    if weights.len() != params {
        return Err(bad("parameter count does not match header"));
    }
    Ok(ModelParams {
        weights,
        sample_weight,
    })
}
