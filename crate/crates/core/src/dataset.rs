//! Labeled sample pools and the on-disk dataset format.
//!
//! File layout (UTF-8 text, one record per line):
//!
//! ```text
//! hybridfl-dataset v1 dim=<D> classes=<L>
//! <split>,<label>,<x_1>,...,<x_D>
//! ```
//!
//! `<split>` is `train` or `test`, `<label>` is an integer in `0..L`, and
//! each feature is a decimal real. Blank lines are ignored. Feature values
//! are written with 6 fractional digits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;

pub const HEADER_MAGIC: &str = "hybridfl-dataset";
pub const FORMAT_VERSION: u32 = 1;

/// A flat, row-major table of feature vectors with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePool {
    dim: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl SamplePool {
    pub fn new(dim: usize, classes: usize) -> Self {
        Self {
            dim,
            classes,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &[f64], label: usize) {
        assert_eq!(x.len(), self.dim, "feature length");
        assert!(label < self.classes, "label out of range");
        self.features.extend_from_slice(x);
        self.labels.push(label);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Indices of every sample, grouped by class.
    pub fn class_index(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: SamplePool,
    pub test: SamplePool,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.train.dim
    }

    pub fn classes(&self) -> usize {
        self.train.classes
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::DatasetFormat {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| bad(1, "missing header".into()))?;
        let (dim, classes) = parse_header(header).map_err(|m| bad(1, m))?;

        let mut train = SamplePool::new(dim, classes);
        let mut test = SamplePool::new(dim, classes);
        let mut x = Vec::with_capacity(dim);
        for (i, line) in lines {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let split = fields.next().unwrap_or_default();
            let target = match split {
                "train" => &mut train,
                "test" => &mut test,
                other => return Err(bad(line_no, format!("unknown split {other:?}"))),
            };
            let label: usize = fields
                .next()
                .ok_or_else(|| bad(line_no, "missing label".into()))?
                .trim()
                .parse()
                .map_err(|e| bad(line_no, format!("label: {e}")))?;
            if label >= classes {
                return Err(bad(line_no, format!("label {label} >= classes {classes}")));
            }
            x.clear();
            for f in fields {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|e| bad(line_no, format!("feature: {e}")))?;
                if !v.is_finite() {
                    return Err(bad(line_no, "non-finite feature".into()));
                }
                x.push(v);
            }
            if x.len() != dim {
                return Err(bad(
                    line_no,
                    format!("expected {dim} features, found {}", x.len()),
                ));
            }
            target.push(&x, label);
        }
        if train.is_empty() {
            return Err(bad(0, "no training samples".into()));
        }
        if test.is_empty() {
            return Err(bad(0, "no test samples".into()));
        }
        Ok(Self { train, test })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{HEADER_MAGIC} v{FORMAT_VERSION} dim={} classes={}\n",
            self.dim(),
            self.classes()
        );
        for (split, pool) in [("train", &self.train), ("test", &self.test)] {
            for i in 0..pool.len() {
                write!(out, "{split},{}", pool.label(i)).unwrap();
                for v in pool.features(i) {
                    write!(out, ",{v:.6}").unwrap();
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn parse_header(header: &str) -> std::result::Result<(usize, usize), String> {
    let mut parts = header.split_whitespace();
    if parts.next() != Some(HEADER_MAGIC) {
        return Err(format!("expected header starting with {HEADER_MAGIC:?}"));
    }
    let version = parts.next().unwrap_or_default();
    if version != format!("v{FORMAT_VERSION}") {
        return Err(format!("unsupported version {version:?}"));
    }
    let mut dim = None;
    let mut classes = None;
    for kv in parts {
        match kv.split_once('=') {
            Some(("dim", v)) => dim = v.parse().ok(),
            Some(("classes", v)) => classes = v.parse().ok(),
            _ => return Err(format!("unexpected header field {kv:?}")),
        }
    }
    match (dim, classes) {
        (Some(d), Some(l)) if d > 0 && l >= 2 => Ok((d, l)),
        _ => Err("header needs dim>0 and classes>=2".into()),
    }
}

/// Parameters of the synthetic benchmark: `classes` classes, each a
/// uniform mixture of `modes` Gaussian components whose centers are drawn
/// once from `N(0, spread^2 I)`, with isotropic noise of std `noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub classes: usize,
    pub modes: usize,
    pub spread: f64,
    pub noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// The bundled desk dataset.
    fn default() -> Self {
        Self {
            dim: 16,
            classes: 10,
            modes: 2,
            spread: 1.0,
            noise: 1.0,
            train_per_class: 500,
            test_per_class: 200,
            seed: 2019,
        }
    }
}

pub fn synthesize(spec: &SyntheticSpec) -> Dataset {
    let mut rng = seed::rng_from(spec.seed, &[]);
    let centers: Vec<Vec<f64>> = (0..spec.classes * spec.modes.max(1))
        .map(|_| {
            (0..spec.dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    spec.spread * z
                })
                .collect()
        })
        .collect();
    let mut draw = |pool: &mut SamplePool, per_class: usize| {
        let mut x = vec![0.0; spec.dim];
        for (label, class_centers) in centers.chunks(spec.modes.max(1)).enumerate() {
            for _ in 0..per_class {
                let center = &class_centers[rng.random_range(0..class_centers.len())];
                for (xi, ci) in x.iter_mut().zip(center) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *xi = ci + spec.noise * z;
                }
                // Round-trip exactly through the 6-digit text format.
                for xi in x.iter_mut() {
                    *xi = (*xi * 1e6).round() / 1e6;
                }
                pool.push(&x, label);
            }
        }
    };
    let mut train = SamplePool::new(spec.dim, spec.classes);
    let mut test = SamplePool::new(spec.dim, spec.classes);
    draw(&mut train, spec.train_per_class);
    draw(&mut test, spec.test_per_class);
    Dataset { train, test }
}
