//! Non-IID client datasets drawn from a truncated-normal distribution over
//! the number of classes each client holds.

use std::fmt;

use libm::erfc;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SamplePool;
use crate::error::{Error, Result};

/// Location/spread of the class-count distribution, truncated to `[a, b]`.
///
/// `sigma == 0` is the point mass at `mu`; `sigma == f64::INFINITY` is the
/// uniform distribution over `1..=classes`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassDistParams {
    pub mu: f64,
    #[serde(with = "crate::config::sigma_serde")]
    pub sigma: f64,
    #[serde(default = "default_a")]
    pub a: f64,
    #[serde(default = "default_b")]
    pub b: f64,
    #[serde(default = "default_classes")]
    pub classes: usize,
}

fn default_a() -> f64 {
    0.5
}
fn default_b() -> f64 {
    10.5
}
fn default_classes() -> usize {
    10
}

impl Default for ClassDistParams {
    fn default() -> Self {
        Self {
            mu: 2.0,
            sigma: 0.7,
            a: 0.5,
            b: 10.5,
            classes: 10,
        }
    }
}

impl ClassDistParams {
    pub fn new(mu: f64, sigma: f64) -> Self {
        Self {
            mu,
            sigma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidClassDist(m));
        let l = self.classes;
        if l < 2 {
            return bad(format!("classes must be >= 2, got {l}"));
        }
        if !(self.sigma >= 0.0) {
            return bad(format!("sigma must be >= 0 or inf, got {}", self.sigma));
        }
        if !(self.a.is_finite() && self.b.is_finite() && self.a < self.b) {
            return bad(format!("need finite a < b, got a={} b={}", self.a, self.b));
        }
        // The support must lie inside the union of class bins, otherwise some
        // mass falls outside 1..=L and the bins cannot sum to one.
        let hi = l as f64 + 0.5;
        if self.a < 0.5 || self.b > hi {
            return bad(format!(
                "truncation [{}, {}] must lie within [0.5, {hi}]",
                self.a, self.b
            ));
        }
        if self.sigma == 0.0 {
            let mu = self.mu;
            if mu.fract() != 0.0 || mu < 1.0 || mu > l as f64 {
                return Err(Error::PointMassNotInteger { mu, classes: l });
            }
        } else if self.sigma.is_finite() && !(self.a <= self.mu && self.mu <= self.b) {
            return bad(format!("mu={} outside [{}, {}]", self.mu, self.a, self.b));
        }
        Ok(())
    }
}

/// Standard-normal probability mass on `[z1, z2]`, computed from whichever
/// tail keeps the subtraction well conditioned.
fn normal_mass(z1: f64, z2: f64) -> f64 {
    debug_assert!(z1 <= z2);
    let s = std::f64::consts::SQRT_2;
    if z1 >= 0.0 {
        0.5 * (erfc(z1 / s) - erfc(z2 / s))
    } else if z2 <= 0.0 {
        0.5 * (erfc(-z2 / s) - erfc(-z1 / s))
    } else {
        1.0 - 0.5 * erfc(-z1 / s) - 0.5 * erfc(z2 / s)
    }
}

/// CDF of `N(mu, sigma^2)` truncated to `[a, b]`, evaluated at `x`.
pub fn truncated_normal_cdf(x: f64, p: &ClassDistParams) -> Result<f64> {
    if !(p.sigma > 0.0 && p.sigma.is_finite()) {
        return Err(Error::InvalidSigma(p.sigma));
    }
    if !(p.a <= x && x <= p.b) {
        return Err(Error::OutsideTruncation { x, a: p.a, b: p.b });
    }
    let z = |v: f64| (v - p.mu) / p.sigma;
    let total = normal_mass(z(p.a), z(p.b));
    Ok((normal_mass(z(p.a), z(x)) / total).clamp(0.0, 1.0))
}

/// Probability `r_l` that a client holds exactly `l` classes, `l = 1..=L`
/// (index `l - 1` in the result).
pub fn class_count_pmf(p: &ClassDistParams) -> Result<Vec<f64>> {
    p.validate()?;
    let l = p.classes;
    if p.sigma.is_infinite() {
        return Ok(vec![1.0 / l as f64; l]);
    }
    if p.sigma == 0.0 {
        let mut r = vec![0.0; l];
        r[p.mu as usize - 1] = 1.0;
        return Ok(r);
    }
    let z = |v: f64| (v - p.mu) / p.sigma;
    let total = normal_mass(z(p.a), z(p.b));
    Ok((1..=l)
        .map(|k| {
            let lo = (k as f64 - 0.5).max(p.a);
            let hi = (k as f64 + 0.5).min(p.b);
            if lo < hi {
                normal_mass(z(lo), z(hi)) / total
            } else {
                0.0
            }
        })
        .collect())
}

/// Apportions `total` units according to `shares` (which must sum to one)
/// with the largest-remainder method; ties go to the lower index.
pub fn largest_remainder(total: usize, shares: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    // Stable sort keeps lower indices first among equal remainders.
    order.sort_by(|&i, &j| {
        let ri = quotas[i] - quotas[i].floor();
        let rj = quotas[j] - quotas[j].floor();
        rj.total_cmp(&ri)
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-class sample counts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassHistogram(Vec<u64>);

impl ClassHistogram {
    pub fn zeros(classes: usize) -> Self {
        Self(vec![0; classes])
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        Self(counts)
    }

    pub fn counts(&self) -> &[u64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn add(&mut self, other: &ClassHistogram) {
        assert_eq!(self.0.len(), other.0.len(), "histogram class count");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn increment(&mut self, class: usize, by: u64) {
        self.0[class] += by;
    }

    pub fn plus(&self, other: &ClassHistogram) -> ClassHistogram {
        let mut out = self.clone();
        out.add(other);
        out
    }
}

impl fmt::Display for ClassHistogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u64::to_string).collect();
        write!(f, "{}", parts.join(";"))
    }
}

/// One client's local data: indices into the shared training pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientShard {
    pub client_id: usize,
    /// Sorted class labels present on the client.
    pub class_set: Vec<usize>,
    /// Pool indices in the client's stable item order.
    pub samples: Vec<usize>,
    /// For each class, positions into `samples` (ascending).
    pub per_class_items: Vec<Vec<usize>>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn histogram(&self) -> ClassHistogram {
        ClassHistogram(
            self.per_class_items
                .iter()
                .map(|v| v.len() as u64)
                .collect(),
        )
    }
}

/// Inclusive bounds on the number of samples per client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeRange {
    pub min: usize,
    pub max: usize,
}

impl Default for SizeRange {
    fn default() -> Self {
        Self {
            min: 100,
            max: 1000,
        }
    }
}

/// Splits `n` as evenly as possible over `parts`; the first `n % parts`
/// parts receive one extra item.
fn even_split(n: usize, parts: usize) -> impl Iterator<Item = usize> {
    let base = n / parts;
    let extra = n % parts;
    (0..parts).map(move |i| base + usize::from(i < extra))
}

/// Draws `clients` shards from `pool`.
///
/// Class-set sizes follow the largest-remainder apportionment of
/// `clients * r_l`, assigned to clients by a seeded shuffle. Each client
/// then draws its class set uniformly without replacement, its size
/// uniformly from `sizes`, and its samples with replacement within each
/// chosen class.
pub fn partition<R: Rng + ?Sized>(
    pool: &SamplePool,
    clients: usize,
    params: &ClassDistParams,
    sizes: SizeRange,
    rng: &mut R,
) -> Result<Vec<ClientShard>> {
    let l = params.classes;
    if pool.classes() != l {
        return Err(Error::InvalidClassDist(format!(
            "dataset has {} classes, distribution expects {l}",
            pool.classes()
        )));
    }
    if sizes.min < l || sizes.min > sizes.max {
        return Err(Error::InvalidClassDist(format!(
            "size range {}..={} must satisfy {l} <= min <= max",
            sizes.min, sizes.max
        )));
    }
    let pmf = class_count_pmf(params)?;
    let counts = largest_remainder(clients, &pmf);
    let mut set_sizes: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| std::iter::repeat_n(i + 1, c))
        .collect();
    set_sizes.shuffle(rng);

    let by_class = pool.class_index();
    let mut shards = Vec::with_capacity(clients);
    for (client_id, &set_size) in set_sizes.iter().enumerate() {
        let drawn = index::sample(rng, l, set_size).into_vec();
        let n = rng.random_range(sizes.min..=sizes.max);
        let mut samples = Vec::with_capacity(n);
        for (&class, take) in drawn.iter().zip(even_split(n, set_size)) {
            let members = &by_class[class];
            if members.is_empty() {
                return Err(Error::EmptyClassPool(class));
            }
            samples.extend((0..take).map(|_| members[rng.random_range(0..members.len())]));
        }
        samples.shuffle(rng);

        let mut per_class_items = vec![Vec::new(); l];
        for (pos, &s) in samples.iter().enumerate() {
            per_class_items[pool.label(s)].push(pos);
        }
        let mut class_set = drawn;
        class_set.sort_unstable();
        shards.push(ClientShard {
            client_id,
            class_set,
            samples,
            per_class_items,
        });
    }
    Ok(shards)
}
