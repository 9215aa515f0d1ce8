//! Experiment configuration: TOML schema, defaults and validation.
//!
//! Field names follow the experiment notation (`K`, `C`, `r_UL`, ...).
//! Unknown keys are rejected. Relative dataset paths resolve against the
//! directory of the config file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{ModelSpec, TrainHyperParams};
use crate::netcomp::CellConfig;
use crate::partitioner::{ClassDistParams, SizeRange};
use crate::scheduler::{ClientPolicy, CvDefinition, DataPolicy, SelectionPolicy};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    FedCS,
    HybridFL,
    Centralized,
}

/// A named protocol/policy combination as compared in experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Method {
    pub protocol: Protocol,
    pub policy: SelectionPolicy,
}

impl Method {
    pub const FEDCS: Method =
        Method::new(Protocol::FedCS, ClientPolicy::MaxClient, DataPolicy::None);
    pub const IID_MIN_CV: Method =
        Method::new(Protocol::HybridFL, ClientPolicy::MinCv, DataPolicy::Iid);
    pub const MAX_THROUGHPUT_MIN_CV: Method = Method::new(
        Protocol::HybridFL,
        ClientPolicy::MinCv,
        DataPolicy::MaxThroughput,
    );
    pub const IID_MAX_CLIENT: Method =
        Method::new(Protocol::HybridFL, ClientPolicy::MaxClient, DataPolicy::Iid);
    pub const MAX_THROUGHPUT_MAX_CLIENT: Method = Method::new(
        Protocol::HybridFL,
        ClientPolicy::MaxClient,
        DataPolicy::MaxThroughput,
    );
    pub const CENTRALIZED: Method = Method::new(
        Protocol::Centralized,
        ClientPolicy::MaxClient,
        DataPolicy::Iid,
    );

    pub const ALL: [Method; 6] = [
        Method::FEDCS,
        Method::MAX_THROUGHPUT_MIN_CV,
        Method::IID_MIN_CV,
        Method::MAX_THROUGHPUT_MAX_CLIENT,
        Method::IID_MAX_CLIENT,
        Method::CENTRALIZED,
    ];

    pub const fn new(
        protocol: Protocol,
        client_policy: ClientPolicy,
        data_policy: DataPolicy,
    ) -> Self {
        Self {
            protocol,
            policy: SelectionPolicy {
                client_policy,
                data_policy,
            },
        }
    }

    pub fn default_for(protocol: Protocol) -> Self {
        match protocol {
            Protocol::FedCS => Self::FEDCS,
            Protocol::HybridFL => Self::IID_MIN_CV,
            Protocol::Centralized => Self::CENTRALIZED,
        }
    }

    pub fn label(&self) -> String {
        match self.protocol {
            Protocol::FedCS => "FedCS".into(),
            Protocol::Centralized => "Centralized".into(),
            Protocol::HybridFL => {
                let data = match self.policy.data_policy {
                    DataPolicy::Iid => "IID",
                    DataPolicy::MaxThroughput => "maxThroughput",
                    DataPolicy::None => "none",
                };
                let client = match self.policy.client_policy {
                    ClientPolicy::MinCv => "minCV",
                    ClientPolicy::MaxClient => "maxClient",
                };
                format!("{data}/{client}")
            }
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub partition: u64,
    pub resources: u64,
    pub training: u64,
    pub fluctuation: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            partition: 1,
            resources: 2,
            training: 3,
            fluctuation: 4,
        }
    }
}

impl Seeds {
    /// All four streams from one base seed.
    pub fn from_base(base: u64) -> Self {
        Self {
            partition: base,
            resources: base.wrapping_add(1),
            training: base.wrapping_add(2),
            fluctuation: base.wrapping_add(3),
        }
    }

    pub fn for_trial(&self, trial: usize) -> Self {
        let d = |s: u64| seed::derive(s, &[seed::stream::TRIAL, trial as u64]);
        Self {
            partition: d(self.partition),
            resources: d(self.resources),
            training: d(self.training),
            fluctuation: d(self.fluctuation),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset file (see [`crate::dataset`]).
    pub dataset: PathBuf,
    #[serde(rename = "K", default = "defaults::clients")]
    pub clients: usize,
    #[serde(rename = "C", default = "defaults::fraction")]
    pub fraction: f64,
    #[serde(rename = "r_UL", default = "defaults::upload_ratio")]
    pub upload_ratio: f64,
    /// Per-round deadline, seconds.
    #[serde(rename = "T_round", default = "defaults::round_deadline")]
    pub round_deadline_s: f64,
    /// Final deadline, minutes.
    #[serde(rename = "T_final", default = "defaults::final_deadline")]
    pub final_deadline_min: f64,
    /// Length of the trailing accuracy window, minutes.
    #[serde(default = "defaults::summary_window")]
    pub summary_window: f64,
    #[serde(rename = "r_var", default)]
    pub fluctuation: f64,
    #[serde(default = "defaults::protocol")]
    pub protocol: Protocol,
    /// Defaults to the protocol's canonical policy when omitted.
    #[serde(default)]
    pub policy: Option<SelectionPolicy>,
    #[serde(default)]
    pub cv_definition: CvDefinition,
    #[serde(default = "defaults::trials")]
    pub trials: usize,
    #[serde(default = "defaults::model_bytes")]
    pub model_bytes: u64,
    #[serde(default = "defaults::item_bytes")]
    pub item_bytes: u64,
    #[serde(default)]
    pub shard_size: SizeRange,
    /// Range of average compute capability, samples/s.
    #[serde(default = "defaults::capability_range")]
    pub capability_range: (f64, f64),
    #[serde(default)]
    pub dist_params: ClassDistParams,
    #[serde(default)]
    pub cell: CellConfig,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub hp: TrainHyperParams,
    #[serde(default)]
    pub seeds: Seeds,
    /// Optional parameter sweep used by the `sweep` command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

mod defaults {
    use super::Protocol;

    pub fn clients() -> usize {
        1000
    }
    pub fn fraction() -> f64 {
        0.1
    }
    pub fn upload_ratio() -> f64 {
        0.01
    }
    pub fn round_deadline() -> f64 {
        180.0
    }
    pub fn final_deadline() -> f64 {
        400.0
    }
    pub fn summary_window() -> f64 {
        100.0
    }
    pub fn protocol() -> Protocol {
        Protocol::HybridFL
    }
    pub fn trials() -> usize {
        10
    }
    pub fn model_bytes() -> u64 {
        1_000_000
    }
    pub fn item_bytes() -> u64 {
        3072
    }
    pub fn capability_range() -> (f64, f64) {
        (10.0, 100.0)
    }
}

impl ExperimentConfig {
    /// Default configuration for `dataset`.
    pub fn with_dataset(dataset: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            clients: defaults::clients(),
            fraction: defaults::fraction(),
            upload_ratio: defaults::upload_ratio(),
            round_deadline_s: defaults::round_deadline(),
            final_deadline_min: defaults::final_deadline(),
            summary_window: defaults::summary_window(),
            fluctuation: 0.0,
            protocol: defaults::protocol(),
            policy: None,
            cv_definition: CvDefinition::default(),
            trials: defaults::trials(),
            model_bytes: defaults::model_bytes(),
            item_bytes: defaults::item_bytes(),
            shard_size: SizeRange::default(),
            capability_range: defaults::capability_range(),
            dist_params: ClassDistParams::default(),
            cell: CellConfig::default(),
            model: ModelSpec::default(),
            hp: TrainHyperParams::default(),
            seeds: Seeds::default(),
            sweep: None,
        }
    }

    pub fn method(&self) -> Method {
        match self.policy {
            Some(policy) => Method {
                protocol: self.protocol,
                policy,
            },
            None => Method::default_for(self.protocol),
        }
    }

    pub fn set_method(&mut self, m: Method) {
        self.protocol = m.protocol;
        self.policy = Some(m.policy);
    }

    /// Number of candidates asked per round, `ceil(K * C)`.
    pub fn candidates_per_round(&self) -> usize {
        // Guard against 100 * 0.1 landing a hair above an integer.
        ((self.clients as f64 * self.fraction) - 1e-9)
            .ceil()
            .max(1.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.clients == 0 {
            return fail("K must be >= 1".into());
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return fail(format!("C must be in (0, 1], got {}", self.fraction));
        }
        if !(0.0..=1.0).contains(&self.upload_ratio) {
            return fail(format!("r_UL must be in [0, 1], got {}", self.upload_ratio));
        }
        if !(self.round_deadline_s > 0.0 && self.round_deadline_s.is_finite()) {
            return fail(format!(
                "T_round must be positive, got {}",
                self.round_deadline_s
            ));
        }
        if !(self.final_deadline_min > 0.0 && self.final_deadline_min.is_finite()) {
            return fail(format!(
                "T_final must be positive, got {}",
                self.final_deadline_min
            ));
        }
        if !(self.summary_window > 0.0 && self.summary_window.is_finite()) {
            return fail(format!(
                "summary_window must be positive, got {}",
                self.summary_window
            ));
        }
        if !(0.0..1.0).contains(&self.fluctuation) {
            return fail(format!("r_var must be in [0, 1), got {}", self.fluctuation));
        }
        if self.trials == 0 {
            return fail("trials must be >= 1".into());
        }
        if self.item_bytes == 0 {
            return fail("item_bytes must be positive".into());
        }
        let (lo, hi) = self.capability_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return fail(format!(
                "capability_range must satisfy 0 < min <= max, got ({lo}, {hi})"
            ));
        }
        let s = self.shard_size;
        if s.min < self.dist_params.classes || s.min > s.max {
            return fail(format!(
                "shard_size must satisfy classes ({}) <= min <= max, got {}..={}",
                self.dist_params.classes, s.min, s.max
            ));
        }
        if let Some(p) = self.policy {
            let none = p.data_policy == DataPolicy::None;
            match self.protocol {
                Protocol::FedCS if !none => {
                    return fail("FedCS requires policy.data_policy = \"none\"".into())
                }
                Protocol::HybridFL | Protocol::Centralized if none => {
                    return fail(format!(
                        "{:?} requires a data policy other than \"none\"",
                        self.protocol
                    ))
                }
                _ => {}
            }
        }
        self.dist_params
            .validate()
            .map_err(|e| Error::Config(format!("dist_params: {e}")))?;
        self.cell.validate()?;
        self.hp.validate()?;
        if self.model == (ModelSpec::Mlp { hidden: 0 }) {
            return fail("model.hidden must be >= 1".into());
        }
        if let Some(sweep) = &self.sweep {
            sweep.validate(self)?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if cfg.dataset.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.dataset = dir.join(&cfg.dataset);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// The parameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "mu")]
    Mu,
    #[serde(rename = "sigma")]
    Sigma,
    #[serde(rename = "r_UL")]
    UploadRatio,
    #[serde(rename = "r_var")]
    Fluctuation,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Mu => "mu",
            SweepAxis::Sigma => "sigma",
            SweepAxis::UploadRatio => "r_UL",
            SweepAxis::Fluctuation => "r_var",
        }
    }

    pub fn apply(&self, cfg: &mut ExperimentConfig, value: f64) {
        match self {
            SweepAxis::Mu => cfg.dist_params.mu = value,
            SweepAxis::Sigma => cfg.dist_params.sigma = value,
            SweepAxis::UploadRatio => cfg.upload_ratio = value,
            SweepAxis::Fluctuation => cfg.fluctuation = value,
        }
    }
}

/// A sweep value; `"inf"` is accepted like for `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AxisValue(#[serde(with = "sigma_serde")] pub f64);

/// Values of one axis crossed with a list of methods, each point run on
/// top of the enclosing config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<AxisValue>,
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
}

fn all_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

impl SweepSpec {
    /// Config of one sweep point.
    pub fn point(&self, base: &ExperimentConfig, value: f64, method: Method) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.sweep = None;
        self.axis.apply(&mut cfg, value);
        cfg.set_method(method);
        cfg
    }

    pub fn validate(&self, base: &ExperimentConfig) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep.values must not be empty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("sweep.methods must not be empty".into()));
        }
        for v in &self.values {
            for &m in &self.methods {
                self.point(base, v.0, m).validate().map_err(|e| {
                    Error::Config(format!(
                        "sweep {} = {} with {m}: {e}",
                        self.axis.name(),
                        v.0
                    ))
                })?;
            }
        }
        Ok(())
    }
}

/// Reads and validates a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml(&text, path)
}

/// `sigma` accepts a number or the strings `"inf"` / `"infinity"`.
pub mod sigma_serde {
    use serde::{de, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        struct V;
        impl de::Visitor<'_> for V {
            type Value = f64;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a non-negative number or \"inf\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
                Ok(v)
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
                Ok(v as f64)
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
                Ok(v as f64)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
                match v.trim().to_ascii_lowercase().as_str() {
                    "inf" | "+inf" | "infinity" | "∞" => Ok(f64::INFINITY),
                    other => other
                        .parse()
                        .map_err(|_| E::custom(format!("invalid sigma {v:?}"))),
                }
            }
        }
        d.deserialize_any(V)
    }
}
