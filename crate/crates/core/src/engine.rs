//! Round-by-round execution of FedCS, Hybrid-FL and the centralized
//! baseline over simulated time.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Protocol, Seeds};
use crate::dataset::Dataset;
use crate::error::Result;
use crate::learner::{self, Classifier, ModelParams};
use crate::netcomp::{self, ClientResources};
use crate::partitioner::{self, ClassHistogram, ClientShard};
use crate::scheduler::{
    self, coefficient_of_variation, Candidate, DataOwner, DataPolicy, Planner, RoundPlan,
    SelectionPolicy,
};
use crate::seed::{self, stream};

/// Chooses `round(K * r_UL)` clients uniformly without replacement.
/// Returns a membership mask.
pub fn mark_upload_permissions<R: Rng + ?Sized>(
    clients: usize,
    ratio: f64,
    rng: &mut R,
) -> Vec<bool> {
    let n = ((clients as f64 * ratio).round() as usize).min(clients);
    let mut mask = vec![false; clients];
    for i in index::sample(rng, clients, n) {
        mask[i] = true;
    }
    mask
}

/// Metrics of one completed round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub start_s: f64,
    pub end_s: f64,
    /// End time the planner expected from average resources.
    pub estimated_end_s: f64,
    pub candidates: Vec<usize>,
    pub selected: Vec<usize>,
    pub upload_window_s: f64,
    /// `(client, class, count)` triples of the uploaded data.
    pub manifest: Vec<(usize, usize, usize)>,
    pub uploaded_items: usize,
    pub server_per_class: ClassHistogram,
    pub accuracy: f64,
    /// Imbalance score of the cumulative histogram of model clients' data.
    pub cumulative_cv: f64,
}

/// Immutable per-trial world: client data, resources and permissions.
pub struct World<'a> {
    pub cfg: &'a ExperimentConfig,
    pub dataset: &'a Dataset,
    pub arch: Classifier,
    pub shards: Vec<ClientShard>,
    pub resources: Vec<ClientResources>,
    pub permitted: Vec<bool>,
    pub seeds: Seeds,
    pub protocol: Protocol,
    pub policy: SelectionPolicy,
}

impl<'a> World<'a> {
    pub fn build(cfg: &'a ExperimentConfig, dataset: &'a Dataset, seeds: Seeds) -> Result<Self> {
        let shards = partitioner::partition(
            &dataset.train,
            cfg.clients,
            &cfg.dist_params,
            cfg.shard_size,
            &mut seed::rng_from(seeds.partition, &[]),
        )?;
        let resources = netcomp::generate_resources(
            cfg.clients,
            &cfg.cell,
            cfg.capability_range,
            &mut seed::rng_from(seeds.resources, &[stream::PLACEMENT]),
        );
        let permitted = mark_upload_permissions(
            cfg.clients,
            cfg.upload_ratio,
            &mut seed::rng_from(seeds.resources, &[stream::PERMISSIONS]),
        );
        let method = cfg.method();
        Ok(Self {
            cfg,
            dataset,
            arch: Classifier::from_spec(cfg.model, dataset.dim(), dataset.classes()),
            shards,
            resources,
            permitted,
            seeds,
            protocol: method.protocol,
            policy: method.policy,
        })
    }

    pub fn initial_state(&self) -> Result<SimState> {
        let classes = self.dataset.classes();
        let remaining = self
            .shards
            .iter()
            .zip(&self.permitted)
            .map(|(s, &ok)| {
                if ok {
                    s.per_class_items.clone()
                } else {
                    Vec::new()
                }
            })
            .collect();
        Ok(SimState {
            global: self.arch.init(self.seeds.training)?,
            server_samples: Vec::new(),
            server_hist: ClassHistogram::zeros(classes),
            uploaded: Vec::new(),
            remaining,
            history: ClassHistogram::zeros(classes),
            clock: 0.0,
            round: 0,
        })
    }
}

/// Mutable global state carried between rounds.
#[derive(Debug, Clone)]
pub struct SimState {
    pub global: ModelParams,
    /// Pool indices of every sample uploaded so far.
    pub server_samples: Vec<usize>,
    pub server_hist: ClassHistogram,
    /// `(client, item)` of every upload, in upload order.
    pub uploaded: Vec<(usize, usize)>,
    /// Not-yet-uploaded items of permitted clients, per class.
    pub remaining: Vec<Vec<Vec<usize>>>,
    /// Per-class totals of data held by all model clients selected so far.
    pub history: ClassHistogram,
    /// Seconds.
    pub clock: f64,
    pub round: usize,
}

struct Realized {
    throughput: f64,
    capability: f64,
}

/// Executes one round of the configured protocol.
pub fn run_round(world: &World<'_>, state: &mut SimState) -> Result<RoundRecord> {
    let cfg = world.cfg;
    let r = state.round;
    let epochs = cfg.hp.epochs_per_round;

    let mut cand_ids = index::sample(
        &mut seed::rng_from(world.seeds.resources, &[stream::CANDIDATES, r as u64]),
        cfg.clients,
        cfg.candidates_per_round(),
    )
    .into_vec();
    cand_ids.sort_unstable();

    let estimate = |id: usize, res: &ClientResources| -> Result<Candidate> {
        Ok(Candidate {
            client_id: id,
            update_time: netcomp::update_time(world.shards[id].len(), epochs, res.avg_capability)?,
            upload_time: netcomp::upload_time(cfg.model_bytes, res.avg_throughput)?,
            throughput: res.avg_throughput,
            histogram: world.shards[id].histogram(),
        })
    };
    let candidates: Vec<Candidate> = cand_ids
        .iter()
        .map(|&id| estimate(id, &world.resources[id]))
        .collect::<Result<_>>()?;

    let owners: Vec<DataOwner> = match world.protocol {
        Protocol::FedCS => Vec::new(),
        Protocol::HybridFL | Protocol::Centralized => cand_ids
            .iter()
            .filter(|&&id| world.permitted[id] && state.remaining[id].iter().any(|l| !l.is_empty()))
            .map(|&id| DataOwner {
                client_id: id,
                throughput: world.resources[id].avg_throughput,
                remaining: state.remaining[id].clone(),
            })
            .collect(),
    };
    let policy = match world.protocol {
        Protocol::FedCS => SelectionPolicy {
            data_policy: DataPolicy::None,
            ..world.policy
        },
        _ => world.policy,
    };
    let planner = Planner {
        t_round: cfg.round_deadline_s,
        model_bytes: cfg.model_bytes,
        item_bytes: cfg.item_bytes,
        cv_def: cfg.cv_definition,
        history: &state.history,
    };
    let plan = planner.plan(
        &candidates,
        &owners,
        policy,
        world.protocol != Protocol::Centralized,
    );

    // Realized resources for every candidate, drawn in id order so the
    // stream does not depend on the selection outcome.
    let mut fl_rng = seed::rng_from(world.seeds.fluctuation, &[stream::FLUCTUATION, r as u64]);
    let realized: Vec<Realized> = cand_ids
        .iter()
        .map(|&id| {
            let res = &world.resources[id];
            Realized {
                throughput: netcomp::sample_round_value(
                    res.avg_throughput,
                    cfg.fluctuation,
                    &mut fl_rng,
                ),
                capability: netcomp::sample_round_value(
                    res.avg_capability,
                    cfg.fluctuation,
                    &mut fl_rng,
                ),
            }
        })
        .collect();
    let duration = realized_duration(world, &plan, &cand_ids, &realized)?;

    let start = state.clock;
    apply_uploads(world, state, &plan);

    let mut models = local_models(world, state, &plan.model_clients)?;
    if world.protocol != Protocol::FedCS && !state.server_samples.is_empty() {
        let mut rng = seed::rng_from(world.seeds.training, &[stream::SERVER_UPDATE, r as u64]);
        models.push(learner::server_update(
            &world.arch,
            &state.global,
            &world.dataset.train,
            &state.server_samples,
            &cfg.hp,
            r,
            &mut rng,
        )?);
    }
    if !models.is_empty() {
        state.global = learner::aggregate(&models)?;
    }
    for &id in &plan.model_clients {
        state.history.add(&world.shards[id].histogram());
    }

    let accuracy = learner::evaluate(&world.arch, &state.global, &world.dataset.test)?.accuracy;
    state.clock += duration;
    state.round += 1;
    Ok(RoundRecord {
        round: r,
        start_s: start,
        end_s: state.clock,
        estimated_end_s: start + plan.round_finish,
        candidates: cand_ids,
        selected: plan.model_clients.clone(),
        upload_window_s: plan.upload_window,
        manifest: plan.manifest.summary(),
        uploaded_items: plan.manifest.len(),
        server_per_class: state.server_hist.clone(),
        accuracy,
        cumulative_cv: coefficient_of_variation(&state.history, cfg.cv_definition),
    })
}

/// Round duration with realized resources. Stragglers finish, so the
/// round may overrun the deadline; data-only rounds last at least
/// `T_round`.
fn realized_duration(
    world: &World<'_>,
    plan: &RoundPlan,
    cand_ids: &[usize],
    realized: &[Realized],
) -> Result<f64> {
    let cfg = world.cfg;
    let lookup = |id: usize| {
        &realized[cand_ids
            .binary_search(&id)
            .expect("selected ids are candidates")]
    };
    let actual: Vec<Candidate> = plan
        .model_clients
        .iter()
        .map(|&id| {
            let real = lookup(id);
            Ok(Candidate {
                client_id: id,
                update_time: netcomp::update_time(
                    world.shards[id].len(),
                    cfg.hp.epochs_per_round,
                    real.capability,
                )?,
                upload_time: netcomp::upload_time(cfg.model_bytes, real.throughput)?,
                throughput: real.throughput,
                histogram: ClassHistogram::zeros(0),
            })
        })
        .collect::<Result<_>>()?;
    let dist = scheduler::distribution_time(&actual, cfg.model_bytes);
    let models_done = scheduler::estimate_round_schedule(&actual, dist).round_finish;
    let mut data_done = dist;
    for item in &plan.manifest.items {
        data_done += netcomp::upload_time(cfg.item_bytes, lookup(item.client_id).throughput)?;
    }
    let floor = if plan.model_clients.is_empty() {
        cfg.round_deadline_s
    } else {
        models_done
    };
    Ok(floor.max(data_done))
}

fn apply_uploads(world: &World<'_>, state: &mut SimState, plan: &RoundPlan) {
    for item in &plan.manifest.items {
        let shard = &world.shards[item.client_id];
        state.server_samples.push(shard.samples[item.item]);
        state.server_hist.increment(item.class, 1);
        state.uploaded.push((item.client_id, item.item));
    }
    for (client, class, _) in plan.manifest.summary() {
        let taken: Vec<usize> = plan
            .manifest
            .items
            .iter()
            .filter(|i| i.client_id == client && i.class == class)
            .map(|i| i.item)
            .collect();
        state.remaining[client][class].retain(|it| !taken.contains(it));
    }
}

/// Local updates of the model clients, run in parallel, returned in
/// client-id order.
fn local_models(
    world: &World<'_>,
    state: &SimState,
    clients: &[usize],
) -> Result<Vec<ModelParams>> {
    let mut ids = clients.to_vec();
    ids.sort_unstable();
    let r = state.round;
    ids.par_iter()
        .map(|&id| {
            let mut rng = seed::rng_from(
                world.seeds.training,
                &[stream::LOCAL_UPDATE, r as u64, id as u64],
            );
            learner::local_update(
                &world.arch,
                &state.global,
                &world.dataset.train,
                &world.shards[id].samples,
                &world.cfg.hp,
                r,
                &mut rng,
                id,
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seeds: Seeds,
    pub records: Vec<RoundRecord>,
    /// Mean accuracy over the trailing summary window.
    pub window_accuracy: f64,
    pub final_accuracy: f64,
    pub server_samples: usize,
}

/// Mean accuracy of rounds ending in the trailing window
/// `[T_final - window, ...)`. The round that crosses `T_final` counts.
pub fn window_accuracy(records: &[RoundRecord], final_deadline_s: f64, window_s: f64) -> f64 {
    let from = (final_deadline_s - window_s).max(0.0);
    let inside: Vec<f64> = records
        .iter()
        .filter(|r| r.end_s >= from)
        .map(|r| r.accuracy)
        .collect();
    if inside.is_empty() {
        records.last().map_or(f64::NAN, |r| r.accuracy)
    } else {
        inside.iter().sum::<f64>() / inside.len() as f64
    }
}

pub fn run_trial(cfg: &ExperimentConfig, dataset: &Dataset, trial: usize) -> Result<TrialResult> {
    let seeds = cfg.seeds.for_trial(trial);
    let world = World::build(cfg, dataset, seeds)?;
    let mut state = world.initial_state()?;
    let t_final = cfg.final_deadline_min * 60.0;
    let mut records = Vec::new();
    while state.clock < t_final {
        records.push(run_round(&world, &mut state)?);
    }
    Ok(TrialResult {
        trial,
        seeds,
        window_accuracy: window_accuracy(&records, t_final, cfg.summary_window * 60.0),
        final_accuracy: records.last().map_or(f64::NAN, |r| r.accuracy),
        server_samples: state.server_samples.len(),
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub trials: Vec<TrialResult>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Validates `cfg` and its compatibility with `dataset`.
pub fn check_dataset(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<()> {
    cfg.validate()?;
    if dataset.classes() != cfg.dist_params.classes {
        return Err(crate::Error::Config(format!(
            "dataset has {} classes but dist_params.classes = {}",
            dataset.classes(),
            cfg.dist_params.classes
        )));
    }
    Ok(())
}

/// Runs every trial (in parallel on the current rayon pool) and
/// summarizes the trailing-window accuracy.
pub fn run_experiment(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<ExperimentResult> {
    check_dataset(cfg, dataset)?;
    let trials: Vec<TrialResult> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(cfg, dataset, t))
        .collect::<Result<_>>()?;
    let acc: Vec<f64> = trials.iter().map(|t| t.window_accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&acc);
    Ok(ExperimentResult {
        trials,
        mean_accuracy,
        std_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Method;
    use crate::dataset::{synthesize, SyntheticSpec};

    fn small_dataset() -> Dataset {
        synthesize(&SyntheticSpec {
            dim: 4,
            train_per_class: 60,
            test_per_class: 20,
            ..Default::default()
        })
    }

    fn small_cfg(method: Method) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::with_dataset("unused");
        cfg.clients = 40;
        cfg.upload_ratio = 0.1;
        cfg.final_deadline_min = 30.0;
        cfg.summary_window = 10.0;
        cfg.trials = 2;
        cfg.shard_size = partitioner::SizeRange { min: 20, max: 60 };
        cfg.set_method(method);
        cfg
    }

    #[test]
    fn permissions_count() {
        let mut rng = seed::rng_from(1, &[]);
        assert!(mark_upload_permissions(100, 0.0, &mut rng)
            .iter()
            .all(|&b| !b));
        assert!(mark_upload_permissions(100, 1.0, &mut rng)
            .iter()
            .all(|&b| b));
        assert_eq!(
            mark_upload_permissions(1000, 0.01, &mut rng)
                .iter()
                .filter(|&&b| b)
                .count(),
            10
        );
    }

    #[test]
    fn fedcs_never_uploads() {
        let ds = small_dataset();
        let res = run_trial(&small_cfg(Method::FEDCS), &ds, 0).unwrap();
        assert!(res.records.iter().all(|r| r.uploaded_items == 0));
        assert_eq!(res.server_samples, 0);
    }

    #[test]
    fn centralized_selects_no_model_clients() {
        let ds = small_dataset();
        let res = run_trial(&small_cfg(Method::CENTRALIZED), &ds, 0).unwrap();
        assert!(res.records.iter().all(|r| r.selected.is_empty()));
        assert!(res.server_samples > 0);
        for r in &res.records {
            assert!(r.end_s - r.start_s >= 180.0 - 1e-9);
        }
    }

    #[test]
    fn no_fluctuation_means_estimate_is_exact() {
        let ds = small_dataset();
        for m in Method::ALL {
            let res = run_trial(&small_cfg(m), &ds, 1).unwrap();
            for r in &res.records {
                assert_eq!(r.end_s, r.estimated_end_s, "{m} round {}", r.round);
            }
        }
    }

    #[test]
    fn hybrid_state_invariants() {
        let ds = small_dataset();
        let mut cfg = small_cfg(Method::IID_MIN_CV);
        cfg.fluctuation = 0.5;
        let seeds = cfg.seeds.for_trial(0);
        let world = World::build(&cfg, &ds, seeds).unwrap();
        let mut state = world.initial_state().unwrap();
        let mut prev_hist = state.server_hist.clone();
        let mut prev_end = 0.0;
        while state.clock < cfg.final_deadline_min * 60.0 {
            let rec = run_round(&world, &mut state).unwrap();
            assert!(rec.end_s > prev_end);
            prev_end = rec.end_s;
            assert_eq!(rec.candidates.len(), cfg.candidates_per_round());
            assert!(rec.selected.iter().all(|s| rec.candidates.contains(s)));
            assert!(
                rec.estimated_end_s - rec.start_s < cfg.round_deadline_s || rec.selected.is_empty()
            );
            for (a, b) in rec.server_per_class.counts().iter().zip(prev_hist.counts()) {
                assert!(a >= b);
            }
            prev_hist = rec.server_per_class.clone();
        }
        let mut ids = state.uploaded.clone();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(
            ids.len(),
            state.uploaded.len(),
            "an item was uploaded twice"
        );
        assert!(state.uploaded.iter().all(|(c, _)| world.permitted[*c]));
    }

    #[test]
    fn zero_upload_ratio_reduces_to_fedcs() {
        let ds = small_dataset();
        let mut a = small_cfg(Method::FEDCS);
        a.upload_ratio = 0.0;
        let mut b = small_cfg(Method::IID_MAX_CLIENT);
        b.upload_ratio = 0.0;
        let ra = run_trial(&a, &ds, 0).unwrap();
        let rb = run_trial(&b, &ds, 0).unwrap();
        assert_eq!(ra.records, rb.records);
    }

    #[test]
    fn short_horizon_runs_one_round() {
        let ds = small_dataset();
        let mut cfg = small_cfg(Method::IID_MIN_CV);
        cfg.final_deadline_min = 0.5;
        let res = run_trial(&cfg, &ds, 0).unwrap();
        assert_eq!(res.records.len(), 1);
        assert_eq!(res.window_accuracy, res.records[0].accuracy);
    }

    #[test]
    fn experiment_is_deterministic() {
        let ds = small_dataset();
        let cfg = small_cfg(Method::MAX_THROUGHPUT_MIN_CV);
        let a = run_experiment(&cfg, &ds).unwrap();
        let b = run_experiment(&cfg, &ds).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trials.len(), 2);
    }

    #[test]
    fn window_accuracy_selection() {
        let rec = |end: f64, acc: f64| RoundRecord {
            round: 0,
            start_s: 0.0,
            end_s: end,
            estimated_end_s: end,
            candidates: vec![],
            selected: vec![],
            upload_window_s: 0.0,
            manifest: vec![],
            uploaded_items: 0,
            server_per_class: ClassHistogram::zeros(2),
            accuracy: acc,
            cumulative_cv: 0.0,
        };
        let rs = [rec(100.0, 0.1), rec(250.0, 0.5), rec(320.0, 0.7)];
        assert!((window_accuracy(&rs, 300.0, 100.0) - 0.6).abs() < 1e-15);
        assert_eq!(window_accuracy(&rs, 300.0, 1000.0), (0.1 + 0.5 + 0.7) / 3.0);
    }
}
