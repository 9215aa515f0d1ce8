//! Client and data selection for one round.
//!
//! Timing model: the global model is multicast once at the rate of the
//! slowest selected client; local updates then run in parallel; model
//! uploads share the RB pool and are serialized in selection order. Raw
//! data uploads run on a separate logical channel during the update phase
//! and are serialized among the uploading clients.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::partitioner::ClassHistogram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClientPolicy {
    /// Evaluate candidates by round-time increment alone.
    #[serde(rename = "maxClient")]
    MaxClient,
    /// Weight the time increment by the class imbalance it leads to.
    #[serde(rename = "minCV")]
    MinCv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DataPolicy {
    #[serde(rename = "maxThroughput")]
    MaxThroughput,
    #[serde(rename = "IID")]
    Iid,
    #[serde(rename = "none")]
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionPolicy {
    pub client_policy: ClientPolicy,
    pub data_policy: DataPolicy,
}

/// Which dispersion score drives `MinCv`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvDefinition {
    /// Population variance over the mean.
    #[default]
    VarianceOverMean,
    /// Population standard deviation over the mean (the textbook CV).
    StdOverMean,
}

/// Class-imbalance score of a histogram. An all-zero histogram scores
/// `+inf` so that any candidate adding data is preferred to none.
pub fn coefficient_of_variation(n: &ClassHistogram, def: CvDefinition) -> f64 {
    let counts = n.counts();
    let l = counts.len() as f64;
    let mean = n.total() as f64 / l;
    if mean == 0.0 {
        return f64::INFINITY;
    }
    let var = counts
        .iter()
        .map(|&c| (c as f64 - mean).powi(2))
        .sum::<f64>()
        / l;
    match def {
        CvDefinition::VarianceOverMean => var / mean,
        CvDefinition::StdOverMean => var.sqrt() / mean,
    }
}

/// What the operator knows about a candidate when planning.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub client_id: usize,
    /// Seconds to run the local update.
    pub update_time: f64,
    /// Seconds to upload the updated model.
    pub upload_time: f64,
    /// bit/s, used for the multicast distribution.
    pub throughput: f64,
    pub histogram: ClassHistogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UploadSlot {
    pub client_id: usize,
    pub upload_start: f64,
    pub upload_finish: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub slots: Vec<UploadSlot>,
    pub round_finish: f64,
}

/// Serialized-upload recurrence over `order` with distribution ending at
/// `dist_time`: `start_i = max(finish_{i-1}, dist + update_i)`.
pub fn estimate_round_schedule<'a, I>(order: I, dist_time: f64) -> Schedule
where
    I: IntoIterator<Item = &'a Candidate>,
{
    let mut finish = dist_time;
    let slots = order
        .into_iter()
        .map(|c| {
            let start = finish.max(dist_time + c.update_time);
            finish = start + c.upload_time;
            UploadSlot {
                client_id: c.client_id,
                upload_start: start,
                upload_finish: finish,
            }
        })
        .collect();
    Schedule {
        slots,
        round_finish: finish,
    }
}

/// Multicast time of `model_bytes` to the clients in `order`; zero when
/// nobody is selected.
pub fn distribution_time<'a, I>(order: I, model_bytes: u64) -> f64
where
    I: IntoIterator<Item = &'a Candidate>,
{
    let slowest = order
        .into_iter()
        .map(|c| c.throughput)
        .fold(f64::INFINITY, f64::min);
    if slowest.is_finite() {
        8.0 * model_bytes as f64 / slowest
    } else {
        0.0
    }
}

fn pick<'a>(
    candidates: &'a [Candidate],
    idx: &'a [usize],
) -> impl Iterator<Item = &'a Candidate> + Clone {
    idx.iter().map(move |&i| &candidates[i])
}

/// Estimated round duration when the candidates at positions `order` are
/// scheduled in that order.
pub fn round_finish(candidates: &[Candidate], order: &[usize], model_bytes: u64) -> f64 {
    let dist = distribution_time(pick(candidates, order), model_bytes);
    estimate_round_schedule(pick(candidates, order), dist).round_finish
}

/// Extension of the estimated round when `k` is appended to `order`.
pub fn t_inc(candidates: &[Candidate], order: &[usize], k: usize, model_bytes: u64) -> f64 {
    let mut extended = order.to_vec();
    extended.push(k);
    round_finish(candidates, &extended, model_bytes) - round_finish(candidates, order, model_bytes)
}

/// Greedy client selection. Returns positions into `candidates`, in
/// admission order.
///
/// Candidates are drawn one at a time by minimum evaluation value and
/// admitted only if the estimated round still ends strictly before
/// `t_round`. For `MinCv` the evaluation is `t_inc * CV(N)` where `N` is
/// `history` plus the histograms admitted so far plus the candidate's.
pub fn select_model_clients(
    candidates: &[Candidate],
    policy: ClientPolicy,
    t_round: f64,
    model_bytes: u64,
    history: &ClassHistogram,
    cv_def: CvDefinition,
) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..candidates.len()).collect();
    let mut selected = Vec::new();
    let mut tentative = history.clone();
    let mut t = 0.0;
    while !remaining.is_empty() {
        let evaluate = |k: usize| -> (f64, f64) {
            let rf = {
                let mut ext = selected.clone();
                ext.push(k);
                round_finish(candidates, &ext, model_bytes)
            };
            let inc = rf - t;
            let value = match policy {
                ClientPolicy::MaxClient => inc,
                ClientPolicy::MinCv => {
                    let cv =
                        coefficient_of_variation(&tentative.plus(&candidates[k].histogram), cv_def);
                    if cv.is_infinite() {
                        f64::INFINITY
                    } else {
                        inc * cv
                    }
                }
            };
            (value, rf)
        };
        let (pos, rf) = remaining
            .iter()
            .enumerate()
            .map(|(pos, &k)| (pos, evaluate(k)))
            .min_by(|(pa, (va, _)), (pb, (vb, _))| {
                va.total_cmp(vb).then_with(|| {
                    candidates[remaining[*pa]]
                        .client_id
                        .cmp(&candidates[remaining[*pb]].client_id)
                })
            })
            .map(|(pos, (_, rf))| (pos, rf))
            .expect("non-empty");
        let x = remaining.remove(pos);
        // t + t_inc(S, x) telescopes to the new round finish.
        if rf < t_round {
            t = rf;
            selected.push(x);
            tentative.add(&candidates[x].histogram);
        }
    }
    selected
}

/// Time available for raw-data uploads: from the end of distribution to
/// the first model upload, or the whole remaining round when nobody
/// uploads a model.
pub fn compute_upload_window(schedule: &Schedule, dist_time: f64, t_round: f64) -> f64 {
    schedule
        .slots
        .iter()
        .map(|s| s.upload_start)
        .min_by(f64::total_cmp)
        .map_or(t_round - dist_time, |first| first - dist_time)
        .max(0.0)
}

/// A client that permits raw-data upload, with its not-yet-uploaded
/// items. `remaining[l]` lists item positions of class `l` in stable order.
#[derive(Debug, Clone, PartialEq)]
pub struct DataOwner {
    pub client_id: usize,
    pub throughput: f64,
    pub remaining: Vec<Vec<usize>>,
}

impl DataOwner {
    fn has_data(&self, cursor: &[usize]) -> bool {
        self.remaining
            .iter()
            .zip(cursor)
            .any(|(items, &c)| c < items.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UploadItem {
    pub client_id: usize,
    pub class: usize,
    pub item: usize,
    pub duration: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataManifest {
    pub items: Vec<UploadItem>,
    /// Estimated serialized upload time of all items.
    pub total_time: f64,
}

impl DataManifest {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn bytes(&self, item_bytes: u64) -> u64 {
        self.items.len() as u64 * item_bytes
    }

    pub fn per_class(&self, classes: usize) -> ClassHistogram {
        let mut h = ClassHistogram::zeros(classes);
        for it in &self.items {
            h.increment(it.class, 1);
        }
        h
    }

    /// `(client id, class, count)` triples, ordered by client then class.
    pub fn summary(&self) -> Vec<(usize, usize, usize)> {
        let mut keys: Vec<(usize, usize)> =
            self.items.iter().map(|i| (i.client_id, i.class)).collect();
        keys.sort_unstable();
        let mut out: Vec<(usize, usize, usize)> = Vec::new();
        for (c, l) in keys {
            match out.last_mut() {
                Some((lc, ll, n)) if *lc == c && *ll == l => *n += 1,
                _ => out.push((c, l, 1)),
            }
        }
        out
    }
}

fn item_duration(item_bytes: u64, throughput: f64) -> f64 {
    8.0 * item_bytes as f64 / throughput
}

fn faster(a: &DataOwner, b: &DataOwner) -> Ordering {
    b.throughput
        .total_cmp(&a.throughput)
        .then(a.client_id.cmp(&b.client_id))
}

/// Class-balanced data selection: classes are visited round-robin and each
/// visit takes the next item of that class from the fastest owner still
/// holding it, while the serialized upload time stays within `t_ud`.
pub fn select_upload_data_iid(t_ud: f64, owners: &[DataOwner], item_bytes: u64) -> DataManifest {
    let classes = owners.first().map_or(0, |o| o.remaining.len());
    let mut cursors: Vec<Vec<usize>> = owners.iter().map(|o| vec![0; o.remaining.len()]).collect();
    let mut manifest = DataManifest::default();
    let mut keep_going = !owners.is_empty();
    while keep_going {
        for class in 0..classes {
            let x = (0..owners.len())
                .filter(|&u| cursors[u][class] < owners[u].remaining[class].len())
                .min_by(|&u, &v| faster(&owners[u], &owners[v]));
            let mut over_budget = false;
            if let Some(u) = x {
                let duration = item_duration(item_bytes, owners[u].throughput);
                if manifest.total_time + duration <= t_ud {
                    manifest.items.push(UploadItem {
                        client_id: owners[u].client_id,
                        class,
                        item: owners[u].remaining[class][cursors[u][class]],
                        duration,
                    });
                    manifest.total_time += duration;
                    cursors[u][class] += 1;
                } else {
                    over_budget = true;
                }
            }
            let exhausted = owners.iter().zip(&cursors).all(|(o, c)| !o.has_data(c));
            if over_budget || exhausted {
                keep_going = false;
            }
        }
    }
    manifest
}

/// Volume-greedy data selection: owners by decreasing throughput, each
/// uploading its items in stable order until the budget runs out.
pub fn select_upload_data_max_throughput(
    t_ud: f64,
    owners: &[DataOwner],
    item_bytes: u64,
) -> DataManifest {
    let mut order: Vec<&DataOwner> = owners.iter().collect();
    order.sort_by(|a, b| faster(a, b));
    let mut manifest = DataManifest::default();
    for owner in order {
        let duration = item_duration(item_bytes, owner.throughput);
        let mut items: Vec<(usize, usize)> = owner
            .remaining
            .iter()
            .enumerate()
            .flat_map(|(class, list)| list.iter().map(move |&it| (it, class)))
            .collect();
        items.sort_unstable();
        for (item, class) in items {
            if manifest.total_time + duration > t_ud {
                return manifest;
            }
            manifest.items.push(UploadItem {
                client_id: owner.client_id,
                class,
                item,
                duration,
            });
            manifest.total_time += duration;
        }
    }
    manifest
}

pub fn select_upload_data(
    policy: DataPolicy,
    t_ud: f64,
    owners: &[DataOwner],
    item_bytes: u64,
) -> DataManifest {
    match policy {
        DataPolicy::Iid => select_upload_data_iid(t_ud, owners, item_bytes),
        DataPolicy::MaxThroughput => select_upload_data_max_throughput(t_ud, owners, item_bytes),
        DataPolicy::None => DataManifest::default(),
    }
}

/// Output of client and data selection for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    /// Client ids in upload order.
    pub model_clients: Vec<usize>,
    pub slots: Vec<UploadSlot>,
    pub dist_time: f64,
    pub round_finish: f64,
    pub upload_window: f64,
    pub manifest: DataManifest,
    pub estimated_data_bytes: u64,
}

/// Runs client selection followed by data selection.
pub struct Planner<'a> {
    pub t_round: f64,
    pub model_bytes: u64,
    pub item_bytes: u64,
    pub cv_def: CvDefinition,
    pub history: &'a ClassHistogram,
}

impl Planner<'_> {
    /// `allow_model_clients = false` plans a data-only round.
    pub fn plan(
        &self,
        candidates: &[Candidate],
        owners: &[DataOwner],
        policy: SelectionPolicy,
        allow_model_clients: bool,
    ) -> RoundPlan {
        let chosen = if allow_model_clients {
            select_model_clients(
                candidates,
                policy.client_policy,
                self.t_round,
                self.model_bytes,
                self.history,
                self.cv_def,
            )
        } else {
            Vec::new()
        };
        let dist_time = distribution_time(pick(candidates, &chosen), self.model_bytes);
        let schedule = estimate_round_schedule(pick(candidates, &chosen), dist_time);
        let upload_window = compute_upload_window(&schedule, dist_time, self.t_round);
        let manifest =
            select_upload_data(policy.data_policy, upload_window, owners, self.item_bytes);
        let round_finish = if chosen.is_empty() {
            self.t_round
        } else {
            schedule.round_finish
        };
        RoundPlan {
            model_clients: chosen.iter().map(|&i| candidates[i].client_id).collect(),
            slots: schedule.slots,
            dist_time,
            round_finish,
            upload_window,
            estimated_data_bytes: manifest.bytes(self.item_bytes),
            manifest,
        }
    }
}
