use serde::Serialize;

use super::config::{DetectionSchedule, ExperimentConfig, TaskSpec};
use super::metrics::{metrics_summary, Summary};
use crate::attacks::{self, AttackKind, AttackerView, BackdoorSpec, Knowledge};
use crate::defenses::{self, AggContext, DefenseSpec};
use crate::error::{Error, Result};
use crate::gradvec::{self, GradientVector};
use crate::par;
use crate::recess::{self, AggregationMode, TrustLedger};
use crate::rng::{self, Stream};
use crate::tasks::{self, Arch, Dataset, ModelParams, PartitionSpec};

/// One client's row for a round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientStat {
    pub client: usize,
    pub alpha: Option<f64>,
    pub s_c: Option<f64>,
    pub trust: Option<f64>,
    pub weight: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub accuracy: f64,
    pub agg_norm: f64,
    pub clients: Vec<ClientStat>,
    pub attack_active: bool,
    pub detection: bool,
    /// Malicious clients that submitted a crafted update.
    pub poisoned: Vec<usize>,
    /// Malicious clients that ran the adaptive probe test this round.
    pub judged: Vec<usize>,
    /// The attack was infeasible this round and honest updates went out.
    pub attack_skipped: bool,
    pub attack_success_rate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub params: ModelParams,
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
    pub malicious: Vec<usize>,
}

/// `Consecutive(k)` fires on rounds `1..=k`; `Interspersed(p)` fires with
/// probability `p` from a per-round stream.
pub fn detection_scheduler(schedule: &DetectionSchedule, round: usize, seed: u64) -> bool {
    match *schedule {
        DetectionSchedule::Consecutive { k } => (1..=k).contains(&round),
        DetectionSchedule::Interspersed { prob } => {
            if prob <= 0.0 {
                return false;
            }
            if prob >= 1.0 {
                return true;
            }
            let mut r = rng::stream(seed, Stream::Schedule, round as u64, 0);
            rand::Rng::random::<f64>(&mut r) < prob
        }
        DetectionSchedule::None => false,
    }
}

/// Train and test sets for a config.
pub fn load_task(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.task {
        TaskSpec::Synthetic {
            num_classes,
            feature_dim,
            train_per_class,
            test_per_class,
            separation,
        } => {
            let train = tasks::generate_synthetic_with(
                *num_classes,
                *feature_dim,
                *train_per_class,
                *separation,
                rng::derive_seed(cfg.seed, Stream::Data, 0, 0),
            )?;
            let test = tasks::generate_synthetic_with(
                *num_classes,
                *feature_dim,
                *test_per_class,
                *separation,
                rng::derive_seed(cfg.seed, Stream::TestData, 0, 0),
            )?;
            Ok((train, test))
        }
        TaskSpec::Csv { train, test, num_classes } => {
            let train = tasks::load_csv(train, *num_classes)?;
            let test = tasks::load_csv(test, *num_classes)?;
            if train.dim() != test.dim() {
                return Err(Error::Config(format!(
                    "train has {} features but test has {}",
                    train.dim(),
                    test.dim()
                )));
            }
            Ok((train, test))
        }
    }
}

struct World<'a> {
    cfg: &'a ExperimentConfig,
    clients: Vec<Dataset>,
    flipped: Vec<Option<Dataset>>,
    is_malicious: Vec<bool>,
    test: Dataset,
    root: Option<Dataset>,
    backdoor_test: Option<(Dataset, usize)>,
}

fn setup(cfg: &ExperimentConfig) -> Result<(World<'_>, Arch)> {
    cfg.validate()?;
    let (train, test) = load_task(cfg)?;
    let classes = train.num_classes();
    let spec = PartitionSpec {
        num_clients: cfg.num_clients,
        noniid_q: cfg.partition.noniid_q.unwrap_or(1.0 / classes as f64),
        seed: rng::derive_seed(cfg.seed, Stream::Partition, 0, 0),
        size_multipliers: cfg.partition.size_multipliers.clone(),
    };
    spec.validate(classes).map_err(|e| Error::Config(e.to_string()))?;
    let clients = tasks::partition(&train, &spec)?;
    if let Some(j) = clients.iter().position(Dataset::is_empty) {
        return Err(Error::Config(format!("client {j} received no training data")));
    }
    let c = cfg.num_malicious();
    let is_malicious: Vec<bool> = (0..cfg.num_clients).map(|j| j < c).collect();
    let flip = matches!(inner_kind(&cfg.attack.kind), AttackKind::LabelFlip);
    let flipped = clients
        .iter()
        .enumerate()
        .map(|(j, d)| {
            if flip && is_malicious[j] {
                attacks::label_flip(d, classes).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    let root = match &cfg.defense {
        DefenseSpec::FlTrust { root_size } => {
            Some(train.sample(*root_size, rng::derive_seed(cfg.seed, Stream::RootData, 0, 0)))
        }
        _ => None,
    };
    let backdoor_test = match inner_kind(&cfg.attack.kind) {
        AttackKind::ScalingBackdoor(b) => Some((triggered_test_set(&test, b)?, b.target)),
        _ => None,
    };
    let arch = Arch {
        input_dim: train.dim(),
        hidden: cfg.model.hidden,
        num_classes: classes,
    };
    Ok((
        World {
            cfg,
            clients,
            flipped,
            is_malicious,
            test,
            root,
            backdoor_test,
        },
        arch,
    ))
}

fn inner_kind(kind: &AttackKind) -> &AttackKind {
    match kind {
        AttackKind::Adaptive { inner } => inner,
        k => k,
    }
}

/// Non-target test rows with the trigger stamped on.
pub fn triggered_test_set(test: &Dataset, spec: &BackdoorSpec) -> Result<Dataset> {
    let rows: Vec<usize> = (0..test.len()).filter(|&i| test.label(i) != spec.target).collect();
    let mut out = test.subset(&rows);
    let all: Vec<usize> = (0..out.len()).collect();
    attacks::stamp_trigger(&mut out, &all, &spec.trigger).map_err(|e| Error::Config(e.to_string()))?;
    Ok(out)
}

/// Fraction of `data` predicted as `target`.
pub fn attack_success_rate(params: &ModelParams, data: &Dataset, target: usize) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = (0..data.len()).filter(|&i| params.predict(data.row(i)) == target).count();
    hits as f64 / data.len() as f64
}

/// What one round's responders submit, plus attack bookkeeping.
struct Submissions {
    grads: Vec<GradientVector>,
    poisoned: Vec<usize>,
    judged: Vec<usize>,
    skipped: bool,
    active: bool,
}

impl World<'_> {
    fn n(&self) -> usize {
        self.cfg.num_clients
    }

    fn train_args_seed(&self, client: usize, round: usize) -> u64 {
        rng::derive_seed(self.cfg.seed, Stream::LocalTrain, client as u64, round as u64)
    }

    fn honest_update(&self, start: &ModelParams, client: usize, round: usize) -> Result<GradientVector> {
        tasks::local_train(start, &self.clients[client], &self.cfg.train, self.train_args_seed(client, round))
    }

    fn poisoned_update(&self, start: &ModelParams, client: usize, round: usize, responders: usize, active: usize) -> Result<GradientVector> {
        let seed = self.train_args_seed(client, round);
        match inner_kind(&self.cfg.attack.kind) {
            AttackKind::LabelFlip => {
                let data = self.flipped[client].as_ref().unwrap_or(&self.clients[client]);
                tasks::local_train(start, data, &self.cfg.train, seed)
            }
            AttackKind::ScalingBackdoor(b) => {
                let factor = b.factor.unwrap_or(responders as f64 / active.max(1) as f64);
                attacks::scaling_backdoor(
                    start,
                    &self.clients[client],
                    &b.trigger,
                    b.target,
                    factor,
                    b.fraction,
                    &self.cfg.train,
                    seed,
                )
            }
            other => Err(Error::invalid(format!("{} is not a data-poisoning attack", other.name()))),
        }
    }

    /// Local training for every responder, then the attacker's rewrite.
    ///
    /// `received[k]` is what responder `k` was sent as the aggregate and
    /// `starts[k]` the model it trains from.
    fn collect(
        &self,
        round: usize,
        responders: &[usize],
        starts: &[ModelParams],
        received: &[Option<GradientVector>],
        history: &[Option<GradientVector>],
    ) -> Result<Submissions> {
        let honest: Vec<GradientVector> = par::map(responders, |k, &j| self.honest_update(&starts[k], j, round))
            .into_iter()
            .collect::<Result<_>>()?;
        let mal: Vec<usize> = (0..responders.len()).filter(|&k| self.is_malicious[responders[k]]).collect();
        let kind = &self.cfg.attack.kind;
        let active = !matches!(kind, AttackKind::None) && round >= self.cfg.attack_start_round && !mal.is_empty();
        let mut out = Submissions {
            grads: honest,
            poisoned: Vec::new(),
            judged: Vec::new(),
            skipped: false,
            active,
        };
        if !active {
            return Ok(out);
        }

        let inner = inner_kind(kind);
        let poisoners: Vec<usize> = if let AttackKind::Adaptive { .. } = kind {
            let own: Vec<GradientVector> = mal.iter().map(|&k| out.grads[k].clone()).collect();
            let g_p = gradvec::mean(&own)?;
            let mut chosen = Vec::new();
            for &k in &mal {
                let j = responders[k];
                match (&received[k], &history[j]) {
                    (Some(r), Some(last)) => {
                        out.judged.push(j);
                        if attacks::adaptive_should_poison(r, last, &g_p)? {
                            chosen.push(k);
                        }
                    }
                    _ => chosen.push(k),
                }
            }
            chosen
        } else {
            mal.clone()
        };
        if poisoners.is_empty() {
            return Ok(out);
        }

        if inner.is_model_poisoning() {
            let benign: Vec<GradientVector> = match self.cfg.attack.knowledge {
                Knowledge::WhiteBox => (0..responders.len())
                    .filter(|&k| !self.is_malicious[responders[k]])
                    .map(|k| out.grads[k].clone())
                    .collect(),
                Knowledge::BlackBox => mal.iter().map(|&k| out.grads[k].clone()).collect(),
            };
            let mut view = AttackerView {
                benign_gradients: benign,
                num_clients: responders.len(),
                num_malicious: mal.len(),
                last_aggregate: None,
                reference: self.cfg.attack.reference,
            };
            let mut cache: Option<(Option<GradientVector>, Vec<GradientVector>)> = None;
            let mut crafted = Vec::with_capacity(poisoners.len());
            for &k in &poisoners {
                let rank = mal.iter().position(|&m| m == k).unwrap_or(0);
                let reuse = matches!(&cache, Some((r, _)) if *r == received[k]);
                if !reuse {
                    view.last_aggregate = received[k].clone();
                    let seed = rng::derive_seed(self.cfg.seed, Stream::Attack, responders[k] as u64, round as u64);
                    match attacks::craft(inner, &view, seed) {
                        Ok(g) => cache = Some((received[k].clone(), g)),
                        Err(Error::AttackInfeasible(_)) => {
                            out.skipped = true;
                            cache = None;
                            continue;
                        }
                        Err(e) => return Err(e),
                    }
                }
                if let Some((_, g)) = &cache {
                    crafted.push((k, g[rank.min(g.len() - 1)].clone()));
                }
            }
            for (k, g) in crafted {
                out.grads[k] = g;
                out.poisoned.push(responders[k]);
            }
        } else {
            let updates: Vec<Result<GradientVector>> = par::map(&poisoners, |_, &k| {
                self.poisoned_update(&starts[k], responders[k], round, responders.len(), mal.len())
            });
            for (&k, g) in poisoners.iter().zip(updates) {
                out.grads[k] = g?;
                out.poisoned.push(responders[k]);
            }
        }
        out.poisoned.sort_unstable();
        Ok(out)
    }

    fn participants(&self, round: usize) -> Vec<usize> {
        match self.cfg.cross_device {
            None => (0..self.n()).collect(),
            Some(m) => {
                let mut r = rng::stream(self.cfg.seed, Stream::Sampling, round as u64, 0);
                let mut v = rand::seq::index::sample(&mut r, self.n(), m).into_vec();
                v.sort_unstable();
                v
            }
        }
    }
}

/// Runs the full round loop. Configuration problems are returned as
/// errors; failures during training stop the loop and are reported in
/// `summary.aborted` alongside the rounds completed so far.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let (world, arch) = setup(cfg)?;
    let n = cfg.num_clients;
    let malicious: Vec<usize> = (0..n).filter(|&j| world.is_malicious[j]).collect();
    let mut state = State {
        params: ModelParams::init(arch, rng::derive_seed(cfg.seed, Stream::Init, 0, 0))?,
        ledger: cfg.defense.recess_params().map(|p| TrustLedger::new(n, p)),
        history: vec![None; n],
        last_aggregate: None,
        accuracy: 0.0,
    };
    state.accuracy = tasks::evaluate(&state.params, &world.test);

    let mut records = Vec::with_capacity(cfg.rounds);
    let mut aborted = None;
    for round in 0..cfg.rounds {
        match step(&world, &mut state, round) {
            Ok(r) => records.push(r),
            Err(e) => {
                aborted = Some(format!("round {round}: {e}"));
                break;
            }
        }
    }
    let mut summary = metrics_summary(&records, &malicious, n, None);
    summary.aborted = aborted;
    Ok(ExperimentOutcome {
        params: state.params,
        records,
        summary,
        malicious,
    })
}

struct State {
    params: ModelParams,
    ledger: Option<TrustLedger>,
    history: Vec<Option<GradientVector>>,
    last_aggregate: Option<GradientVector>,
    accuracy: f64,
}

fn step(world: &World<'_>, state: &mut State, round: usize) -> Result<RoundRecord> {
    let cfg = world.cfg;
    let participants = world.participants(round);
    let detection = state.ledger.is_some()
        && round > 0
        && detection_scheduler(&cfg.detection_schedule, round, cfg.seed);
    if detection {
        detection_step(world, state, round, &participants)
    } else {
        training_step(world, state, round, &participants)
    }
}

fn detection_step(world: &World<'_>, state: &mut State, round: usize, participants: &[usize]) -> Result<RoundRecord> {
    let cfg = world.cfg;
    let n = cfg.num_clients;
    let ledger = state.ledger.as_mut().ok_or_else(|| Error::invalid("detection without a trust ledger"))?;
    let params = cfg.defense.recess_params().cloned().unwrap_or_default();
    let mut masked = vec![None; n];
    for &j in participants {
        masked[j] = state.history[j].clone();
    }
    let unflagged_before: Vec<bool> = ledger.records.iter().map(|r| !r.flagged).collect();
    let probes = recess::build_probes(ledger, &masked, &params, cfg.seed, round as u64)?;
    let responders: Vec<usize> = (0..n).filter(|&j| probes[j].is_some()).collect();
    let received: Vec<Option<GradientVector>> = responders.iter().map(|&j| probes[j].clone()).collect();
    let starts: Vec<ModelParams> = received
        .iter()
        .map(|p| state.params.apply(p.as_ref().expect("responder has a probe"), cfg.train.lr))
        .collect::<Result<_>>()?;
    let subs = world.collect(round, &responders, &starts, &received, &state.history)?;

    let mut responses = vec![None; n];
    for (k, &j) in responders.iter().enumerate() {
        responses[j] = Some(subs.grads[k].clone());
    }
    let report = recess::score_responses(ledger, &probes, &responses, &params)?;
    for (k, &j) in responders.iter().enumerate() {
        state.history[j] = Some(subs.grads[k].clone());
    }

    let mut clients = Vec::new();
    for j in (0..n).filter(|&j| unflagged_before[j]) {
        let entry = report.entries.iter().find(|e| e.client == j);
        let r = ledger.records[j];
        clients.push(ClientStat {
            client: j,
            alpha: entry.map(|e| e.alpha),
            s_c: entry.map(|e| e.s_c),
            trust: Some(r.trust_score),
            weight: None,
            flagged: r.flagged,
        });
    }
    Ok(RoundRecord {
        round,
        accuracy: state.accuracy,
        agg_norm: 0.0,
        clients,
        attack_active: subs.active,
        detection: true,
        poisoned: subs.poisoned,
        judged: subs.judged,
        attack_skipped: subs.skipped,
        attack_success_rate: backdoor_rate(world, &state.params),
    })
}

fn training_step(world: &World<'_>, state: &mut State, round: usize, participants: &[usize]) -> Result<RoundRecord> {
    let cfg = world.cfg;
    let n = cfg.num_clients;
    let responders: Vec<usize> = participants
        .iter()
        .copied()
        .filter(|&j| state.ledger.as_ref().is_none_or(|l| !l.records[j].flagged))
        .collect();
    if responders.is_empty() {
        return Err(Error::NoTrustedClients);
    }
    let starts = vec![state.params.clone(); responders.len()];
    let received = vec![state.last_aggregate.clone(); responders.len()];
    let subs = world.collect(round, &responders, &starts, &received, &state.history)?;

    let mut weights: Vec<Option<f64>> = vec![None; n];
    let agg = match (&cfg.defense, &state.ledger) {
        (DefenseSpec::Recess(p) | DefenseSpec::RecessMedian(p), Some(ledger)) => {
            let mode = match cfg.defense {
                DefenseSpec::RecessMedian(_) => AggregationMode::MedianFallback,
                _ => p.aggregation_mode,
            };
            let records = ledger.subset(&responders);
            let w = match mode {
                AggregationMode::WeightedAvg => recess::aggregation_weights(&records)?,
                AggregationMode::MedianFallback => {
                    let kept = records.iter().filter(|r| !r.flagged).count().max(1) as f64;
                    records.iter().map(|r| if r.flagged { 0.0 } else { 1.0 / kept }).collect()
                }
            };
            for (&j, wj) in responders.iter().zip(w) {
                weights[j] = Some(wj);
            }
            recess::recess_aggregate(&subs.grads, &records, mode)?
        }
        (spec, _) => {
            let sizes: Vec<usize> = responders.iter().map(|&j| world.clients[j].len()).collect();
            if let DefenseSpec::FedAvg = spec {
                let total: usize = sizes.iter().sum();
                for (&j, &s) in responders.iter().zip(&sizes) {
                    weights[j] = Some(s as f64 / total as f64);
                }
            }
            let root_gradient = match &world.root {
                Some(root) => Some(tasks::local_train(
                    &state.params,
                    root,
                    &cfg.train,
                    rng::derive_seed(cfg.seed, Stream::RootData, round as u64, 1),
                )?),
                None => None,
            };
            let ctx = AggContext {
                sizes: &sizes,
                assumed_c: cfg.assumed_c_per_round(),
                root_gradient: root_gradient.as_ref(),
                seed: rng::derive_seed(cfg.seed, Stream::Defense, round as u64, 0),
            };
            defenses::aggregate(spec, &subs.grads, &ctx)?
        }
    };
    state.params = state.params.apply(&agg, cfg.train.lr)?;
    state.accuracy = tasks::evaluate(&state.params, &world.test);
    for (k, &j) in responders.iter().enumerate() {
        state.history[j] = Some(subs.grads[k].clone());
    }
    let agg_norm = agg.norm();
    state.last_aggregate = Some(agg);

    let clients = (0..n)
        .map(|j| {
            let r = state.ledger.as_ref().map(|l| l.records[j]);
            ClientStat {
                client: j,
                alpha: None,
                s_c: None,
                trust: r.map(|r| r.trust_score),
                weight: weights[j],
                flagged: r.is_some_and(|r| r.flagged),
            }
        })
        .collect();
    Ok(RoundRecord {
        round,
        accuracy: state.accuracy,
        agg_norm,
        clients,
        attack_active: subs.active,
        detection: false,
        poisoned: subs.poisoned,
        judged: subs.judged,
        attack_skipped: subs.skipped,
        attack_success_rate: backdoor_rate(world, &state.params),
    })
}

fn backdoor_rate(world: &World<'_>, params: &ModelParams) -> Option<f64> {
    world
        .backdoor_test
        .as_ref()
        .map(|(data, target)| attack_success_rate(params, data, *target))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheduler_examples() {
        let c = DetectionSchedule::Consecutive { k: 10 };
        assert!(detection_scheduler(&c, 5, 0));
        assert!(!detection_scheduler(&c, 11, 0));
        assert!(!detection_scheduler(&c, 0, 0));
        for r in 0..200 {
            assert!(!detection_scheduler(&DetectionSchedule::Interspersed { prob: 0.0 }, r, 1));
            assert!(detection_scheduler(&DetectionSchedule::Interspersed { prob: 1.0 }, r, 1));
            assert!(!detection_scheduler(&DetectionSchedule::None, r, 1));
        }
    }

    #[test]
    fn interspersed_rate_matches_probability() {
        let s = DetectionSchedule::Interspersed { prob: 0.3 };
        let hits = (0..10_000).filter(|&r| detection_scheduler(&s, r, 9)).count();
        assert!((hits as f64 / 10_000.0 - 0.3).abs() < 0.02, "{hits}");
    }

    fn small(defense: DefenseSpec) -> ExperimentConfig {
        ExperimentConfig {
            task: TaskSpec::Synthetic {
                num_classes: 2,
                feature_dim: 5,
                train_per_class: 200,
                test_per_class: 100,
                separation: 3.0,
            },
            num_clients: 10,
            defense,
            rounds: 15,
            detection_schedule: DetectionSchedule::Consecutive { k: 3 },
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn detection_rounds_freeze_the_model() {
        let out = run_experiment(&small(DefenseSpec::Recess(Default::default()))).unwrap();
        assert!(out.summary.aborted.is_none());
        let r = &out.records;
        assert!(!r[0].detection && r[1].detection && r[3].detection && !r[4].detection);
        assert_eq!(r[1].accuracy, r[0].accuracy);
        assert_eq!(r[3].accuracy, r[0].accuracy);
        assert_eq!(r[2].agg_norm, 0.0);
    }

    #[test]
    fn cross_device_sampling_is_uniform() {
        let mut cfg = small(DefenseSpec::FedAvg);
        cfg.num_clients = 20;
        cfg.cross_device = Some(5);
        let (world, _) = setup(&cfg).unwrap();
        let mut counts = [0usize; 20];
        let rounds = 10_000;
        for r in 0..rounds {
            let p = world.participants(r);
            assert_eq!(p.len(), 5);
            assert!(p.windows(2).all(|w| w[0] < w[1]));
            for j in p {
                counts[j] += 1;
            }
        }
        for c in counts {
            assert!((c as f64 / rounds as f64 - 0.25).abs() <= 0.02, "{c}");
        }
    }

    #[test]
    fn empty_client_is_a_config_error() {
        let mut cfg = small(DefenseSpec::FedAvg);
        cfg.task = TaskSpec::Synthetic {
            num_classes: 2,
            feature_dim: 5,
            train_per_class: 1,
            test_per_class: 10,
            separation: 3.0,
        };
        assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
    }
}
