//! Model-poisoning attacks: LIE, the Fang optimisation attack, AGR-tailored,
//! AGR Min-Max / Min-Sum, label flipping, scaling backdoor and the adaptive
//! probe-evasion wrapper.
//!
//! Optimisation attacks replay their own feasibility constraint on every
//! call; outcomes are tallied in [`replay_stats`] and violations trip a
//! debug assertion.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::defenses::{self, DefenseSpec};
use crate::error::{Error, Result};
use crate::gradvec::{self, cosine_similarity, GradientVector};
use crate::rng::{self, Stream};
use crate::tasks::{local_train, Dataset, ModelParams, TrainArgs};

pub const BISECTION_STEPS: usize = 50;
pub const LAMBDA_FLOOR: f64 = 1e-5;
const FANG_NOISE: f64 = 1e-4;
const REPLAY_TOLERANCE: f64 = 1e-6;
const TAILORED_GRID: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Knowledge {
    #[default]
    WhiteBox,
    BlackBox,
}

/// Where optimisation attacks take their "aggregate direction" from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DirectionReference {
    /// The aggregation gradient the attacker last received from the server.
    #[default]
    Received,
    /// The mean of the gradients in the attacker's view.
    ViewMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    #[default]
    InverseUnit,
    InverseStd,
    InverseSign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trigger {
    /// Feature indices stamped with `value`.
    pub features: Vec<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackdoorSpec {
    pub trigger: Trigger,
    pub target: usize,
    /// Update scale; defaults to `n / c`.
    #[serde(default)]
    pub factor: Option<f64>,
    #[serde(default = "default_poison_fraction")]
    pub fraction: f64,
}

fn default_poison_fraction() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackKind {
    None,
    Lie,
    FangOpt,
    AgrTailored {
        rule: DefenseSpec,
        #[serde(default)]
        pert: PerturbationKind,
    },
    AgrMinMax {
        #[serde(default)]
        pert: PerturbationKind,
    },
    AgrMinSum {
        #[serde(default)]
        pert: PerturbationKind,
    },
    LabelFlip,
    ScalingBackdoor(BackdoorSpec),
    Adaptive {
        inner: Box<AttackKind>,
    },
}

impl AttackKind {
    pub fn name(&self) -> String {
        match self {
            AttackKind::None => "none".into(),
            AttackKind::Lie => "lie".into(),
            AttackKind::FangOpt => "fang_opt".into(),
            AttackKind::AgrTailored { rule, .. } => format!("agr_tailored_{}", rule.name()),
            AttackKind::AgrMinMax { .. } => "agr_min_max".into(),
            AttackKind::AgrMinSum { .. } => "agr_min_sum".into(),
            AttackKind::LabelFlip => "label_flip".into(),
            AttackKind::ScalingBackdoor(_) => "scaling_backdoor".into(),
            AttackKind::Adaptive { inner } => format!("adaptive_{}", inner.name()),
        }
    }

    /// Attacks that craft gradients from an [`AttackerView`].
    pub fn is_model_poisoning(&self) -> bool {
        matches!(
            self,
            AttackKind::Lie
                | AttackKind::FangOpt
                | AttackKind::AgrTailored { .. }
                | AttackKind::AgrMinMax { .. }
                | AttackKind::AgrMinSum { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AttackKind::AgrTailored { rule, .. } => match rule {
                DefenseSpec::Krum | DefenseSpec::Mkrum { .. } | DefenseSpec::Trmean { .. } | DefenseSpec::Median => Ok(()),
                other => Err(Error::invalid(format!(
                    "agr_tailored does not support rule {}",
                    other.name()
                ))),
            },
            AttackKind::ScalingBackdoor(b) => {
                if b.factor.is_some_and(|f| !(f > 0.0 && f.is_finite())) {
                    return Err(Error::invalid("backdoor factor must be positive"));
                }
                if !(0.0..=1.0).contains(&b.fraction) {
                    return Err(Error::invalid("backdoor fraction outside [0, 1]"));
                }
                Ok(())
            }
            AttackKind::Adaptive { inner } => match inner.as_ref() {
                AttackKind::Adaptive { .. } | AttackKind::None => {
                    Err(Error::invalid("adaptive attack needs a concrete inner attack"))
                }
                k => k.validate(),
            },
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    #[serde(default)]
    pub knowledge: Knowledge,
    #[serde(default)]
    pub reference: DirectionReference,
}

impl AttackSpec {
    pub fn none() -> Self {
        Self::new(AttackKind::None)
    }

    pub fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            knowledge: Knowledge::WhiteBox,
            reference: DirectionReference::Received,
        }
    }
}

/// What the attacker sees in one round.
#[derive(Debug, Clone)]
pub struct AttackerView {
    /// White-box: every benign gradient. Black-box: the attacker's own
    /// clients' honestly computed gradients.
    pub benign_gradients: Vec<GradientVector>,
    pub num_clients: usize,
    pub num_malicious: usize,
    pub last_aggregate: Option<GradientVector>,
    pub reference: DirectionReference,
}

impl AttackerView {
    pub fn mean(&self) -> Result<GradientVector> {
        gradvec::mean(&self.benign_gradients)
    }

    /// Direction the attack treats as the unpoisoned aggregate.
    fn direction(&self, mu: &GradientVector) -> GradientVector {
        match (&self.reference, &self.last_aggregate) {
            (DirectionReference::Received, Some(g)) if g.norm() > 0.0 => g.clone(),
            _ => mu.clone(),
        }
    }
}

static REPLAY_CHECKS: AtomicU64 = AtomicU64::new(0);
static REPLAY_FAILURES: AtomicU64 = AtomicU64::new(0);

/// `(checks, failures)` of feasibility replays since process start.
pub fn replay_stats() -> (u64, u64) {
    (REPLAY_CHECKS.load(Ordering::Relaxed), REPLAY_FAILURES.load(Ordering::Relaxed))
}

fn record_replay(ok: bool, what: &str) {
    REPLAY_CHECKS.fetch_add(1, Ordering::Relaxed);
    if !ok {
        REPLAY_FAILURES.fetch_add(1, Ordering::Relaxed);
    }
    debug_assert!(ok, "{what} feasibility replay failed");
}

/// Crafts one gradient per malicious client for the model-poisoning kinds.
pub fn craft(kind: &AttackKind, view: &AttackerView, seed: u64) -> Result<Vec<GradientVector>> {
    let c = view.num_malicious;
    let single = match kind {
        AttackKind::Lie => lie_attack(view)?,
        AttackKind::FangOpt => return fang_opt_attack(view, seed).map(|f| f.gradients),
        AttackKind::AgrMinMax { pert } => agr_minmax(view, *pert)?,
        AttackKind::AgrMinSum { pert } => agr_minsum(view, *pert)?,
        AttackKind::AgrTailored { rule, pert } => agr_tailored(view, rule, *pert)?,
        other => {
            return Err(Error::invalid(format!(
                "{} is not a gradient-crafting attack",
                other.name()
            )))
        }
    };
    Ok(vec![single; c])
}

fn check_view(view: &AttackerView) -> Result<GradientVector> {
    if view.benign_gradients.len() < 2 {
        return Err(Error::AttackInfeasible(format!(
            "need at least 2 gradients in view, got {}",
            view.benign_gradients.len()
        )));
    }
    view.mean()
}

/// LIE `z` for `n` clients of which `c` are malicious.
pub fn lie_z(n: usize, c: usize) -> Result<f64> {
    let s = (n / 2 + 1) as i64 - c as i64;
    let honest = n as i64 - c as i64;
    if s <= 0 || honest <= 0 {
        return Err(Error::LieInfeasible { n, c });
    }
    let arg = (honest - s) as f64 / honest as f64;
    if !(arg > 0.0 && arg < 1.0) {
        return Err(Error::LieInfeasible { n, c });
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Ok(normal.inverse_cdf(arg))
}

/// `μ − z·σ` over the view.
pub fn lie_attack(view: &AttackerView) -> Result<GradientVector> {
    check_view(view)?;
    let z = lie_z(view.num_clients, view.num_malicious)?;
    let (mu, sigma) = gradvec::coord_stats(&view.benign_gradients)?;
    mu.add_scaled(&sigma, -z)
}

/// Closed-form `λ = D₁ + D₂` pieces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FangLambda {
    pub d1: f64,
    pub d2: f64,
}

impl FangLambda {
    pub fn total(&self) -> f64 {
        self.d1 + self.d2
    }
}

pub fn fang_lambda(view: &AttackerView) -> Result<FangLambda> {
    let mu = check_view(view)?;
    let (n, c) = (view.num_clients, view.num_malicious);
    let denom = n as i64 - 2 * c as i64 - 1;
    if denom <= 0 {
        return Err(Error::AttackInfeasible(format!("n - 2c - 1 <= 0 for n={n}, c={c}")));
    }
    let g = &view.benign_gradients;
    let sqrt_d = (mu.dim() as f64).sqrt();
    let k = n.saturating_sub(c + 2).min(g.len() - 1).max(1);
    let mut best = f64::INFINITY;
    for i in 0..g.len() {
        let mut ds: Vec<f64> = (0..g.len())
            .filter(|&l| l != i)
            .map(|l| gradvec::squared_distance(g[l].as_slice(), g[i].as_slice()).sqrt())
            .collect();
        ds.sort_by(f64::total_cmp);
        best = best.min(ds.iter().take(k).sum());
    }
    let d1 = best / (denom as f64 * sqrt_d);
    let d2 = g
        .iter()
        .map(|gi| gradvec::squared_distance(gi.as_slice(), mu.as_slice()).sqrt())
        .fold(0.0, f64::max)
        / sqrt_d;
    Ok(FangLambda { d1, d2 })
}

#[derive(Debug, Clone)]
pub struct FangOutcome {
    pub gradients: Vec<GradientVector>,
    pub lambda: f64,
    pub initial: FangLambda,
}

/// `g − λ·s`, with `λ` halved from the closed form until simulated Krum
/// picks a malicious copy or `λ` drops under the floor.
pub fn fang_opt_attack(view: &AttackerView, seed: u64) -> Result<FangOutcome> {
    let initial = fang_lambda(view)?;
    let mu = view.mean()?;
    let s = view.direction(&mu).signum();
    let c = view.num_malicious;
    let can_simulate = c + view.benign_gradients.len() >= c + 3;
    let mut lambda = initial.total();
    let selects = |cands: &[GradientVector]| -> Result<bool> {
        let mut pool = cands.to_vec();
        pool.extend(view.benign_gradients.iter().cloned());
        Ok(defenses::krum(&pool, c)?.1 < cands.len())
    };
    // Unit jitter directions, fixed before the search so the replay sees the
    // exact candidates that were tested.
    let mut rng = rng::stream(seed, Stream::Attack, 0, 0);
    let jitter: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let z: Vec<f64> = (0..mu.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let zn = gradvec::dot(&z, &z).sqrt();
            z.into_iter().map(|v| if zn > 0.0 { v / zn } else { 0.0 }).collect()
        })
        .collect();
    let build = |lambda: f64| -> Result<Vec<GradientVector>> {
        let base = mu.add_scaled(&s, -lambda)?;
        jitter
            .iter()
            .map(|z| {
                let v = base.iter().zip(z).map(|(b, zi)| b + FANG_NOISE * lambda * zi).collect();
                GradientVector::new(v)
            })
            .collect()
    };
    if can_simulate {
        while lambda >= LAMBDA_FLOOR {
            if selects(&build(lambda)?)? {
                break;
            }
            lambda *= 0.5;
        }
    }
    let gradients = build(lambda)?;
    if can_simulate && lambda >= LAMBDA_FLOOR && c > 0 {
        record_replay(selects(&gradients)?, "fang");
    }
    Ok(FangOutcome {
        gradients,
        lambda,
        initial,
    })
}

fn perturbation(view: &AttackerView, mu: &GradientVector, kind: PerturbationKind) -> Result<GradientVector> {
    let p = match kind {
        PerturbationKind::InverseUnit => {
            let r = view.direction(mu);
            if r.norm() == 0.0 {
                return Ok(GradientVector::zeros(mu.dim()));
            }
            r.normalized()?.scale(-1.0)
        }
        PerturbationKind::InverseSign => view.direction(mu).signum().scale(-1.0),
        PerturbationKind::InverseStd => {
            let (_, sigma) = gradvec::coord_stats(&view.benign_gradients)?;
            if sigma.norm() == 0.0 {
                return Ok(GradientVector::zeros(mu.dim()));
            }
            sigma.normalized()?.scale(-1.0)
        }
    };
    Ok(p)
}

fn bracket(view: &AttackerView) -> f64 {
    10.0 * view.benign_gradients.iter().map(|g| g.norm()).fold(0.0, f64::max)
}

/// Largest `γ` in `[0, hi]` with `feasible(γ)`, assuming `feasible(0)` and
/// a feasible set that is an interval starting at 0.
fn bisect_max(hi: f64, mut feasible: impl FnMut(f64) -> Result<bool>) -> Result<f64> {
    if hi <= 0.0 || feasible(hi)? {
        return Ok(hi.max(0.0));
    }
    let (mut lo, mut hi) = (0.0, hi);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if feasible(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

fn max_dist(x: &GradientVector, g: &[GradientVector]) -> f64 {
    g.iter()
        .map(|gi| gradvec::squared_distance(x.as_slice(), gi.as_slice()))
        .fold(0.0, f64::max)
        .sqrt()
}

fn sum_sq(x: &GradientVector, g: &[GradientVector]) -> f64 {
    g.iter().map(|gi| gradvec::squared_distance(x.as_slice(), gi.as_slice())).sum()
}

/// Benign diameter `maxᵢⱼ ‖gᵢ − gⱼ‖`.
pub fn minmax_bound(g: &[GradientVector]) -> f64 {
    g.iter().map(|gi| max_dist(gi, g)).fold(0.0, f64::max)
}

/// `maxⱼ Σᵢ ‖gⱼ − gᵢ‖²`.
pub fn minsum_bound(g: &[GradientVector]) -> f64 {
    g.iter().map(|gi| sum_sq(gi, g)).fold(0.0, f64::max)
}

/// `μ + γp` with the largest `γ` keeping the maximum distance to any benign
/// gradient within the benign diameter.
pub fn agr_minmax(view: &AttackerView, pert: PerturbationKind) -> Result<GradientVector> {
    let mu = check_view(view)?;
    let p = perturbation(view, &mu, pert)?;
    let g = &view.benign_gradients;
    let bound = minmax_bound(g);
    let gamma = bisect_max(bracket(view), |gm| Ok(max_dist(&mu.add_scaled(&p, gm)?, g) <= bound))?;
    let out = mu.add_scaled(&p, gamma)?;
    record_replay(max_dist(&out, g) <= bound * (1.0 + REPLAY_TOLERANCE) + f64::MIN_POSITIVE, "min-max");
    Ok(out)
}

/// `μ + γp` with the largest `γ` keeping the summed squared distance within
/// the largest benign one.
pub fn agr_minsum(view: &AttackerView, pert: PerturbationKind) -> Result<GradientVector> {
    let mu = check_view(view)?;
    let p = perturbation(view, &mu, pert)?;
    let g = &view.benign_gradients;
    let bound = minsum_bound(g);
    let gamma = bisect_max(bracket(view), |gm| Ok(sum_sq(&mu.add_scaled(&p, gm)?, g) <= bound))?;
    let out = mu.add_scaled(&p, gamma)?;
    record_replay(sum_sq(&out, g) <= bound * (1.0 + REPLAY_TOLERANCE) + f64::MIN_POSITIVE, "min-sum");
    Ok(out)
}

fn simulate(rule: &DefenseSpec, malicious: &GradientVector, view: &AttackerView) -> Result<(GradientVector, bool)> {
    let c = view.num_malicious;
    let mut pool = vec![malicious.clone(); c];
    pool.extend(view.benign_gradients.iter().cloned());
    let n = pool.len();
    match rule {
        DefenseSpec::Krum => {
            let (g, idx) = defenses::krum(&pool, c)?;
            Ok((g, idx < c))
        }
        DefenseSpec::Mkrum { m } => {
            let m = m.unwrap_or(defenses::mkrum_default_m(n, c)).min(n);
            let sel = defenses::mkrum_selection(&pool, c, m)?;
            let hit = sel.iter().any(|&i| i < c);
            Ok((defenses::mkrum(&pool, c, m)?, hit))
        }
        DefenseSpec::Trmean { k } => Ok((defenses::trmean(&pool, k.unwrap_or(c))?, true)),
        DefenseSpec::Median => Ok((defenses::median(&pool)?, true)),
        other => Err(Error::invalid(format!("agr_tailored does not support {}", other.name()))),
    }
}

/// Rule-aware AGR attack. For the Krum family the largest `γ` (coarse grid,
/// then bisection) that keeps a malicious copy selected; for Trmean/Median the smallest `γ` at which the
/// simulated output's deviation saturates.
pub fn agr_tailored(view: &AttackerView, rule: &DefenseSpec, pert: PerturbationKind) -> Result<GradientVector> {
    let mu = check_view(view)?;
    let p = perturbation(view, &mu, pert)?;
    let hi = bracket(view);
    let cand = |gm: f64| mu.add_scaled(&p, gm);
    match rule {
        DefenseSpec::Krum | DefenseSpec::Mkrum { .. } => {
            let selected = |gm: f64| -> Result<bool> { Ok(simulate(rule, &cand(gm)?, view)?.1) };
            let mut last = None;
            for i in 0..=TAILORED_GRID {
                if selected(hi * i as f64 / TAILORED_GRID as f64)? {
                    last = Some(i);
                }
            }
            let Some(i) = last else {
                return Err(Error::AttackInfeasible("no scale keeps a malicious copy selected".into()));
            };
            let mut lo = hi * i as f64 / TAILORED_GRID as f64;
            let mut up = hi * (i + 1) as f64 / TAILORED_GRID as f64;
            if i < TAILORED_GRID {
                for _ in 0..BISECTION_STEPS {
                    let mid = 0.5 * (lo + up);
                    if selected(mid)? {
                        lo = mid;
                    } else {
                        up = mid;
                    }
                }
            }
            let gamma = lo;
            let out = cand(gamma)?;
            record_replay(simulate(rule, &out, view)?.1, "tailored krum");
            Ok(out)
        }
        DefenseSpec::Trmean { .. } | DefenseSpec::Median => {
            let clean = simulate(rule, &mu, view)?.0;
            let dev = |gm: f64| -> Result<f64> { simulate(rule, &cand(gm)?, view)?.0.distance(&clean) };
            let top = dev(hi)?;
            let target = top * (1.0 - 1e-9);
            let (mut lo, mut up) = (0.0, hi);
            if top == 0.0 || dev(0.0)? >= target {
                up = 0.0;
            } else {
                for _ in 0..BISECTION_STEPS {
                    let mid = 0.5 * (lo + up);
                    if dev(mid)? >= target {
                        up = mid;
                    } else {
                        lo = mid;
                    }
                }
            }
            let gamma = up;
            let out = cand(gamma)?;
            record_replay(dev(gamma)? >= top * (1.0 - REPLAY_TOLERANCE), "tailored trim");
            Ok(out)
        }
        other => Err(Error::invalid(format!("agr_tailored does not support {}", other.name()))),
    }
}

/// `l → M − 1 − l`.
pub fn label_flip(data: &Dataset, num_classes: usize) -> Result<Dataset> {
    if data.num_classes() != num_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, expected {num_classes}",
            data.num_classes()
        )));
    }
    let mut out = data.clone();
    for i in 0..out.len() {
        let l = out.label(i);
        out.set_label(i, num_classes - 1 - l);
    }
    Ok(out)
}

/// Stamps the trigger on every row of `data` in place.
pub fn stamp_trigger(data: &mut Dataset, rows: &[usize], trigger: &Trigger) -> Result<()> {
    if let Some(&bad) = trigger.features.iter().find(|&&f| f >= data.dim()) {
        return Err(Error::invalid(format!(
            "trigger feature {bad} outside dimension {}",
            data.dim()
        )));
    }
    for &r in rows {
        let row = data.row_mut(r);
        for &f in &trigger.features {
            row[f] = trigger.value;
        }
    }
    Ok(())
}

/// Trains on a copy of `data` with `fraction` of its rows triggered and
/// relabelled to `target`, then scales the update by `factor`.
#[allow(clippy::too_many_arguments)]
pub fn scaling_backdoor(
    params: &ModelParams,
    data: &Dataset,
    trigger: &Trigger,
    target: usize,
    factor: f64,
    fraction: f64,
    args: &TrainArgs,
    seed: u64,
) -> Result<GradientVector> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::invalid("backdoor factor must be positive"));
    }
    if target >= data.num_classes() {
        return Err(Error::invalid(format!("backdoor target {target} out of range")));
    }
    let mut poisoned = data.clone();
    let count = ((fraction * data.len() as f64).round() as usize).min(data.len());
    let mut r = rng::stream(seed, Stream::Backdoor, 0, 0);
    let rows = sample(&mut r, data.len(), count).into_vec();
    stamp_trigger(&mut poisoned, &rows, trigger)?;
    for &i in &rows {
        poisoned.set_label(i, target);
    }
    Ok(local_train(params, &poisoned, args, seed)?.scale(factor))
}

/// Adaptive evasion test: poison iff `cos(received, own_last) ≥ cos(received, g_p)`.
pub fn adaptive_should_poison(received: &GradientVector, own_last: &GradientVector, g_p: &GradientVector) -> Result<bool> {
    Ok(cosine_similarity(received, own_last)? >= cosine_similarity(received, g_p)?)
}

/// Inner attack's gradient when the wrapper decides to poison, otherwise
/// the honest gradient.
pub fn adaptive_evasion(
    inner: &AttackKind,
    view: &AttackerView,
    received: &GradientVector,
    own_last: &GradientVector,
    honest: &GradientVector,
    seed: u64,
) -> Result<(GradientVector, bool)> {
    let g_p = view.mean()?;
    if adaptive_should_poison(received, own_last, &g_p)? {
        let crafted = craft(inner, view, seed)?;
        Ok((crafted.into_iter().next().unwrap_or_else(|| honest.clone()), true))
    } else {
        Ok((honest.clone(), false))
    }
}

/// `1 − 2|A_S − 0.5|`.
pub fn concealment(judgment_success: f64) -> f64 {
    1.0 - 2.0 * (judgment_success - 0.5).abs()
}
