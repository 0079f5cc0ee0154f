//! Proactive detection: each client receives a probe derived from its own
//! previous upload, its response is scored for abnormality, and the score
//! drives a per-client trust ledger that weights aggregation.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::defenses;
use crate::error::{Error, Result};
use crate::gradvec::{self, cosine_similarity, GradientVector};
use crate::rng::{self, Stream};

const PROBE_BISECTION_STEPS: usize = 40;
const PROBE_WINDOW: f64 = 0.01;
const PROBE_MAX_EXPANSIONS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    #[default]
    WeightedAvg,
    MedianFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecessParams {
    /// Cosine floor 𝒜 between a probe and the update it was built from.
    pub direction_threshold: f64,
    pub ts_initial: f64,
    pub baseline_decreased_score: f64,
    pub good_streak_required: i64,
    pub noise_dim_fraction: f64,
    pub aggregation_mode: AggregationMode,
    /// Score every response as `−S_C/‖g‖`, ignoring the negative-cosine branch.
    pub alg1_literal: bool,
}

impl Default for RecessParams {
    fn default() -> Self {
        Self {
            direction_threshold: 0.95,
            ts_initial: 1.0,
            baseline_decreased_score: 0.1,
            good_streak_required: 10,
            noise_dim_fraction: 0.10,
            aggregation_mode: AggregationMode::WeightedAvg,
            alg1_literal: false,
        }
    }
}

impl RecessParams {
    pub fn validate(&self) -> Result<()> {
        let a = self.direction_threshold;
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::invalid(format!("direction_threshold {a} outside (0, 1)")));
        }
        if !(self.ts_initial > 0.0 && self.ts_initial.is_finite()) {
            return Err(Error::invalid("ts_initial must be positive"));
        }
        if !(self.baseline_decreased_score > 0.0 && self.baseline_decreased_score.is_finite()) {
            return Err(Error::invalid("baseline_decreased_score must be positive"));
        }
        if self.good_streak_required < 1 {
            return Err(Error::invalid("good_streak_required must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.noise_dim_fraction) {
            return Err(Error::invalid("noise_dim_fraction outside [0, 1]"));
        }
        Ok(())
    }
}

/// Builds the unit-norm probe for one client.
///
/// Gaussian noise on the leading `⌈noise_dim_fraction·d⌉` coordinates is
/// scaled by bisection until the cosine to the normalised `last_update`
/// falls in `[𝒜, min(1, 𝒜 + 0.01)]`.
pub fn construct_test_gradient(last_update: &GradientVector, params: &RecessParams, seed: u64) -> Result<GradientVector> {
    let unit = last_update.normalized()?;
    let d = unit.dim();
    let k = ((params.noise_dim_fraction * d as f64).ceil() as usize).min(d);
    if k == 0 {
        return Err(Error::NoAdjustableCoordinates);
    }
    let target = params.direction_threshold;
    let upper = (target + PROBE_WINDOW).min(1.0);

    let mut rng = rng::stream(seed, Stream::Probe, 0, 0);
    let mut noise: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
    // The cosine falls monotonically with the noise scale toward
    // `u·z/‖z‖`; a non-positive limit guarantees the floor is crossed.
    if gradvec::dot(&unit.as_slice()[..k], &noise) > 0.0 {
        noise.iter_mut().for_each(|z| *z = -*z);
    }
    let adjusted = |scale: f64| -> GradientVector {
        let mut v = unit.as_slice().to_vec();
        for (x, z) in v.iter_mut().zip(&noise) {
            *x += scale * z;
        }
        let n = gradvec::dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        GradientVector::from_finite(v)
    };
    let cos_at = |scale: f64| gradvec::dot(unit.as_slice(), adjusted(scale).as_slice());

    let mut hi = 1.0;
    let mut expansions = 0;
    while cos_at(hi) >= target {
        hi *= 2.0;
        expansions += 1;
        if expansions > PROBE_MAX_EXPANSIONS {
            return Err(Error::NoAdjustableCoordinates);
        }
    }
    let mut lo = 0.0;
    for _ in 0..PROBE_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if cos_at(mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let probe = adjusted(lo);
    let cos = gradvec::dot(unit.as_slice(), probe.as_slice());
    if cos > upper {
        return Err(Error::invalid(format!(
            "probe cosine {cos} cannot be brought under {upper}"
        )));
    }
    Ok(probe)
}

/// One client's abnormality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Abnormality {
    pub alpha: f64,
    pub s_c: f64,
    pub magnitude: f64,
}

/// `S_C = cos(test, response)`, `mag = ‖response‖`;
/// `α = −S_C·mag` when `S_C < 0`, else `−S_C/mag`.
pub fn abnormality(test: &GradientVector, response: &GradientVector) -> Result<Abnormality> {
    abnormality_with(test, response, false)
}

pub fn abnormality_with(test: &GradientVector, response: &GradientVector, alg1_literal: bool) -> Result<Abnormality> {
    let magnitude = response.norm();
    if magnitude == 0.0 {
        return Err(Error::DegenerateResponse);
    }
    let s_c = cosine_similarity(test, response)?;
    Ok(Abnormality {
        alpha: alpha_from(s_c, magnitude, alg1_literal),
        s_c,
        magnitude,
    })
}

pub fn alpha_from(s_c: f64, magnitude: f64, alg1_literal: bool) -> f64 {
    if s_c < 0.0 && !alg1_literal {
        -s_c * magnitude
    } else {
        -s_c / magnitude
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClientRecord {
    pub trust_score: f64,
    pub marker: i64,
    pub flagged: bool,
}

impl ClientRecord {
    pub fn new(ts_initial: f64) -> Self {
        Self {
            trust_score: ts_initial,
            marker: 0,
            flagged: false,
        }
    }
}

/// One step of the marker / delayed-reward trust update. Flagged records are
/// returned unchanged.
pub fn update_trust(record: ClientRecord, alpha: f64, params: &RecessParams) -> ClientRecord {
    if record.flagged {
        return record;
    }
    let mut r = record;
    if alpha <= 0.0 {
        r.marker += 1;
    } else if r.marker > 0 {
        r.marker = -1;
    } else {
        r.marker -= 1;
    }
    if r.marker < 0 || r.marker >= params.good_streak_required {
        r.trust_score -= alpha * params.baseline_decreased_score;
    }
    r.trust_score = r.trust_score.clamp(0.0, 2.0 * params.ts_initial);
    r.flagged = r.trust_score <= 0.0;
    r
}

/// Softmax of trust over unflagged clients; flagged clients get weight 0.
pub fn aggregation_weights(records: &[ClientRecord]) -> Result<Vec<f64>> {
    let max = records
        .iter()
        .filter(|r| !r.flagged)
        .map(|r| r.trust_score)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NoTrustedClients);
    }
    let exp: Vec<f64> = records
        .iter()
        .map(|r| if r.flagged { 0.0 } else { (r.trust_score - max).exp() })
        .collect();
    let total: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / total).collect())
}

/// Trust-weighted average, or coordinate median, of the unflagged clients'
/// gradients. `gradients[i]` belongs to `records[i]`.
pub fn recess_aggregate(gradients: &[GradientVector], records: &[ClientRecord], mode: AggregationMode) -> Result<GradientVector> {
    if gradients.len() != records.len() {
        return Err(Error::LengthMismatch {
            left: gradients.len(),
            right: records.len(),
        });
    }
    match mode {
        AggregationMode::WeightedAvg => {
            let w = aggregation_weights(records)?;
            let (g, w): (Vec<GradientVector>, Vec<f64>) = gradients
                .iter()
                .zip(records)
                .zip(w)
                .filter(|((_, r), _)| !r.flagged)
                .map(|((g, _), w)| (g.clone(), w))
                .unzip();
            gradvec::weighted_sum(&g, &w)
        }
        AggregationMode::MedianFallback => {
            let kept: Vec<GradientVector> = gradients
                .iter()
                .zip(records)
                .filter(|(_, r)| !r.flagged)
                .map(|(g, _)| g.clone())
                .collect();
            if kept.is_empty() {
                return Err(Error::NoTrustedClients);
            }
            defenses::median(&kept)
        }
    }
}

/// Per-client trust state for the whole federation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrustLedger {
    pub records: Vec<ClientRecord>,
}

impl TrustLedger {
    pub fn new(num_clients: usize, params: &RecessParams) -> Self {
        Self {
            records: vec![ClientRecord::new(params.ts_initial); num_clients],
        }
    }

    pub fn flagged(&self) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].flagged).collect()
    }

    pub fn subset(&self, ids: &[usize]) -> Vec<ClientRecord> {
        ids.iter().map(|&i| self.records[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportEntry {
    pub client: usize,
    pub alpha: f64,
    pub s_c: f64,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AbnormalityReport {
    pub entries: Vec<ReportEntry>,
    /// Unflagged clients skipped for lack of a previous upload.
    pub skipped: Vec<usize>,
}

/// Probes for every unflagged client with history; `None` otherwise.
pub fn build_probes(
    ledger: &TrustLedger,
    history: &[Option<GradientVector>],
    params: &RecessParams,
    seed: u64,
    round: u64,
) -> Result<Vec<Option<GradientVector>>> {
    let jobs: Vec<usize> = (0..ledger.records.len()).collect();
    crate::par::map(&jobs, |_, &i| {
        if ledger.records[i].flagged {
            return Ok(None);
        }
        match history.get(i).and_then(Option::as_ref) {
            Some(last) => {
                let s = rng::derive_seed(seed, Stream::Probe, i as u64, round);
                construct_test_gradient(last, params, s).map(Some)
            }
            None => Ok(None),
        }
    })
    .into_iter()
    .collect()
}

/// Scores responses against their probes and applies the trust updates in
/// client order.
pub fn score_responses(
    ledger: &mut TrustLedger,
    probes: &[Option<GradientVector>],
    responses: &[Option<GradientVector>],
    params: &RecessParams,
) -> Result<AbnormalityReport> {
    let mut report = AbnormalityReport::default();
    for (i, record) in ledger.records.iter_mut().enumerate() {
        if record.flagged {
            continue;
        }
        let (Some(probe), Some(resp)) = (&probes[i], responses.get(i).and_then(Option::as_ref)) else {
            report.skipped.push(i);
            continue;
        };
        let a = abnormality_with(probe, resp, params.alg1_literal)?;
        *record = update_trust(*record, a.alpha, params);
        report.entries.push(ReportEntry {
            client: i,
            alpha: a.alpha,
            s_c: a.s_c,
            magnitude: a.magnitude,
        });
    }
    Ok(report)
}

/// Idle iteration: probe every eligible client, collect responses through
/// `respond`, and update the ledger.
pub fn detection_round<F>(
    ledger: &mut TrustLedger,
    history: &[Option<GradientVector>],
    params: &RecessParams,
    seed: u64,
    round: u64,
    respond: F,
) -> Result<AbnormalityReport>
where
    F: FnOnce(&[Option<GradientVector>]) -> Result<Vec<Option<GradientVector>>>,
{
    let probes = build_probes(ledger, history, params, seed, round)?;
    let responses = respond(&probes)?;
    score_responses(ledger, &probes, &responses, params)
}

/// Splits abnormality values into benign and malicious groups.
///
/// Every cut between distinct sorted values is scored by the signed overlap
/// of the two groups' `mean ± 3σ` intervals (negative means a gap). Only
/// cuts whose upper group is strictly smaller are eligible; the lowest
/// overlap wins, ties going to the smaller upper group. Nothing is reported
/// unless the winning overlap is non-positive. The threshold is the midpoint
/// between the two groups.
pub fn divide_anomaly_set(values: &[f64]) -> Result<(Vec<usize>, Option<f64>)> {
    if values.len() < 2 {
        return Err(Error::invalid("anomaly division needs at least 2 values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();

    let mut best: Option<(f64, usize)> = None;
    for cut in 1..n {
        if sorted[cut - 1] == sorted[cut] || n - cut >= cut {
            continue;
        }
        let (ml, sl) = mean_std(&sorted[..cut]);
        let (mh, sh) = mean_std(&sorted[cut..]);
        let overlap = (ml + 3.0 * sl) - (mh - 3.0 * sh);
        let better = match best {
            None => true,
            Some((o, c)) => overlap < o || (overlap == o && cut > c),
        };
        if better {
            best = Some((overlap, cut));
        }
    }
    match best {
        Some((overlap, cut)) if overlap <= 0.0 => {
            let mut malicious: Vec<usize> = order[cut..].to_vec();
            malicious.sort_unstable();
            Ok((malicious, Some(0.5 * (sorted[cut - 1] + sorted[cut]))))
        }
        _ => Ok((Vec::new(), None)),
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}
