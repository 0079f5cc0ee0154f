//! Baseline aggregation rules: FedAvg, Krum, Mkrum, Trmean, Median, Bulyan,
//! FLTrust and DnC.
//!
//! Floating-point conventions are fixed so independent reference
//! implementations can match bit for bit: squared distances sum coordinates
//! in index order, Krum scores sum neighbour distances in ascending order,
//! and coordinate-wise rules sum kept values in ascending value order.

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradvec::{self, check_all_dims, cosine_similarity, GradientVector};
use crate::recess::RecessParams;
use crate::rng::{self, Stream};

pub const DNC_DEFAULT_SUB_DIM: usize = 1000;
pub const DNC_DEFAULT_FILTER_FRAC: f64 = 1.5;
pub const DNC_DEFAULT_ITERS: usize = 1;
const POWER_ITERATIONS: usize = 100;
const POWER_TOLERANCE: f64 = 1e-9;

/// Aggregation rule selected by configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DefenseSpec {
    #[serde(rename = "fedavg")]
    FedAvg,
    Krum,
    /// `m` defaults to [`mkrum_default_m`].
    Mkrum {
        #[serde(default)]
        m: Option<usize>,
    },
    /// `k` defaults to `assumed_c`.
    Trmean {
        #[serde(default)]
        k: Option<usize>,
    },
    Median,
    Bulyan,
    #[serde(rename = "fltrust")]
    FlTrust {
        #[serde(default = "default_root_size")]
        root_size: usize,
    },
    Dnc {
        #[serde(default = "default_sub_dim")]
        sub_dim: usize,
        #[serde(default = "default_filter_frac")]
        filter_frac: f64,
        #[serde(default = "default_iters")]
        iters: usize,
    },
    Recess(RecessParams),
    RecessMedian(RecessParams),
}

fn default_root_size() -> usize {
    100
}
fn default_sub_dim() -> usize {
    DNC_DEFAULT_SUB_DIM
}
fn default_filter_frac() -> f64 {
    DNC_DEFAULT_FILTER_FRAC
}
fn default_iters() -> usize {
    DNC_DEFAULT_ITERS
}

impl DefenseSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DefenseSpec::FedAvg => "fedavg",
            DefenseSpec::Krum => "krum",
            DefenseSpec::Mkrum { .. } => "mkrum",
            DefenseSpec::Trmean { .. } => "trmean",
            DefenseSpec::Median => "median",
            DefenseSpec::Bulyan => "bulyan",
            DefenseSpec::FlTrust { .. } => "fltrust",
            DefenseSpec::Dnc { .. } => "dnc",
            DefenseSpec::Recess(_) => "recess",
            DefenseSpec::RecessMedian(_) => "recess_median",
        }
    }

    pub fn is_recess(&self) -> bool {
        matches!(self, DefenseSpec::Recess(_) | DefenseSpec::RecessMedian(_))
    }

    pub fn recess_params(&self) -> Option<&RecessParams> {
        match self {
            DefenseSpec::Recess(p) | DefenseSpec::RecessMedian(p) => Some(p),
            _ => None,
        }
    }

    /// Checks static parameter constraints for `n` participants.
    pub fn validate(&self, n: usize, assumed_c: usize) -> Result<()> {
        match self {
            DefenseSpec::Krum => krum_neighbours(n, assumed_c).map(|_| ()),
            DefenseSpec::Mkrum { m } => {
                let m = m.unwrap_or(mkrum_default_m(n, assumed_c));
                check_mkrum(n, assumed_c, m)
            }
            DefenseSpec::Trmean { k } => check_trim(n, k.unwrap_or(assumed_c)),
            DefenseSpec::Bulyan => check_bulyan(n, assumed_c),
            DefenseSpec::FlTrust { root_size } if *root_size == 0 => {
                Err(Error::invalid("fltrust root_size must be positive"))
            }
            DefenseSpec::Dnc { filter_frac, .. } if filter_frac.is_nan() || *filter_frac <= 0.0 => {
                Err(Error::invalid("dnc filter_frac must be positive"))
            }
            DefenseSpec::Recess(p) | DefenseSpec::RecessMedian(p) => p.validate(),
            _ => Ok(()),
        }
    }
}

/// Largest feasible selection size: `n − c − 2`, or `n` when that is not positive.
pub fn mkrum_default_m(n: usize, c: usize) -> usize {
    match n.checked_sub(c + 2) {
        Some(m) if m > 0 => m,
        _ => n,
    }
}

/// Inputs shared by the baseline rules beyond the gradients themselves.
#[derive(Debug, Clone, Copy)]
pub struct AggContext<'a> {
    pub sizes: &'a [usize],
    pub assumed_c: usize,
    pub root_gradient: Option<&'a GradientVector>,
    pub seed: u64,
}

/// Dispatches a baseline rule. RECESS variants are stateful and handled by
/// the harness.
pub fn aggregate(spec: &DefenseSpec, gradients: &[GradientVector], ctx: &AggContext<'_>) -> Result<GradientVector> {
    let n = gradients.len();
    match spec {
        DefenseSpec::FedAvg => fedavg(gradients, ctx.sizes),
        DefenseSpec::Krum => krum(gradients, ctx.assumed_c).map(|(g, _)| g),
        DefenseSpec::Mkrum { m } => mkrum(gradients, ctx.assumed_c, m.unwrap_or(mkrum_default_m(n, ctx.assumed_c))),
        DefenseSpec::Trmean { k } => trmean(gradients, k.unwrap_or(ctx.assumed_c)),
        DefenseSpec::Median => median(gradients),
        DefenseSpec::Bulyan => bulyan(gradients, ctx.assumed_c),
        DefenseSpec::FlTrust { .. } => {
            let root = ctx
                .root_gradient
                .ok_or_else(|| Error::invalid("fltrust requires a root gradient"))?;
            fltrust(gradients, root)
        }
        DefenseSpec::Dnc {
            sub_dim,
            filter_frac,
            iters,
        } => dnc(gradients, *sub_dim, *filter_frac, *iters, ctx.assumed_c, ctx.seed),
        DefenseSpec::Recess(_) | DefenseSpec::RecessMedian(_) => {
            Err(Error::invalid("recess aggregation is stateful; use the recess module"))
        }
    }
}

/// `Σ (sizeᵢ/Σsizes)·gᵢ`.
pub fn fedavg(gradients: &[GradientVector], sizes: &[usize]) -> Result<GradientVector> {
    if gradients.is_empty() {
        return Err(Error::Empty("gradient list"));
    }
    if gradients.len() != sizes.len() {
        return Err(Error::LengthMismatch {
            left: gradients.len(),
            right: sizes.len(),
        });
    }
    let total: usize = sizes.iter().sum();
    if total == 0 || sizes.contains(&0) {
        return Err(Error::invalid("fedavg sizes must be positive"));
    }
    let weights: Vec<f64> = sizes.iter().map(|&s| s as f64 / total as f64).collect();
    gradvec::weighted_sum(gradients, &weights)
}

fn krum_neighbours(n: usize, c: usize) -> Result<usize> {
    match n.checked_sub(c + 2) {
        Some(k) if k >= 1 => Ok(k),
        _ => Err(Error::TooFewClients(format!(
            "krum needs n - c - 2 >= 1, got n={n}, c={c}"
        ))),
    }
}

fn pairwise_sq(gradients: &[GradientVector]) -> Vec<Vec<f64>> {
    let n = gradients.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = gradvec::squared_distance(gradients[i].as_slice(), gradients[j].as_slice());
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Krum score of every member of `pool`: sum of the `k` smallest squared
/// distances to other pool members.
fn scores_in_pool(dist: &[Vec<f64>], pool: &[usize], k: usize) -> Vec<f64> {
    pool.iter()
        .map(|&i| {
            let mut ds: Vec<f64> = pool.iter().filter(|&&j| j != i).map(|&j| dist[i][j]).collect();
            ds.sort_by(f64::total_cmp);
            ds.iter().take(k).sum()
        })
        .collect()
}

fn argmin_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] < scores[best] {
            best = i;
        }
    }
    best
}

/// Krum scores with `n − c − 2` neighbours.
pub fn krum_scores(gradients: &[GradientVector], assumed_c: usize) -> Result<Vec<f64>> {
    check_all_dims(gradients)?;
    let k = krum_neighbours(gradients.len(), assumed_c)?;
    let pool: Vec<usize> = (0..gradients.len()).collect();
    Ok(scores_in_pool(&pairwise_sq(gradients), &pool, k))
}

/// Returns the selected gradient and its index; ties go to the lowest index.
pub fn krum(gradients: &[GradientVector], assumed_c: usize) -> Result<(GradientVector, usize)> {
    let scores = krum_scores(gradients, assumed_c)?;
    let idx = argmin_first(&scores);
    Ok((gradients[idx].clone(), idx))
}

fn check_mkrum(n: usize, c: usize, m: usize) -> Result<()> {
    if m == 0 || m > n {
        return Err(Error::invalid(format!("mkrum m={m} outside [1, {n}]")));
    }
    if m == n || n >= m + c + 2 {
        Ok(())
    } else {
        Err(Error::TooFewClients(format!(
            "mkrum needs n - m - c - 2 >= 0, got n={n}, m={m}, c={c}"
        )))
    }
}

/// Indices chosen by `m` rounds of Krum without replacement, in selection order.
pub fn mkrum_selection(gradients: &[GradientVector], assumed_c: usize, m: usize) -> Result<Vec<usize>> {
    let n = gradients.len();
    check_all_dims(gradients)?;
    check_mkrum(n, assumed_c, m)?;
    if m == n {
        return Ok((0..n).collect());
    }
    Ok(iterated_krum(gradients, assumed_c, m, false))
}

/// `m` rounds of Krum over a shrinking pool, at least one neighbour per
/// score. Equal scores go to the lowest index, or with `by_value` to the
/// lexicographically smallest vector.
fn iterated_krum(gradients: &[GradientVector], c: usize, m: usize, by_value: bool) -> Vec<usize> {
    let dist = pairwise_sq(gradients);
    let mut pool: Vec<usize> = (0..gradients.len()).collect();
    let mut chosen = Vec::with_capacity(m);
    for _ in 0..m {
        let k = pool.len().saturating_sub(c + 2).max(1).min(pool.len() - 1);
        let scores = scores_in_pool(&dist, &pool, k);
        let mut pick = 0;
        for i in 1..pool.len() {
            let better = match scores[i].total_cmp(&scores[pick]) {
                std::cmp::Ordering::Less => true,
                std::cmp::Ordering::Equal if by_value => {
                    lex_cmp(&gradients[pool[i]], &gradients[pool[pick]]).is_lt()
                }
                _ => false,
            };
            if better {
                pick = i;
            }
        }
        chosen.push(pool.remove(pick));
    }
    chosen
}

fn lex_cmp(a: &GradientVector, b: &GradientVector) -> std::cmp::Ordering {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Mean of the Mkrum-selected set, summed in ascending index order.
pub fn mkrum(gradients: &[GradientVector], assumed_c: usize, m: usize) -> Result<GradientVector> {
    let mut sel = mkrum_selection(gradients, assumed_c, m)?;
    sel.sort_unstable();
    mean_of(gradients, &sel)
}

fn mean_of(gradients: &[GradientVector], idx: &[usize]) -> Result<GradientVector> {
    let d = gradients[0].dim();
    let mut out = vec![0.0; d];
    for &i in idx {
        for (o, v) in out.iter_mut().zip(gradients[i].iter()) {
            *o += v;
        }
    }
    let m = idx.len() as f64;
    out.iter_mut().for_each(|o| *o /= m);
    GradientVector::new(out)
}

fn check_trim(n: usize, k: usize) -> Result<()> {
    if 2 * k >= n {
        return Err(Error::TooFewClients(format!("trmean needs 2k < n, got n={n}, k={k}")));
    }
    Ok(())
}

/// Applies `f` to the ascending-sorted values of every coordinate.
fn per_coordinate(gradients: &[GradientVector], mut f: impl FnMut(&[f64]) -> f64) -> Result<GradientVector> {
    let d = check_all_dims(gradients)?;
    let mut col = vec![0.0; gradients.len()];
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        for (c, g) in col.iter_mut().zip(gradients) {
            *c = g[j];
        }
        col.sort_by(f64::total_cmp);
        out.push(f(&col));
    }
    GradientVector::new(out)
}

/// Per coordinate, drops the `k` smallest and `k` largest values and averages
/// the rest.
pub fn trmean(gradients: &[GradientVector], k: usize) -> Result<GradientVector> {
    check_trim(gradients.len(), k)?;
    per_coordinate(gradients, |s| {
        let kept = &s[k..s.len() - k];
        kept.iter().sum::<f64>() / kept.len() as f64
    })
}

fn sorted_median(s: &[f64]) -> f64 {
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Coordinate-wise median; even `n` averages the two central values.
pub fn median(gradients: &[GradientVector]) -> Result<GradientVector> {
    per_coordinate(gradients, sorted_median)
}

fn check_bulyan(n: usize, c: usize) -> Result<()> {
    if n < 4 * c + 3 {
        return Err(Error::TooFewClients(format!(
            "bulyan needs n >= 4c + 3, got n={n}, c={c}"
        )));
    }
    Ok(())
}

/// Iterated Krum picks `θ = n − 2c` gradients; per coordinate the
/// `β = θ − 2c` values closest to the selection's median are averaged.
pub fn bulyan(gradients: &[GradientVector], assumed_c: usize) -> Result<GradientVector> {
    let n = gradients.len();
    check_all_dims(gradients)?;
    check_bulyan(n, assumed_c)?;
    let theta = n - 2 * assumed_c;
    let beta = theta - 2 * assumed_c;
    let mut sel = iterated_krum(gradients, assumed_c, theta, true);
    sel.sort_unstable();
    let selected: Vec<GradientVector> = sel.iter().map(|&i| gradients[i].clone()).collect();
    per_coordinate(&selected, |s| {
        let med = sorted_median(s);
        let mut by_gap: Vec<f64> = s.to_vec();
        by_gap.sort_by(|a, b| {
            (a - med)
                .abs()
                .total_cmp(&(b - med).abs())
                .then_with(|| a.total_cmp(b))
        });
        let mut kept: Vec<f64> = by_gap[..beta].to_vec();
        kept.sort_by(f64::total_cmp);
        kept.iter().sum::<f64>() / beta as f64
    })
}

/// FLTrust trust weights: `max(0, cos(gᵢ, root))`, zero for zero-norm `gᵢ`.
pub fn fltrust_scores(gradients: &[GradientVector], root: &GradientVector) -> Result<Vec<f64>> {
    if root.norm() == 0.0 {
        return Err(Error::DegenerateGradient);
    }
    gradients
        .iter()
        .map(|g| {
            if g.dim() != root.dim() {
                return Err(Error::DimensionMismatch {
                    expected: root.dim(),
                    got: g.dim(),
                });
            }
            if g.norm() == 0.0 {
                return Ok(0.0);
            }
            Ok(cosine_similarity(g, root)?.max(0.0))
        })
        .collect()
}

/// Trust-weighted mean of gradients rescaled to the root gradient's norm.
pub fn fltrust(gradients: &[GradientVector], root: &GradientVector) -> Result<GradientVector> {
    if gradients.is_empty() {
        return Err(Error::Empty("gradient list"));
    }
    let ts = fltrust_scores(gradients, root)?;
    let total: f64 = ts.iter().sum();
    if total == 0.0 {
        return Ok(root.clone());
    }
    let rn = root.norm();
    let mut out = vec![0.0; root.dim()];
    for (g, &t) in gradients.iter().zip(&ts) {
        if t == 0.0 {
            continue;
        }
        let f = t * rn / g.norm() / total;
        for (o, v) in out.iter_mut().zip(g.iter()) {
            *o += f * v;
        }
    }
    GradientVector::new(out)
}

/// Indices DnC marks as outliers across all iterations, ascending.
pub fn dnc_flagged(
    gradients: &[GradientVector],
    sub_dim: usize,
    filter_frac: f64,
    iters: usize,
    assumed_c: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = gradients.len();
    let d = check_all_dims(gradients)?;
    if n < 2 {
        return Err(Error::TooFewClients(format!("dnc needs n >= 2, got {n}")));
    }
    if filter_frac.is_nan() || filter_frac <= 0.0 {
        return Err(Error::invalid("dnc filter_frac must be positive"));
    }
    let remove = ((filter_frac * assumed_c as f64).ceil() as usize).min(n);
    let k = sub_dim.clamp(1, d);
    let mut marked = vec![false; n];
    for it in 0..iters {
        let mut rng = rng::stream(seed, Stream::Defense, it as u64, 0);
        let mut coords = sample(&mut rng, d, k).into_vec();
        coords.sort_unstable();
        let mut centered: Vec<Vec<f64>> = gradients
            .iter()
            .map(|g| coords.iter().map(|&j| g[j]).collect())
            .collect();
        for j in 0..k {
            let mu = centered.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            centered.iter_mut().for_each(|r| r[j] -= mu);
        }
        let v = top_right_singular(&centered, &mut rng);
        let scores: Vec<f64> = centered
            .iter()
            .map(|r| {
                let p = gradvec::dot(r, &v);
                p * p
            })
            .collect();
        if scores.iter().all(|&s| s == 0.0) {
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        for &i in order.iter().take(remove) {
            marked[i] = true;
        }
    }
    Ok((0..n).filter(|&i| marked[i]).collect())
}

/// Spectral filtering: mean of the clients never marked, or the coordinate
/// median when every client was marked.
pub fn dnc(
    gradients: &[GradientVector],
    sub_dim: usize,
    filter_frac: f64,
    iters: usize,
    assumed_c: usize,
    seed: u64,
) -> Result<GradientVector> {
    let flagged = dnc_flagged(gradients, sub_dim, filter_frac, iters, assumed_c, seed)?;
    let kept: Vec<usize> = (0..gradients.len()).filter(|i| !flagged.contains(i)).collect();
    if kept.is_empty() {
        return median(gradients);
    }
    mean_of(gradients, &kept)
}

/// Power iteration on `CᵀC` from a seeded Gaussian start.
fn top_right_singular(rows: &[Vec<f64>], rng: &mut rng::Rng) -> Vec<f64> {
    let k = rows[0].len();
    let mut v: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
    normalize(&mut v);
    for _ in 0..POWER_ITERATIONS {
        let cv: Vec<f64> = rows.iter().map(|r| gradvec::dot(r, &v)).collect();
        let mut next = vec![0.0; k];
        for (r, &s) in rows.iter().zip(&cv) {
            for (nx, x) in next.iter_mut().zip(r) {
                *nx += s * x;
            }
        }
        if !normalize(&mut next) {
            return v;
        }
        let delta = gradvec::squared_distance(&next, &v).sqrt();
        v = next;
        if delta < POWER_TOLERANCE {
            break;
        }
    }
    v
}

fn normalize(v: &mut [f64]) -> bool {
    let n = gradvec::dot(v, v).sqrt();
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}
