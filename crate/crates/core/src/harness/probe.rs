use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::attacks::{self, AttackerView, DirectionReference};
use crate::error::{Error, Result};
use crate::gradvec::GradientVector;
use crate::par;
use crate::rng::{self, Stream};

/// Spread of the fixed benign gradients around zero.
pub const BENIGN_SPREAD: f64 = 0.1;
pub const BOOTSTRAP_BATCHES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prop1Report {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub trials: usize,
    pub noise_sigma: f64,
    /// Mean-over-coordinates variance of the malicious gradient across all trials.
    pub malicious_variance: f64,
    /// Largest such variance among the benign clients.
    pub max_benign_variance: f64,
    pub batch_malicious: Vec<f64>,
    pub batch_max_benign: Vec<f64>,
    /// Share of bootstrap batches where malicious > max benign.
    pub fraction_exceeding: f64,
}

/// One trial: the malicious gradients and the benign mean.
type Trial = (Vec<Vec<f64>>, Vec<f64>);

/// Per-coordinate variance over the selected trials, averaged over coordinates.
#[allow(clippy::needless_range_loop)]
fn mean_coord_variance(samples: &[Vec<f64>], pick: &[usize]) -> f64 {
    let d = samples[0].len();
    let t = pick.len() as f64;
    let mut total = 0.0;
    for k in 0..d {
        // Shifted by the first sample so constant columns give exactly 0.
        let shift = samples[pick[0]][k];
        let mean = pick.iter().map(|&i| samples[i][k] - shift).sum::<f64>() / t;
        let var = pick.iter().map(|&i| (samples[i][k] - shift - mean).powi(2)).sum::<f64>() / t;
        total += var;
    }
    total / d as f64
}

/// Empirical variance check on the Fang-optimal gradient.
///
/// A benign set of `n − c` vectors is drawn once; each trial adds fresh
/// `N(0, σ²)` noise to every benign vector and recomputes the attack.
/// Bootstrap batches resample the trials with replacement.
pub fn proposition1_probe(n: usize, c: usize, d: usize, trials: usize, noise_sigma: f64, seed: u64) -> Result<Prop1Report> {
    if n <= 2 * c + 1 {
        return Err(Error::AttackInfeasible(format!("n - 2c - 1 <= 0 for n={n}, c={c}")));
    }
    if trials < 50 {
        return Err(Error::invalid(format!("need at least 50 trials, got {trials}")));
    }
    if d == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::invalid("noise sigma must be non-negative"));
    }
    let honest = n - c;
    let mut base_rng = rng::stream(seed, Stream::Prop1, u64::MAX, 0);
    let base: Vec<Vec<f64>> = (0..honest)
        .map(|_| {
            (0..d)
                .map(|_| BENIGN_SPREAD * rand::Rng::sample::<f64, _>(&mut base_rng, StandardNormal))
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    // One attack seed for every trial so identical inputs give identical output.
    let attack_seed = rng::derive_seed(seed, Stream::Prop1, u64::MAX, 1);

    let runs: Vec<Result<Trial>> = par::map_range(trials, |t| {
        let mut r = rng::stream(seed, Stream::Prop1, t as u64, 0);
        let benign: Vec<Vec<f64>> = base
            .iter()
            .map(|b| b.iter().map(|x| x + noise.sample(&mut r)).collect())
            .collect();
        let view = AttackerView {
            benign_gradients: benign.iter().cloned().map(GradientVector::new).collect::<Result<_>>()?,
            num_clients: n,
            num_malicious: c,
            last_aggregate: None,
            reference: DirectionReference::ViewMean,
        };
        let out = attacks::fang_opt_attack(&view, attack_seed)?;
        let mal = out.gradients.into_iter().next().ok_or(Error::Empty("malicious gradients"))?;
        Ok((benign, mal.into_vec()))
    });
    let mut per_client: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(trials); honest];
    let mut mal: Vec<Vec<f64>> = Vec::with_capacity(trials);
    for run in runs {
        let (b, m) = run?;
        for (slot, v) in per_client.iter_mut().zip(b) {
            slot.push(v);
        }
        mal.push(m);
    }

    let all: Vec<usize> = (0..trials).collect();
    let max_benign = |pick: &[usize]| {
        per_client
            .iter()
            .map(|s| mean_coord_variance(s, pick))
            .fold(0.0, f64::max)
    };
    let mut boot = rng::stream(seed, Stream::Prop1, u64::MAX, 2);
    let mut batch_malicious = Vec::with_capacity(BOOTSTRAP_BATCHES);
    let mut batch_max_benign = Vec::with_capacity(BOOTSTRAP_BATCHES);
    for _ in 0..BOOTSTRAP_BATCHES {
        let pick: Vec<usize> = (0..trials).map(|_| boot.random_range(0..trials)).collect();
        batch_malicious.push(mean_coord_variance(&mal, &pick));
        batch_max_benign.push(max_benign(&pick));
    }
    let wins = batch_malicious
        .iter()
        .zip(&batch_max_benign)
        .filter(|(m, b)| m > b)
        .count();
    Ok(Prop1Report {
        n,
        c,
        d,
        trials,
        noise_sigma,
        malicious_variance: mean_coord_variance(&mal, &all),
        max_benign_variance: max_benign(&all),
        batch_malicious,
        batch_max_benign,
        fraction_exceeding: wins as f64 / BOOTSTRAP_BATCHES as f64,
    })
}
