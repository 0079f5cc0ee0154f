use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Label-skew split: each example of class `i` lands in group `i` with
/// probability `noniid_q`, otherwise in a uniformly random other group.
/// `noniid_q = 1/M` is IID.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub noniid_q: f64,
    #[serde(default)]
    pub seed: u64,
    /// Relative dataset size per client; `None` means equal shares.
    #[serde(default)]
    pub size_multipliers: Option<Vec<f64>>,
}

impl PartitionSpec {
    pub fn iid(num_clients: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            num_clients,
            noniid_q: 1.0 / num_classes as f64,
            seed,
            size_multipliers: None,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::invalid("partition needs at least one client"));
        }
        if self.num_clients < num_classes {
            return Err(Error::invalid(format!(
                "{} clients cannot cover {num_classes} groups",
                self.num_clients
            )));
        }
        let lo = 1.0 / num_classes as f64;
        if !(self.noniid_q >= lo - 1e-12 && self.noniid_q <= 1.0) {
            return Err(Error::invalid(format!(
                "noniid_q {} outside [{lo}, 1]",
                self.noniid_q
            )));
        }
        if let Some(m) = &self.size_multipliers {
            if m.len() != self.num_clients {
                return Err(Error::invalid(format!(
                    "{} size multipliers for {} clients",
                    m.len(),
                    self.num_clients
                )));
            }
            if m.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::invalid("size multipliers must be positive"));
            }
        }
        Ok(())
    }
}

/// Splits `data` across clients. Client `j` belongs to group `j mod M`;
/// within a group, examples are dealt round-robin (weighted by the size
/// multipliers when given). Each client keeps its examples in input order.
pub fn partition(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    if data.is_empty() {
        return Err(Error::Empty("dataset to partition"));
    }
    let m = data.num_classes();
    spec.validate(m)?;
    let groups: Vec<Vec<usize>> = (0..m)
        .map(|g| (g..spec.num_clients).step_by(m).collect())
        .collect();
    let weights: Vec<Vec<f64>> = groups
        .iter()
        .map(|members| {
            members
                .iter()
                .map(|&c| spec.size_multipliers.as_ref().map_or(1.0, |w| w[c]))
                .collect()
        })
        .collect();
    let mut dealers: Vec<Dealer> = weights.iter().map(|w| Dealer::new(w.clone())).collect();

    let mut rng = rng::stream(spec.seed, Stream::Partition, spec.num_clients as u64, m as u64);
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); spec.num_clients];
    for i in 0..data.len() {
        let label = data.label(i);
        let group = if m == 1 || rng.random::<f64>() < spec.noniid_q {
            label
        } else {
            let other = rng.random_range(0..m - 1);
            if other >= label {
                other + 1
            } else {
                other
            }
        };
        let slot = dealers[group].next();
        assigned[groups[group][slot]].push(i);
    }
    Ok(assigned.iter().map(|idx| data.subset(idx)).collect())
}

/// Smooth weighted round-robin: with equal weights this is plain rotation.
struct Dealer {
    weights: Vec<f64>,
    current: Vec<f64>,
    total: f64,
}

impl Dealer {
    fn new(weights: Vec<f64>) -> Self {
        let total = weights.iter().sum();
        let current = vec![0.0; weights.len()];
        Self {
            weights,
            current,
            total,
        }
    }

    fn next(&mut self) -> usize {
        for (c, w) in self.current.iter_mut().zip(&self.weights) {
            *c += w;
        }
        let mut best = 0;
        for i in 1..self.current.len() {
            if self.current[i] > self.current[best] {
                best = i;
            }
        }
        self.current[best] -= self.total;
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::data::generate_synthetic;
    use proptest::prelude::*;

    #[test]
    fn q_one_is_fully_skewed() {
        let data = generate_synthetic(2, 3, 50, 0).unwrap();
        let spec = PartitionSpec {
            num_clients: 2,
            noniid_q: 1.0,
            seed: 0,
            size_multipliers: None,
        };
        let parts = partition(&data, &spec).unwrap();
        assert_eq!(parts[0].class_counts(), vec![50, 0]);
        assert_eq!(parts[1].class_counts(), vec![0, 50]);
    }

    #[test]
    fn iid_is_uniform() {
        let data = generate_synthetic(2, 2, 5000, 3).unwrap();
        let parts = partition(&data, &PartitionSpec::iid(10, 2, 9)).unwrap();
        for p in &parts {
            let c = p.class_counts();
            let frac = c[0] as f64 / p.len() as f64;
            assert!((frac - 0.5).abs() <= 0.05, "{frac}");
        }
    }

    #[test]
    fn q_point_eight_binomial() {
        let data = generate_synthetic(2, 2, 5000, 5).unwrap();
        let spec = PartitionSpec {
            num_clients: 2,
            noniid_q: 0.8,
            seed: 2,
            size_multipliers: None,
        };
        let parts = partition(&data, &spec).unwrap();
        let frac = parts[0].class_counts()[0] as f64 / 5000.0;
        assert!((frac - 0.8).abs() <= 0.03, "{frac}");
    }

    #[test]
    fn multipliers_scale_shares() {
        let data = generate_synthetic(2, 2, 600, 5).unwrap();
        let spec = PartitionSpec {
            num_clients: 4,
            noniid_q: 0.5,
            seed: 2,
            size_multipliers: Some(vec![1.0, 1.0, 3.0, 3.0]),
        };
        let parts = partition(&data, &spec).unwrap();
        let ratio = parts[2].len() as f64 / parts[0].len() as f64;
        assert!((ratio - 3.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn rejects_bad_specs() {
        let data = generate_synthetic(3, 2, 5, 0).unwrap();
        let mut spec = PartitionSpec::iid(2, 3, 0);
        assert!(partition(&data, &spec).is_err());
        spec.num_clients = 3;
        spec.noniid_q = 0.1;
        assert!(partition(&data, &spec).is_err());
        assert!(partition(&Dataset::empty(2, 3), &PartitionSpec::iid(3, 3, 0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn exhaustive_and_disjoint(seed in any::<u64>(), clients in 3usize..12, q in 0.34f64..1.0) {
            let data = generate_synthetic(3, 2, 20, seed).unwrap();
            let spec = PartitionSpec { num_clients: clients, noniid_q: q, seed, size_multipliers: None };
            let parts = partition(&data, &spec).unwrap();
            let mut rows: Vec<(Vec<u64>, usize)> = parts
                .iter()
                .flat_map(|p| (0..p.len()).map(move |i| (p.row(i).iter().map(|v| v.to_bits()).collect(), p.label(i))))
                .collect();
            let mut orig: Vec<(Vec<u64>, usize)> = (0..data.len())
                .map(|i| (data.row(i).iter().map(|v| v.to_bits()).collect(), data.label(i)))
                .collect();
            rows.sort();
            orig.sort();
            prop_assert_eq!(rows, orig);
        }
    }
}
