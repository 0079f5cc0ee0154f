use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Default distance of each class mean from the origin.
pub const DEFAULT_SEPARATION: f64 = 3.0;

/// Row-major feature matrix plus class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, num_classes: usize) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(Error::invalid("dataset dimension and class count must be positive"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::invalid(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            features,
            labels,
            dim,
            num_classes,
        })
    }

    pub fn empty(dim: usize, num_classes: usize) -> Self {
        Self {
            features: Vec::new(),
            labels: Vec::new(),
            dim,
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn set_label(&mut self, i: usize, label: usize) {
        assert!(label < self.num_classes);
        self.labels[i] = label;
    }

    pub fn push(&mut self, row: &[f64], label: usize) {
        assert_eq!(row.len(), self.dim);
        assert!(label < self.num_classes);
        self.features.extend_from_slice(row);
        self.labels.push(label);
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.dim, self.num_classes);
        for &i in indices {
            out.push(self.row(i), self.label(i));
        }
        out
    }

    /// Per-class example counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Random subset of `size` rows (without replacement, capped at `len`).
    pub fn sample(&self, size: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = rng::stream(seed, Stream::RootData, 0, 0);
        idx.shuffle(&mut rng);
        idx.truncate(size.min(self.len()));
        idx.sort_unstable();
        self.subset(&idx)
    }
}

/// Gaussian class blobs with the default separation.
pub fn generate_synthetic(
    num_classes: usize,
    feature_dim: usize,
    examples_per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    generate_synthetic_with(num_classes, feature_dim, examples_per_class, DEFAULT_SEPARATION, seed)
}

/// Class `k` is drawn from `N(μ_k, I)`. Means are `separation·e_k` when there
/// are at least as many features as classes, otherwise random directions of
/// length `separation`. Means depend only on `(num_classes, feature_dim)` so
/// train and test sets drawn with different seeds share them.
pub fn generate_synthetic_with(
    num_classes: usize,
    feature_dim: usize,
    examples_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || feature_dim == 0 || examples_per_class == 0 {
        return Err(Error::invalid("synthetic task arguments must be positive"));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(Error::invalid("separation must be positive"));
    }
    let means = class_means(num_classes, feature_dim, separation);
    let mut rng = rng::stream(seed, Stream::Data, num_classes as u64, feature_dim as u64);
    let mut out = Dataset::empty(feature_dim, num_classes);
    let mut row = vec![0.0; feature_dim];
    // Interleave classes so prefixes of the dataset stay balanced.
    for _ in 0..examples_per_class {
        for (k, mu) in means.iter().enumerate() {
            for (r, m) in row.iter_mut().zip(mu) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *r = m + z;
            }
            out.push(&row, k);
        }
    }
    Ok(out)
}

fn class_means(num_classes: usize, feature_dim: usize, separation: f64) -> Vec<Vec<f64>> {
    if num_classes <= feature_dim {
        return (0..num_classes)
            .map(|k| {
                let mut m = vec![0.0; feature_dim];
                m[k] = separation;
                m
            })
            .collect();
    }
    let mut rng = rng::stream(0, Stream::Data, u64::MAX, num_classes as u64);
    (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..feature_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x * separation / n).collect()
        })
        .collect()
}

/// Reads comma-separated rows: float features, integer label last, no header.
pub fn load_csv(path: impl AsRef<Path>, num_classes: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, num_classes)
}

pub fn parse_csv(text: &str, num_classes: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if record.len() < 2 {
            return Err(Error::Parse {
                line,
                msg: "expected at least one feature and a label".into(),
            });
        }
        let width = record.len() - 1;
        match dim {
            None => dim = Some(width),
            Some(d) if d != width => {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {d} features, found {width}"),
                })
            }
            _ => {}
        }
        for field in record.iter().take(width) {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("invalid number {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("non-finite value {field:?}"),
                });
            }
            features.push(v);
        }
        let raw = &record[width];
        let label: usize = raw.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("invalid label {raw:?}"),
        })?;
        if label >= num_classes {
            return Err(Error::Parse {
                line,
                msg: format!("label {label} not below {num_classes} classes"),
            });
        }
        labels.push(label);
    }
    let dim = dim.ok_or(Error::NoRows)?;
    Dataset::new(features, labels, dim, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_shape() {
        let d = generate_synthetic(2, 20, 500, 7).unwrap();
        assert_eq!(d.len(), 1000);
        assert_eq!(d.class_counts(), vec![500, 500]);
        let d = generate_synthetic(3, 5, 10, 1).unwrap();
        assert_eq!(d.len(), 30);
        assert_eq!(d.class_counts(), vec![10, 10, 10]);
    }

    #[test]
    fn synthetic_deterministic() {
        let a = generate_synthetic(2, 20, 500, 7).unwrap();
        let b = generate_synthetic(2, 20, 500, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(2, 20, 500, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn csv_roundtrip() {
        let d = parse_csv("1.0,2.0,0\n3.0,4.0,1\n", 2).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels(), &[0, 1]);
        assert_eq!(d.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(parse_csv("", 2), Err(Error::NoRows)));
        match parse_csv("1.0,x,0\n", 2) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        match parse_csv("1.0,2.0,0\n1.0,2.0,5\n", 2) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
