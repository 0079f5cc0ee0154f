use serde::{Deserialize, Serialize};

use super::runner::RoundRecord;
use crate::attacks;

/// Run-level metrics derived from the round records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds: usize,
    pub num_clients: usize,
    pub num_malicious: usize,
    pub final_accuracy: f64,
    pub max_accuracy: f64,
    /// Accuracy of the matching no-attack run, when one was made.
    pub reference_accuracy: Option<f64>,
    pub accuracy_drop: Option<f64>,
    /// `None` when nothing was flagged.
    pub precision: Option<f64>,
    /// `None` when there are no malicious clients.
    pub recall: Option<f64>,
    pub flagged: Vec<usize>,
    pub benign_flagged: usize,
    pub detection_rounds: usize,
    /// Detection rounds elapsed when the last malicious client was flagged.
    pub rounds_to_full_detection: Option<usize>,
    /// Share of probed `(client, detection round)` pairs where `α > 0`
    /// coincides with the client being malicious.
    pub detection_accuracy: Option<f64>,
    /// Adaptive attacker's probe-spotting success rate `A_S`.
    pub judgment_success: Option<f64>,
    pub concealment: Option<f64>,
    pub attack_success_rate: Option<f64>,
    pub attack_skipped_rounds: usize,
    pub aborted: Option<String>,
}

impl Summary {
    /// Fills in the reference accuracy and the drop relative to it.
    pub fn with_reference(mut self, reference: f64) -> Self {
        self.reference_accuracy = Some(reference);
        self.accuracy_drop = Some(reference - self.final_accuracy);
        self
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Aggregates round records into a [`Summary`]. Empty input gives the
/// all-default summary.
pub fn metrics_summary(
    records: &[RoundRecord],
    malicious: &[usize],
    num_clients: usize,
    reference_accuracy: Option<f64>,
) -> Summary {
    let is_mal = |j: usize| malicious.binary_search(&j).is_ok();
    let mut s = Summary {
        rounds: records.len(),
        num_clients,
        num_malicious: malicious.len(),
        ..Default::default()
    };
    let Some(last) = records.last() else {
        return s;
    };
    s.final_accuracy = last.accuracy;
    s.max_accuracy = records.iter().map(|r| r.accuracy).fold(0.0, f64::max);
    s.attack_success_rate = last.attack_success_rate;
    s.attack_skipped_rounds = records.iter().filter(|r| r.attack_skipped).count();

    let mut flagged: Vec<usize> = Vec::new();
    for r in records {
        for c in &r.clients {
            if c.flagged && !flagged.contains(&c.client) {
                flagged.push(c.client);
            }
        }
    }
    flagged.sort_unstable();
    let true_pos = flagged.iter().filter(|&&j| is_mal(j)).count();
    s.benign_flagged = flagged.len() - true_pos;
    s.precision = ratio(true_pos, flagged.len());
    s.recall = ratio(true_pos, malicious.len());
    s.flagged = flagged;

    let mut seen_flagged: Vec<usize> = Vec::new();
    let (mut correct, mut total) = (0usize, 0usize);
    for r in records.iter().filter(|r| r.detection) {
        s.detection_rounds += 1;
        for c in &r.clients {
            if let Some(a) = c.alpha {
                total += 1;
                if (a > 0.0) == is_mal(c.client) {
                    correct += 1;
                }
            }
            if c.flagged && is_mal(c.client) && !seen_flagged.contains(&c.client) {
                seen_flagged.push(c.client);
            }
        }
        if s.rounds_to_full_detection.is_none() && !malicious.is_empty() && seen_flagged.len() == malicious.len() {
            s.rounds_to_full_detection = Some(s.detection_rounds);
        }
    }
    s.detection_accuracy = ratio(correct, total);

    let (mut right, mut judged) = (0usize, 0usize);
    for r in records {
        for j in &r.judged {
            judged += 1;
            let poisoned = r.poisoned.contains(j);
            if r.detection != poisoned {
                right += 1;
            }
        }
    }
    s.judgment_success = ratio(right, judged);
    s.concealment = s.judgment_success.map(attacks::concealment);

    if let Some(reference) = reference_accuracy {
        s = s.with_reference(reference);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::runner::ClientStat;

    fn record(round: usize, detection: bool, flagged: &[usize], n: usize) -> RoundRecord {
        RoundRecord {
            round,
            accuracy: 0.5 + round as f64 * 0.1,
            agg_norm: 1.0,
            clients: (0..n)
                .map(|j| ClientStat {
                    client: j,
                    alpha: detection.then_some(if flagged.contains(&j) { 1.0 } else { -0.5 }),
                    s_c: None,
                    trust: None,
                    weight: None,
                    flagged: flagged.contains(&j),
                })
                .collect(),
            attack_active: true,
            detection,
            poisoned: Vec::new(),
            judged: Vec::new(),
            attack_skipped: false,
            attack_success_rate: None,
        }
    }

    #[test]
    fn perfect_detection() {
        let recs = vec![record(0, false, &[], 5), record(1, true, &[0, 1], 5), record(2, false, &[0, 1], 5)];
        let s = metrics_summary(&recs, &[0, 1], 5, Some(0.9));
        assert_eq!(s.precision, Some(1.0));
        assert_eq!(s.recall, Some(1.0));
        assert_eq!(s.rounds_to_full_detection, Some(1));
        assert_eq!(s.detection_accuracy, Some(1.0));
        assert_eq!(s.final_accuracy, 0.7);
        assert!((s.accuracy_drop.unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(s.concealment, None);
    }

    #[test]
    fn nothing_flagged_means_zero_recall() {
        let recs = vec![record(0, false, &[], 4)];
        let s = metrics_summary(&recs, &[0], 4, None);
        assert_eq!(s.recall, Some(0.0));
        assert_eq!(s.precision, None);
        assert_eq!(s.rounds_to_full_detection, None);
    }

    #[test]
    fn blind_guess_is_fully_concealed() {
        let mut a = record(1, true, &[], 3);
        a.judged = vec![0];
        a.poisoned = vec![];
        let mut b = record(2, true, &[], 3);
        b.judged = vec![0];
        b.poisoned = vec![0];
        let s = metrics_summary(&[a, b], &[0], 3, None);
        assert_eq!(s.judgment_success, Some(0.5));
        assert_eq!(s.concealment, Some(1.0));
    }
}
