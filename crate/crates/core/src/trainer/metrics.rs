//! Evaluation metrics and the topological-diameter grouping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;

pub fn mean_absolute_error(pred: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(pred.len(), labels.len());
    pred.iter()
        .zip(labels)
        .map(|(p, l)| (p - l).abs())
        .sum::<f64>()
        / pred.len() as f64
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Labels are positive when `> 0.5`.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<f64, TrainError> {
    assert_eq!(scores.len(), labels.len());
    let mut pairs: Vec<(f64, bool)> = scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| (s, l > 0.5))
        .collect();
    let pos = pairs.iter().filter(|p| p.1).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(TrainError::UndefinedMetric(
            "ROC-AUC needs both classes".into(),
        ));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // rank-sum with mid-ranks for ties
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * pairs[i..j].iter().filter(|p| p.1).count() as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Molecule groups by bond-graph diameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopoBin {
    /// Diameter 0 to 7 (single atoms join this group).
    Short,
    /// Diameter 8 to 11.
    Medium,
    /// Diameter 12 and above.
    Long,
}

pub fn topo_bin(max_topo_dist: u32) -> TopoBin {
    match max_topo_dist {
        0..=7 => TopoBin::Short,
        8..=11 => TopoBin::Medium,
        _ => TopoBin::Long,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub count: usize,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupedReport {
    pub count: usize,
    pub mae: f64,
    /// Only non-empty groups appear.
    pub bins: BTreeMap<TopoBin, BinReport>,
}

/// Overall and per-diameter-group MAE.
pub fn grouped_mae(pred: &[f64], labels: &[f64], diameters: &[u32]) -> GroupedReport {
    assert!(pred.len() == labels.len() && pred.len() == diameters.len());
    let mut groups: BTreeMap<TopoBin, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((&p, &l), &d) in pred.iter().zip(labels).zip(diameters) {
        let e = groups.entry(topo_bin(d)).or_default();
        e.0.push(p);
        e.1.push(l);
    }
    GroupedReport {
        count: pred.len(),
        mae: mean_absolute_error(pred, labels),
        bins: groups
            .into_iter()
            .map(|(b, (p, l))| {
                (
                    b,
                    BinReport {
                        count: p.len(),
                        mae: mean_absolute_error(&p, &l),
                    },
                )
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn auc_cases() {
        assert_eq!(
            roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(),
            1.0
        );
        assert_eq!(
            roc_auc(&[0.9, 0.8, 0.2, 0.1], &[0.0, 0.0, 1.0, 1.0]).unwrap(),
            0.0
        );
        assert_eq!(
            roc_auc(&[0.5; 6], &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap(),
            0.5
        );
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1.0, 1.0]),
            Err(TrainError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..60)
            .map(|_| (rng.gen_range(0..10) as f64) / 10.0)
            .collect();
        let labels: Vec<f64> = (0..60)
            .map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
            .collect();
        let mut wins = 0.0;
        let mut total = 0.0;
        for i in 0..60 {
            for j in 0..60 {
                if labels[i] == 1.0 && labels[j] == 0.0 {
                    total += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        assert!((roc_auc(&scores, &labels).unwrap() - wins / total).abs() < 1e-12);
    }

    #[test]
    fn shuffled_labels_give_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 20_000;
        let mut labels: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let scores = labels.clone();
        labels.shuffle(&mut rng);
        assert!((roc_auc(&scores, &labels).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn bin_boundaries() {
        assert_eq!(topo_bin(0), TopoBin::Short);
        assert_eq!(topo_bin(1), TopoBin::Short);
        assert_eq!(topo_bin(7), TopoBin::Short);
        assert_eq!(topo_bin(8), TopoBin::Medium);
        assert_eq!(topo_bin(11), TopoBin::Medium);
        assert_eq!(topo_bin(12), TopoBin::Long);
    }

    #[test]
    fn single_bin_matches_overall_and_absent_bins_are_omitted() {
        let r = grouped_mae(&[1.0, 2.0], &[1.5, 1.0], &[3, 5]);
        assert_eq!(r.bins.len(), 1);
        assert_eq!(r.bins[&TopoBin::Short].mae, r.mae);
        assert_eq!(r.mae, 0.75);
    }
}
