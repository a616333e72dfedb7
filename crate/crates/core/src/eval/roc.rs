use serde::{Deserialize, Serialize};

use super::{ExamBlock, ScoredCandidate};
use crate::error::{Error, Result};

/// Mann–Whitney AUC, `P(pos > neg) + P(pos = neg) / 2`, from exact integer
/// pair counts so it agrees bitwise with pairwise enumeration.
pub fn auc_from_scores(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InsufficientData(format!(
            "AUC needs both classes ({} positives, {} negatives)",
            pos.len(),
            neg.len()
        )));
    }
    if pos.iter().chain(neg).any(|s| s.is_nan()) {
        return Err(Error::format("scores", "NaN score"));
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("no NaN"));
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                p += 1
            } else {
                n += 1
            }
            j += 1;
        }
        twice_u += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok(twice_u as f64 / (2 * pos.len() as u128 * neg.len() as u128) as f64)
}

fn split_scores<'a>(it: impl Iterator<Item = (f64, bool)> + 'a) -> (Vec<f64>, Vec<f64>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (s, p) in it {
        if p {
            pos.push(s)
        } else {
            neg.push(s)
        }
    }
    (pos, neg)
}

/// Candidate-level AUC.
pub fn roc_auc(cands: &[ScoredCandidate]) -> Result<f64> {
    let (pos, neg) = split_scores(cands.iter().map(|c| (c.score, c.positive)));
    auc_from_scores(&pos, &neg)
}

pub fn auc_blocks(blocks: &[&ExamBlock]) -> Result<f64> {
    let (pos, neg) = split_scores(
        blocks
            .iter()
            .flat_map(|b| b.candidates.iter().map(|c| (c.score, c.positive))),
    );
    auc_from_scores(&pos, &neg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC points for "score ≥ threshold" over distinct thresholds, descending,
/// preceded by the empty operating point at +∞.
pub fn roc_curve(pos: &[f64], neg: &[f64]) -> Result<Vec<RocPoint>> {
    auc_from_scores(pos, neg)?;
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("no NaN"));
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut out = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1
            } else {
                fp += 1
            }
            i += 1;
        }
        out.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / nn,
            tpr: tp as f64 / np,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(pos: &[f64], neg: &[f64]) -> f64 {
        let mut twice = 0u64;
        for &p in pos {
            for &n in neg {
                if p > n {
                    twice += 2
                } else if p == n {
                    twice += 1
                }
            }
        }
        twice as f64 / (2 * pos.len() * neg.len()) as f64
    }

    #[test]
    fn separated_and_tied_extremes() {
        assert_eq!(auc_from_scores(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc_from_scores(&[0.4; 5], &[0.4; 7]).unwrap(), 0.5);
        assert_eq!(auc_from_scores(&[0.0], &[1.0]).unwrap(), 0.0);
        assert!(auc_from_scores(&[1.0], &[]).is_err());
        assert_eq!(auc_from_scores(&[0.0], &[-0.0]).unwrap(), 0.5);
    }

    #[test]
    fn roc_curve_ends_at_one_one() {
        let c = roc_curve(&[0.9, 0.5], &[0.5, 0.1, 0.0]).unwrap();
        assert_eq!(c.first().unwrap().tpr, 0.0);
        assert_eq!((c.last().unwrap().fpr, c.last().unwrap().tpr), (1.0, 1.0));
        assert_eq!(c[1], RocPoint { threshold: 0.9, fpr: 0.0, tpr: 0.5 });
        assert_eq!(c[2], RocPoint { threshold: 0.5, fpr: 1.0 / 3.0, tpr: 1.0 });
    }

    proptest! {
        #[test]
        fn matches_pairwise_oracle(
            pos in prop::collection::vec(0u8..12, 1..100),
            neg in prop::collection::vec(0u8..12, 1..100),
        ) {
            // Small integer grid forces heavy ties.
            let pos: Vec<f64> = pos.into_iter().map(|v| v as f64 / 4.0).collect();
            let neg: Vec<f64> = neg.into_iter().map(|v| v as f64 / 4.0).collect();
            prop_assert_eq!(auc_from_scores(&pos, &neg).unwrap(), brute(&pos, &neg));
        }

        #[test]
        fn invariant_under_increasing_transform(
            pos in prop::collection::vec(-5.0f64..5.0, 1..50),
            neg in prop::collection::vec(-5.0f64..5.0, 1..50),
        ) {
            let f = |v: &f64| (v * 0.7).exp() + 3.0;
            let a = auc_from_scores(&pos, &neg).unwrap();
            let b = auc_from_scores(&pos.iter().map(f).collect::<Vec<_>>(), &neg.iter().map(f).collect::<Vec<_>>()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
