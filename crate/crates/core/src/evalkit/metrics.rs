//! ACC and AP in percent.

use crate::error::{ensure, Result};

fn check(scores: &[f64], labels: &[f32]) -> Result<()> {
    ensure!(!scores.is_empty(), "no scores");
    ensure!(
        scores.len() == labels.len(),
        "{} scores vs {} labels",
        scores.len(),
        labels.len()
    );
    Ok(())
}

/// Percent of items where `score >= threshold` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[f32], threshold: f64) -> Result<f64> {
    check(scores, labels)?;
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| (s >= threshold) == (y >= 0.5))
        .count();
    Ok(100.0 * hits as f64 / scores.len() as f64)
}

/// Average precision in percent: items ranked by descending score with a
/// stable sort (ties keep input order), then the mean of precision@k over
/// the ranks k of the positives.
pub fn average_precision(scores: &[f64], labels: &[f32]) -> Result<f64> {
    check(scores, labels)?;
    let positives = labels.iter().filter(|&&y| y >= 0.5).count();
    ensure!(positives > 0, "average precision needs at least one positive");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] >= 0.5 {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(100.0 * sum / positives as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[0.9, 0.1], &[1.0, 0.0], 0.5).unwrap(), 100.0);
        assert_eq!(accuracy(&[0.5, 0.5], &[1.0, 0.0], 0.5).unwrap(), 50.0);
        assert!(accuracy(&[], &[], 0.5).is_err());
        assert!(accuracy(&[0.1], &[1.0, 0.0], 0.5).is_err());
    }

    #[test]
    fn accuracy_matches_counting_oracle() {
        use rand::Rng;
        let mut rng = crate::seed::rng(11, &[]);
        for _ in 0..50 {
            let s: Vec<f64> = (0..8).map(|_| rng.random()).collect();
            let y: Vec<f32> = (0..8).map(|_| rng.random_range(0..2) as f32).collect();
            let mut correct = 0;
            for i in 0..8 {
                let pred = if s[i] >= 0.5 { 1.0 } else { 0.0 };
                if pred == y[i] {
                    correct += 1;
                }
            }
            assert_eq!(accuracy(&s, &y, 0.5).unwrap(), correct as f64 * 12.5);
        }
    }

    #[test]
    fn ap_cases() {
        assert_eq!(
            average_precision(&[0.9, 0.8, 0.2, 0.1], &[1.0, 1.0, 0.0, 0.0]).unwrap(),
            100.0
        );
        assert_eq!(
            average_precision(&[0.9, 0.8, 0.7, 0.1], &[0.0, 0.0, 0.0, 1.0]).unwrap(),
            25.0
        );
        assert_eq!(average_precision(&[0.3, 0.1, 0.2], &[1.0, 1.0, 1.0]).unwrap(), 100.0);
        assert!(average_precision(&[0.3, 0.1], &[0.0, 0.0]).is_err());
        // Ties are ranked in input order: the negative listed first wins.
        assert_eq!(average_precision(&[0.5, 0.5], &[0.0, 1.0]).unwrap(), 50.0);
        assert_eq!(average_precision(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 100.0);
    }

    /// AP from the precision-recall points obtained by sweeping every
    /// distinct threshold; tied groups are then split in input order so the
    /// result matches the stable-sort convention.
    fn threshold_oracle(scores: &[f64], labels: &[f32]) -> f64 {
        let n = scores.len();
        let positives = labels.iter().filter(|&&y| y == 1.0).count() as f64;
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut ap = 0.0;
        let mut prev_tp = 0.0;
        let mut prev_count = 0.0;
        for th in thresholds {
            let above: Vec<usize> = (0..n).filter(|&i| scores[i] > th).collect();
            let tied: Vec<usize> = (0..n).filter(|&i| scores[i] == th).collect();
            let mut tp = above.iter().filter(|&&i| labels[i] == 1.0).count() as f64;
            let mut count = above.len() as f64;
            assert_eq!((tp, count), (prev_tp, prev_count));
            for &i in &tied {
                count += 1.0;
                if labels[i] == 1.0 {
                    tp += 1.0;
                    ap += (1.0 / positives) * (tp / count);
                }
            }
            prev_tp = tp;
            prev_count = count;
        }
        100.0 * ap
    }

    #[test]
    fn ap_matches_exhaustive_oracle() {
        let score_sets: [[f64; 8]; 3] = [
            [0.91, 0.13, 0.55, 0.72, 0.05, 0.38, 0.64, 0.27],
            [0.5, 0.5, 0.2, 0.9, 0.2, 0.5, 0.7, 0.1],
            [0.3; 8],
        ];
        for scores in score_sets {
            for mask in 1u32..256 {
                let labels: Vec<f32> = (0..8).map(|i| ((mask >> i) & 1) as f32).collect();
                let got = average_precision(&scores, &labels).unwrap();
                let want = threshold_oracle(&scores, &labels);
                assert!((got - want).abs() < 1e-12, "mask {mask:08b}: {got} vs {want}");
            }
        }
    }

    proptest! {
        #[test]
        fn ap_invariant_under_monotone_transform(
            pairs in proptest::collection::vec((0.0f64..1.0, 0u8..2), 1..40)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let mut labels: Vec<f32> = pairs.iter().map(|p| p.1 as f32).collect();
            labels[0] = 1.0;
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(
                average_precision(&scores, &labels).unwrap(),
                average_precision(&warped, &labels).unwrap()
            );
            let ap = average_precision(&scores, &labels).unwrap();
            let acc = accuracy(&scores, &labels, 0.5).unwrap();
            prop_assert!((0.0..=100.0).contains(&ap) && (0.0..=100.0).contains(&acc));
        }
    }
}
