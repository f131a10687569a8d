//! Global average precision at top-k.
//!
//! Each video contributes its k most confident class predictions to one
//! global pool; the pool is sorted by confidence and average precision is
//! computed over it, with recall normalized by the total number of
//! ground-truth positives across all videos (not just the pooled ones).

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Default pool depth used throughout evaluation.
pub const GAP_TOP_K: usize = 20;

/// One pooled prediction: confidence plus whether the class is a true label.
#[derive(Debug, Clone, Copy)]
pub struct ScoredPrediction {
    pub confidence: f64,
    pub is_correct: bool,
    video: usize,
    class: usize,
}

/// Global average precision over per-video top-`k` predictions.
///
/// `predictions` is videos x classes; `labels[v]` lists the true classes of
/// video `v` in strictly increasing order. Ties in confidence are broken by
/// ascending (video, class) so the result is deterministic.
pub fn gap_at_k(predictions: &Matrix, labels: &[Vec<u32>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArg("gap_at_k: k must be at least 1".into()));
    }
    if predictions.rows() != labels.len() {
        return Err(Error::shape(
            "gap_at_k",
            format!(
                "{} prediction rows vs {} label sets",
                predictions.rows(),
                labels.len()
            ),
        ));
    }
    let classes = predictions.cols();
    let total_positives: usize = labels.iter().map(|l| l.len()).sum();
    if total_positives == 0 {
        return Err(Error::InvalidArg(
            "gap_at_k: no ground-truth positives in the dataset".into(),
        ));
    }

    let mut pool: Vec<ScoredPrediction> = Vec::with_capacity(predictions.rows() * k.min(classes));
    for (v, video_labels) in labels.iter().enumerate() {
        if let Some(&max) = video_labels.last() {
            if max as usize >= classes {
                return Err(Error::InvalidArg(format!(
                    "gap_at_k: label {max} out of range for {classes} classes"
                )));
            }
        }
        let row = predictions.row(v);
        let mut order: Vec<usize> = (0..classes).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &class in order.iter().take(k) {
            pool.push(ScoredPrediction {
                confidence: row[class],
                is_correct: video_labels.binary_search(&(class as u32)).is_ok(),
                video: v,
                class,
            });
        }
    }

    pool.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.video.cmp(&b.video))
            .then(a.class.cmp(&b.class))
    });

    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, p) in pool.iter().enumerate() {
        if p.is_correct {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / total_positives as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking_is_one() {
        let preds = Matrix::row_vector(&[0.9, 0.1, 0.2]);
        let labels = vec![vec![0u32]];
        assert_eq!(gap_at_k(&preds, &labels, 20).unwrap(), 1.0);
    }

    #[test]
    fn positive_ranked_second_is_half() {
        // Negative at 0.9, positive at 0.8: precision at the hit is 1/2.
        let preds = Matrix::row_vector(&[0.9, 0.8]);
        let labels = vec![vec![1u32]];
        assert_eq!(gap_at_k(&preds, &labels, 20).unwrap(), 0.5);
    }

    #[test]
    fn rejects_zero_positives() {
        let preds = Matrix::row_vector(&[0.5, 0.5]);
        assert!(gap_at_k(&preds, &[vec![]], 20).is_err());
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let preds = Matrix::row_vector(&[0.5, 0.5]);
        assert!(gap_at_k(&preds, &[vec![2u32]], 20).is_err());
    }

    #[test]
    fn recall_denominator_counts_positives_outside_pool() {
        // Two classes positive but k=1 pools only the top prediction, so the
        // best achievable value is 1/2.
        let preds = Matrix::row_vector(&[0.9, 0.8]);
        let labels = vec![vec![0u32, 1u32]];
        assert_eq!(gap_at_k(&preds, &labels, 1).unwrap(), 0.5);
    }

    #[test]
    fn better_ranked_correct_prediction_never_hurts() {
        let labels = vec![vec![1u32], vec![0u32]];
        let worse = Matrix::from_rows(&[&[0.9, 0.3], &[0.8, 0.1]]).unwrap();
        let better = Matrix::from_rows(&[&[0.3, 0.9], &[0.8, 0.1]]).unwrap();
        let g_worse = gap_at_k(&worse, &labels, 20).unwrap();
        let g_better = gap_at_k(&better, &labels, 20).unwrap();
        assert!(g_better >= g_worse);
    }

    #[test]
    fn ties_are_deterministic() {
        let preds = Matrix::from_rows(&[&[0.5, 0.5], &[0.5, 0.5]]).unwrap();
        let labels = vec![vec![0u32], vec![1u32]];
        let a = gap_at_k(&preds, &labels, 20).unwrap();
        let b = gap_at_k(&preds, &labels, 20).unwrap();
        assert_eq!(a, b);
        // Tie order is (video, class) ascending: pool is
        // (v0,c0 hit) (v0,c1) (v1,c0) (v1,c1 hit) -> AP = (1/1 + 2/4) / 2.
        assert_eq!(a, 0.75);
    }
}
