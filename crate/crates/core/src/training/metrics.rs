use crate::error::{Error, Result};

/// Fraction of predictions equal to the truth.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty split".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::shape("accuracy", &[pred.len()], &[truth.len()]));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentationMetrics {
    /// Fraction of all points labelled correctly.
    pub point_accuracy: f64,
    /// Per-class recall averaged over the classes present in the truth.
    pub mean_class_accuracy: f64,
    /// Per-cloud mean IoU (over classes in truth or prediction), averaged
    /// over clouds.
    pub instance_miou: f64,
}

pub fn segmentation_metrics(pred: &[Vec<usize>], truth: &[Vec<usize>], classes: usize) -> Result<SegmentationMetrics> {
    if pred.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty split".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::shape("segmentation_metrics", &[pred.len()], &[truth.len()]));
    }
    let mut correct = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    let (mut hits, mut points) = (0usize, 0usize);
    let mut miou_sum = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::shape("segmentation_metrics", &[p.len()], &[t.len()]));
        }
        let mut tp = vec![0usize; classes];
        let mut fp = vec![0usize; classes];
        let mut fneg = vec![0usize; classes];
        for (&pi, &ti) in p.iter().zip(t) {
            if pi >= classes || ti >= classes {
                return Err(Error::Index {
                    what: "segmentation label",
                    index: pi.max(ti),
                    bound: classes,
                });
            }
            total[ti] += 1;
            if pi == ti {
                correct[ti] += 1;
                tp[ti] += 1;
                hits += 1;
            } else {
                fp[pi] += 1;
                fneg[ti] += 1;
            }
        }
        points += t.len();
        let ious: Vec<f64> = (0..classes)
            .filter(|&c| tp[c] + fp[c] + fneg[c] > 0)
            .map(|c| tp[c] as f64 / (tp[c] + fp[c] + fneg[c]) as f64)
            .collect();
        if !ious.is_empty() {
            miou_sum += ious.iter().sum::<f64>() / ious.len() as f64;
        }
    }
    if points == 0 {
        return Err(Error::Argument("cannot evaluate clouds without points".into()));
    }
    let present: Vec<f64> = (0..classes)
        .filter(|&c| total[c] > 0)
        .map(|c| correct[c] as f64 / total[c] as f64)
        .collect();
    Ok(SegmentationMetrics {
        point_accuracy: hits as f64 / points as f64,
        mean_class_accuracy: present.iter().sum::<f64>() / present.len() as f64,
        instance_miou: miou_sum / pred.len() as f64,
    })
}
