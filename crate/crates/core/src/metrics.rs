//! Overlap metrics for binary masks.
//!
//! `dice = 2TP / (2TP + FN + FP)` and `iou = TP / (TP + FP + FN)`. When both
//! masks are empty the denominator vanishes and both scores are defined as 1.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&self, other: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

/// Per-image confusion counts of `prob >= threshold` against a binary truth.
///
/// Both tensors are `(N, 1, H, W)`, or `(1, H, W)` for a single image.
pub fn confusion_from_masks<T: Scalar>(pred_prob: &Tensor<T>, truth: &Tensor<T>, threshold: f64) -> Result<Vec<ConfusionCounts>> {
    if pred_prob.shape() != truth.shape() {
        return Err(Error::shape(
            "confusion_from_masks",
            format!("prediction {} vs truth {}", pred_prob.shape(), truth.shape()),
        ));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1)")));
    }
    let images = match *truth.dims() {
        [n, 1, _, _] => n,
        [1, _, _] => 1,
        _ => {
            return Err(Error::shape(
                "confusion_from_masks",
                format!("expected single-channel masks, got {}", truth.shape()),
            ))
        }
    };
    let (zero, one) = (T::zero(), T::one());
    if truth.data().iter().any(|&t| t != zero && t != one) {
        return Err(Error::InvalidArgument("truth mask is not binary".into()));
    }
    let threshold = T::from_f64_lossy(threshold);
    let per_image = truth.numel() / images;
    let counts = pred_prob
        .data()
        .chunks_exact(per_image)
        .zip(truth.data().chunks_exact(per_image))
        .map(|(p, t)| {
            let mut c = ConfusionCounts::default();
            for (&p, &t) in p.iter().zip(t) {
                match (p >= threshold, t == one) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    (false, false) => c.tn += 1,
                }
            }
            c
        })
        .collect();
    Ok(counts)
}

pub fn dice(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fn_ + c.fp;
    if denom == 0 {
        return 1.0;
    }
    (2 * c.tp) as f64 / denom as f64
}

pub fn iou(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        return 1.0;
    }
    c.tp as f64 / denom as f64
}

pub fn pixel_accuracy(c: &ConfusionCounts) -> Result<f64> {
    match c.total() {
        0 => Err(Error::InvalidArgument("pixel accuracy of an empty confusion".into())),
        total => Ok((c.tp + c.tn) as f64 / total as f64),
    }
}

pub fn aggregate_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("mean of an empty list".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub counts: ConfusionCounts,
    pub dice: f64,
    pub iou: f64,
    pub accuracy: f64,
}

/// Per-image scores plus their means. `mdice`/`miou` are per-image means;
/// `global_*` are computed from the pooled confusion.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mdice: f64,
    pub miou: f64,
    pub accuracy: f64,
    pub global_dice: f64,
    pub global_iou: f64,
    pub per_image: Vec<ImageScore>,
}

impl MetricsReport {
    pub fn from_counts(items: Vec<(String, ConfusionCounts)>) -> Result<Self> {
        let per_image = items
            .into_iter()
            .map(|(id, counts)| {
                Ok(ImageScore {
                    id,
                    dice: dice(&counts),
                    iou: iou(&counts),
                    accuracy: pixel_accuracy(&counts)?,
                    counts,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let col = |f: fn(&ImageScore) -> f64| per_image.iter().map(f).collect::<Vec<_>>();
        let pooled = per_image
            .iter()
            .fold(ConfusionCounts::default(), |acc, s| acc.merge(&s.counts));
        Ok(MetricsReport {
            mdice: aggregate_mean(&col(|s| s.dice))?,
            miou: aggregate_mean(&col(|s| s.iou))?,
            accuracy: aggregate_mean(&col(|s| s.accuracy))?,
            global_dice: dice(&pooled),
            global_iou: iou(&pooled),
            per_image,
        })
    }

    pub fn n_images(&self) -> usize {
        self.per_image.len()
    }

    /// `mdice=<f> miou=<f> accuracy=<f> n_images=<n>`
    pub fn kv_line(&self) -> String {
        format!(
            "mdice={:.6} miou={:.6} accuracy={:.6} n_images={}",
            self.mdice,
            self.miou,
            self.accuracy,
            self.n_images()
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>8} {:>8} {:>9}", "image", "dice", "iou", "accuracy")?;
        for s in &self.per_image {
            writeln!(f, "{:<24} {:>8.4} {:>8.4} {:>9.4}", s.id, s.dice, s.iou, s.accuracy)?;
        }
        writeln!(
            f,
            "mean over {} images: mDice {:.4}  mIoU {:.4}  accuracy {:.4}",
            self.n_images(),
            self.mdice,
            self.miou,
            self.accuracy
        )?;
        writeln!(f, "pooled: dice {:.4}  iou {:.4}", self.global_dice, self.global_iou)?;
        write!(f, "{}", self.kv_line())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    fn mask(data: &[f64]) -> Tensor<f64> {
        Tensor::from_slice(&[1, 1, 1, data.len()], data).unwrap()
    }

    #[test]
    fn hand_enumerated_confusion() {
        let c = confusion_from_masks(&mask(&[1.0, 1.0, 0.0, 0.0]), &mask(&[1.0, 0.0, 1.0, 0.0]), 0.5).unwrap();
        assert_eq!(c, vec![counts(1, 1, 1, 1)]);
    }

    #[test]
    fn perfect_and_inverted_predictions() {
        let truth = mask(&[1.0, 0.0, 0.0, 1.0, 1.0]);
        let c = confusion_from_masks(&truth, &truth, 0.5).unwrap()[0];
        assert_eq!((c.fp, c.fn_), (0, 0));
        let inverted = truth.map(|v| 1.0 - v).unwrap();
        let c = confusion_from_masks(&inverted, &truth, 0.5).unwrap()[0];
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn threshold_is_inclusive() {
        let c = confusion_from_masks(&mask(&[0.5, 0.49]), &mask(&[1.0, 1.0]), 0.5).unwrap()[0];
        assert_eq!((c.tp, c.fn_), (1, 1));
    }

    #[test]
    fn per_image_split() {
        let pred = Tensor::from_slice(&[2, 1, 1, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let truth = Tensor::from_slice(&[2, 1, 1, 2], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        let c = confusion_from_masks(&pred, &truth, 0.5).unwrap();
        assert_eq!(c, vec![counts(1, 0, 0, 1), counts(0, 0, 1, 1)]);
    }

    #[test]
    fn confusion_errors() {
        assert!(matches!(
            confusion_from_masks(&mask(&[1.0, 0.0]), &mask(&[1.0]), 0.5),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            confusion_from_masks(&mask(&[1.0]), &mask(&[0.5]), 0.5),
            Err(Error::InvalidArgument(_))
        ));
        assert!(confusion_from_masks(&mask(&[1.0]), &mask(&[1.0]), 1.0).is_err());
    }

    #[test]
    fn dice_and_iou_reference_values() {
        let c = counts(50, 10, 10, 0);
        assert!((dice(&c) - 100.0 / 120.0).abs() < 1e-15);
        assert!((iou(&c) - 50.0 / 70.0).abs() < 1e-15);
        assert_eq!(dice(&counts(7, 0, 0, 3)), 1.0);
        assert_eq!(dice(&counts(0, 0, 0, 9)), 1.0);
        assert_eq!(iou(&counts(0, 0, 0, 9)), 1.0);
        assert_eq!(iou(&counts(0, 4, 5, 1)), 0.0);
    }

    #[test]
    fn accuracy_values() {
        assert_eq!(pixel_accuracy(&counts(3, 0, 0, 5)).unwrap(), 1.0);
        assert_eq!(pixel_accuracy(&counts(1, 1, 1, 1)).unwrap(), 0.5);
        assert_eq!(pixel_accuracy(&counts(0, 0, 0, 16)).unwrap(), 1.0);
        assert!(pixel_accuracy(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn mean_aggregation() {
        assert_eq!(aggregate_mean(&[1.0]).unwrap(), 1.0);
        assert!((aggregate_mean(&[0.8, 0.9]).unwrap() - 0.85).abs() < 1e-15);
        assert!(aggregate_mean(&[]).is_err());
    }

    #[test]
    fn report_kv_line() {
        let r = MetricsReport::from_counts(vec![("a".into(), counts(1, 1, 1, 1)), ("b".into(), counts(2, 0, 0, 2))]).unwrap();
        assert_eq!(r.kv_line(), "mdice=0.750000 miou=0.666667 accuracy=0.750000 n_images=2");
        assert_eq!(r.global_dice, 6.0 / 8.0);
    }

    proptest! {
        #[test]
        fn score_bounds_and_symmetry(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000, tn in 0u64..1000) {
            let c = counts(tp, fp, fn_, tn);
            let (d, i) = (dice(&c), iou(&c));
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert!(i <= d);
            let swapped = counts(tp, fn_, fp, tn);
            prop_assert_eq!(dice(&swapped), d);
            prop_assert_eq!(iou(&swapped), i);
        }

        #[test]
        fn mean_is_order_invariant(mut values in proptest::collection::vec(0.0f64..1.0, 1..20), seed in any::<u64>()) {
            let before = aggregate_mean(&values).unwrap();
            crate::rng::SeededRng::new(seed).shuffle(&mut values);
            let after = aggregate_mean(&values).unwrap();
            prop_assert!((before - after).abs() < 1e-12);
        }
    }
}
