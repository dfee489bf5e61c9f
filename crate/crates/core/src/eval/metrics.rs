use ndarray::{Array, ArrayView, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Pixel is foreground iff `prob ≥ threshold`.
pub fn binarize<D: Dimension>(prob: ArrayView<'_, f32, D>, threshold: f64) -> Array<u8, D> {
    prob.mapv(|p| u8::from(p as f64 >= threshold))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

pub fn confusion_counts<D: Dimension>(pred: ArrayView<'_, u8, D>, gt: ArrayView<'_, u8, D>) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            left: pred.shape().to_vec(),
            right: gt.shape().to_vec(),
        });
    }
    if let Some(&v) = pred.iter().chain(gt.iter()).find(|&&v| v > 1) {
        return Err(Error::NonBinary { value: v as f64 });
    }
    let mut c = ConfusionCounts::default();
    Zip::from(&pred).and(&gt).for_each(|&p, &g| match (p, g) {
        (1, 1) => c.tp += 1,
        (1, _) => c.fp += 1,
        (_, 1) => c.fn_ += 1,
        _ => c.tn += 1,
    });
    Ok(c)
}

/// Dice similarity coefficient, Jaccard index, sensitivity and specificity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub dsc: f64,
    pub ji: f64,
    pub se: f64,
    pub sp: f64,
    /// Names of metrics whose ratio was 0/0 and was set to 1.0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

pub fn metrics(c: &ConfusionCounts) -> SegmentationMetrics {
    let mut undefined = Vec::new();
    let mut ratio = |name: &str, num: u64, den: u64| {
        if den == 0 {
            undefined.push(name.to_owned());
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    let dsc = ratio("dsc", 2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    let ji = ratio("ji", c.tp, c.tp + c.fp + c.fn_);
    let se = ratio("se", c.tp, c.tp + c.fn_);
    let sp = ratio("sp", c.tn, c.tn + c.fp);
    SegmentationMetrics {
        dsc,
        ji,
        se,
        sp,
        undefined,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};
    use proptest::prelude::*;

    #[test]
    fn threshold_is_inclusive() {
        let p = Array2::from_elem((3, 3), 0.5f32);
        assert!(binarize(p.view(), 0.5).iter().all(|&v| v == 1));
        let z = Array2::<f32>::zeros((3, 3));
        assert!(binarize(z.view(), 0.5).iter().all(|&v| v == 0));
        let mixed = arr2(&[[0.49f32, 0.51], [0.51, 0.49]]);
        assert_eq!(binarize(mixed.view(), 0.5), arr2(&[[0u8, 1], [1, 0]]));
    }

    fn frame(ones: &[(usize, usize)]) -> Array2<u8> {
        let mut a = Array2::zeros((4, 4));
        for &p in ones {
            a[p] = 1;
        }
        a
    }

    #[test]
    fn identical_masks() {
        let gt = frame(&[(0, 0), (0, 1), (1, 1), (2, 2), (3, 3)]);
        let c = confusion_counts(gt.view(), gt.view()).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (5, 0, 0, 11));
        let m = metrics(&c);
        assert_eq!((m.dsc, m.ji, m.se, m.sp), (1.0, 1.0, 1.0, 1.0));
        assert!(m.undefined.is_empty());
    }

    #[test]
    fn complementary_masks() {
        let gt = frame(&[(0, 0), (1, 2)]);
        let pred = gt.mapv(|v| 1 - v);
        let c = confusion_counts(pred.view(), gt.view()).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn partial_overlap_counts_and_metrics() {
        let gt = frame(&[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let pred = frame(&[(0, 0), (0, 1), (1, 0), (3, 3)]);
        let c = confusion_counts(pred.view(), gt.view()).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (3, 1, 1, 11));
        let m = metrics(&c);
        assert_eq!(m.dsc, 0.75);
        assert_eq!(m.ji, 0.6);
        assert_eq!(m.se, 0.75);
        assert!((m.sp - 11.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn empty_prediction() {
        let m = metrics(&ConfusionCounts {
            tp: 0,
            fp: 0,
            fn_: 4,
            tn: 12,
        });
        assert_eq!((m.dsc, m.ji, m.se, m.sp), (0.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn absent_class_is_flagged() {
        let m = metrics(&ConfusionCounts {
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 16,
        });
        assert_eq!((m.dsc, m.ji, m.se, m.sp), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(m.undefined, ["dsc", "ji", "se"]);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let a = Array2::<u8>::zeros((4, 4));
        let b = Array2::<u8>::zeros((4, 3));
        assert!(matches!(
            confusion_counts(a.view(), b.view()),
            Err(Error::ShapeMismatch { .. })
        ));
        let mut c = a.clone();
        c[[0, 0]] = 2;
        assert!(matches!(
            confusion_counts(c.view(), a.view()),
            Err(Error::NonBinary { .. })
        ));
    }

    proptest! {
        #[test]
        fn dsc_ji_identity(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
            prop_assume!(tp + fp + fn_ > 0);
            let m = metrics(&ConfusionCounts { tp, fp, fn_, tn });
            prop_assert!((m.dsc - 2.0 * m.ji / (1.0 + m.ji)).abs() < 1e-12);
            prop_assert!(m.se <= 1.0 && m.sp <= 1.0);
        }

        #[test]
        fn raising_threshold_never_raises_se_or_lowers_sp(
            probs in proptest::collection::vec(0.0f32..=1.0, 64),
            gt in proptest::collection::vec(0u8..=1, 64),
            t1 in 0.0f64..=1.0,
            t2 in 0.0f64..=1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let p = Array2::from_shape_vec((8, 8), probs).unwrap();
            let g = Array2::from_shape_vec((8, 8), gt).unwrap();
            let m_lo = metrics(&confusion_counts(binarize(p.view(), lo).view(), g.view()).unwrap());
            let m_hi = metrics(&confusion_counts(binarize(p.view(), hi).view(), g.view()).unwrap());
            prop_assert!(m_hi.se <= m_lo.se);
            prop_assert!(m_hi.sp >= m_lo.sp);
        }
    }
}
