use ndarray::{Array, ArrayView, Dimension, Zip};

use crate::error::{Error, Result};

/// Additive smoothing in numerator and denominator of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

fn check_shapes<D: Dimension>(pred: &ArrayView<'_, f64, D>, target: &ArrayView<'_, f64, D>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    Ok(())
}

/// `(Σ p·g, Σ p, Σ g)` over every element.
fn sums<D: Dimension>(pred: &ArrayView<'_, f64, D>, target: &ArrayView<'_, f64, D>) -> (f64, f64, f64) {
    let mut acc = (0.0, 0.0, 0.0);
    Zip::from(pred).and(target).for_each(|&p, &g| {
        acc.0 += p * g;
        acc.1 += p;
        acc.2 += g;
    });
    acc
}

/// Soft Dice loss `1 − (2·Σpg + s) / (Σp + Σg + s)` summed over every pixel
/// of the batch, with `s = 1`.
pub fn dice_loss<D: Dimension>(pred: ArrayView<'_, f64, D>, target: ArrayView<'_, f64, D>) -> Result<f64> {
    check_shapes(&pred, &target)?;
    let (inter, p, g) = sums(&pred, &target);
    Ok(1.0 - (2.0 * inter + DICE_SMOOTH) / (p + g + DICE_SMOOTH))
}

/// [`dice_loss`] together with its gradient with respect to `pred`.
pub fn dice_loss_grad<D: Dimension>(
    pred: ArrayView<'_, f64, D>,
    target: ArrayView<'_, f64, D>,
) -> Result<(f64, Array<f64, D>)> {
    check_shapes(&pred, &target)?;
    let (inter, p, g) = sums(&pred, &target);
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = p + g + DICE_SMOOTH;
    let grad = target.mapv(|t| -(2.0 * t * den - num) / (den * den));
    Ok((1.0 - num / den, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array1, Array2};
    use proptest::prelude::*;

    #[test]
    fn perfect_overlap_is_zero() {
        let mask = Array2::from_shape_fn((6, 6), |(y, x)| f64::from(u8::from(x > y)));
        assert_eq!(dice_loss(mask.view(), mask.view()).unwrap(), 0.0);
    }

    #[test]
    fn empty_prediction_on_large_mask() {
        let target = Array1::<f64>::ones(10_000);
        let pred = Array1::<f64>::zeros(10_000);
        let loss = dice_loss(pred.view(), target.view()).unwrap();
        assert!((loss - (1.0 - 1.0 / 10_001.0)).abs() < 1e-15);
        assert_eq!(format!("{loss:.4}"), "0.9999");
    }

    #[test]
    fn empty_prediction_on_lung_sized_mask_prints_as_one() {
        // About 38% of a 256×256 frame.
        let target = Array1::<f64>::ones(25_000);
        let pred = Array1::<f64>::zeros(25_000);
        let loss = dice_loss(pred.view(), target.view()).unwrap();
        assert_eq!(format!("{loss:.4}"), "1.0000");
    }

    #[test]
    fn half_probability_frame() {
        let pred = Array2::from_elem((4, 4), 0.5);
        let target = Array2::from_shape_fn((4, 4), |(y, _)| f64::from(u8::from(y < 2)));
        let loss = dice_loss(pred.view(), target.view()).unwrap();
        assert!((loss - (1.0 - 9.0 / 17.0)).abs() < 1e-15);
        assert_eq!(format!("{loss:.4}"), "0.4706");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = arr1(&[0.1, 0.2]);
        let b = arr1(&[1.0, 0.0, 1.0]);
        assert!(dice_loss(a.view(), b.view()).is_err());
    }

    proptest! {
        #[test]
        fn loss_is_in_unit_interval_and_order_free(
            pixels in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 1..200),
            rot in 0usize..200,
        ) {
            let pred: Array1<f64> = pixels.iter().map(|p| p.0).collect();
            let target: Array1<f64> = pixels.iter().map(|p| f64::from(u8::from(p.1))).collect();
            let loss = dice_loss(pred.view(), target.view()).unwrap();
            prop_assert!((0.0..1.0).contains(&loss));

            let k = rot % pixels.len();
            let mut rotated = pixels.clone();
            rotated.rotate_left(k);
            rotated.reverse();
            let pred2: Array1<f64> = rotated.iter().map(|p| p.0).collect();
            let target2: Array1<f64> = rotated.iter().map(|p| f64::from(u8::from(p.1))).collect();
            let loss2 = dice_loss(pred2.view(), target2.view()).unwrap();
            prop_assert!((loss - loss2).abs() < 1e-12);
        }

        #[test]
        fn loss_vanishes_only_on_exact_match(
            target in proptest::collection::vec(any::<bool>(), 1..64),
            flip in 0usize..64,
            delta in 0.01f64..=1.0,
        ) {
            let t: Array1<f64> = target.iter().map(|&b| f64::from(u8::from(b))).collect();
            prop_assert_eq!(dice_loss(t.view(), t.view()).unwrap(), 0.0);
            let mut p = t.clone();
            let i = flip % p.len();
            p[i] = if p[i] == 1.0 { 1.0 - delta } else { delta };
            prop_assert!(dice_loss(p.view(), t.view()).unwrap() > 0.0);
        }
    }
}
