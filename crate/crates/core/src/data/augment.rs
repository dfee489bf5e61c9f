use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ROTATION_DEG: f64 = 10.0;
pub const MAX_SHIFT_FRAC: f64 = 0.10;
pub const SCALE_RANGE: (f64, f64) = (0.80, 1.20);

/// One random geometric transform: rotation and scale about the image
/// center, then a shift given as a fraction of width/height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub shift_x_frac: f64,
    pub shift_y_frac: f64,
    pub scale: f64,
}

impl AugmentParams {
    pub fn new(rotation_deg: f64, shift_x_frac: f64, shift_y_frac: f64, scale: f64) -> Result<Self> {
        let p = Self {
            rotation_deg,
            shift_x_frac,
            shift_y_frac,
            scale,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            shift_x_frac: 0.0,
            shift_y_frac: 0.0,
            scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, lo: f64, hi: f64| {
            if (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "augmentation {name} = {v} is outside [{lo}, {hi}]"
                )))
            }
        };
        check("rotation_deg", self.rotation_deg, -MAX_ROTATION_DEG, MAX_ROTATION_DEG)?;
        check("shift_x_frac", self.shift_x_frac, -MAX_SHIFT_FRAC, MAX_SHIFT_FRAC)?;
        check("shift_y_frac", self.shift_y_frac, -MAX_SHIFT_FRAC, MAX_SHIFT_FRAC)?;
        check("scale", self.scale, SCALE_RANGE.0, SCALE_RANGE.1)
    }
}

/// Draws each field uniformly from its closed interval.
pub fn sample_augment_params<R: Rng + ?Sized>(rng: &mut R) -> AugmentParams {
    AugmentParams {
        rotation_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
        shift_x_frac: rng.random_range(-MAX_SHIFT_FRAC..=MAX_SHIFT_FRAC),
        shift_y_frac: rng.random_range(-MAX_SHIFT_FRAC..=MAX_SHIFT_FRAC),
        scale: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
    }
}

/// Maps output pixel coordinates back into the source frame.
struct InverseAffine {
    cx: f64,
    cy: f64,
    tx: f64,
    ty: f64,
    cos: f64,
    sin: f64,
    inv_scale: f64,
}

impl InverseAffine {
    fn new(params: &AugmentParams, h: usize, w: usize) -> Self {
        let theta = params.rotation_deg.to_radians();
        Self {
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
            tx: params.shift_x_frac * w as f64,
            ty: params.shift_y_frac * h as f64,
            cos: theta.cos(),
            sin: theta.sin(),
            inv_scale: 1.0 / params.scale,
        }
    }

    fn source(&self, x: usize, y: usize) -> (f64, f64) {
        let u = x as f64 - self.cx - self.tx;
        let v = y as f64 - self.cy - self.ty;
        (
            self.cx + (self.cos * u + self.sin * v) * self.inv_scale,
            self.cy + (-self.sin * u + self.cos * v) * self.inv_scale,
        )
    }
}

/// Applies one transform to an image (bilinear) and its mask (nearest
/// neighbor). Pixels that map outside the source frame become 0.
pub fn augment(
    image: ArrayView2<'_, f32>,
    mask: ArrayView2<'_, u8>,
    params: &AugmentParams,
) -> Result<(Array2<f32>, Array2<u8>)> {
    params.validate()?;
    if image.dim() != mask.dim() {
        let (a, b) = (image.dim(), mask.dim());
        return Err(Error::ShapeMismatch {
            left: vec![a.0, a.1],
            right: vec![b.0, b.1],
        });
    }
    let (h, w) = image.dim();
    let map = InverseAffine::new(params, h, w);
    let at = |yy: i64, xx: i64| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
            0.0
        } else {
            image[[yy as usize, xx as usize]] as f64
        }
    };

    let mut out_image = Array2::<f32>::zeros((h, w));
    let mut out_mask = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = map.source(x, y);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out_image[[y, x]] = (top * (1.0 - fy) + bottom * fy) as f32;

            let (nx, ny) = (sx.round(), sy.round());
            if nx >= 0.0 && ny >= 0.0 && nx < w as f64 && ny < h as f64 {
                out_mask[[y, x]] = mask[[ny as usize, nx as usize]];
            }
        }
    }
    Ok((out_image, out_mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pattern(h: usize, w: usize) -> (Array2<f32>, Array2<u8>) {
        let image = Array2::from_shape_fn((h, w), |(y, x)| ((y * 13 + x * 7) % 17) as f32 / 16.0);
        let mask = Array2::from_shape_fn((h, w), |(y, x)| u8::from((y + 2 * x) % 5 < 2));
        (image, mask)
    }

    #[test]
    fn identity_is_exact() {
        let (image, mask) = pattern(23, 31);
        let (i2, m2) = augment(image.view(), mask.view(), &AugmentParams::identity()).unwrap();
        assert_eq!(i2, image);
        assert_eq!(m2, mask);
    }

    #[test]
    fn rotation_keeps_mask_binary() {
        let (image, mask) = pattern(40, 40);
        let p = AugmentParams::new(10.0, 0.0, 0.0, 1.0).unwrap();
        let (_, m2) = augment(image.view(), mask.view(), &p).unwrap();
        assert!(m2.iter().all(|&v| v <= 1));
    }

    #[test]
    fn shift_moves_column_fifty_to_sixty() {
        let mut image = Array2::<f32>::zeros((20, 100));
        let mut mask = Array2::<u8>::zeros((20, 100));
        image.column_mut(50).fill(1.0);
        mask.column_mut(50).fill(1);
        let p = AugmentParams::new(0.0, 0.10, 0.0, 1.0).unwrap();
        let (i2, m2) = augment(image.view(), mask.view(), &p).unwrap();
        assert!(i2.column(60).iter().all(|&v| v == 1.0));
        assert!(m2.column(60).iter().all(|&v| v == 1));
        assert_eq!(m2.sum(), 20);
        // the vacated left strip is filled with background
        assert!(i2.column(5).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_params_are_rejected() {
        assert!(AugmentParams::new(10.5, 0.0, 0.0, 1.0).is_err());
        assert!(AugmentParams::new(0.0, 0.0, -0.11, 1.0).is_err());
        assert!(AugmentParams::new(0.0, 0.0, 0.0, 0.79).is_err());
        let (image, mask) = pattern(8, 8);
        let bad = AugmentParams {
            scale: 2.0,
            ..AugmentParams::identity()
        };
        assert!(augment(image.view(), mask.view(), &bad).is_err());
    }

    #[test]
    fn sampled_params_stay_in_bounds_and_center_on_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws: Vec<AugmentParams> = (0..10_000).map(|_| sample_augment_params(&mut rng)).collect();
        assert!(draws.iter().all(|p| p.validate().is_ok()));
        let mean = draws.iter().map(|p| p.rotation_deg).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.5, "mean rotation {mean}");
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            assert_eq!(sample_augment_params(&mut a), sample_augment_params(&mut b));
        }
    }

    #[test]
    fn random_transforms_keep_masks_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (image, mask) = pattern(24, 24);
        for _ in 0..1_000 {
            let p = sample_augment_params(&mut rng);
            let (_, m) = augment(image.view(), mask.view(), &p).unwrap();
            assert!(m.iter().all(|&v| v <= 1));
        }
    }
}
