use ndarray::{Array2, ArrayView, ArrayView2, Dimension, Ix2};

use super::{Dataset, SampleRecord};
use crate::error::{Error, Result};

pub const HISTOGRAM_BINS: usize = 256;

/// Smallest accepted model input side.
pub const MIN_TARGET_SIZE: usize = 8;

fn source_coord(dst: usize, in_len: usize, out_len: usize) -> f64 {
    let scale = in_len as f64 / out_len as f64;
    ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64)
}

/// Bilinear resampling with pixel-center alignment.
pub fn resize_bilinear(image: ArrayView2<'_, f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (in_h, in_w) = image.dim();
    let xs: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|x| {
            let s = source_coord(x, in_w, out_w);
            let x0 = s.floor() as usize;
            (x0, (x0 + 1).min(in_w - 1), s - x0 as f64)
        })
        .collect();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let sy = source_coord(y, in_h, out_h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let fy = sy - y0 as f64;
        let (x0, x1, fx) = xs[x];
        let top = image[[y0, x0]] as f64 * (1.0 - fx) + image[[y0, x1]] as f64 * fx;
        let bottom = image[[y1, x0]] as f64 * (1.0 - fx) + image[[y1, x1]] as f64 * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    })
}

/// Nearest-neighbor resampling; keeps label values intact.
pub fn resize_nearest<T: Copy>(grid: ArrayView2<'_, T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (in_h, in_w) = grid.dim();
    let pick = |dst: usize, in_len: usize, out_len: usize| {
        (((dst as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        grid[[pick(y, in_h, out_h), pick(x, in_w, out_w)]]
    })
}

fn bin_of(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) as f64 * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1)
}

/// Global histogram equalization over 256 bins of `[0, 1]`.
///
/// Each pixel maps to the cumulative fraction of pixels in its bin or below,
/// so the output lies in `(0, 1]`.
pub fn equalize_histogram(image: ArrayView2<'_, f32>) -> Array2<f32> {
    let mut hist = [0usize; HISTOGRAM_BINS];
    for &v in image.iter() {
        hist[bin_of(v)] += 1;
    }
    let total = image.len() as f64;
    let mut lut = [0f32; HISTOGRAM_BINS];
    let mut acc = 0usize;
    for (bin, count) in hist.iter().enumerate() {
        acc += count;
        lut[bin] = (acc as f64 / total) as f32;
    }
    image.mapv(|v| lut[bin_of(v)])
}

/// Resizes to `target_size` square (bilinear), then equalizes the histogram.
pub fn preprocess<D: Dimension>(image: ArrayView<'_, f32, D>, target_size: usize) -> Result<Array2<f32>> {
    let image = image
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::invalid("preprocess expects a 2-D grayscale image"))?;
    if image.is_empty() {
        return Err(Error::invalid("preprocess: empty image"));
    }
    if target_size < MIN_TARGET_SIZE {
        return Err(Error::invalid(format!(
            "target size {target_size} is below the minimum of {MIN_TARGET_SIZE}"
        )));
    }
    let resized = resize_bilinear(image, target_size, target_size);
    Ok(equalize_histogram(resized.view()))
}

/// Brings every sample to model input form: preprocessed image, mask resized
/// nearest-neighbor to the same square size.
pub fn prepare_dataset(dataset: &Dataset, target_size: usize) -> Result<Dataset> {
    let samples = dataset
        .samples
        .iter()
        .map(|s| {
            let image = preprocess(s.image.view(), target_size)?;
            let mask = resize_nearest(s.mask.view(), target_size, target_size);
            SampleRecord::new(s.id.clone(), image, mask, s.source_db, s.severity)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(dataset.name.clone(), samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    #[test]
    fn output_has_target_size() {
        let img = Array2::from_shape_fn((512, 512), |(y, x)| ((x + y) % 256) as f32 / 255.0);
        let out = preprocess(img.view(), 256).unwrap();
        assert_eq!(out.dim(), (256, 256));
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Array2::from_elem((40, 30), 0.37f32);
        let out = preprocess(img.view(), 16).unwrap();
        let first = out[[0, 0]];
        assert!(out.iter().all(|&v| v == first));
    }

    #[test]
    fn uniform_histogram_barely_moves() {
        // 256 levels, 4 pixels each: the histogram is exactly flat.
        let img = Array2::from_shape_fn((32, 32), |(y, x)| ((y * 32 + x) % 256) as f32 / 255.0);
        let out = equalize_histogram(img.view());
        for (a, b) in img.iter().zip(out.iter()) {
            assert!((a - b).abs() <= 1.0 / 256.0 + 1e-6, "{a} -> {b}");
        }
    }

    #[test]
    fn halving_averages_two_by_two_blocks() {
        let img = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f32);
        let out = resize_bilinear(img.view(), 2, 2);
        assert_eq!(out[[0, 0]], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(out[[1, 1]], (10.0 + 11.0 + 14.0 + 15.0) / 4.0);
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = Array2::from_shape_fn((9, 9), |(y, x)| ((y * 7 + x * 3) % 11) as f32 / 10.0);
        assert_eq!(resize_bilinear(img.view(), 9, 9), img);
        assert_eq!(resize_nearest(img.view(), 9, 9), img);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cube = Array3::<f32>::zeros((2, 8, 8));
        assert!(preprocess(cube.view(), 8).is_err());
        let img = Array2::<f32>::zeros((0, 0));
        assert!(preprocess(img.view(), 8).is_err());
        let img = Array2::<f32>::zeros((8, 8));
        assert!(preprocess(img.view(), 4).is_err());
    }

    proptest! {
        #[test]
        fn preprocess_is_idempotent_within_one_bin(
            pixels in proptest::collection::vec(0u8..=255, 24 * 24),
            size in 8usize..24,
        ) {
            let img = Array2::from_shape_vec((24, 24), pixels).unwrap().mapv(|v| v as f32 / 255.0);
            let once = preprocess(img.view(), size).unwrap();
            let twice = preprocess(once.view(), size).unwrap();
            for (a, b) in once.iter().zip(twice.iter()) {
                prop_assert!((a - b).abs() <= 1.0 / 256.0 + 1e-6);
            }
        }
    }
}
