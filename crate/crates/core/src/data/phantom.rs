//! Synthetic chest-radiograph stand-ins used as test fixtures.
//!
//! Each frame holds two vertical elliptical "lungs" darker than a noisy body
//! background. Severe samples get a bright opaque blob over part of one lung
//! while the mask keeps the full lung outline, which mimics the
//! boundary-obscuring opacities the segmentation model must see through.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, SampleRecord, Severity, SourceDb};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.ax;
        let dy = (y - self.cy) / self.ay;
        dx * dx + dy * dy <= 1.0
    }
}

fn lung(rng: &mut ChaCha8Rng, size: f64, center_x: f64) -> Ellipse {
    Ellipse {
        cx: (center_x + rng.random_range(-0.02..=0.02)) * size,
        cy: (0.5 + rng.random_range(-0.03..=0.03)) * size,
        ax: rng.random_range(0.10..=0.16) * size,
        ay: rng.random_range(0.22..=0.32) * size,
    }
}

fn sample(rng: &mut ChaCha8Rng, id: String, size: usize, severe: bool) -> Result<SampleRecord> {
    let s = size as f64;
    let lungs = [lung(rng, s, 0.30), lung(rng, s, 0.70)];
    let body = rng.random_range(0.55..=0.70);
    let lung_level = rng.random_range(0.15..=0.30);
    let blob = severe.then(|| {
        let target = lungs[rng.random_range(0..2)];
        Ellipse {
            cx: target.cx + rng.random_range(-0.5..=0.5) * target.ax,
            cy: target.cy + rng.random_range(-0.5..=0.5) * target.ay,
            ax: rng.random_range(0.6..=1.0) * target.ax,
            ay: rng.random_range(0.4..=0.7) * target.ay,
        }
    });
    let blob_level: f64 = rng.random_range(0.60..=0.80);

    let mut image = Array2::<f32>::zeros((size, size));
    let mut mask = Array2::<u8>::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let in_lung = lungs.iter().any(|e| e.contains(px, py));
            let mut v = if in_lung { lung_level } else { body };
            if blob.is_some_and(|b| b.contains(px, py)) {
                v = blob_level;
            }
            v += rng.random_range(-0.05..=0.05);
            image[[y, x]] = v.clamp(0.0, 1.0) as f32;
            mask[[y, x]] = u8::from(in_lung);
        }
    }
    let severity = if severe { Severity::Severe } else { Severity::Normal };
    SampleRecord::new(id, image, mask, SourceDb::Phantom, severity)
}

/// Generates `n` phantom samples of `size`×`size`, `round(severe_fraction·n)`
/// of them severe. Bit-identical for a given seed.
pub fn generate_phantom_dataset(n: usize, size: usize, severe_fraction: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("phantom dataset needs at least one sample"));
    }
    if size < 8 {
        return Err(Error::invalid(format!("phantom size {size} is below 8")));
    }
    if !(0.0..=1.0).contains(&severe_fraction) {
        return Err(Error::invalid(format!(
            "severe fraction {severe_fraction} is outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_severe = (severe_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut severe = vec![false; n];
    for &i in &order[..n_severe] {
        severe[i] = true;
    }
    let samples = (0..n)
        .map(|i| sample(&mut rng, format!("phantom_{i:04}"), size, severe[i]))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new("phantom", samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn severe_count_matches_fraction() {
        let ds = generate_phantom_dataset(60, 64, 0.2, 7).unwrap();
        assert_eq!(ds.len(), 60);
        let severe = ds.samples.iter().filter(|s| s.severity == Severity::Severe).count();
        assert_eq!(severe, 12);
        assert!(ds.samples.iter().all(|s| s.source_db == SourceDb::Phantom));
    }

    #[test]
    fn zero_fraction_is_all_normal() {
        let ds = generate_phantom_dataset(20, 32, 0.0, 1).unwrap();
        assert!(ds.samples.iter().all(|s| s.severity == Severity::Normal));
    }

    #[test]
    fn lung_coverage_is_moderate() {
        for seed in 0..5 {
            let ds = generate_phantom_dataset(40, 64, 0.3, seed).unwrap();
            for s in &ds.samples {
                let frac = s.lung_pixels() as f64 / (64.0 * 64.0);
                assert!(frac > 0.05 && frac < 0.60, "{} covers {frac}", s.id);
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_phantom_dataset(10, 32, 0.5, 99).unwrap();
        let b = generate_phantom_dataset(10, 32, 0.5, 99).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom_dataset(10, 32, 0.5, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_empty_request() {
        assert!(generate_phantom_dataset(0, 32, 0.1, 0).is_err());
    }
}
