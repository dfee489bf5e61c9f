use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::metrics::{binarize, confusion_counts, metrics, ConfusionCounts, SegmentationMetrics};
use crate::data::{Dataset, SourceDb};
use crate::error::{Error, Result};
use crate::model::UNet;

/// Anything that maps images to per-pixel foreground probabilities.
pub trait Segmenter {
    fn segment(&mut self, images: &[ArrayView2<'_, f32>]) -> Result<Vec<Array2<f32>>>;
}

impl Segmenter for UNet {
    fn segment(&mut self, images: &[ArrayView2<'_, f32>]) -> Result<Vec<Array2<f32>>> {
        self.predict(images)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEvaluation {
    pub id: String,
    pub source_db: SourceDb,
    pub counts: ConfusionCounts,
    pub metrics: SegmentationMetrics,
}

/// Unweighted means of per-image metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub dsc: f64,
    pub ji: f64,
    pub se: f64,
    pub sp: f64,
}

impl MeanMetrics {
    pub fn of<'a>(items: impl IntoIterator<Item = &'a SegmentationMetrics>) -> Option<Self> {
        let mut sum = MeanMetrics::default();
        let mut n = 0usize;
        for m in items {
            sum.dsc += m.dsc;
            sum.ji += m.ji;
            sum.se += m.se;
            sum.sp += m.sp;
            n += 1;
        }
        (n > 0).then(|| {
            let k = n as f64;
            MeanMetrics {
                dsc: sum.dsc / k,
                ji: sum.ji / k,
                se: sum.se / k,
                sp: sum.sp / k,
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEvaluation {
    pub dataset: String,
    pub threshold: f64,
    pub per_image: Vec<ImageEvaluation>,
    pub mean: MeanMetrics,
    /// Images with at least one 0/0 metric set to 1.0.
    pub flagged_images: usize,
}

impl DatasetEvaluation {
    /// Means restricted to images from one source database.
    pub fn mean_for(&self, source: SourceDb) -> Option<MeanMetrics> {
        MeanMetrics::of(
            self.per_image
                .iter()
                .filter(|e| e.source_db == source)
                .map(|e| &e.metrics),
        )
    }
}

/// Thresholded per-image metrics and their unweighted means.
pub fn evaluate_model<S: Segmenter + ?Sized>(
    model: &mut S,
    test: &Dataset,
    threshold: f64,
) -> Result<DatasetEvaluation> {
    if test.is_empty() {
        return Err(Error::invalid(format!(
            "cannot evaluate on empty dataset {:?}",
            test.name
        )));
    }
    let views: Vec<_> = test.samples.iter().map(|s| s.image.view()).collect();
    let probs = model.segment(&views)?;
    if probs.len() != test.len() {
        return Err(Error::invalid(format!(
            "segmenter returned {} predictions for {} images",
            probs.len(),
            test.len()
        )));
    }
    let mut per_image = Vec::with_capacity(test.len());
    for (s, p) in test.samples.iter().zip(&probs) {
        let counts = confusion_counts(binarize(p.view(), threshold).view(), s.mask.view())?;
        per_image.push(ImageEvaluation {
            id: s.id.clone(),
            source_db: s.source_db,
            counts,
            metrics: metrics(&counts),
        });
    }
    let mean = MeanMetrics::of(per_image.iter().map(|e| &e.metrics)).expect("non-empty");
    let flagged_images = per_image.iter().filter(|e| !e.metrics.undefined.is_empty()).count();
    Ok(DatasetEvaluation {
        dataset: test.name.clone(),
        threshold,
        per_image,
        mean,
        flagged_images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_phantom_dataset;
    use ndarray::Array2;

    /// Returns the ground-truth masks as probabilities.
    struct Oracle(Dataset);

    impl Segmenter for Oracle {
        fn segment(&mut self, images: &[ArrayView2<'_, f32>]) -> Result<Vec<Array2<f32>>> {
            Ok(self.0.samples[..images.len()]
                .iter()
                .map(|s| s.mask.mapv(f32::from))
                .collect())
        }
    }

    struct Zero;

    impl Segmenter for Zero {
        fn segment(&mut self, images: &[ArrayView2<'_, f32>]) -> Result<Vec<Array2<f32>>> {
            Ok(images.iter().map(|i| Array2::zeros(i.dim())).collect())
        }
    }

    #[test]
    fn perfect_model_scores_one() {
        let ds = generate_phantom_dataset(6, 32, 0.5, 1).unwrap();
        let e = evaluate_model(&mut Oracle(ds.clone()), &ds, 0.5).unwrap();
        assert_eq!(e.mean.dsc, 1.0);
        assert_eq!(e.per_image.len(), 6);
        assert_eq!(e.flagged_images, 0);
    }

    #[test]
    fn zero_model_has_no_sensitivity() {
        let ds = generate_phantom_dataset(6, 32, 0.0, 2).unwrap();
        let e = evaluate_model(&mut Zero, &ds, 0.5).unwrap();
        assert_eq!(e.mean.se, 0.0);
        assert_eq!(e.mean.sp, 1.0);
        assert_eq!(e.mean.dsc, 0.0);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        let ds = Dataset::new("empty", vec![]).unwrap();
        assert!(evaluate_model(&mut Zero, &ds, 0.5).is_err());
    }

    #[test]
    fn means_ignore_sample_order() {
        let ds = generate_phantom_dataset(8, 32, 0.5, 3).unwrap();
        let mut shuffled = ds.clone();
        shuffled.samples.reverse();
        let half = |d: &Dataset| {
            struct Half;
            impl Segmenter for Half {
                fn segment(&mut self, images: &[ArrayView2<'_, f32>]) -> Result<Vec<Array2<f32>>> {
                    Ok(images
                        .iter()
                        .map(|i| i.mapv(|v| if v < 0.4 { 1.0 } else { 0.0 }))
                        .collect())
                }
            }
            evaluate_model(&mut Half, d, 0.5).unwrap().mean
        };
        let (a, b) = (half(&ds), half(&shuffled));
        assert!((a.dsc - b.dsc).abs() < 1e-12 && (a.sp - b.sp).abs() < 1e-12);
    }

    #[test]
    fn per_source_means() {
        let a = generate_phantom_dataset(3, 16, 0.0, 4)
            .unwrap()
            .retag(SourceDb::Jsrt, "a_");
        let b = generate_phantom_dataset(2, 16, 0.0, 5)
            .unwrap()
            .retag(SourceDb::Own, "b_");
        let ds = Dataset::merge("both", [a, b]).unwrap();
        let e = evaluate_model(&mut Zero, &ds, 0.5).unwrap();
        assert_eq!(e.mean_for(SourceDb::Jsrt).unwrap().se, 0.0);
        assert!(e.mean_for(SourceDb::Montgomery).is_none());
    }
}
