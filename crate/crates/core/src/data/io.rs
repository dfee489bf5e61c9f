//! Directory layout: `<root>/images/<id>.png`, `<root>/masks/<id>.png`
//! (8-bit grayscale) and an optional `<root>/manifest.csv` with header
//! `id,source_db,severity`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Dataset, SampleRecord, Severity, SourceDb};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    source_db: String,
    severity: String,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_owned(), path);
        }
    }
    Ok(out)
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })?;
    Ok(img.to_luma8())
}

fn gray_to_array(img: &GrayImage) -> Array2<u8> {
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.as_raw().clone())
        .expect("buffer length matches image dimensions")
}

fn read_manifest(path: &Path) -> Result<HashMap<String, (SourceDb, Severity)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Manifest {
        path: path.to_owned(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut out = HashMap::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let line = i + 2;
        let manifest_err = |message: String| Error::Manifest {
            path: path.to_owned(),
            line,
            message,
        };
        let row = row.map_err(|e| manifest_err(e.to_string()))?;
        let source: SourceDb = row.source_db.parse().map_err(|e: Error| manifest_err(e.to_string()))?;
        let severity: Severity = row.severity.parse().map_err(|e: Error| manifest_err(e.to_string()))?;
        out.insert(row.id, (source, severity));
    }
    Ok(out)
}

/// Loads every image/mask pair under `root`.
///
/// Masks are binarized (any nonzero pixel is lung). Samples absent from the
/// manifest, or all samples when there is no manifest, are tagged
/// `OWN`/`NORMAL`. When `manifest` is `None`, `<root>/manifest.csv` is used
/// if it exists.
pub fn load_dataset(root: &Path, manifest: Option<&Path>) -> Result<Dataset> {
    let images = png_stems(&root.join("images"))?;
    if images.is_empty() {
        return Err(Error::EmptyDataset(root.to_owned()));
    }
    let masks = png_stems(&root.join("masks"))?;

    let default_manifest = root.join(MANIFEST_FILE);
    let manifest_path = manifest
        .map(Path::to_path_buf)
        .or_else(|| default_manifest.is_file().then_some(default_manifest));
    let tags = match manifest_path {
        Some(p) => read_manifest(&p)?,
        None => HashMap::new(),
    };

    let mut samples = Vec::with_capacity(images.len());
    for (id, image_path) in &images {
        let mask_path = masks.get(id).ok_or_else(|| Error::MissingMask(id.clone()))?;
        let image = gray_to_array(&read_gray(image_path)?).mapv(|v| v as f32 / 255.0);
        let mask = gray_to_array(&read_gray(mask_path)?).mapv(|v| u8::from(v != 0));
        let (source, severity) = tags.get(id).copied().unwrap_or((SourceDb::Own, Severity::Normal));
        samples.push(SampleRecord::new(id.clone(), image, mask, source, severity)?);
    }
    let name = root
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_owned();
    Dataset::new(name, samples)
}

/// Writes `dataset` in the directory layout read by [`load_dataset`].
///
/// Fails if `root` already holds files, unless `force` is set.
pub fn write_dataset(dataset: &Dataset, root: &Path, force: bool) -> Result<()> {
    if root.exists() {
        let populated = fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_some();
        if populated && !force {
            return Err(Error::invalid(format!(
                "output directory {} is not empty (use --force to overwrite)",
                root.display()
            )));
        }
    }
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    for dir in [&images_dir, &masks_dir] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let manifest_path = root.join(MANIFEST_FILE);
    let mut manifest = csv::Writer::from_path(&manifest_path)?;
    for s in &dataset.samples {
        let (h, w) = s.image.dim();
        let image = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            let v = s.image[[y as usize, x as usize]].clamp(0.0, 1.0);
            Luma([(v * 255.0).round() as u8])
        });
        let mask = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([s.mask[[y as usize, x as usize]] * 255])
        });
        let image_path = images_dir.join(format!("{}.png", s.id));
        image.save(&image_path).map_err(|source| Error::Image {
            path: image_path,
            source,
        })?;
        let mask_path = masks_dir.join(format!("{}.png", s.id));
        mask.save(&mask_path).map_err(|source| Error::Image {
            path: mask_path,
            source,
        })?;
        manifest.serialize(ManifestRow {
            id: s.id.clone(),
            source_db: s.source_db.to_string(),
            severity: s.severity.to_string(),
        })?;
    }
    manifest.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        GrayImage::from_fn(w, h, |x, y| Luma([f(x, y)])).save(path).unwrap();
    }

    #[test]
    fn loads_matched_pairs_in_id_order() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["c", "a", "b"] {
            write_png(&dir.path().join(format!("images/{id}.png")), 4, 4, |x, _| x as u8 * 10);
            write_png(&dir.path().join(format!("masks/{id}.png")), 4, 4, |x, _| {
                if x > 1 {
                    255
                } else {
                    0
                }
            });
        }
        let ds = load_dataset(dir.path(), None).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.ids().collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(ds.samples[0].source_db, SourceDb::Own);
    }

    #[test]
    fn missing_mask_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("images/a.png"), 4, 4, |_, _| 0);
        fs::create_dir_all(dir.path().join("masks")).unwrap();
        let err = load_dataset(dir.path(), None).unwrap_err();
        assert_eq!(err.to_string(), "missing mask: a");
    }

    #[test]
    fn gray_mask_pixels_binarize_to_one() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("images/a.png"), 3, 3, |_, _| 50);
        write_png(&dir.path().join("masks/a.png"), 3, 3, |x, y| {
            if (x, y) == (1, 1) {
                128
            } else {
                0
            }
        });
        let ds = load_dataset(dir.path(), None).unwrap();
        let mask = &ds.samples[0].mask;
        assert_eq!(mask[[1, 1]], 1);
        assert_eq!(mask.sum(), 1);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("images/a.png"), 4, 4, |_, _| 0);
        write_png(&dir.path().join("masks/a.png"), 4, 5, |_, _| 0);
        assert!(matches!(
            load_dataset(dir.path(), None),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path(), None), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn manifest_tags_are_applied() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["a", "b"] {
            write_png(&dir.path().join(format!("images/{id}.png")), 2, 2, |_, _| 0);
            write_png(&dir.path().join(format!("masks/{id}.png")), 2, 2, |_, _| 0);
        }
        fs::write(
            dir.path().join(MANIFEST_FILE),
            "id,source_db,severity\na,JSRT,MILD\nb,OWN,SEVERE\n",
        )
        .unwrap();
        let ds = load_dataset(dir.path(), None).unwrap();
        assert_eq!(ds.samples[0].source_db, SourceDb::Jsrt);
        assert_eq!(ds.samples[0].severity, Severity::Mild);
        assert_eq!(ds.samples[1].severity, Severity::Severe);
    }
}
