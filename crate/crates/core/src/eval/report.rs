use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::evaluate::MeanMetrics;
use crate::error::{Error, Result};
use crate::hpo::TrialRecord;

/// Number of leading trials in the best-trials list before boundary ties.
pub const BEST_TRIALS: usize = 3;

/// Mean metrics of one model on one database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedEvaluation {
    pub model: String,
    pub database: String,
    pub mean: MeanMetrics,
    pub images: usize,
    pub threshold: f64,
}

/// Paths of everything [`render_report`] wrote.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportFiles {
    pub table_txt: Option<PathBuf>,
    pub table_csv: Option<PathBuf>,
    pub best_txt: Option<PathBuf>,
    pub best_csv: Option<PathBuf>,
    pub plot_png: Option<PathBuf>,
    pub plot_csv: Option<PathBuf>,
}

impl ReportFiles {
    pub fn all(&self) -> Vec<&Path> {
        [
            &self.table_txt,
            &self.table_csv,
            &self.best_txt,
            &self.best_csv,
            &self.plot_png,
            &self.plot_csv,
        ]
        .into_iter()
        .flatten()
        .map(PathBuf::as_path)
        .collect()
    }
}

fn pad_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c + 1 == r.len() {
                    s.clone()
                } else {
                    format!("{s:<w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Model × database grid of DSC, JI, SE and SP to 3 decimals, with a footer
/// describing how the means were formed.
pub fn format_metrics_table(evaluations: &[NamedEvaluation]) -> String {
    let mut rows = vec![["Model", "Database", "DSC", "JI", "SE", "SP"]
        .map(String::from)
        .to_vec()];
    for e in evaluations {
        let m = &e.mean;
        rows.push(vec![
            e.model.clone(),
            e.database.clone(),
            format!("{:.3}", m.dsc),
            format!("{:.3}", m.ji),
            format!("{:.3}", m.se),
            format!("{:.3}", m.sp),
        ]);
    }
    let mut out = pad_table(&rows);
    let thresholds: Vec<String> = {
        let mut t: Vec<String> = evaluations.iter().map(|e| format!("{}", e.threshold)).collect();
        t.dedup();
        t
    };
    let _ = writeln!(
        out,
        "\nValues are unweighted means of per-image metrics; a pixel is foreground when its probability is >= {}.",
        thresholds.join("/")
    );
    out
}

pub fn metrics_table_csv(evaluations: &[NamedEvaluation]) -> String {
    let mut out = String::from("model,database,images,threshold,dsc,ji,se,sp\n");
    for e in evaluations {
        let m = &e.mean;
        let _ = writeln!(
            out,
            "{},{},{},{},{:.3},{:.3},{:.3},{:.3}",
            csv_field(&e.model),
            csv_field(&e.database),
            e.images,
            e.threshold,
            m.dsc,
            m.ji,
            m.se,
            m.sp
        );
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// The `k` lowest-loss COMPLETE trials, plus any trials tied with the k-th.
/// Ordered by loss, then trial number.
pub fn best_trials(records: &[TrialRecord], k: usize) -> Vec<&TrialRecord> {
    let mut sorted: Vec<&TrialRecord> = records.iter().filter(|r| r.is_complete()).collect();
    sorted.sort_by(|a, b| a.loss.total_cmp(&b.loss).then(a.trial.cmp(&b.trial)));
    if sorted.len() > k && k > 0 {
        let cutoff = sorted[k - 1].loss;
        let keep = k + sorted[k..].iter().take_while(|r| r.loss == cutoff).count();
        sorted.truncate(keep);
    } else if k == 0 {
        sorted.clear();
    }
    sorted
}

pub fn format_best_trials(records: &[TrialRecord], k: usize) -> String {
    let mut rows = vec![["Rank", "Trial", "Loss", "Hyperparameters"].map(String::from).to_vec()];
    for (i, r) in best_trials(records, k).iter().enumerate() {
        rows.push(vec![
            (i + 1).to_string(),
            r.trial.to_string(),
            format!("{:.4}", r.loss),
            r.hp.to_string(),
        ]);
    }
    pad_table(&rows)
}

fn best_trials_csv(records: &[TrialRecord], k: usize) -> String {
    let mut out = String::from("rank,trial,loss,hyperparameters\n");
    for (i, r) in best_trials(records, k).iter().enumerate() {
        let _ = writeln!(out, "{},{},{:.4},\"{}\"", i + 1, r.trial, r.loss, r.hp);
    }
    out
}

fn loss_curve_csv(records: &[TrialRecord]) -> String {
    let mut out = String::from("trial,loss,state,best_so_far\n");
    let mut best = f64::INFINITY;
    for r in records {
        if r.is_complete() {
            best = best.min(r.loss);
        }
        let b = if best.is_finite() {
            format!("{best:.4}")
        } else {
            String::new()
        };
        let _ = writeln!(out, "{},{:.4},{},{}", r.trial, r.loss, r.state, b);
    }
    out
}

/// 3×5 glyphs for digits and the decimal point, one row per 3-bit mask.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        _ => return None,
    })
}

struct Canvas {
    img: RgbImage,
}

const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const POINT: Rgb<u8> = Rgb([200, 40, 40]);
const FAILED: Rgb<u8> = Rgb([150, 150, 150]);
const BEST: Rgb<u8> = Rgb([30, 80, 200]);

impl Canvas {
    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn text(&mut self, s: &str, x: i64, y: i64, scale: i64) {
        for (i, ch) in s.chars().enumerate() {
            let Some(rows) = glyph(ch) else { continue };
            for (ry, bits) in rows.iter().enumerate() {
                for rx in 0..3 {
                    if bits >> (2 - rx) & 1 == 1 {
                        for sy in 0..scale {
                            for sx in 0..scale {
                                self.put(x + (i as i64 * 4 + rx) * scale + sx, y + ry as i64 * scale + sy, BLACK);
                            }
                        }
                    }
                }
            }
        }
    }

    fn text_width(s: &str, scale: i64) -> i64 {
        (s.chars().count() as i64 * 4 - 1) * scale
    }
}

/// Loss-vs-trial scatter with the best-so-far curve. Failed trials are grey
/// crosses.
pub fn plot_loss_curve(records: &[TrialRecord], width: u32, height: u32) -> Result<RgbImage> {
    if records.is_empty() {
        return Err(Error::invalid("cannot plot an empty ledger"));
    }
    let mut c = Canvas {
        img: RgbImage::from_pixel(width, height, Rgb([255, 255, 255])),
    };
    let (left, right, top, bottom) = (56i64, width as i64 - 16, 16i64, height as i64 - 36);
    let max_trial = records.iter().map(|r| r.trial).max().unwrap_or(1).max(2) as f64;
    let max_loss = records.iter().map(|r| r.loss).fold(0.0f64, f64::max);
    let y_top = ((max_loss * 10.0).ceil() / 10.0).max(0.1);
    let px = |t: f64| left + ((t - 1.0) / (max_trial - 1.0) * (right - left) as f64).round() as i64;
    let py = |l: f64| bottom - (l / y_top * (bottom - top) as f64).round() as i64;

    let y_ticks = 5;
    for i in 0..=y_ticks {
        let v = y_top * i as f64 / y_ticks as f64;
        let y = py(v);
        c.line((left, y), (right, y), GRID);
        c.line((left - 4, y), (left, y), BLACK);
        let label = format!("{v:.2}");
        c.text(&label, left - 8 - Canvas::text_width(&label, 2), y - 5, 2);
    }
    let step = [1u32, 2, 5, 10, 20, 25, 50, 100, 200, 500, 1000]
        .into_iter()
        .find(|s| max_trial / *s as f64 <= 10.0)
        .unwrap_or(1000);
    let mut t = 0u32;
    while (t as f64) <= max_trial {
        if t >= 1 {
            let x = px(t as f64);
            c.line((x, bottom), (x, bottom + 4), BLACK);
            let label = t.to_string();
            c.text(&label, x - Canvas::text_width(&label, 2) / 2, bottom + 10, 2);
        }
        t += step;
    }
    c.line((left, top), (left, bottom), BLACK);
    c.line((left, bottom), (right, bottom), BLACK);

    let mut best: Option<(i64, i64)> = None;
    let mut best_loss = f64::INFINITY;
    for r in records {
        let (x, y) = (px(r.trial as f64), py(r.loss));
        if r.is_complete() {
            for dy in -2..=2 {
                for dx in -2..=2 {
                    c.put(x + dx, y + dy, POINT);
                }
            }
            if r.loss < best_loss {
                let ny = py(r.loss);
                if let Some((bx, by)) = best {
                    c.line((bx, by), (x, by), BEST);
                    c.line((x, by), (x, ny), BEST);
                }
                best_loss = r.loss;
            }
            best = Some((x, py(best_loss)));
        } else {
            c.line((x - 3, y - 3), (x + 3, y + 3), FAILED);
            c.line((x - 3, y + 3), (x + 3, y - 3), FAILED);
        }
    }
    if let Some((bx, by)) = best {
        c.line((bx, by), (px(max_trial), by), BEST);
    }
    Ok(c.img)
}

fn sanitize(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    if s.is_empty() {
        "report".into()
    } else {
        s
    }
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes the metrics grid (text and CSV), the best-trials list and the loss
/// plot (PNG and CSV) into `out_dir`, named `<name>_<local timestamp>_*`.
pub fn render_report(
    evaluations: &[NamedEvaluation],
    ledger: Option<&[TrialRecord]>,
    out_dir: &Path,
    name: &str,
) -> Result<ReportFiles> {
    let stem = format!("{}_{}", sanitize(name), chrono::Local::now().format("%Y%m%d-%H%M%S"));
    render_report_with_stem(evaluations, ledger, out_dir, &stem)
}

/// [`render_report`] with an explicit file-name stem.
pub fn render_report_with_stem(
    evaluations: &[NamedEvaluation],
    ledger: Option<&[TrialRecord]>,
    out_dir: &Path,
    stem: &str,
) -> Result<ReportFiles> {
    let ledger = ledger.filter(|l| !l.is_empty());
    if evaluations.is_empty() && ledger.is_none() {
        return Err(Error::invalid(
            "report needs at least one evaluation or a non-empty ledger",
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = ReportFiles::default();
    if !evaluations.is_empty() {
        files.table_txt = Some(write(
            out_dir.join(format!("{stem}_metrics.txt")),
            &format_metrics_table(evaluations),
        )?);
        files.table_csv = Some(write(
            out_dir.join(format!("{stem}_metrics.csv")),
            &metrics_table_csv(evaluations),
        )?);
    }
    if let Some(records) = ledger {
        files.best_txt = Some(write(
            out_dir.join(format!("{stem}_best_trials.txt")),
            &format_best_trials(records, BEST_TRIALS),
        )?);
        files.best_csv = Some(write(
            out_dir.join(format!("{stem}_best_trials.csv")),
            &best_trials_csv(records, BEST_TRIALS),
        )?);
        files.plot_csv = Some(write(
            out_dir.join(format!("{stem}_loss_curve.csv")),
            &loss_curve_csv(records),
        )?);
        let png = out_dir.join(format!("{stem}_loss_curve.png"));
        plot_loss_curve(records, 800, 450)?
            .save(&png)
            .map_err(|e| Error::Image {
                path: png.clone(),
                source: e,
            })?;
        files.plot_png = Some(png);
    }
    Ok(files)
}
