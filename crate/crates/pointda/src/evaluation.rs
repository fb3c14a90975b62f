//! Prediction-map post-processing, the counting error protocol and
//! qualitative artifacts.
//!
//! "MSE" follows the crowd-counting convention: it is the *root*
//! mean-squared count error, so `mae <= mse` always holds. Point extraction
//! keeps every slot whose foreground probability clears the threshold; the
//! one-to-one training already suppresses duplicates, so there is no NMS.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::geometry::{decode_points, AnchorGrid, PointSet};
use crate::losses::{entropy_loss, entropy_map};
use crate::network::{MainNetwork, PredictionMaps};

#[derive(Debug, Clone)]
pub struct PerImageRecord {
    pub id: String,
    pub gt_count: usize,
    pub pred_count: usize,
    pub confidence_mean: f64,
}

/// Counting errors over one evaluation split.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub dataset: String,
    pub split: String,
    pub n_images: usize,
    pub mae: f64,
    /// Root-mean-squared count error.
    pub mse: f64,
    pub mean_entropy: f64,
    pub per_image: Vec<PerImageRecord>,
}

pub const METRICS_CSV_HEADER: &str = "dataset,split,step,n_images,mae,mse,mean_entropy";
pub const PER_IMAGE_CSV_HEADER: &str = "id,gt_count,pred_count,confidence_mean";

impl MetricsRecord {
    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.dataset, self.split, step, self.n_images, self.mae, self.mse, self.mean_entropy
        )
    }

    pub fn write_per_image_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from(PER_IMAGE_CSV_HEADER);
        text.push('\n');
        for row in &self.per_image {
            text.push_str(&format!(
                "{},{},{},{}\n",
                row.id, row.gt_count, row.pred_count, row.confidence_mean
            ));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// All slots whose foreground probability reaches `threshold`, decoded into
/// image coordinates with their confidences attached.
pub fn extract_points(
    maps: &PredictionMaps,
    grid: &AnchorGrid,
    threshold: f64,
) -> Result<PointSet> {
    if !(0.0..1.0).contains(&threshold) || threshold == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let decoded = decode_points(&maps.offsets, grid)?;
    let mut points = Vec::new();
    let mut confidences = Vec::new();
    for i in 0..grid.feat_w {
        for j in 0..grid.feat_h {
            for k in 0..grid.slots_per_cell {
                let conf = maps.cls.probs[[i, j, k, 0]];
                if conf >= threshold {
                    points.push([decoded[[i, j, k, 0]], decoded[[i, j, k, 1]]]);
                    confidences.push(conf.clamp(0.0, 1.0));
                }
            }
        }
    }
    PointSet::with_confidences(points, confidences)
}

/// `(mae, rmse)` over paired per-image counts.
pub fn count_metrics(pred_counts: &[usize], gt_counts: &[usize]) -> Result<(f64, f64)> {
    if pred_counts.is_empty() || pred_counts.len() != gt_counts.len() {
        return Err(Error::InvalidArgument(format!(
            "need equal-length non-empty count lists, got {} and {}",
            pred_counts.len(),
            gt_counts.len()
        )));
    }
    let n = pred_counts.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (&p, &g) in pred_counts.iter().zip(gt_counts) {
        let d = p as f64 - g as f64;
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

/// Runs the model over a labeled split and aggregates counting metrics and
/// the mean per-image entropy.
pub fn evaluate(
    net: &MainNetwork,
    samples: &[Sample],
    threshold: f64,
    dataset: &str,
    split: &str,
) -> Result<MetricsRecord> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation split".into()));
    }
    let mut per_image = Vec::with_capacity(samples.len());
    let mut pred_counts = Vec::with_capacity(samples.len());
    let mut gt_counts = Vec::with_capacity(samples.len());
    let mut entropy_sum = 0.0;
    for sample in samples {
        let gt = sample.points.as_ref().ok_or_else(|| {
            Error::MissingLabels(format!(
                "sample {} in split {split} has no labels; evaluation needs a labeled split",
                sample.id
            ))
        })?;
        let maps = net.infer(&sample.image)?;
        let grid = net.grid_for(sample.width(), sample.height())?;
        let extracted = extract_points(&maps, &grid, threshold)?;
        entropy_sum += entropy_loss(&maps.cls);
        let confidence_mean = extracted
            .confidences
            .as_ref()
            .filter(|c| !c.is_empty())
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .unwrap_or(0.0);
        pred_counts.push(extracted.len());
        gt_counts.push(gt.len());
        per_image.push(PerImageRecord {
            id: sample.id.clone(),
            gt_count: gt.len(),
            pred_count: extracted.len(),
            confidence_mean,
        });
    }
    let (mae, mse) = count_metrics(&pred_counts, &gt_counts)?;
    Ok(MetricsRecord {
        dataset: dataset.into(),
        split: split.into(),
        n_images: samples.len(),
        mae,
        mse,
        mean_entropy: entropy_sum / samples.len() as f64,
        per_image,
    })
}

fn draw_cross(img: &mut RgbImage, x: f64, y: f64, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let cx = x.round() as i64;
    let cy = y.round() as i64;
    for d in -1..=1i64 {
        for (px, py) in [(cx + d, cy), (cx, cy + d)] {
            if px >= 0 && px < w && py >= 0 && py < h {
                img.put_pixel(px as u32, py as u32, image::Rgb(color));
            }
        }
    }
}

/// Writes `<id>_overlay.png` (predictions in red, ground truth in green) and
/// `<id>_entropy.png` (per-window entropy, max-reduced over slots, upscaled
/// by the stride, 0..255 mapping entropy 0..1 linearly).
pub fn render_artifacts(
    net: &MainNetwork,
    sample: &Sample,
    threshold: f64,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let maps = net.infer(&sample.image)?;
    let grid = net.grid_for(sample.width(), sample.height())?;
    let extracted = extract_points(&maps, &grid, threshold)?;

    let (w, h) = (sample.width(), sample.height());
    let mut overlay = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (sample.image[[0, y, x]] * 255.0).round() as u8,
                (sample.image[[1, y, x]] * 255.0).round() as u8,
                (sample.image[[2, y, x]] * 255.0).round() as u8,
            ];
            overlay.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    if let Some(gt) = &sample.points {
        for p in &gt.points {
            draw_cross(&mut overlay, p[0], p[1], [0, 255, 0]);
        }
    }
    for p in &extracted.points {
        draw_cross(&mut overlay, p[0], p[1], [255, 0, 0]);
    }
    let overlay_path = out_dir.join(format!("{}_overlay.png", sample.id));
    overlay
        .save(&overlay_path)
        .map_err(|e| Error::io(&overlay_path, std::io::Error::other(e)))?;

    // Max over the slot axis: worst-case uncertainty per window.
    let entropy = entropy_map(&maps.cls);
    let s = grid.stride;
    let mut heat = RgbImage::new((grid.feat_w * s) as u32, (grid.feat_h * s) as u32);
    for i in 0..grid.feat_w {
        for j in 0..grid.feat_h {
            let mut e: f64 = 0.0;
            for k in 0..grid.slots_per_cell {
                e = e.max(entropy.values[[i, j, k]]);
            }
            let byte = (e.clamp(0.0, 1.0) * 255.0).round() as u8;
            for dy in 0..s {
                for dx in 0..s {
                    heat.put_pixel(
                        (i * s + dx) as u32,
                        (j * s + dy) as u32,
                        image::Rgb([byte, byte, byte]),
                    );
                }
            }
        }
    }
    let entropy_path = out_dir.join(format!("{}_entropy.png", sample.id));
    heat.save(&entropy_path)
        .map_err(|e| Error::io(&entropy_path, std::io::Error::other(e)))?;
    Ok((overlay_path, entropy_path))
}
