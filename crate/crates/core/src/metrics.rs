//! Region similarity J, boundary accuracy F and their aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use crate::data_io::{self, MaskMap};
use crate::error::{PipelineError, Result};

/// Intersection over union; both-empty counts as a perfect 1.0.
pub fn jaccard(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(PipelineError::ShapeMismatch(format!(
            "jaccard {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// A foreground pixel is on the boundary when any 4-neighbor is background
/// or outside the image.
pub fn extract_boundary(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut b = Array2::<bool>::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y == h - 1
                || x == w - 1
                || !mask[[y - 1, x]]
                || !mask[[y + 1, x]]
                || !mask[[y, x - 1]]
                || !mask[[y, x + 1]];
            if edge {
                b[[y, x]] = true;
            }
        }
    }
    b
}

/// Default match tolerance: 0.8% of the image diagonal, rounded up.
pub fn default_boundary_tolerance(height: usize, width: usize) -> usize {
    let diag = ((height * height + width * width) as f64).sqrt();
    (0.008 * diag).ceil() as usize
}

fn dilate_disk(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let r = radius as isize;
    let r2 = (radius * radius) as isize;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r2 {
                offsets.push((dy, dx));
            }
        }
    }
    let mut out = Array2::<bool>::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            for &(dy, dx) in &offsets {
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    out[[ny as usize, nx as usize]] = true;
                }
            }
        }
    }
    out
}

/// Boundary F-measure: precision/recall of 1-pixel contours matched within
/// `tolerance` pixels (Euclidean, via disk dilation).
pub fn boundary_f(pred: &Array2<bool>, gt: &Array2<bool>, tolerance: usize) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(PipelineError::ShapeMismatch(format!(
            "boundary_f {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let bp = extract_boundary(pred);
    let bg = extract_boundary(gt);
    let np: usize = bp.iter().filter(|&&v| v).count();
    let ng: usize = bg.iter().filter(|&&v| v).count();
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let gt_zone = dilate_disk(&bg, tolerance);
    let pred_zone = dilate_disk(&bp, tolerance);
    let matched_pred = bp
        .iter()
        .zip(gt_zone.iter())
        .filter(|(&b, &z)| b && z)
        .count();
    let matched_gt = bg
        .iter()
        .zip(pred_zone.iter())
        .filter(|(&b, &z)| b && z)
        .count();
    let precision = matched_pred as f64 / np as f64;
    let recall = matched_gt as f64 / ng as f64;
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

/// Round to 4 decimals with ties-to-even, the convention used for reporting.
pub fn round4_half_even(x: f64) -> f64 {
    (x * 10000.0).round_ties_even() / 10000.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectScore {
    pub video: String,
    pub object: u32,
    pub mean_j: f64,
    pub mean_f: f64,
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub per_object: Vec<ObjectScore>,
    pub j: f64,
    pub f: f64,
    pub j_and_f: f64,
}

/// Aggregate per-object scores: global means over (video, object) pairs,
/// J&F as their exact arithmetic mean.
pub fn aggregate_scores(per_object: Vec<ObjectScore>) -> Result<MetricReport> {
    if per_object.is_empty() {
        return Err(PipelineError::InvalidInput(
            "no (video, object) pairs to aggregate".into(),
        ));
    }
    let n = per_object.len() as f64;
    let j = per_object.iter().map(|s| s.mean_j).sum::<f64>() / n;
    let f = per_object.iter().map(|s| s.mean_f).sum::<f64>() / n;
    Ok(MetricReport {
        per_object,
        j,
        f,
        j_and_f: (j + f) / 2.0,
    })
}

fn annotations_root(dir: &Path) -> std::path::PathBuf {
    let candidate = dir.join("Annotations");
    if candidate.is_dir() {
        candidate
    } else {
        dir.to_path_buf()
    }
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<String>> {
    let mut out: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| PipelineError::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(|s| s.to_string()))
        .collect();
    out.sort();
    Ok(out)
}

fn sorted_pngs(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| PipelineError::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Score a prediction tree against a ground-truth tree.
///
/// Every object is scored on all annotated frames after its first annotated
/// frame (that one is the given input). Per-frame scores are averaged per
/// object, then globally over (video, object) pairs.
pub fn evaluate(pred_dir: &Path, gt_dir: &Path) -> Result<MetricReport> {
    let gt_root = annotations_root(gt_dir);
    let pred_root = annotations_root(pred_dir);
    let videos = sorted_subdirs(&gt_root)?;
    if videos.is_empty() {
        return Err(PipelineError::EmptyDataset(gt_dir.to_path_buf()));
    }
    let results: Vec<Result<Vec<ObjectScore>>> = videos
        .par_iter()
        .map(|video| evaluate_video(&pred_root, &gt_root, video))
        .collect();
    let mut per_object = Vec::new();
    for r in results {
        per_object.extend(r?);
    }
    per_object.sort_by(|a, b| (a.video.clone(), a.object).cmp(&(b.video.clone(), b.object)));
    aggregate_scores(per_object)
}

fn evaluate_video(pred_root: &Path, gt_root: &Path, video: &str) -> Result<Vec<ObjectScore>> {
    let gt_files = sorted_pngs(&gt_root.join(video))?;
    if gt_files.is_empty() {
        return Ok(Vec::new());
    }
    let gt_masks: Vec<MaskMap> = gt_files
        .iter()
        .map(|p| data_io::load_mask(p))
        .collect::<Result<_>>()?;
    let (h, w) = (gt_masks[0].height(), gt_masks[0].width());
    let tolerance = default_boundary_tolerance(h, w);
    // First annotated frame per object.
    let mut first_seen: BTreeMap<u32, usize> = BTreeMap::new();
    for (t, m) in gt_masks.iter().enumerate() {
        for id in m.object_labels() {
            first_seen.entry(id).or_insert(t);
        }
    }
    if first_seen.is_empty() {
        return Ok(Vec::new());
    }
    // Load predictions for every frame that will be scored.
    let needed: BTreeSet<usize> = first_seen
        .values()
        .flat_map(|&t0| t0 + 1..gt_files.len())
        .collect();
    let mut preds: BTreeMap<usize, MaskMap> = BTreeMap::new();
    let mut missing = Vec::new();
    for &t in &needed {
        let stem = gt_files[t].file_stem().unwrap().to_string_lossy().to_string();
        let path = pred_root.join(video).join(format!("{stem}.png"));
        if !path.is_file() {
            missing.push(format!("{video}/{stem}.png"));
            continue;
        }
        preds.insert(t, data_io::load_mask(&path)?);
    }
    if !missing.is_empty() {
        return Err(PipelineError::MissingPrediction(missing.join(", ")));
    }
    let mut scores = Vec::new();
    for (&id, &t0) in &first_seen {
        let mut js = Vec::new();
        let mut fs = Vec::new();
        for t in t0 + 1..gt_masks.len() {
            let gt_bin = gt_masks[t].binary(id);
            let pred_bin = preds[&t].binary(id);
            js.push(jaccard(&pred_bin, &gt_bin)?);
            fs.push(boundary_f(&pred_bin, &gt_bin, tolerance)?);
        }
        if js.is_empty() {
            continue; // object only annotated on the final frame
        }
        scores.push(ObjectScore {
            video: video.to_string(),
            object: id,
            mean_j: js.iter().sum::<f64>() / js.len() as f64,
            mean_f: fs.iter().sum::<f64>() / fs.len() as f64,
        });
    }
    Ok(scores)
}

/// CSV rendering: one row per (video, object), footer with the global means.
pub fn render_csv(report: &MetricReport) -> String {
    let mut out = String::from("video,object,mean_j,mean_f\n");
    for s in &report.per_object {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4}",
            s.video,
            s.object,
            round4_half_even(s.mean_j),
            round4_half_even(s.mean_f)
        );
    }
    let _ = writeln!(
        out,
        "GLOBAL,ALL,{:.4},{:.4},{:.4}",
        round4_half_even(report.j),
        round4_half_even(report.f),
        round4_half_even(report.j_and_f)
    );
    out
}

pub fn write_csv(report: &MetricReport, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
        }
    }
    std::fs::write(path, render_csv(report)).map_err(|e| PipelineError::io(path, e))
}
