//! Detection AP, substrate AP, counting errors and report tables.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{FrameGroundTruth, SpeciesClass, SubstrateClass, SubstrateSet};
use crate::bbox::BBox;
use crate::detector::Detection;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("degenerate box {0:?}")]
    DegenerateBox(BBox),
    #[error("frame {frame} of {video} is not flagged as fully annotated in its bottom half")]
    UnflaggedFrame { video: String, frame: u32 },
    #[error("baseline must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error("score and label lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// IoU that rejects zero-area boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64, EvalError> {
    for bx in [a, b] {
        if !bx.is_valid() {
            return Err(EvalError::DegenerateBox(*bx));
        }
    }
    Ok(a.iou(b))
}

/// All-points interpolated AP from detections already ranked by score.
/// `None` when there is no ground truth.
pub fn ranked_average_precision(tp: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    // Precision envelope, then area under the step curve.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    Some(ap)
}

/// A scored box on image `image`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub image: usize,
    pub bbox: BBox,
}

/// Ranks detections by descending score and marks each as a true positive
/// if its best-overlapping ground truth on the same image reaches
/// `iou_thresh` and has not been claimed by a higher-ranked detection.
pub fn match_detections(dets: &[ScoredBox], gts: &[GtBox], iou_thresh: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut by_image: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image).or_default().push(i);
    }
    let mut claimed = vec![false; gts.len()];
    order
        .into_iter()
        .map(|d| {
            let det = &dets[d];
            let mut best = (-1.0, usize::MAX);
            for &g in by_image.get(&det.image).map(Vec::as_slice).unwrap_or(&[]) {
                let o = det.bbox.iou(&gts[g].bbox);
                if o > best.0 {
                    best = (o, g);
                }
            }
            if best.0 >= iou_thresh && !claimed[best.1] {
                claimed[best.1] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

/// Single-class AP at `iou_thresh`; `None` without ground truth.
pub fn average_precision(dets: &[ScoredBox], gts: &[GtBox], iou_thresh: f64) -> Option<f64> {
    ranked_average_precision(&match_detections(dets, gts, iou_thresh), gts.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEval {
    pub per_class_ap: BTreeMap<SpeciesClass, f64>,
    pub map50: f64,
    /// Detections dropped for lying entirely above the midline.
    pub discarded_top_half: usize,
    /// Ground-truth boxes crossing the midline, kept whole.
    pub straddling_gt: usize,
}

/// mAP@0.5 over fully annotated frames, ignoring detections entirely above
/// the horizontal midline. Detections on frames not listed are ignored.
pub fn map_bottom_half(
    detections: &[Detection],
    frames: &[FrameGroundTruth],
    frame_height: f64,
) -> Result<DetectionEval, EvalError> {
    let mid = frame_height / 2.0;
    let mut index: HashMap<(&str, u32), usize> = HashMap::new();
    for (i, f) in frames.iter().enumerate() {
        if !f.fully_annotated_bottom_half {
            return Err(EvalError::UnflaggedFrame { video: f.video_id.clone(), frame: f.frame });
        }
        index.insert((f.video_id.as_str(), f.frame), i);
    }
    let mut dets: BTreeMap<SpeciesClass, Vec<ScoredBox>> = BTreeMap::new();
    let mut gts: BTreeMap<SpeciesClass, Vec<GtBox>> = BTreeMap::new();
    let mut discarded = 0;
    let mut straddling = 0;
    for (i, f) in frames.iter().enumerate() {
        for b in &f.boxes {
            if b.bbox.y1 < mid && b.bbox.y2 >= mid {
                straddling += 1;
            }
            gts.entry(b.species).or_default().push(GtBox { image: i, bbox: b.bbox });
        }
    }
    for d in detections {
        let Some(&i) = index.get(&(d.video_id.as_str(), d.frame)) else { continue };
        if d.bbox.y2 < mid {
            discarded += 1;
            continue;
        }
        dets.entry(d.species).or_default().push(ScoredBox { image: i, bbox: d.bbox, score: d.score });
    }
    let mut per_class_ap = BTreeMap::new();
    for (sp, g) in &gts {
        let d = dets.get(sp).map(Vec::as_slice).unwrap_or(&[]);
        if let Some(ap) = average_precision(d, g, 0.5) {
            per_class_ap.insert(*sp, ap);
        }
    }
    let map50 = mean(per_class_ap.values().copied()).unwrap_or(0.0);
    Ok(DetectionEval { per_class_ap, map50, discarded_top_half: discarded, straddling_gt: straddling })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Per-substrate AP of multi-label frame scores; classes without any
/// positive frame are left out.
pub fn substrate_average_precision(
    scores: &[[f64; 4]],
    labels: &[SubstrateSet],
) -> Result<BTreeMap<SubstrateClass, f64>, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let mut out = BTreeMap::new();
    for s in SubstrateClass::ALL {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b][s.index()].total_cmp(&scores[a][s.index()]));
        let tp: Vec<bool> = order.iter().map(|&i| labels[i].contains(s)).collect();
        let n_pos = labels.iter().filter(|l| l.contains(s)).count();
        if let Some(ap) = ranked_average_precision(&tp, n_pos) {
            out.insert(s, ap);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountingErrors {
    /// Signed `(pred - gt) / gt`; positive means over-counting.
    pub per_species: BTreeMap<SpeciesClass, f64>,
    /// Species with no ground-truth individuals.
    pub excluded: Vec<SpeciesClass>,
    pub mean_abs: f64,
}

pub fn relative_errors(pred: &[u64; 10], gt: &[u64; 10]) -> CountingErrors {
    let mut per_species = BTreeMap::new();
    let mut excluded = Vec::new();
    for sp in SpeciesClass::ALL {
        let g = gt[sp.index()];
        if g == 0 {
            excluded.push(sp);
        } else {
            per_species.insert(sp, (pred[sp.index()] as f64 - g as f64) / g as f64);
        }
    }
    let mean_abs = mean_abs_error(per_species.values().copied());
    CountingErrors { per_species, excluded, mean_abs }
}

/// Mean of absolute values; 0 for an empty input.
pub fn mean_abs_error(errors: impl IntoIterator<Item = f64>) -> f64 {
    mean(errors.into_iter().map(f64::abs)).unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub name: String,
    pub value: f64,
    /// Fractional gain over the baseline.
    pub gain: f64,
}

pub fn improvement_report(baseline: f64, variants: &[(String, f64)]) -> Result<Vec<Improvement>, EvalError> {
    if !(baseline > 0.0) {
        return Err(EvalError::NonPositiveBaseline(baseline));
    }
    Ok(variants
        .iter()
        .map(|(name, v)| Improvement { name: name.clone(), value: *v, gain: (v - baseline) / baseline })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_ap: BTreeMap<SpeciesClass, f64>,
    pub map50: f64,
    pub substrate_ap: BTreeMap<SubstrateClass, f64>,
    pub counting: BTreeMap<SpeciesClass, f64>,
    pub mean_abs_error: f64,
}

impl EvalReport {
    pub fn with_detection(mut self, d: &DetectionEval) -> Self {
        self.per_class_ap = d.per_class_ap.clone();
        self.map50 = d.map50;
        self
    }

    pub fn with_counting(mut self, c: &CountingErrors) -> Self {
        self.counting = c.per_species.clone();
        self.mean_abs_error = c.mean_abs;
        self
    }

    pub fn substrate_map(&self) -> Option<f64> {
        mean(self.substrate_ap.values().copied())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "AP interpolation: all points, IoU 0.5");
        if !self.per_class_ap.is_empty() {
            let _ = writeln!(s, "mAP@0.5: {:.3}", self.map50);
            for (sp, ap) in &self.per_class_ap {
                let _ = writeln!(s, "  {:<6} AP {:.3}", sp.abbrev(), ap);
            }
        }
        if let Some(m) = self.substrate_map() {
            let _ = writeln!(s, "substrate mAP: {m:.3}");
            for (sub, ap) in &self.substrate_ap {
                let _ = writeln!(s, "  {:<8} AP {:.3}", sub.name(), ap);
            }
        }
        if !self.counting.is_empty() {
            let _ = writeln!(s, "mean |relative count error|: {:.3}", self.mean_abs_error);
            for (sp, e) in &self.counting {
                let _ = writeln!(s, "  {:<6} {:+.3}", sp.abbrev(), e);
            }
        }
        s
    }
}

fn fmt_opt(v: Option<&f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_default()
}

/// Per-class AP table: one row per model, species columns, then mAP.
pub fn per_class_ap_table(rows: &[(String, EvalReport)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["model".to_string()];
    header.extend(SpeciesClass::ALL.iter().map(|s| s.abbrev().to_string()));
    header.push("mAP".into());
    w.write_record(&header).expect("in-memory write");
    for (name, r) in rows {
        let mut rec = vec![name.clone()];
        rec.extend(SpeciesClass::ALL.iter().map(|s| fmt_opt(r.per_class_ap.get(s))));
        rec.push(format!("{:.3}", r.map50));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Substrate AP table: one row per model, B/C/M/R columns, then mAP.
pub fn substrate_ap_table(rows: &[(String, EvalReport)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["model".to_string()];
    header.extend(SubstrateClass::ALL.iter().map(|s| s.name().to_string()));
    header.push("mAP".into());
    w.write_record(&header).expect("in-memory write");
    for (name, r) in rows {
        let mut rec = vec![name.clone()];
        rec.extend(SubstrateClass::ALL.iter().map(|s| fmt_opt(r.substrate_ap.get(s))));
        rec.push(r.substrate_map().map(|m| format!("{m:.3}")).unwrap_or_default());
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Counting-error table keyed by `(gamma, tau)`.
pub fn counting_error_table(rows: &[(u32, f64, CountingErrors)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["gamma".to_string(), "tau".to_string()];
    header.extend(SpeciesClass::ALL.iter().map(|s| s.abbrev().to_string()));
    header.push("mean".into());
    w.write_record(&header).expect("in-memory write");
    for (gamma, tau, e) in rows {
        let mut rec = vec![gamma.to_string(), format!("{tau}")];
        rec.extend(SpeciesClass::ALL.iter().map(|s| fmt_opt(e.per_species.get(s))));
        rec.push(format!("{:.3}", e.mean_abs));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Horizontal-axis bar chart of values in `[0, 1]`, one bar per entry.
pub fn bar_chart(values: &[f64]) -> RgbImage {
    let bar_w = 24u32;
    let gap = 8u32;
    let h = 200u32;
    let w = (values.len() as u32 * (bar_w + gap) + gap).max(gap * 2);
    let mut img = RgbImage::from_pixel(w, h + 20, Rgb([255, 255, 255]));
    for x in 0..w {
        img.put_pixel(x, h, Rgb([0, 0, 0]));
    }
    for (i, v) in values.iter().enumerate() {
        let bh = (v.clamp(0.0, 1.0) * f64::from(h - 10)).round() as u32;
        let x0 = gap + i as u32 * (bar_w + gap);
        for y in h - bh..h {
            for x in x0..x0 + bar_w {
                img.put_pixel(x, y, Rgb([60, 110, 180]));
            }
        }
    }
    img
}
