//! Multi-object tracking and bottom-contact counting.
//!
//! Per-species BYTE-style trackers: a constant-velocity Kalman filter in
//! (cx, cy, aspect, height) space, a high-score association stage, a
//! low-score recovery stage, and optimal assignment on IoU.

use std::collections::BTreeMap;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::SpeciesClass;
use crate::bbox::BBox;
use crate::detector::Detection;

type Vec8 = SVector<f64, 8>;
type Mat8 = SMatrix<f64, 8, 8>;
type Mat4 = SMatrix<f64, 4, 4>;
type Mat48 = SMatrix<f64, 4, 8>;

const MIN_HEIGHT: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum TrackerError {
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("detection stream for video {video} goes back from frame {prev} to {next}")]
    UnsortedStream { video: String, prev: u32, next: u32 },
    #[error("tracker for {expected} received a {got} detection")]
    MixedSpecies { expected: SpeciesClass, got: SpeciesClass },
    #[error("invalid pipeline parameters: {0}")]
    InvalidParams(String),
}

/// Noise scales relative to box height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KalmanParams {
    pub std_position: f64,
    pub std_velocity: f64,
    pub std_aspect: f64,
    pub std_aspect_velocity: f64,
    pub std_aspect_measurement: f64,
}

impl Default for KalmanParams {
    fn default() -> Self {
        Self {
            std_position: 1.0 / 20.0,
            std_velocity: 1.0 / 160.0,
            // Entering objects are clipped, so aspect moves fast at first.
            std_aspect: 1e-1,
            std_aspect_velocity: 1e-5,
            std_aspect_measurement: 1e-1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    /// cx, cy, w/h, h, then their per-frame velocities.
    pub mean: Vec8,
    pub covariance: Mat8,
}

fn to_measurement(b: &BBox) -> SVector<f64, 4> {
    let (cx, cy) = b.center();
    let h = b.height().max(MIN_HEIGHT);
    SVector::<f64, 4>::new(cx, cy, b.width() / h, h)
}

fn diag8(v: [f64; 8]) -> Mat8 {
    Mat8::from_diagonal(&Vec8::from_iterator(v.iter().map(|s| s * s)))
}

fn transition() -> Mat8 {
    let mut f = Mat8::identity();
    for i in 0..4 {
        f[(i, i + 4)] = 1.0;
    }
    f
}

fn observation() -> Mat48 {
    let mut h = Mat48::zeros();
    for i in 0..4 {
        h[(i, i)] = 1.0;
    }
    h
}

fn symmetrize(p: &mut Mat8) {
    *p = (*p + p.transpose()) * 0.5;
}

impl KalmanState {
    pub fn initiate(b: &BBox, kp: &KalmanParams) -> Self {
        let z = to_measurement(b);
        let mut mean = Vec8::zeros();
        mean.fixed_rows_mut::<4>(0).copy_from(&z);
        let h = z[3];
        let (p, v) = (kp.std_position * h, kp.std_velocity * h);
        let covariance = diag8([2.0 * p, 2.0 * p, kp.std_aspect, 2.0 * p, 10.0 * v, 10.0 * v, kp.std_aspect_velocity, 10.0 * v]);
        Self { mean, covariance }
    }

    pub fn to_bbox(&self) -> BBox {
        let (cx, cy, a, h) = (self.mean[0], self.mean[1], self.mean[2], self.mean[3]);
        let w = a * h;
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (self.covariance - self.covariance.transpose()).amax() <= tol
    }
}

/// Process noise for the current height.
pub fn process_noise(h: f64, kp: &KalmanParams) -> Mat8 {
    let (p, v) = (kp.std_position * h, kp.std_velocity * h);
    diag8([p, p, kp.std_aspect, p, v, v, kp.std_aspect_velocity, v])
}

/// Measurement noise for the current height.
pub fn measurement_noise(h: f64, kp: &KalmanParams) -> Mat4 {
    let p = kp.std_position * h;
    Mat4::from_diagonal(&SVector::<f64, 4>::new(p * p, p * p, kp.std_aspect_measurement.powi(2), p * p))
}

pub fn kalman_predict(state: &KalmanState, kp: &KalmanParams) -> KalmanState {
    let f = transition();
    let q = process_noise(state.mean[3], kp);
    let mean = f * state.mean;
    let mut covariance = f * state.covariance * f.transpose() + q;
    symmetrize(&mut covariance);
    KalmanState { mean, covariance }
}

pub fn kalman_update(state: &KalmanState, measured: &BBox, kp: &KalmanParams) -> Result<KalmanState, TrackerError> {
    let h = observation();
    let z = to_measurement(measured);
    let s = h * state.covariance * h.transpose() + measurement_noise(state.mean[3], kp);
    let chol = s.cholesky().ok_or(TrackerError::SingularInnovation)?;
    // K = P Hᵀ S⁻¹, solved as S Kᵀ = H P.
    let pht = state.covariance * h.transpose();
    let gain = chol.solve(&pht.transpose()).transpose();
    let innovation = z - h * state.mean;
    let mut mean = state.mean + gain * innovation;
    if !(mean[3] > 0.0) {
        mean[3] = MIN_HEIGHT;
    }
    let mut covariance = state.covariance - gain * s * gain.transpose();
    symmetrize(&mut covariance);
    Ok(KalmanState { mean, covariance })
}

/// Maximum-weight assignment on a rectangular matrix (`weights[row][col]`).
/// Returns `col_for_row`; rows left unassigned when there are more rows than
/// columns get `None`. Equal-weight alternatives resolve towards lower
/// indices.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let n = weights.len();
    let m = weights.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return vec![None; n];
    }
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| weights[i][j]).collect()).collect();
        let by_col = max_weight_assignment(&t);
        let mut out = vec![None; n];
        for (j, i) in by_col.into_iter().enumerate() {
            if let Some(i) = i {
                out[i] = Some(j);
            }
        }
        return out;
    }
    // Shortest augmenting paths on cost = -weight with potentials, n <= m.
    let cost = |i: usize, j: usize| -weights[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Pairs `(row, col)` from the optimal assignment whose IoU clears `gate`.
fn gated_matches(iou: &[Vec<f64>], gate: f64) -> Vec<(usize, usize)> {
    let weights: Vec<Vec<f64>> = iou.iter().map(|r| r.iter().map(|&x| if x >= gate { x } else { 0.0 }).collect()).collect();
    max_weight_assignment(&weights)
        .into_iter()
        .enumerate()
        .filter_map(|(i, j)| j.filter(|&j| iou[i][j] >= gate).map(|j| (i, j)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackStatus {
    Tentative,
    Active,
    Lost,
    Removed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub video_id: String,
    pub track_id: u32,
    pub species: SpeciesClass,
    pub state: KalmanState,
    /// `(frame, detection box, score)` in increasing frame order.
    pub history: Vec<(u32, BBox, f64)>,
    pub status: TrackStatus,
    pub counted: bool,
}

impl Track {
    pub fn last_frame(&self) -> u32 {
        self.history.last().map_or(0, |h| h.0)
    }

    pub fn touches_bottom(&self, frame_height: u32) -> bool {
        let bottom = f64::from(frame_height) - 1.0;
        self.history.iter().any(|(_, b, _)| b.y2 >= bottom)
    }

    pub fn record(&self) -> TrackRecord {
        TrackRecord {
            video_id: self.video_id.clone(),
            species: self.species,
            track_id: self.track_id,
            frames: self.history.iter().map(|h| h.0).collect(),
            boxes: self.history.iter().map(|(_, b, _)| [b.x1, b.y1, b.x2, b.y2]).collect(),
            counted: self.counted,
        }
    }
}

/// One line of the track dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    #[serde(rename = "video")]
    pub video_id: String,
    pub species: SpeciesClass,
    pub track_id: u32,
    pub frames: Vec<u32>,
    pub boxes: Vec<[f64; 4]>,
    pub counted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    /// Only detections scoring strictly above this reach the tracker.
    pub tau: f64,
    /// Tracks with fewer detections are discarded.
    pub gamma: usize,
    pub high_thresh: f64,
    pub match_iou_high: f64,
    pub match_iou_low: f64,
    pub max_lost: u32,
    pub kalman: KalmanParams,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            tau: 0.0,
            gamma: 0,
            high_thresh: 0.6,
            match_iou_high: 0.2,
            match_iou_low: 0.5,
            max_lost: 30,
            kalman: KalmanParams::default(),
        }
    }
}

impl PipelineParams {
    pub fn with_filters(tau: f64, gamma: usize) -> Self {
        Self { tau, gamma, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrackerError> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(TrackerError::InvalidParams(format!("tau {} outside [0, 1]", self.tau)));
        }
        for (name, x) in [("high_thresh", self.high_thresh), ("match_iou_high", self.match_iou_high), ("match_iou_low", self.match_iou_low)] {
            if !(0.0..=1.0).contains(&x) {
                return Err(TrackerError::InvalidParams(format!("{name} {x} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Detections ordered by score, then coordinates, so that association does
/// not depend on input order.
fn canonical_order(dets: &mut [(BBox, f64)]) {
    dets.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then(a.0.x1.total_cmp(&b.0.x1))
            .then(a.0.y1.total_cmp(&b.0.y1))
            .then(a.0.x2.total_cmp(&b.0.x2))
            .then(a.0.y2.total_cmp(&b.0.y2))
    });
}

/// Tracker for one species of one video.
#[derive(Debug, Clone)]
pub struct ByteTracker {
    pub video_id: String,
    pub species: SpeciesClass,
    pub params: PipelineParams,
    pub tracks: Vec<Track>,
    next_id: u32,
    last_frame: Option<u32>,
}

impl ByteTracker {
    pub fn new(video_id: &str, species: SpeciesClass, params: PipelineParams) -> Self {
        Self { video_id: video_id.to_string(), species, params, tracks: Vec::new(), next_id: 1, last_frame: None }
    }

    /// Advances one frame. Every frame must be stepped, including frames
    /// without detections.
    pub fn step(&mut self, frame: u32, detections: &[Detection]) -> Result<(), TrackerError> {
        if let Some(d) = detections.iter().find(|d| d.species != self.species) {
            return Err(TrackerError::MixedSpecies { expected: self.species, got: d.species });
        }
        if let Some(prev) = self.last_frame {
            if frame <= prev {
                return Err(TrackerError::UnsortedStream { video: self.video_id.clone(), prev, next: frame });
            }
        }
        self.last_frame = Some(frame);
        let mut dets: Vec<(BBox, f64)> = detections.iter().map(|d| (d.bbox, d.score)).collect();
        self.byte_step(frame, &mut dets)
    }

    fn byte_step(&mut self, frame: u32, dets: &mut [(BBox, f64)]) -> Result<(), TrackerError> {
        let kp = self.params.kalman;
        canonical_order(dets);
        let (high, low): (Vec<usize>, Vec<usize>) = (0..dets.len()).partition(|&i| dets[i].1 >= self.params.high_thresh);

        let live: Vec<usize> = (0..self.tracks.len()).filter(|&t| self.tracks[t].status != TrackStatus::Removed).collect();
        for &t in &live {
            self.tracks[t].state = kalman_predict(&self.tracks[t].state, &kp);
        }
        let predicted: Vec<BBox> = live.iter().map(|&t| self.tracks[t].state.to_bbox()).collect();

        let mut matched_track = vec![false; live.len()];
        let mut pairs: Vec<(usize, usize)> = Vec::new();

        let iou1: Vec<Vec<f64>> = predicted.iter().map(|p| high.iter().map(|&d| p.iou(&dets[d].0)).collect()).collect();
        let mut high_used = vec![false; high.len()];
        for (r, c) in gated_matches(&iou1, self.params.match_iou_high) {
            matched_track[r] = true;
            high_used[c] = true;
            pairs.push((r, high[c]));
        }

        let second: Vec<usize> =
            (0..live.len()).filter(|&r| !matched_track[r] && self.tracks[live[r]].status == TrackStatus::Active).collect();
        let iou2: Vec<Vec<f64>> = second.iter().map(|&r| low.iter().map(|&d| predicted[r].iou(&dets[d].0)).collect()).collect();
        for (r, c) in gated_matches(&iou2, self.params.match_iou_low) {
            matched_track[second[r]] = true;
            pairs.push((second[r], low[c]));
        }

        for (r, d) in pairs {
            let t = &mut self.tracks[live[r]];
            let (b, s) = dets[d];
            t.state = kalman_update(&t.state, &b, &kp)?;
            t.history.push((frame, b, s));
            t.status = TrackStatus::Active;
        }
        for (r, &t) in live.iter().enumerate() {
            if matched_track[r] {
                continue;
            }
            let tr = &mut self.tracks[t];
            tr.status = match tr.status {
                TrackStatus::Tentative => TrackStatus::Removed,
                _ if frame - tr.last_frame() > self.params.max_lost => TrackStatus::Removed,
                _ => TrackStatus::Lost,
            };
        }
        for (c, &d) in high.iter().enumerate() {
            if high_used[c] {
                continue;
            }
            let (b, s) = dets[d];
            self.tracks.push(Track {
                video_id: self.video_id.clone(),
                track_id: self.next_id,
                species: self.species,
                state: KalmanState::initiate(&b, &kp),
                history: vec![(frame, b, s)],
                status: TrackStatus::Tentative,
                counted: false,
            });
            self.next_id += 1;
        }
        Ok(())
    }

    pub fn into_tracks(self) -> Vec<Track> {
        self.tracks
    }
}

/// Runs τ filtering, one tracker per (video, species) and γ filtering.
/// The stream must be non-decreasing in frame within each video.
pub fn run_pipeline(stream: &[Detection], params: &PipelineParams) -> Result<Vec<Track>, TrackerError> {
    params.validate()?;
    let mut videos: Vec<&str> = Vec::new();
    let mut last: BTreeMap<&str, u32> = BTreeMap::new();
    let mut per_stream: BTreeMap<(&str, SpeciesClass), BTreeMap<u32, Vec<Detection>>> = BTreeMap::new();
    for d in stream {
        match last.get(d.video_id.as_str()) {
            Some(&prev) if d.frame < prev => {
                return Err(TrackerError::UnsortedStream { video: d.video_id.clone(), prev, next: d.frame });
            }
            None => videos.push(&d.video_id),
            _ => {}
        }
        last.insert(&d.video_id, d.frame);
        if !(d.score > params.tau) {
            continue;
        }
        per_stream.entry((&d.video_id, d.species)).or_default().entry(d.frame).or_default().push(d.clone());
    }
    let mut out = Vec::new();
    for video in videos {
        for species in SpeciesClass::ALL {
            let Some(frames) = per_stream.get(&(video, species)) else { continue };
            let (first, end) = (*frames.keys().next().unwrap(), *frames.keys().next_back().unwrap());
            let mut tracker = ByteTracker::new(video, species, params.clone());
            for f in first..=end {
                tracker.step(f, frames.get(&f).map_or(&[][..], Vec::as_slice))?;
            }
            out.extend(tracker.into_tracks().into_iter().filter(|t| t.history.len() >= params.gamma));
        }
    }
    Ok(out)
}

/// Marks and counts tracks whose boxes reach the last pixel row.
pub fn count_cabof(tracks: &mut [Track], frame_height: u32) -> [u64; SpeciesClass::COUNT] {
    let mut counts = [0u64; SpeciesClass::COUNT];
    for t in tracks.iter_mut() {
        if !t.counted && t.touches_bottom(frame_height) {
            t.counted = true;
            counts[t.species.index()] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_sequence, SceneConfig};

    type Dense = Vec<Vec<f64>>;

    fn mm(a: &Dense, b: &Dense) -> Dense {
        (0..a.len()).map(|i| (0..b[0].len()).map(|j| (0..b.len()).map(|k| a[i][k] * b[k][j]).sum()).collect()).collect()
    }
    fn tr(a: &Dense) -> Dense {
        (0..a[0].len()).map(|j| (0..a.len()).map(|i| a[i][j]).collect()).collect()
    }
    fn add(a: &Dense, b: &Dense, s: f64) -> Dense {
        a.iter().zip(b).map(|(r, q)| r.iter().zip(q).map(|(x, y)| x + s * y).collect()).collect()
    }
    fn inv(a: &Dense) -> Dense {
        let n = a.len();
        let mut m: Dense = a.iter().enumerate().map(|(i, r)| {
            let mut r = r.clone();
            r.extend((0..n).map(|j| f64::from(u8::from(i == j))));
            r
        }).collect();
        for c in 0..n {
            let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
            m.swap(c, p);
            let d = m[c][c];
            m[c].iter_mut().for_each(|x| *x /= d);
            for r in 0..n {
                if r != c {
                    let f = m[r][c];
                    let row = m[c].clone();
                    m[r].iter_mut().zip(row).for_each(|(x, y)| *x -= f * y);
                }
            }
        }
        m.into_iter().map(|r| r[n..].to_vec()).collect()
    }
    fn dense(m: &Mat8) -> Dense {
        (0..8).map(|i| (0..8).map(|j| m[(i, j)]).collect()).collect()
    }

    fn fixture() -> KalmanState {
        let mut s = KalmanState::initiate(&BBox::new(10.0, 20.0, 30.0, 60.0), &KalmanParams::default());
        s.mean[4] = 1.5;
        s.mean[5] = -2.0;
        s.mean[7] = 0.25;
        for i in 0..8 {
            for j in 0..8 {
                if i != j {
                    s.covariance[(i, j)] += 0.01 * ((i + j) % 3) as f64;
                }
            }
        }
        s
    }

    #[test]
    fn predict_matches_explicit_arithmetic() {
        let s = fixture();
        let kp = KalmanParams::default();
        let out = kalman_predict(&s, &kp);
        let mut f = vec![vec![0.0; 8]; 8];
        for i in 0..8 {
            f[i][i] = 1.0;
            if i < 4 {
                f[i][i + 4] = 1.0;
            }
        }
        let x: Dense = (0..8).map(|i| vec![s.mean[i]]).collect();
        let fx = mm(&f, &x);
        let h = s.mean[3];
        let q = [h / 20.0, h / 20.0, 1e-1, h / 20.0, h / 160.0, h / 160.0, 1e-5, h / 160.0];
        let mut fpf = mm(&mm(&f, &dense(&s.covariance)), &tr(&f));
        for i in 0..8 {
            fpf[i][i] += q[i] * q[i];
            assert!((out.mean[i] - fx[i][0]).abs() < 1e-12);
        }
        for i in 0..8 {
            for j in 0..8 {
                assert!((out.covariance[(i, j)] - fpf[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predict_zero_velocity_and_constant_velocity() {
        let kp = KalmanParams::default();
        let s = KalmanState::initiate(&BBox::new(0.0, 0.0, 10.0, 20.0), &kp);
        let p = kalman_predict(&s, &kp);
        assert_eq!(p.mean, s.mean);
        assert!(p.covariance.trace() > s.covariance.trace());
        let mut m = s.clone();
        m.mean[5] = 5.0;
        assert!((kalman_predict(&m, &kp).mean[1] - (s.mean[1] + 5.0)).abs() < 1e-12);
    }

    #[test]
    fn update_matches_gain_formula() {
        let kp = KalmanParams::default();
        let s = kalman_predict(&fixture(), &kp);
        let z = BBox::new(12.0, 18.0, 33.0, 61.0);
        let out = kalman_update(&s, &z, &kp).unwrap();
        let hm: Dense = (0..4).map(|i| (0..8).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let p = dense(&s.covariance);
        let mut sm = mm(&mm(&hm, &p), &tr(&hm));
        let h = s.mean[3];
        let r = [h / 20.0, h / 20.0, 0.1, h / 20.0];
        for i in 0..4 {
            sm[i][i] += r[i] * r[i];
        }
        let k = mm(&mm(&p, &tr(&hm)), &inv(&sm));
        let zv = [22.5, 39.5, 21.0 / 43.0, 43.0];
        let y: Dense = (0..4).map(|i| vec![zv[i] - s.mean[i]]).collect();
        let mean = mm(&k, &y);
        let cov = add(&p, &mm(&mm(&k, &sm), &tr(&k)), -1.0);
        for i in 0..8 {
            assert!((out.mean[i] - (s.mean[i] + mean[i][0])).abs() < 1e-9, "mean {i}");
            for j in 0..8 {
                assert!((out.covariance[(i, j)] - cov[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn update_at_predicted_mean_is_fixed_point() {
        let kp = KalmanParams::default();
        let s = KalmanState::initiate(&BBox::new(5.0, 5.0, 25.0, 45.0), &kp);
        let out = kalman_update(&s, &s.to_bbox(), &kp).unwrap();
        for i in 0..8 {
            assert!((out.mean[i] - s.mean[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn repeated_measurements_converge() {
        let kp = KalmanParams::default();
        let target = BBox::new(40.0, 40.0, 60.0, 80.0);
        let mut s = KalmanState::initiate(&BBox::new(30.0, 35.0, 52.0, 70.0), &kp);
        let mut prev_var = f64::INFINITY;
        let mut prev_err = f64::INFINITY;
        for _ in 0..200 {
            s = kalman_update(&s, &target, &kp).unwrap();
            let var = s.covariance[(0, 0)] + s.covariance[(1, 1)];
            assert!(var <= prev_var + 1e-12);
            prev_var = var;
            let err = 1.0 - s.to_bbox().iou(&target);
            assert!(err <= prev_err + 1e-12);
            prev_err = err;
        }
        assert!(prev_err < 0.01, "{prev_err}");
    }

    #[test]
    fn singular_innovation_is_reported() {
        let kp = KalmanParams { std_position: 0.0, std_aspect_measurement: 0.0, ..KalmanParams::default() };
        let s = KalmanState { mean: Vec8::from_element(1.0), covariance: Mat8::zeros() };
        assert_eq!(kalman_update(&s, &BBox::new(0.0, 0.0, 1.0, 1.0), &kp), Err(TrackerError::SingularInnovation));
    }

    fn brute(w: &[Vec<f64>]) -> f64 {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        perms.iter().map(|p| (0..3).map(|i| w[i][p[i]]).sum::<f64>()).fold(f64::MIN, f64::max)
    }

    #[test]
    fn assignment_matches_exhaustive_search() {
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..500 {
            let w: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| (next() * 10.0).floor() / 10.0).collect()).collect();
            let a = max_weight_assignment(&w);
            let total: f64 = a.iter().enumerate().map(|(i, j)| w[i][j.unwrap()]).sum();
            assert!((total - brute(&w)).abs() < 1e-9, "{w:?}");
            let mut cols: Vec<usize> = a.iter().map(|j| j.unwrap()).collect();
            cols.sort_unstable();
            assert_eq!(cols, vec![0, 1, 2]);
        }
    }

    #[test]
    fn assignment_rectangular() {
        let w = vec![vec![0.1, 0.9], vec![0.8, 0.7], vec![0.0, 0.95]];
        let a = max_weight_assignment(&w);
        assert_eq!(a, vec![None, Some(0), Some(1)]);
        let wt = vec![vec![0.1, 0.8, 0.0], vec![0.9, 0.7, 0.95]];
        assert_eq!(max_weight_assignment(&wt), vec![Some(1), Some(2)]);
        assert_eq!(max_weight_assignment(&[]), Vec::<Option<usize>>::new());
    }

    fn det(frame: u32, b: BBox, score: f64) -> Detection {
        Detection { video_id: "v".into(), frame, species: SpeciesClass::SquatLobster, bbox: b, score }
    }

    #[test]
    fn new_tracks_and_matching() {
        let mut t = ByteTracker::new("v", SpeciesClass::SquatLobster, PipelineParams::default());
        let boxes = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 0.0, 30.0, 10.0), BBox::new(40.0, 0.0, 50.0, 10.0)];
        t.step(0, &boxes.map(|b| det(0, b, 0.9))).unwrap();
        assert_eq!(t.tracks.len(), 3);
        assert!(t.tracks.iter().all(|x| x.status == TrackStatus::Tentative));
        t.step(1, &[det(1, BBox::new(0.0, 0.5, 10.0, 10.5), 0.9)]).unwrap();
        assert_eq!(t.tracks[0].history.len(), 2);
        assert_eq!(t.tracks[0].status, TrackStatus::Active);
        assert_eq!(t.tracks[1].status, TrackStatus::Removed);
        // Low-score detections only extend active tracks.
        t.step(2, &[det(2, BBox::new(0.0, 1.0, 10.0, 11.0), 0.3), det(2, BBox::new(70.0, 0.0, 80.0, 10.0), 0.3)]).unwrap();
        assert_eq!(t.tracks[0].history.len(), 3);
        assert_eq!(t.tracks.len(), 3);
        let err = t.step(3, &[Detection { species: SpeciesClass::BasketStar, ..det(3, boxes[0], 0.9) }]);
        assert!(matches!(err, Err(TrackerError::MixedSpecies { .. })));
    }

    #[test]
    fn lost_tracks_expire() {
        let params = PipelineParams { max_lost: 3, ..PipelineParams::default() };
        let mut t = ByteTracker::new("v", SpeciesClass::SquatLobster, params);
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        t.step(0, &[det(0, b, 0.9)]).unwrap();
        t.step(1, &[det(1, b, 0.9)]).unwrap();
        for f in 2..=4 {
            t.step(f, &[]).unwrap();
            assert_eq!(t.tracks[0].status, TrackStatus::Lost);
        }
        t.step(5, &[]).unwrap();
        assert_eq!(t.tracks[0].status, TrackStatus::Removed);
        t.step(6, &[det(6, b, 0.9)]).unwrap();
        assert_eq!(t.tracks.len(), 2);
        assert_eq!(t.tracks[1].track_id, 2);
    }

    #[test]
    fn pipeline_filters() {
        let stream: Vec<Detection> = (0..10).map(|f| det(f, BBox::new(0.0, f64::from(f), 10.0, 10.0 + f64::from(f)), 0.7)).collect();
        assert!(run_pipeline(&stream, &PipelineParams::with_filters(1.0, 0)).unwrap().is_empty());
        let all = run_pipeline(&stream, &PipelineParams::with_filters(0.0, 0)).unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].history.len(), 10);
        assert!(run_pipeline(&stream, &PipelineParams::with_filters(0.0, 11)).unwrap().is_empty());
        let mut rev = stream.clone();
        rev.swap(2, 5);
        assert!(matches!(run_pipeline(&rev, &PipelineParams::default()), Err(TrackerError::UnsortedStream { .. })));
    }

    #[test]
    fn counting_touches_bottom_once() {
        let stream: Vec<Detection> = (0..60).map(|f| det(f, BBox::new(0.0, 40.0 + f64::from(f), 10.0, 50.0 + f64::from(f)), 0.9)).collect();
        let mut tracks = run_pipeline(&stream, &PipelineParams::default()).unwrap();
        let counts = count_cabof(&mut tracks, 100);
        assert_eq!(counts[SpeciesClass::SquatLobster.index()], 1);
        assert_eq!(counts.iter().sum::<u64>(), 1);
        assert!(tracks[0].counted);
        assert_eq!(count_cabof(&mut tracks, 100).iter().sum::<u64>(), 0);
        let mut short = run_pipeline(&stream[..20], &PipelineParams::default()).unwrap();
        assert_eq!(count_cabof(&mut short, 100).iter().sum::<u64>(), 0);
    }

    fn gt_stream(seq: &crate::synthgen::SyntheticSequence) -> Vec<Detection> {
        let mut out = Vec::new();
        for f in 0..seq.n_frames {
            for (o, b) in seq.visible_objects(f) {
                out.push(Detection { video_id: seq.video_id.clone(), frame: f, species: o.species, bbox: b, score: 1.0 });
            }
        }
        out
    }

    #[test]
    fn perfect_detections_reproduce_ground_truth_counts() {
        for seed in 0..3 {
            let cfg = SceneConfig { frame_width: 128, frame_height: 128, duration: 60.0, spawn_rate: 3.0, ..SceneConfig::default() };
            let seq = generate_sequence(&cfg, seed).unwrap();
            let stream = gt_stream(&seq);
            let mut tracks = run_pipeline(&stream, &PipelineParams::with_filters(0.0, 1)).unwrap();
            let counts = count_cabof(&mut tracks, cfg.frame_height);
            let mut expected = [0u64; SpeciesClass::COUNT];
            for c in &seq.cabofs {
                expected[c.species.index()] += u64::from(c.count);
            }
            assert_eq!(counts, expected, "seed {seed}");

            let gamma = 20;
            let long = seq.objects.iter().filter(|o| seq.track_of(o.object_id).len() >= gamma).count();
            let kept = run_pipeline(&stream, &PipelineParams::with_filters(0.0, gamma)).unwrap();
            assert_eq!(kept.len(), long, "seed {seed}");
        }
    }
}
