//! Frame-level substrate classification.
//!
//! Two regimes share one network design: a single model with four sigmoid
//! outputs, or four independent single-output models whose scores are
//! stacked in B, C, M, R order.

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{frame_substrate_labels, SubstrateClass, SubstrateInterval, SubstrateSet};
use crate::detector::{Backbone, BackboneStage};
use crate::evaluate::{substrate_average_precision, EvalError};
use crate::nn::{bce_with_logits, relu2, relu_backward2, sigmoid, Linear, Optimizer, OptimizerKind, Param, ParamBlob};

#[derive(Debug, Error)]
pub enum SubstrateError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite loss during epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubstrateHyper {
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub backbone: Vec<BackboneStage>,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for SubstrateHyper {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            optimizer: OptimizerKind::default(),
            batch_size: 8,
            max_epochs: 10,
            backbone: vec![
                BackboneStage { channels: 8, kernel: 4, stride: 4 },
                BackboneStage { channels: 16, kernel: 2, stride: 2 },
                BackboneStage { channels: 24, kernel: 2, stride: 2 },
            ],
            hidden_dim: 32,
            seed: 0,
        }
    }
}

/// One labelled frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstrateSample {
    pub video_id: String,
    pub frame: u32,
    pub image: Array3<f64>,
    pub labels: SubstrateSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstratePrediction {
    #[serde(rename = "video")]
    pub video_id: String,
    pub frame: u32,
    /// Independent sigmoid scores, B/C/M/R.
    pub scores: [f64; 4],
}

/// Backbone, spatial average pooling and a two-layer head with `outputs`
/// sigmoid units.
#[derive(Debug, Clone)]
pub struct SubstrateModel {
    pub hyper: SubstrateHyper,
    pub outputs: usize,
    backbone: Backbone,
    fc1: Linear,
    fc2: Linear,
}

impl SubstrateModel {
    pub fn new(hyper: SubstrateHyper, outputs: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let backbone = Backbone::new(&hyper.backbone, 3, &mut rng);
        let c = hyper.backbone.last().map(|s| s.channels).unwrap_or(3);
        let fc1 = Linear::new(c, hyper.hidden_dim, (2.0 / c as f64).sqrt(), &mut rng);
        let fc2 = Linear::new(hyper.hidden_dim, outputs, 0.01, &mut rng);
        Self { hyper, outputs, backbone, fc1, fc2 }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.backbone.params_mut();
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.backbone.params();
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Sigmoid scores for one image.
    pub fn predict(&self, image: &Array3<f64>) -> Vec<f64> {
        let (feat, _) = self.backbone.forward(image);
        let pooled = pool(&feat);
        let mut h = self.fc1.forward(pooled.view());
        relu2(&mut h);
        self.fc2.forward(h.view()).row(0).iter().map(|z| sigmoid(*z)).collect()
    }

    /// Accumulates gradients of the mean BCE over outputs; returns the loss.
    fn accumulate(&mut self, image: &Array3<f64>, targets: &[f64]) -> f64 {
        let (feat, trace) = self.backbone.forward(image);
        let pooled = pool(&feat);
        let mut h = self.fc1.forward(pooled.view());
        relu2(&mut h);
        let logits = self.fc2.forward(h.view());
        let mut dl = Array2::zeros((1, self.outputs));
        let mut loss = 0.0;
        for k in 0..self.outputs {
            let (l, g) = bce_with_logits(logits[[0, k]], targets[k], 1.0);
            loss += l / self.outputs as f64;
            dl[[0, k]] = g / self.outputs as f64;
        }
        let mut dh = self.fc2.backward(h.view(), &dl);
        relu_backward2(&h, &mut dh);
        let dpool = self.fc1.backward(pooled.view(), &dh);
        let (c, fh, fw) = feat.dim();
        let scale = 1.0 / (fh * fw) as f64;
        let dfeat = Array3::from_shape_fn((c, fh, fw), |(ch, _, _)| dpool[[0, ch]] * scale);
        self.backbone.backward(&trace, dfeat);
        loss
    }

    pub fn to_blobs(&self) -> Vec<ParamBlob> {
        self.params().into_iter().map(ParamBlob::from).collect()
    }

    pub fn load_blobs(&mut self, blobs: &[ParamBlob]) -> Result<(), SubstrateError> {
        let params = self.params_mut();
        if params.len() != blobs.len() {
            return Err(SubstrateError::Checkpoint(format!("expected {} tensors, found {}", params.len(), blobs.len())));
        }
        for (p, b) in params.into_iter().zip(blobs) {
            b.load_into(p).map_err(SubstrateError::Checkpoint)?;
        }
        Ok(())
    }
}

fn pool(feat: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = feat.dim();
    let flat = feat.view().into_shape_with_order((c, h * w)).expect("contiguous map");
    flat.mean_axis(Axis(1)).expect("non-empty map").insert_axis(Axis(0))
}

/// Trains one model on `targets` (one row of `outputs` values per image),
/// keeping the epoch whose validation score is highest.
fn fit(
    hyper: &SubstrateHyper,
    images: &[&Array3<f64>],
    targets: &[Vec<f64>],
    outputs: usize,
    mut score: impl FnMut(&SubstrateModel) -> Result<f64, SubstrateError>,
) -> Result<(SubstrateModel, Vec<f64>), SubstrateError> {
    if images.is_empty() {
        return Err(SubstrateError::EmptyDataset);
    }
    let mut model = SubstrateModel::new(hyper.clone(), outputs);
    let mut opt = Optimizer::new(hyper.optimizer, hyper.lr, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut best: Option<(f64, SubstrateModel)> = None;
    let mut trace = Vec::new();
    for epoch in 0..hyper.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size.max(1)) {
            for &i in batch {
                let l = model.accumulate(images[i], &targets[i]);
                if !l.is_finite() {
                    return Err(SubstrateError::Diverged { epoch });
                }
            }
            opt.step(model.params_mut(), 1.0 / batch.len() as f64);
        }
        let s = score(&model)?;
        trace.push(s);
        if best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, model.clone()));
        }
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((model, trace))
}

fn mean_ap(scores: &[[f64; 4]], labels: &[SubstrateSet]) -> Result<f64, SubstrateError> {
    let ap = substrate_average_precision(scores, labels)?;
    Ok(if ap.is_empty() { 0.0 } else { ap.values().sum::<f64>() / ap.len() as f64 })
}

/// Single multi-label model with four outputs.
pub fn train_single(
    train: &[SubstrateSample],
    val: &[SubstrateSample],
    hyper: &SubstrateHyper,
) -> Result<(SubstrateModel, Vec<f64>), SubstrateError> {
    let images: Vec<&Array3<f64>> = train.iter().map(|s| &s.image).collect();
    let targets: Vec<Vec<f64>> = train.iter().map(|s| s.labels.multi_hot().to_vec()).collect();
    let labels: Vec<SubstrateSet> = val.iter().map(|s| s.labels).collect();
    fit(hyper, &images, &targets, 4, |m| {
        if val.is_empty() {
            return Ok(0.0);
        }
        let scores: Vec<[f64; 4]> = val.iter().map(|s| to_array(&m.predict(&s.image))).collect();
        mean_ap(&scores, &labels)
    })
}

/// Four per-substrate binary models; each sees only its own label.
#[derive(Debug, Clone)]
pub struct CombinedSubstrate {
    pub models: Vec<SubstrateModel>,
}

impl CombinedSubstrate {
    pub fn predict(&self, image: &Array3<f64>) -> [f64; 4] {
        std::array::from_fn(|k| self.models[k].predict(image)[0])
    }
}

fn to_array(v: &[f64]) -> [f64; 4] {
    std::array::from_fn(|k| v[k])
}

/// Trains one binary model per substrate on `(image, present)` pairs.
pub fn train_binary(
    train: &[(&Array3<f64>, bool)],
    val: &[(&Array3<f64>, bool)],
    hyper: &SubstrateHyper,
) -> Result<SubstrateModel, SubstrateError> {
    let images: Vec<&Array3<f64>> = train.iter().map(|(i, _)| *i).collect();
    let targets: Vec<Vec<f64>> = train.iter().map(|(_, y)| vec![f64::from(u8::from(*y))]).collect();
    let (m, _) = fit(hyper, &images, &targets, 1, |m| {
        let mut ranked: Vec<(f64, bool)> = val.iter().map(|(img, y)| (m.predict(img)[0], *y)).collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        let tp: Vec<bool> = ranked.iter().map(|r| r.1).collect();
        let n_pos = tp.iter().filter(|t| **t).count();
        Ok(crate::evaluate::ranked_average_precision(&tp, n_pos).unwrap_or(0.0))
    })?;
    Ok(m)
}

pub fn train_combined(
    train: &[SubstrateSample],
    val: &[SubstrateSample],
    hyper: &SubstrateHyper,
) -> Result<CombinedSubstrate, SubstrateError> {
    let mut models = Vec::with_capacity(4);
    for s in SubstrateClass::ALL {
        let tr: Vec<(&Array3<f64>, bool)> = train.iter().map(|x| (&x.image, x.labels.contains(s))).collect();
        let va: Vec<(&Array3<f64>, bool)> = val.iter().map(|x| (&x.image, x.labels.contains(s))).collect();
        let h = SubstrateHyper { seed: hyper.seed.wrapping_add(s.index() as u64 * 7919), ..hyper.clone() };
        models.push(train_binary(&tr, &va, &h)?);
    }
    Ok(CombinedSubstrate { models })
}

/// Frames `round(k * fps)` for `k = 0, 1, ...` below `n_frames`.
pub fn sample_test_wv(n_frames: u32, fps: f64) -> Vec<u32> {
    let mut out = Vec::new();
    if !(fps > 0.0) {
        return out;
    }
    let mut k = 0u64;
    loop {
        let f = (k as f64 * fps).round();
        if f >= f64::from(n_frames) {
            break;
        }
        out.push(f as u32);
        k += 1;
    }
    out
}

/// Sampled frames paired with their interval labels.
pub fn test_wv_labels(n_frames: u32, fps: f64, intervals: &[SubstrateInterval]) -> Vec<(u32, SubstrateSet)> {
    sample_test_wv(n_frames, fps)
        .into_iter()
        .map(|f| (f, frame_substrate_labels(intervals, f64::from(f) / fps)))
        .collect()
}

pub fn predictions_from_scores(video_id: &str, frames: &[u32], scores: &[[f64; 4]]) -> Vec<SubstratePrediction> {
    frames
        .iter()
        .zip(scores)
        .map(|(f, s)| SubstratePrediction { video_id: video_id.to_string(), frame: *f, scores: *s })
        .collect()
}

/// Serialized substrate models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstrateCheckpoint {
    pub hyper: SubstrateHyper,
    pub config_hash: String,
    /// `"single"` or `"combined"`.
    pub regime: String,
    pub models: Vec<Vec<ParamBlob>>,
}

impl SubstrateCheckpoint {
    pub fn single(m: &SubstrateModel) -> Self {
        Self {
            hyper: m.hyper.clone(),
            config_hash: crate::config_hash(&m.hyper),
            regime: "single".into(),
            models: vec![m.to_blobs()],
        }
    }

    pub fn combined(c: &CombinedSubstrate, hyper: &SubstrateHyper) -> Self {
        Self {
            hyper: hyper.clone(),
            config_hash: crate::config_hash(hyper),
            regime: "combined".into(),
            models: c.models.iter().map(SubstrateModel::to_blobs).collect(),
        }
    }

    /// Scoring function for the stored regime.
    pub fn load(&self) -> Result<Box<dyn Fn(&Array3<f64>) -> [f64; 4] + Send + Sync>, SubstrateError> {
        if crate::config_hash(&self.hyper) != self.config_hash {
            return Err(SubstrateError::Checkpoint("config hash does not match stored config".into()));
        }
        match self.regime.as_str() {
            "single" => {
                let mut m = SubstrateModel::new(self.hyper.clone(), 4);
                m.load_blobs(self.models.first().ok_or_else(|| SubstrateError::Checkpoint("no model".into()))?)?;
                Ok(Box::new(move |img| to_array(&m.predict(img))))
            }
            "combined" => {
                if self.models.len() != 4 {
                    return Err(SubstrateError::Checkpoint("combined regime needs four models".into()));
                }
                let mut models = Vec::new();
                for (k, blobs) in self.models.iter().enumerate() {
                    let h = SubstrateHyper { seed: self.hyper.seed.wrapping_add(k as u64 * 7919), ..self.hyper.clone() };
                    let mut m = SubstrateModel::new(h, 1);
                    m.load_blobs(blobs)?;
                    models.push(m);
                }
                let c = CombinedSubstrate { models };
                Ok(Box::new(move |img| c.predict(img)))
            }
            other => Err(SubstrateError::Checkpoint(format!("unknown regime {other}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(color: [f64; 3], seed: usize) -> Array3<f64> {
        Array3::from_shape_fn((3, 32, 32), |(c, y, x)| color[c] + 0.05 * (((x * 7 + y * 13 + seed * 3) % 5) as f64 - 2.0))
    }

    fn fixture() -> Vec<SubstrateSample> {
        let mud: SubstrateSet = [SubstrateClass::Mud].into_iter().collect();
        let rock: SubstrateSet = [SubstrateClass::Rock].into_iter().collect();
        (0..16)
            .map(|i| SubstrateSample {
                video_id: "v".into(),
                frame: i,
                image: if i % 2 == 0 { patch([-0.3, -0.2, -0.35], i as usize) } else { patch([-0.35, -0.3, -0.1], i as usize) },
                labels: if i % 2 == 0 { mud } else { rock },
            })
            .collect()
    }

    fn hyper() -> SubstrateHyper {
        SubstrateHyper { max_epochs: 15, batch_size: 4, lr: 5e-3, ..SubstrateHyper::default() }
    }

    #[test]
    fn test_wv_sampling() {
        assert_eq!(sample_test_wv(300, 30.0), (0..10).map(|k| k * 30).collect::<Vec<_>>());
        assert!(sample_test_wv(0, 30.0).is_empty());
        let f = sample_test_wv(300, 29.97);
        assert_eq!(f[3], 90);
        assert_eq!(f[7], (7.0f64 * 29.97).round() as u32);
        assert_eq!(f, sample_test_wv(300, 29.97));
    }

    #[test]
    fn single_model_learns_separable_fixture() {
        let data = fixture();
        let (m, trace) = train_single(&data, &data, &hyper()).unwrap();
        assert_eq!(trace.len(), 15);
        let mud = m.predict(&data[0].image);
        let rock = m.predict(&data[1].image);
        assert!(mud[SubstrateClass::Mud.index()] > 0.5 && rock[SubstrateClass::Mud.index()] < 0.5);
        assert!(mud.iter().all(|s| (0.0..=1.0).contains(s)));
    }

    #[test]
    fn combined_stacks_binary_scores_in_order() {
        let data = fixture();
        let c = train_combined(&data, &data, &hyper()).unwrap();
        let img = &data[0].image;
        let stacked = c.predict(img);
        for k in 0..4 {
            assert_eq!(stacked[k], c.models[k].predict(img)[0]);
        }
        let ck = SubstrateCheckpoint::combined(&c, &hyper());
        let json = serde_json::to_string(&ck).unwrap();
        let f = serde_json::from_str::<SubstrateCheckpoint>(&json).unwrap().load().unwrap();
        assert_eq!(f(img), stacked);
    }

    #[test]
    fn all_mud_training_scores_mud_on_held_out_frames() {
        let mud: SubstrateSet = [SubstrateClass::Mud].into_iter().collect();
        let sample = |i: usize| SubstrateSample {
            video_id: "v".into(),
            frame: i as u32,
            image: patch([-0.3 + 0.02 * (i % 3) as f64, -0.2, -0.35], i),
            labels: mud,
        };
        let train: Vec<_> = (0..8).map(sample).collect();
        let (m, _) = train_single(&train, &train, &hyper()).unwrap();
        for i in 20..24 {
            assert!(m.predict(&sample(i).image)[SubstrateClass::Mud.index()] > 0.5);
        }
    }

    #[test]
    fn fixed_seed_training_is_deterministic() {
        let data = fixture();
        let (a, ta) = train_single(&data, &data, &hyper()).unwrap();
        let (b, tb) = train_single(&data, &data, &hyper()).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a.predict(&data[3].image), b.predict(&data[3].image));
    }

    #[test]
    fn combined_mud_ap_is_not_below_single_on_fixture() {
        let data = fixture();
        let held_out: Vec<SubstrateSample> = fixture()
            .into_iter()
            .map(|mut s| {
                s.frame += 100;
                let color = if s.labels.contains(SubstrateClass::Mud) { [-0.28, -0.22, -0.33] } else { [-0.33, -0.28, -0.12] };
                s.image = patch(color, s.frame as usize);
                s
            })
            .collect();
        let (single, _) = train_single(&data, &data, &hyper()).unwrap();
        let combined = train_combined(&data, &data, &hyper()).unwrap();
        let mud_ap = |score: &dyn Fn(&Array3<f64>) -> f64| {
            let mut ranked: Vec<(f64, bool)> =
                held_out.iter().map(|s| (score(&s.image), s.labels.contains(SubstrateClass::Mud))).collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
            let tp: Vec<bool> = ranked.iter().map(|r| r.1).collect();
            let n = tp.iter().filter(|t| **t).count();
            crate::evaluate::ranked_average_precision(&tp, n).unwrap()
        };
        let m = SubstrateClass::Mud.index();
        let s_ap = mud_ap(&|img| single.predict(img)[m]);
        let c_ap = mud_ap(&|img| combined.predict(img)[m]);
        assert!(c_ap >= s_ap, "combined {c_ap} < single {s_ap}");
    }

    #[test]
    fn empty_training_set_is_rejected() {
        assert!(matches!(train_single(&[], &[], &hyper()), Err(SubstrateError::EmptyDataset)));
    }
}
