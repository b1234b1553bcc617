//! Two-stage detector with an optional substrate-context branch.
//!
//! The stack is a small convolutional backbone, a region proposal network
//! over a fixed anchor grid, region pooling and a two-layer box head. Two
//! context paths hang off the backbone output:
//!
//! * a substrate classifier on the flattened feature map, trained with a
//!   weighted binary cross entropy and mixed into the loss with weight
//!   `alpha`;
//! * a global vector produced by a strided 1D convolution over the same
//!   flattened map, scaled by `beta` and appended to every region feature
//!   before the class and box predictors.
//!
//! Each path is only built when its weight is positive, so `alpha = beta = 0`
//! yields exactly the plain two-stage detector. Negative region dropping
//! removes a fraction `rho` of the sampled negative anchors from the RPN loss.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{FrameGroundTruth, LabeledBox, SpeciesClass, SubstrateSet};
use crate::bbox::BBox;
use crate::evaluate::{map_bottom_half, EvalError};
use crate::nn::{
    bce_with_logits, relu2, relu3, relu_backward2, relu_backward3, sigmoid, smooth_l1, softmax,
    softmax_cross_entropy, Conv2d, Conv2dCache, Linear, Optimizer, OptimizerKind, Param, ParamBlob,
    RoiAlign, StridedConv1d,
};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite loss during epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("global feature size {dim} does not divide the flattened feature length {len}")]
    GlobalStride { len: usize, dim: usize },
    #[error("substrate labels are required when the context loss weight is positive")]
    MissingSubstrateLabels,
    #[error("frame is {got:?} (w, h) but the model expects {want:?}")]
    FrameSize { got: (usize, usize), want: (usize, usize) },
    #[error("global context vector comes from a different image than the regions")]
    RegionMismatch,
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T, E = DetectorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneStage {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

pub fn default_backbone() -> Vec<BackboneStage> {
    vec![
        BackboneStage { channels: 16, kernel: 2, stride: 2 },
        BackboneStage { channels: 32, kernel: 2, stride: 2 },
        BackboneStage { channels: 48, kernel: 2, stride: 2 },
        BackboneStage { channels: 48, kernel: 1, stride: 1 },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Context loss weight.
    pub alpha: f64,
    /// Global-feature fusion scale; zero disables fusion.
    pub beta: f64,
    /// Fraction of sampled negative anchors dropped from the RPN loss.
    pub rho: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub anchor_scales: Vec<f64>,
    /// Height over width.
    pub anchor_ratios: Vec<f64>,
    pub rpn_sample_size: usize,
    pub rpn_positive_fraction: f64,
    pub rpn_fg_iou: f64,
    pub rpn_bg_iou: f64,
    pub rpn_pre_nms_train: usize,
    pub rpn_post_nms_train: usize,
    pub rpn_pre_nms_test: usize,
    pub rpn_post_nms_test: usize,
    pub rpn_nms_iou: f64,
    pub box_sample_size: usize,
    pub box_positive_fraction: f64,
    pub box_fg_iou: f64,
    pub box_feature_dim: usize,
    /// Defaults to `box_feature_dim`.
    pub global_feature_dim: Option<usize>,
    pub backbone: Vec<BackboneStage>,
    pub roi_output_size: usize,
    pub roi_sampling_ratio: usize,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub detections_per_image: usize,
    pub image_width: usize,
    pub image_height: usize,
    /// Positive-term weights of the context loss, B/C/M/R. Computed from the
    /// training set as negatives over positives when absent.
    pub context_pos_weight: Option<[f64; 4]>,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            rho: 0.0,
            lr: 1e-3,
            optimizer: OptimizerKind::default(),
            weight_decay: 0.0,
            batch_size: 4,
            max_epochs: 15,
            anchor_scales: vec![16.0, 32.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            rpn_sample_size: 256,
            rpn_positive_fraction: 0.5,
            rpn_fg_iou: 0.6,
            rpn_bg_iou: 0.3,
            rpn_pre_nms_train: 1000,
            rpn_post_nms_train: 300,
            rpn_pre_nms_test: 500,
            rpn_post_nms_test: 100,
            rpn_nms_iou: 0.7,
            box_sample_size: 64,
            box_positive_fraction: 0.25,
            box_fg_iou: 0.5,
            box_feature_dim: 1024,
            global_feature_dim: None,
            backbone: default_backbone(),
            roi_output_size: 4,
            roi_sampling_ratio: 2,
            score_thresh: 0.05,
            nms_iou: 0.5,
            detections_per_image: 100,
            image_width: 256,
            image_height: 256,
            context_pos_weight: None,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DetectorError::InvalidConfig(m.into()));
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]");
        }
        if !(self.beta >= 0.0) || !(self.alpha >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        if self.box_feature_dim == 0 || self.global_dim() == 0 || self.backbone.is_empty() {
            return bad("feature dimensions must be positive");
        }
        if self.backbone.iter().any(|s| s.channels == 0 || s.kernel == 0 || s.stride == 0) {
            return bad("backbone stages must be positive");
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return bad("at least one anchor scale and ratio is required");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.rpn_positive_fraction > 0.0 && self.rpn_positive_fraction < 1.0)
            || !(self.box_positive_fraction > 0.0 && self.box_positive_fraction < 1.0)
        {
            return bad("positive fractions must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn global_dim(&self) -> usize {
        self.global_feature_dim.unwrap_or(self.box_feature_dim)
    }

    pub fn feature_stride(&self) -> usize {
        self.backbone.iter().map(|s| s.stride).product()
    }

    pub fn num_anchors(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    /// Backbone output `(channels, height, width)` for the configured frame.
    pub fn feature_dim(&self) -> (usize, usize, usize) {
        let (mut h, mut w) = (self.image_height, self.image_width);
        for st in &self.backbone {
            let p = (st.kernel - 1) / 2;
            h = (h + 2 * p - st.kernel) / st.stride + 1;
            w = (w + 2 * p - st.kernel) / st.stride + 1;
        }
        (self.backbone.last().map(|s| s.channels).unwrap_or(0), h, w)
    }

    pub fn head_input_dim(&self) -> usize {
        self.box_feature_dim + if self.beta > 0.0 { self.global_dim() } else { 0 }
    }
}

/// Outcome of anchor or region labelling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    pub label: ProposalLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "video")]
    pub video_id: String,
    pub frame: u32,
    pub species: SpeciesClass,
    #[serde(flatten)]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_d: f64,
    pub l_p: f64,
    pub l_c: f64,
    pub total: f64,
    pub rpn_positive_terms: usize,
    pub rpn_negative_terms: usize,
    pub rpn_negatives_before_drop: usize,
}

impl LossBreakdown {
    fn accumulate(&mut self, o: &LossBreakdown) {
        self.l_d += o.l_d;
        self.l_p += o.l_p;
        self.l_c += o.l_c;
        self.total += o.total;
        self.rpn_positive_terms += o.rpn_positive_terms;
        self.rpn_negative_terms += o.rpn_negative_terms;
        self.rpn_negatives_before_drop += o.rpn_negatives_before_drop;
    }

    fn scale(&mut self, k: f64) {
        self.l_d *= k;
        self.l_p *= k;
        self.l_c *= k;
        self.total *= k;
    }
}

/// One training image with its (possibly partial) boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSample {
    pub video_id: String,
    pub frame: u32,
    /// `(3, height, width)`, normalized pixels.
    pub image: Array3<f64>,
    pub boxes: Vec<LabeledBox>,
    pub substrates: Option<SubstrateSet>,
}

/// Region chosen for the box-head loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiTarget {
    pub bbox: BBox,
    /// `None` is background.
    pub species: Option<SpeciesClass>,
    pub gt: BBox,
}

/// Every random choice behind one image's loss. Replaying a plan makes the
/// loss a deterministic, piecewise-smooth function of the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LossPlan {
    pub rpn_positives: Vec<(usize, BBox)>,
    pub rpn_negatives: Vec<usize>,
    pub negatives_before_drop: usize,
    pub rois: Vec<RoiTarget>,
}

/// Keeps a uniformly chosen `floor((1 - rho) * N)` of `negatives`, in their
/// original order. Nothing is drawn from `rng` when all are kept.
pub fn nrd_filter<T>(negatives: Vec<T>, rho: f64, rng: &mut impl Rng) -> Vec<T> {
    let n = negatives.len();
    let keep = nrd_keep_count(n, rho);
    if keep == n {
        return negatives;
    }
    let mut idx = sample(rng, n, keep).into_vec();
    idx.sort_unstable();
    let mut slots: Vec<Option<T>> = negatives.into_iter().map(Some).collect();
    idx.into_iter().map(|i| slots[i].take().expect("distinct indices")).collect()
}

/// `floor((1 - rho) * n)`, robust to the representation error of `rho`.
pub fn nrd_keep_count(n: usize, rho: f64) -> usize {
    (((1.0 - rho.clamp(0.0, 1.0)) * n as f64) + 1e-9).floor() as usize
}

pub const BOX_CODER_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];
pub const RPN_CODER_WEIGHTS: [f64; 4] = [1.0, 1.0, 1.0, 1.0];
const DELTA_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)
const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

pub fn encode_box(target: &BBox, reference: &BBox, w: [f64; 4]) -> [f64; 4] {
    let (rw, rh) = (reference.width(), reference.height());
    let (rx, ry) = reference.center();
    let (tw, th) = (target.width(), target.height());
    let (tx, ty) = target.center();
    [
        w[0] * (tx - rx) / rw,
        w[1] * (ty - ry) / rh,
        w[2] * (tw / rw).ln(),
        w[3] * (th / rh).ln(),
    ]
}

pub fn decode_box(d: [f64; 4], reference: &BBox, w: [f64; 4]) -> BBox {
    let (rw, rh) = (reference.width(), reference.height());
    let (rx, ry) = reference.center();
    let cx = d[0] / w[0] * rw + rx;
    let cy = d[1] / w[1] * rh + ry;
    let pw = (d[2] / w[2]).min(DELTA_CLAMP).exp() * rw;
    let ph = (d[3] / w[3]).min(DELTA_CLAMP).exp() * rh;
    BBox::new(cx - 0.5 * pw, cy - 0.5 * ph, cx + 0.5 * pw, cy + 0.5 * ph)
}

/// Greedy non-maximum suppression; returns kept indices by descending score.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && boxes[i].iou(&boxes[j]) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Anchor boxes for every feature cell, ordered `(y, x, anchor)`.
pub fn anchor_grid(cfg: &DetectorConfig) -> Vec<BBox> {
    let (_, fh, fw) = cfg.feature_dim();
    let stride = cfg.feature_stride() as f64;
    let mut out = Vec::with_capacity(fh * fw * cfg.num_anchors());
    for y in 0..fh {
        for x in 0..fw {
            let (cx, cy) = ((x as f64 + 0.5) * stride, (y as f64 + 0.5) * stride);
            for &scale in &cfg.anchor_scales {
                for &ratio in &cfg.anchor_ratios {
                    let w = scale / ratio.sqrt();
                    let h = scale * ratio.sqrt();
                    out.push(BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0));
                }
            }
        }
    }
    out
}

/// Convolutional feature extractor shared with the substrate classifier.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stages: Vec<Conv2d>,
}

pub struct BackboneTrace {
    caches: Vec<Conv2dCache>,
    outputs: Vec<Array3<f64>>,
}

impl Backbone {
    pub fn new(stages: &[BackboneStage], in_channels: usize, rng: &mut impl Rng) -> Self {
        let mut c = in_channels;
        let stages = stages
            .iter()
            .map(|st| {
                let conv = Conv2d::new(c, st.channels, st.kernel, st.stride, (st.kernel - 1) / 2, rng);
                c = st.channels;
                conv
            })
            .collect();
        Self { stages }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, BackboneTrace) {
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut outputs = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for conv in &self.stages {
            let (mut y, cache) = conv.forward(&h);
            relu3(&mut y);
            caches.push(cache);
            outputs.push(y.clone());
            h = y;
        }
        (h, BackboneTrace { caches, outputs })
    }

    pub fn backward(&mut self, trace: &BackboneTrace, dy: Array3<f64>) {
        let mut g = dy;
        for (i, conv) in self.stages.iter_mut().enumerate().rev() {
            relu_backward3(&trace.outputs[i], &mut g);
            let dx = conv.backward(&trace.caches[i], &g);
            g = dx;
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.stages.iter().flat_map(|c| c.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.stages.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}

const CONTEXT_STREAM: u64 = 0xC0_27E7;

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub backbone: Backbone,
    rpn_conv: Conv2d,
    rpn_cls: Conv2d,
    rpn_bbox: Conv2d,
    fc6: Linear,
    fc7: Linear,
    cls_score: Linear,
    bbox_pred: Linear,
    context_fc: Option<Linear>,
    global_conv: Option<StridedConv1d>,
    anchors: Vec<BBox>,
    roi_align: RoiAlign,
    /// Positive-term weights of the context loss in use.
    pub context_pos_weight: [f64; 4],
}

struct FeatureForward {
    trace: BackboneTrace,
    feat: Array3<f64>,
    rpn_hidden: Array3<f64>,
    rpn_conv_cache: Conv2dCache,
    rpn_cls_cache: Conv2dCache,
    rpn_bbox_cache: Conv2dCache,
    objectness: Array3<f64>,
    rpn_deltas: Array3<f64>,
}

struct HeadForward {
    roi_cache: crate::nn::RoiAlignCache,
    pooled: Array2<f64>,
    h6: Array2<f64>,
    fused: Array2<f64>,
    cls_logits: Array2<f64>,
    bbox_deltas: Array2<f64>,
}

fn split_fused(fused_dim: usize, d_box: usize) -> (usize, usize) {
    (d_box, fused_dim - d_box)
}

fn concat_predictor(main: Linear, extra_cols: usize, std: f64, rng: &mut impl Rng) -> Linear {
    if extra_cols == 0 {
        return main;
    }
    let extra = Param::normal(main.out_dim(), extra_cols, std, rng);
    let w = ndarray::concatenate(Axis(1), &[main.weight.value.view(), extra.value.view()]).expect("same rows");
    Linear { weight: Param::new(w), bias: main.bias }
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let (c, fh, fw) = config.feature_dim();
        if fh == 0 || fw == 0 {
            return Err(DetectorError::InvalidConfig("frame too small for the backbone".into()));
        }
        let flat_len = c * fh * fw;
        let gdim = config.global_dim();
        if config.beta > 0.0 && flat_len % gdim != 0 {
            return Err(DetectorError::GlobalStride { len: flat_len, dim: gdim });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ctx_rng = ChaCha8Rng::seed_from_u64(config.seed ^ CONTEXT_STREAM);
        let a = config.num_anchors();
        let backbone = Backbone::new(&config.backbone, 3, &mut rng);
        let rpn_conv = Conv2d::with_std(c, c, 3, 1, 1, 0.01, &mut rng);
        let rpn_cls = Conv2d::with_std(c, a, 1, 1, 0, 0.01, &mut rng);
        let rpn_bbox = Conv2d::with_std(c, 4 * a, 1, 1, 0, 0.01, &mut rng);
        let pooled = c * config.roi_output_size * config.roi_output_size;
        let d = config.box_feature_dim;
        let fc6 = Linear::new(pooled, d, (2.0 / pooled as f64).sqrt(), &mut rng);
        let fc7 = Linear::new(d, d, (2.0 / d as f64).sqrt(), &mut rng);
        let n_cls = SpeciesClass::COUNT + 1;
        let cls_main = Linear::new(d, n_cls, 0.01, &mut rng);
        let bbox_main = Linear::new(d, 4 * n_cls, 0.001, &mut rng);
        let extra = if config.beta > 0.0 { gdim } else { 0 };
        let cls_score = concat_predictor(cls_main, extra, 0.01, &mut ctx_rng);
        let bbox_pred = concat_predictor(bbox_main, extra, 0.001, &mut ctx_rng);
        let context_fc = (config.alpha > 0.0).then(|| Linear::new(flat_len, 4, 0.01, &mut ctx_rng));
        let global_conv = (config.beta > 0.0).then(|| StridedConv1d::new(flat_len / gdim, true, &mut ctx_rng));
        let anchors = anchor_grid(&config);
        let roi_align = RoiAlign {
            output_size: config.roi_output_size,
            sampling_ratio: config.roi_sampling_ratio,
            spatial_scale: 1.0 / config.feature_stride() as f64,
        };
        let context_pos_weight = config.context_pos_weight.unwrap_or([1.0; 4]);
        Ok(Self {
            config,
            backbone,
            rpn_conv,
            rpn_cls,
            rpn_bbox,
            fc6,
            fc7,
            cls_score,
            bbox_pred,
            context_fc,
            global_conv,
            anchors,
            roi_align,
            context_pos_weight,
        })
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    pub fn has_context_branch(&self) -> bool {
        self.context_fc.is_some()
    }

    pub fn has_global_fusion(&self) -> bool {
        self.global_conv.is_some()
    }

    /// Width of the class/box predictor input.
    pub fn head_input_dim(&self) -> usize {
        self.cls_score.in_dim()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.backbone.params();
        v.extend(self.rpn_conv.params());
        v.extend(self.rpn_cls.params());
        v.extend(self.rpn_bbox.params());
        v.extend(self.fc6.params());
        v.extend(self.fc7.params());
        v.extend(self.cls_score.params());
        v.extend(self.bbox_pred.params());
        if let Some(l) = &self.context_fc {
            v.extend(l.params());
        }
        if let Some(g) = &self.global_conv {
            v.extend(g.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.backbone.params_mut();
        v.extend(self.rpn_conv.params_mut());
        v.extend(self.rpn_cls.params_mut());
        v.extend(self.rpn_bbox.params_mut());
        v.extend(self.fc6.params_mut());
        v.extend(self.fc7.params_mut());
        v.extend(self.cls_score.params_mut());
        v.extend(self.bbox_pred.params_mut());
        if let Some(l) = &mut self.context_fc {
            v.extend(l.params_mut());
        }
        if let Some(g) = &mut self.global_conv {
            v.extend(g.params_mut());
        }
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn check_frame(&self, image: &Array3<f64>) -> Result<()> {
        let (_, h, w) = image.dim();
        let want = (self.config.image_width, self.config.image_height);
        if (w, h) != want {
            return Err(DetectorError::FrameSize { got: (w, h), want });
        }
        Ok(())
    }

    fn features(&self, image: &Array3<f64>) -> FeatureForward {
        let (feat, trace) = self.backbone.forward(image);
        let (mut rpn_hidden, rpn_conv_cache) = self.rpn_conv.forward(&feat);
        relu3(&mut rpn_hidden);
        let (objectness, rpn_cls_cache) = self.rpn_cls.forward(&rpn_hidden);
        let (rpn_deltas, rpn_bbox_cache) = self.rpn_bbox.forward(&rpn_hidden);
        FeatureForward {
            trace,
            feat,
            rpn_hidden,
            rpn_conv_cache,
            rpn_cls_cache,
            rpn_bbox_cache,
            objectness,
            rpn_deltas,
        }
    }

    fn anchor_pos(&self, i: usize) -> (usize, usize, usize) {
        let a = self.config.num_anchors();
        let (_, _, fw) = self.config.feature_dim();
        let cell = i / a;
        (i % a, cell / fw, cell % fw)
    }

    fn anchor_delta(&self, f: &FeatureForward, i: usize) -> [f64; 4] {
        let (a, y, x) = self.anchor_pos(i);
        std::array::from_fn(|j| f.rpn_deltas[[4 * a + j, y, x]])
    }

    fn proposals(&self, f: &FeatureForward, pre_nms: usize, post_nms: usize) -> Vec<Proposal> {
        let (w, h) = (self.config.image_width as f64, self.config.image_height as f64);
        let mut cands: Vec<(f64, usize)> = (0..self.anchors.len())
            .map(|i| {
                let (a, y, x) = self.anchor_pos(i);
                (f.objectness[[a, y, x]], i)
            })
            .collect();
        cands.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)));
        cands.truncate(pre_nms);
        let mut boxes = Vec::with_capacity(cands.len());
        let mut scores = Vec::with_capacity(cands.len());
        for (logit, i) in cands {
            let b = decode_box(self.anchor_delta(f, i), &self.anchors[i], RPN_CODER_WEIGHTS).clip(w, h);
            if b.width() >= 1.0 && b.height() >= 1.0 && b.is_valid() {
                boxes.push(b);
                scores.push(sigmoid(logit));
            }
        }
        nms(&boxes, &scores, self.config.rpn_nms_iou)
            .into_iter()
            .take(post_nms)
            .map(|i| Proposal { bbox: boxes[i], score: scores[i], label: ProposalLabel::Ignore })
            .collect()
    }

    /// Substrate logits from the flattened backbone map.
    pub fn context_logits(&self, feat: &Array3<f64>) -> Option<Array1<f64>> {
        let fc = self.context_fc.as_ref()?;
        let flat = feat.as_standard_layout().into_owned().into_shape_with_order((1, feat.len())).expect("flatten");
        Some(fc.forward(flat.view()).row(0).to_owned())
    }

    /// Strided 1D convolution of the flattened backbone map.
    pub fn global_context_vector(&self, feat: &Array3<f64>) -> Option<Array1<f64>> {
        let conv = self.global_conv.as_ref()?;
        let flat = feat.as_standard_layout().into_owned().into_shape_with_order(feat.len()).expect("flatten");
        Some(conv.forward(&flat))
    }

    fn head_forward(&self, feat: &Array3<f64>, rois: &[BBox], global: Option<&Array1<f64>>) -> Result<HeadForward> {
        let (pooled, roi_cache) = self.roi_align.forward(feat, rois);
        let mut h6 = self.fc6.forward(pooled.view());
        relu2(&mut h6);
        let mut h7 = self.fc7.forward(h6.view());
        relu2(&mut h7);
        let fused = match global {
            Some(g) => fuse_global(&h7, Some(g), self.config.beta)?,
            None => h7,
        };
        let cls_logits = self.cls_score.forward(fused.view());
        let bbox_deltas = self.bbox_pred.forward(fused.view());
        Ok(HeadForward { roi_cache, pooled, h6, fused, cls_logits, bbox_deltas })
    }

    /// Draws the anchor and region samples for one image.
    pub fn plan(&self, sample: &DetectionSample, rng: &mut impl Rng) -> Result<LossPlan> {
        self.check_frame(&sample.image)?;
        let f = self.features(&sample.image);
        Ok(self.plan_from(&f, sample, rng))
    }

    fn plan_from(&self, f: &FeatureForward, sample: &DetectionSample, rng: &mut impl Rng) -> LossPlan {
        let cfg = &self.config;
        let gts: Vec<BBox> = sample.boxes.iter().map(|b| b.bbox).collect();
        let labels = label_anchors(&self.anchors, &gts, cfg.rpn_fg_iou, cfg.rpn_bg_iou);
        let pos: Vec<(usize, BBox)> = labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                AnchorLabel::Positive(g) => Some((i, gts[*g])),
                _ => None,
            })
            .collect();
        let neg: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, AnchorLabel::Negative).then_some(i))
            .collect();
        let max_pos = (cfg.rpn_sample_size as f64 * cfg.rpn_positive_fraction) as usize;
        let n_pos = pos.len().min(max_pos);
        let n_neg = neg.len().min(cfg.rpn_sample_size - n_pos);
        let rpn_positives = pick(&pos, n_pos, rng);
        let sampled_neg = pick(&neg, n_neg, rng);
        let negatives_before_drop = sampled_neg.len();
        let rpn_negatives = nrd_filter(sampled_neg, cfg.rho, rng);

        let mut cands: Vec<BBox> = self
            .proposals(f, cfg.rpn_pre_nms_train, cfg.rpn_post_nms_train)
            .into_iter()
            .map(|p| p.bbox)
            .collect();
        cands.extend(gts.iter().copied());
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        for b in cands {
            let best = gts
                .iter()
                .enumerate()
                .map(|(i, g)| (b.iou(g), i))
                .max_by(|p, q| p.0.total_cmp(&q.0).then(q.1.cmp(&p.1)));
            match best {
                Some((o, i)) if o >= cfg.box_fg_iou => fg.push(RoiTarget { bbox: b, species: Some(sample.boxes[i].species), gt: gts[i] }),
                _ => bg.push(RoiTarget { bbox: b, species: None, gt: b }),
            }
        }
        let max_fg = (cfg.box_sample_size as f64 * cfg.box_positive_fraction) as usize;
        let n_fg = fg.len().min(max_fg);
        let n_bg = bg.len().min(cfg.box_sample_size - n_fg);
        let mut rois = pick(&fg, n_fg, rng);
        rois.extend(pick(&bg, n_bg, rng));
        LossPlan { rpn_positives, rpn_negatives, negatives_before_drop, rois }
    }

    /// Forward and backward for one image; gradients are added to the
    /// parameters. A fresh plan is drawn when `plan` is `None`.
    pub fn accumulate_loss(
        &mut self,
        sample: &DetectionSample,
        plan: Option<&LossPlan>,
        rng: &mut impl Rng,
    ) -> Result<(LossBreakdown, LossPlan)> {
        self.check_frame(&sample.image)?;
        let cfg = self.config.clone();
        if cfg.alpha > 0.0 && sample.substrates.is_none() {
            return Err(DetectorError::MissingSubstrateLabels);
        }
        let f = self.features(&sample.image);
        let plan = match plan {
            Some(p) => p.clone(),
            None => self.plan_from(&f, sample, rng),
        };

        // RPN loss over sampled positives and the kept negatives.
        let mut d_obj = Array3::zeros(f.objectness.raw_dim());
        let mut d_rpn_delta = Array3::zeros(f.rpn_deltas.raw_dim());
        let n_terms = plan.rpn_positives.len() + plan.rpn_negatives.len();
        let mut l_p = 0.0;
        if n_terms > 0 {
            let norm = 1.0 / n_terms as f64;
            for &(i, gt) in &plan.rpn_positives {
                let (a, y, x) = self.anchor_pos(i);
                let (l, g) = bce_with_logits(f.objectness[[a, y, x]], 1.0, 1.0);
                l_p += l * norm;
                d_obj[[a, y, x]] += g * norm;
                let target = encode_box(&gt, &self.anchors[i], RPN_CODER_WEIGHTS);
                for j in 0..4 {
                    let (l, g) = smooth_l1(f.rpn_deltas[[4 * a + j, y, x]] - target[j], SMOOTH_L1_BETA);
                    l_p += l * norm;
                    d_rpn_delta[[4 * a + j, y, x]] += g * norm;
                }
            }
            for &i in &plan.rpn_negatives {
                let (a, y, x) = self.anchor_pos(i);
                let (l, g) = bce_with_logits(f.objectness[[a, y, x]], 0.0, 1.0);
                l_p += l * norm;
                d_obj[[a, y, x]] += g * norm;
            }
        }

        // Context branch.
        let flat = f.feat.as_standard_layout().into_owned().into_shape_with_order(f.feat.len()).expect("flatten");
        let mut d_flat = Array1::<f64>::zeros(flat.len());
        let mut l_c = 0.0;
        if let (Some(fc), Some(set)) = (&mut self.context_fc, sample.substrates) {
            let x = flat.view().insert_axis(Axis(0));
            let logits = fc.forward(x);
            let targets = set.multi_hot();
            let mut dl = Array2::zeros((1, 4));
            for k in 0..4 {
                let (l, g) = bce_with_logits(logits[[0, k]], targets[k], self.context_pos_weight[k]);
                l_c += l / 4.0;
                dl[[0, k]] = cfg.alpha * g / 4.0;
            }
            let dx = fc.backward(x, &dl);
            d_flat += &dx.row(0);
        }
        let global = self.global_conv.as_ref().map(|c| c.forward(&flat));

        // Box head.
        let rois: Vec<BBox> = plan.rois.iter().map(|r| r.bbox).collect();
        let mut l_d = 0.0;
        let mut d_feat_head = None;
        if !rois.is_empty() {
            let hf = self.head_forward(&f.feat, &rois, global.as_ref())?;
            let n = rois.len();
            let norm = 1.0 / n as f64;
            let n_cls = SpeciesClass::COUNT + 1;
            let mut dcls = Array2::zeros((n, n_cls));
            let mut dbox = Array2::zeros((n, 4 * n_cls));
            for (r, t) in plan.rois.iter().enumerate() {
                let label = t.species.map(|s| s.index() + 1).unwrap_or(0);
                let logits: Vec<f64> = hf.cls_logits.row(r).to_vec();
                let (l, g) = softmax_cross_entropy(&logits, label);
                l_d += l * norm;
                for (k, gk) in g.into_iter().enumerate() {
                    dcls[[r, k]] = gk * norm;
                }
                if label > 0 {
                    let target = encode_box(&t.gt, &t.bbox, BOX_CODER_WEIGHTS);
                    for j in 0..4 {
                        let (l, g) = smooth_l1(hf.bbox_deltas[[r, 4 * label + j]] - target[j], SMOOTH_L1_BETA);
                        l_d += l * norm;
                        dbox[[r, 4 * label + j]] = g * norm;
                    }
                }
            }
            d_feat_head = Some(self.head_backward(&hf, &dcls, &dbox, &flat, &mut d_flat));
        }

        // RPN backward.
        let mut d_hidden = self.rpn_cls.backward(&f.rpn_cls_cache, &d_obj);
        d_hidden += &self.rpn_bbox.backward(&f.rpn_bbox_cache, &d_rpn_delta);
        relu_backward3(&f.rpn_hidden, &mut d_hidden);
        let mut d_feat = self.rpn_conv.backward(&f.rpn_conv_cache, &d_hidden);
        if let Some(d) = d_feat_head {
            d_feat += &d;
        }
        d_feat += &d_flat.into_shape_with_order(f.feat.raw_dim()).expect("unflatten");
        self.backbone.backward(&f.trace, d_feat);

        let total = l_d + l_p + cfg.alpha * l_c;
        let breakdown = LossBreakdown {
            l_d,
            l_p,
            l_c,
            total,
            rpn_positive_terms: plan.rpn_positives.len(),
            rpn_negative_terms: plan.rpn_negatives.len(),
            rpn_negatives_before_drop: plan.negatives_before_drop,
        };
        Ok((breakdown, plan))
    }

    fn head_backward(
        &mut self,
        hf: &HeadForward,
        dcls: &Array2<f64>,
        dbox: &Array2<f64>,
        flat: &Array1<f64>,
        d_flat: &mut Array1<f64>,
    ) -> Array3<f64> {
        let mut d_fused = self.cls_score.backward(hf.fused.view(), dcls);
        d_fused += &self.bbox_pred.backward(hf.fused.view(), dbox);
        let (d_box, d_glob) = split_fused(d_fused.ncols(), self.config.box_feature_dim);
        if d_glob > 0 {
            let dg = d_fused.slice(s![.., d_box..]).sum_axis(Axis(0)) * self.config.beta;
            if let Some(conv) = &mut self.global_conv {
                *d_flat += &conv.backward(flat, &dg);
            }
        }
        let h7 = hf.fused.slice(s![.., ..d_box]).to_owned();
        let mut dh7 = d_fused.slice(s![.., ..d_box]).to_owned();
        relu_backward2(&h7, &mut dh7);
        let mut dh6 = self.fc7.backward(hf.h6.view(), &dh7);
        relu_backward2(&hf.h6, &mut dh6);
        let dpooled = self.fc6.backward(hf.pooled.view(), &dh6);
        self.roi_align.backward(&hf.roi_cache, &dpooled)
    }

    /// Mean loss over a batch. Gradients are left cleared.
    pub fn compute_loss(&mut self, batch: &[DetectionSample], rng: &mut impl Rng) -> Result<LossBreakdown> {
        let mut sum = LossBreakdown::default();
        for s in batch {
            let (l, _) = self.accumulate_loss(s, None, rng)?;
            sum.accumulate(&l);
        }
        if !batch.is_empty() {
            sum.scale(1.0 / batch.len() as f64);
        }
        self.zero_grad();
        Ok(sum)
    }

    /// Loss for one image under a fixed plan, with gradients cleared first
    /// and left in the parameters.
    pub fn loss_with_plan(&mut self, sample: &DetectionSample, plan: &LossPlan) -> Result<LossBreakdown> {
        self.zero_grad();
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        Ok(self.accumulate_loss(sample, Some(plan), &mut unused)?.0)
    }

    /// Softmax class probabilities (background first) for given regions.
    pub fn roi_class_scores(&self, image: &Array3<f64>, rois: &[BBox]) -> Result<Array2<f64>> {
        self.check_frame(image)?;
        let (feat, _) = self.backbone.forward(image);
        let global = self.global_context_vector(&feat);
        let hf = self.head_forward(&feat, rois, global.as_ref())?;
        let mut out = hf.cls_logits.clone();
        for mut row in out.rows_mut() {
            let p = softmax(&row.to_vec());
            row.assign(&Array1::from(p));
        }
        Ok(out)
    }

    /// Detections for one frame, sorted by descending score.
    pub fn detect(&self, video_id: &str, frame: u32, image: &Array3<f64>) -> Result<Vec<Detection>> {
        self.check_frame(image)?;
        let cfg = &self.config;
        let f = self.features(image);
        let proposals = self.proposals(&f, cfg.rpn_pre_nms_test, cfg.rpn_post_nms_test);
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let rois: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let global = self.global_context_vector(&f.feat);
        let hf = self.head_forward(&f.feat, &rois, global.as_ref())?;
        let (w, h) = (cfg.image_width as f64, cfg.image_height as f64);
        let mut per_class: BTreeMap<usize, (Vec<BBox>, Vec<f64>)> = BTreeMap::new();
        for (r, roi) in rois.iter().enumerate() {
            let probs = softmax(&hf.cls_logits.row(r).to_vec());
            for (k, &p) in probs.iter().enumerate().skip(1) {
                if p <= cfg.score_thresh {
                    continue;
                }
                let d = std::array::from_fn(|j| hf.bbox_deltas[[r, 4 * k + j]]);
                let b = decode_box(d, roi, BOX_CODER_WEIGHTS).clip(w, h);
                if b.width() < 1e-2 || b.height() < 1e-2 {
                    continue;
                }
                let e = per_class.entry(k).or_default();
                e.0.push(b);
                e.1.push(p);
            }
        }
        let mut dets = Vec::new();
        for (k, (boxes, scores)) in per_class {
            let species = SpeciesClass::from_index(k - 1).expect("class index");
            for i in nms(&boxes, &scores, cfg.nms_iou) {
                dets.push(Detection {
                    video_id: video_id.to_string(),
                    frame,
                    species,
                    bbox: boxes[i],
                    score: scores[i],
                });
            }
        }
        sort_detections(&mut dets);
        dets.truncate(cfg.detections_per_image);
        Ok(dets)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: crate::config_hash(&self.config),
            config: self.config.clone(),
            context_pos_weight: self.context_pos_weight,
            params: self.params().into_iter().map(ParamBlob::from).collect(),
            best_epoch: None,
            val_map_trace: Vec::new(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if crate::config_hash(&ck.config) != ck.config_hash {
            return Err(DetectorError::Checkpoint("config hash does not match stored config".into()));
        }
        let mut det = Detector::new(ck.config.clone())?;
        det.context_pos_weight = ck.context_pos_weight;
        let params = det.params_mut();
        if params.len() != ck.params.len() {
            return Err(DetectorError::Checkpoint(format!(
                "expected {} tensors, found {}",
                params.len(),
                ck.params.len()
            )));
        }
        for (p, blob) in params.into_iter().zip(&ck.params) {
            blob.load_into(p).map_err(DetectorError::Checkpoint)?;
        }
        Ok(det)
    }
}

/// Frame ascending, then score descending.
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then(a.frame.cmp(&b.frame))
            .then(b.score.total_cmp(&a.score))
    });
}

/// Appends `beta * global` to every row; `beta == 0` returns the rows as is.
pub fn fuse_global(box_features: &Array2<f64>, global: Option<&Array1<f64>>, beta: f64) -> Result<Array2<f64>> {
    if beta == 0.0 {
        return Ok(box_features.clone());
    }
    let g = global.ok_or(DetectorError::RegionMismatch)?;
    let n = box_features.nrows();
    let tiled = (g * beta).insert_axis(Axis(0));
    let tiled = tiled.broadcast((n, g.len())).expect("broadcast rows");
    Ok(ndarray::concatenate(Axis(1), &[box_features.view(), tiled]).expect("same rows"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

fn label_anchors(anchors: &[BBox], gts: &[BBox], fg: f64, bg: f64) -> Vec<AnchorLabel> {
    if gts.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let mut best_for_gt = vec![0.0f64; gts.len()];
    let ious: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| {
            let row: Vec<f64> = gts.iter().map(|g| a.iou(g)).collect();
            for (j, o) in row.iter().enumerate() {
                best_for_gt[j] = best_for_gt[j].max(*o);
            }
            row
        })
        .collect();
    ious.iter()
        .map(|row| {
            let (best, arg) = row
                .iter()
                .enumerate()
                .fold((-1.0, 0), |acc, (j, &o)| if o > acc.0 { (o, j) } else { acc });
            let is_best = row.iter().enumerate().any(|(j, &o)| o > 0.0 && o == best_for_gt[j]);
            if best >= fg || is_best {
                AnchorLabel::Positive(arg)
            } else if best < bg {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect()
}

fn pick<T: Clone>(items: &[T], k: usize, rng: &mut impl Rng) -> Vec<T> {
    if k >= items.len() {
        return items.to_vec();
    }
    let mut idx = sample(rng, items.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}

/// Serialized weights plus the hash of the config that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: DetectorConfig,
    pub config_hash: String,
    pub context_pos_weight: [f64; 4],
    pub params: Vec<ParamBlob>,
    pub best_epoch: Option<usize>,
    pub val_map_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub detector: Detector,
    pub best_epoch: usize,
    pub val_map_trace: Vec<f64>,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<LossBreakdown>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.detector.to_checkpoint();
        ck.best_epoch = Some(self.best_epoch);
        ck.val_map_trace = self.val_map_trace.clone();
        ck
    }
}

/// Context loss weights as negatives over positives per substrate.
pub fn context_weights(samples: &[DetectionSample]) -> [f64; 4] {
    let mut pos = [0usize; 4];
    let mut n = 0usize;
    for s in samples {
        if let Some(set) = s.substrates {
            n += 1;
            for sub in set.iter() {
                pos[sub.index()] += 1;
            }
        }
    }
    std::array::from_fn(|k| if pos[k] == 0 { 1.0 } else { (n - pos[k]) as f64 / pos[k] as f64 })
}

/// Ground truth for a validation sample whose boxes are complete.
pub fn sample_ground_truth(s: &DetectionSample) -> FrameGroundTruth {
    FrameGroundTruth {
        video_id: s.video_id.clone(),
        frame: s.frame,
        boxes: s.boxes.clone(),
        fully_annotated_bottom_half: true,
    }
}

/// Validation mAP@0.5 over bottom halves.
pub fn validation_map(det: &Detector, val: &[DetectionSample]) -> Result<f64> {
    let mut dets = Vec::new();
    for s in val {
        dets.extend(det.detect(&s.video_id, s.frame, &s.image)?);
    }
    let frames: Vec<FrameGroundTruth> = val.iter().map(sample_ground_truth).collect();
    Ok(map_bottom_half(&dets, &frames, det.config.image_height as f64)?.map50)
}

/// Trains from scratch, keeping the epoch with the best validation mAP
/// (the last epoch when no validation frames are given).
pub fn train(train_set: &[DetectionSample], val: &[DetectionSample], config: &DetectorConfig) -> Result<TrainOutcome> {
    train_with_progress(train_set, val, config, |_, _, _| {})
}

pub fn train_with_progress(
    train_set: &[DetectionSample],
    val: &[DetectionSample],
    config: &DetectorConfig,
    mut progress: impl FnMut(usize, &LossBreakdown, Option<f64>),
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(DetectorError::EmptyDataset);
    }
    let mut cfg = config.clone();
    if cfg.context_pos_weight.is_none() && cfg.alpha > 0.0 {
        cfg.context_pos_weight = Some(context_weights(train_set));
    }
    let mut det = Detector::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, usize, Detector)> = None;
    let mut val_map_trace = Vec::new();
    let mut loss_trace = Vec::new();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let (l, _) = det.accumulate_loss(&train_set[i], None, &mut rng)?;
                if !l.total.is_finite() {
                    return Err(DetectorError::Diverged { epoch });
                }
                epoch_loss.accumulate(&l);
            }
            opt.step(det.params_mut(), 1.0 / batch.len() as f64);
        }
        if det.params().iter().any(|p| p.value.iter().any(|v| !v.is_finite())) {
            return Err(DetectorError::Diverged { epoch });
        }
        epoch_loss.scale(1.0 / train_set.len() as f64);
        let score = if val.is_empty() { None } else { Some(validation_map(&det, val)?) };
        progress(epoch, &epoch_loss, score);
        loss_trace.push(epoch_loss);
        let s = score.unwrap_or(f64::NEG_INFINITY);
        val_map_trace.extend(score);
        if best.as_ref().is_none_or(|(b, _, _)| s > *b || val.is_empty()) {
            best = Some((s, epoch, det.clone()));
        }
    }
    let (_, best_epoch, detector) = best.ok_or(DetectorError::InvalidConfig("max_epochs must be positive".into()))?;
    Ok(TrainOutcome { detector, best_epoch, val_map_trace, loss_trace })
}

/// Runs the detector over frames; output ordered by frame, then score.
pub fn infer<'a>(
    det: &Detector,
    video_id: &str,
    frames: impl IntoIterator<Item = (u32, &'a Array3<f64>)>,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (frame, image) in frames {
        out.extend(det.detect(video_id, frame, image)?);
    }
    sort_detections(&mut out);
    Ok(out)
}

/// Context-branch substrate probabilities, B/C/M/R.
pub fn context_probabilities(det: &Detector, image: &Array3<f64>) -> Option<[f64; 4]> {
    let (feat, _) = det.backbone.forward(image);
    let l = det.context_logits(&feat)?;
    Some(std::array::from_fn(|k| sigmoid(l[k])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::SubstrateClass;

    pub(crate) fn tiny_config() -> DetectorConfig {
        DetectorConfig {
            image_width: 32,
            image_height: 32,
            backbone: vec![
                BackboneStage { channels: 4, kernel: 2, stride: 2 },
                BackboneStage { channels: 4, kernel: 2, stride: 2 },
                BackboneStage { channels: 4, kernel: 2, stride: 2 },
            ],
            box_feature_dim: 16,
            global_feature_dim: Some(8),
            anchor_scales: vec![12.0],
            anchor_ratios: vec![1.0],
            ..DetectorConfig::default()
        }
    }

    fn tiny_sample() -> DetectionSample {
        let image = Array3::from_shape_fn((3, 32, 32), |(c, y, x)| {
            if (8..20).contains(&y) && (10..22).contains(&x) {
                0.4 - 0.1 * c as f64
            } else {
                -0.3 + 0.01 * ((x * 7 + y * 3) % 5) as f64
            }
        });
        DetectionSample {
            video_id: "v".into(),
            frame: 0,
            image,
            boxes: vec![LabeledBox { species: SpeciesClass::SquatLobster, bbox: BBox::new(10.0, 8.0, 22.0, 20.0) }],
            substrates: Some([SubstrateClass::Mud].into_iter().collect()),
        }
    }

    #[test]
    fn nrd_keeps_exact_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(nrd_filter((0..100).collect::<Vec<_>>(), 0.0, &mut rng).len(), 100);
        assert!(nrd_filter((0..100).collect::<Vec<_>>(), 1.0, &mut rng).is_empty());
        let kept = nrd_filter((0..100).collect::<Vec<_>>(), 0.75, &mut rng);
        assert_eq!(kept.len(), 25);
        let other = nrd_filter((0..100).collect::<Vec<_>>(), 0.75, &mut rng);
        assert_ne!(kept, other);
        assert_eq!(nrd_keep_count(10, 0.9), 1);
    }

    #[test]
    fn box_coding_round_trips() {
        let r = BBox::new(4.0, 6.0, 20.0, 30.0);
        let t = BBox::new(5.5, 2.0, 25.0, 28.0);
        let d = encode_box(&t, &r, BOX_CODER_WEIGHTS);
        let back = decode_box(d, &r, BOX_CODER_WEIGHTS);
        for (a, b) in [(t.x1, back.x1), (t.y1, back.y1), (t.x2, back.x2), (t.y2, back.y2)] {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn nms_suppresses_overlaps() {
        let boxes = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(1.0, 1.0, 11.0, 11.0), BBox::new(30.0, 30.0, 40.0, 40.0)];
        assert_eq!(nms(&boxes, &[0.9, 0.8, 0.7], 0.5), vec![0, 2]);
    }

    #[test]
    fn fusion_semantics() {
        let h = Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64);
        let g = Array1::from(vec![1.0, -2.0]);
        assert_eq!(fuse_global(&h, Some(&g), 0.0).unwrap(), h);
        let f = fuse_global(&h, Some(&g), 0.01).unwrap();
        assert_eq!(f.ncols(), 5);
        assert_eq!(f.slice(s![1, 3..]).to_vec(), vec![0.01, -0.02]);
        assert!(matches!(fuse_global(&h, None, 1.0), Err(DetectorError::RegionMismatch)));
    }

    #[test]
    fn context_modules_follow_weights() {
        let vanilla = Detector::new(tiny_config()).unwrap();
        assert!(!vanilla.has_context_branch() && !vanilla.has_global_fusion());
        assert_eq!(vanilla.head_input_dim(), 16);
        let cdd = Detector::new(DetectorConfig { alpha: 1e-4, beta: 0.01, ..tiny_config() }).unwrap();
        assert_eq!(cdd.head_input_dim(), 24);
        // Shared weights come from the same stream.
        assert_eq!(vanilla.backbone.stages[0].weight, cdd.backbone.stages[0].weight);
        assert_eq!(vanilla.fc7.weight, cdd.fc7.weight);
    }

    #[test]
    fn global_dim_must_divide_flat_length() {
        let cfg = DetectorConfig { beta: 1.0, global_feature_dim: Some(7), ..tiny_config() };
        assert!(matches!(Detector::new(cfg), Err(DetectorError::GlobalStride { len: 64, dim: 7 })));
    }

    #[test]
    fn context_logits_of_zero_layer_equal_bias() {
        let mut det = Detector::new(DetectorConfig { alpha: 1.0, ..tiny_config() }).unwrap();
        let fc = det.context_fc.as_mut().unwrap();
        fc.weight.value.fill(0.0);
        fc.bias.value = Array2::from_shape_vec((1, 4), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let l = det.context_logits(&Array3::zeros(tiny_config().feature_dim())).unwrap();
        assert_eq!(l.to_vec(), vec![0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn loss_is_additive_and_requires_labels() {
        let sample = tiny_sample();
        let mut det = Detector::new(DetectorConfig { alpha: 1e-4, beta: 0.5, rho: 0.5, ..tiny_config() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = det.compute_loss(std::slice::from_ref(&sample), &mut rng).unwrap();
        assert!(l.l_d >= 0.0 && l.l_p >= 0.0 && l.l_c >= 0.0);
        assert!((l.total - (l.l_d + l.l_p + 1e-4 * l.l_c)).abs() <= 1e-12 * l.total.max(1.0));
        let mut unlabeled = sample;
        unlabeled.substrates = None;
        assert!(matches!(det.compute_loss(&[unlabeled], &mut rng), Err(DetectorError::MissingSubstrateLabels)));
    }

    #[test]
    fn frame_size_is_checked() {
        let det = Detector::new(tiny_config()).unwrap();
        let img = Array3::zeros((3, 16, 32));
        assert!(matches!(det.detect("v", 0, &img), Err(DetectorError::FrameSize { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let det = Detector::new(DetectorConfig { alpha: 1.0, beta: 1.0, ..tiny_config() }).unwrap();
        let json = serde_json::to_string(&det.to_checkpoint()).unwrap();
        let ck: Checkpoint = serde_json::from_str(&json).unwrap();
        let back = Detector::from_checkpoint(&ck).unwrap();
        assert_eq!(back.params(), det.params());
        let mut tampered = ck;
        tampered.config.lr *= 2.0;
        assert!(Detector::from_checkpoint(&tampered).is_err());
    }

    #[test]
    fn detection_json_layout() {
        let d = Detection {
            video_id: "v".into(),
            frame: 4,
            species: SpeciesClass::YellowGorgonian,
            bbox: BBox::new(1.0, 2.0, 3.0, 4.0),
            score: 0.5,
        };
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(s, r#"{"video":"v","frame":4,"species":"YG","x1":1.0,"y1":2.0,"x2":3.0,"y2":4.0,"score":0.5}"#);
        assert_eq!(serde_json::from_str::<Detection>(&s).unwrap(), d);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let sample = tiny_sample();
        let cfg = DetectorConfig { max_epochs: 6, batch_size: 1, lr: 3e-3, ..tiny_config() };
        let a = train(std::slice::from_ref(&sample), &[], &cfg).unwrap();
        let b = train(std::slice::from_ref(&sample), &[], &cfg).unwrap();
        assert_eq!(a.loss_trace[0], b.loss_trace[0]);
        assert!(a.loss_trace.last().unwrap().total < a.loss_trace[0].total);
        assert!(matches!(train(&[], &[], &cfg), Err(DetectorError::EmptyDataset)));
    }
}
