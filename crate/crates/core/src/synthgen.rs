//! Seeded generator of synthetic benthic survey video.
//!
//! The camera moves forward at constant speed, so the whole scene (substrate
//! texture and animals) scrolls downward by `object_speed` pixels per frame.
//! Animals enter at the top, cross the frame and touch the bottom edge; the
//! first frame of bottom contact is the CABOF label of that animal.
//!
//! Nothing is stored per frame. Frames are rendered on demand from the
//! object ledger and the substrate timeline, so a sequence of any length can
//! be generated and only the frames that are needed get rasterized.

use std::collections::{BTreeSet, VecDeque};

use image::{Rgb, RgbImage};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{
    frame_substrate_labels, CabofLabel, FrameGroundTruth, KeyframeBox, LabeledBox,
    SpeciesClass, SubstrateClass, SubstrateInterval, SubstrateSet, VideoAnnotations,
};
use crate::bbox::BBox;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene duration must be at least one second")]
    ZeroDuration,
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Ellipse,
    Rectangle,
    Diamond,
    Cross,
    Ring,
    Saltire,
    Triangle,
}

impl Shape {
    /// Coverage test in box-local coordinates `u, v` in `[0, 1]`.
    fn covers(self, u: f64, v: f64) -> bool {
        let (a, b) = (2.0 * u - 1.0, 2.0 * v - 1.0);
        match self {
            Shape::Ellipse => a * a + b * b <= 1.0,
            Shape::Rectangle => true,
            Shape::Diamond => a.abs() + b.abs() <= 1.0,
            Shape::Cross => a.abs() < 0.35 || b.abs() < 0.35,
            Shape::Ring => {
                let r = a * a + b * b;
                (0.3..=1.0).contains(&r)
            }
            Shape::Saltire => (a.abs() - b.abs()).abs() < 0.35,
            Shape::Triangle => v >= a.abs() * 0.95,
        }
    }
}

/// Appearance of one species.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesStyle {
    pub shape: Shape,
    pub color: [u8; 3],
    /// Box height range in pixels.
    pub size_range: (f64, f64),
    /// Width over height.
    pub aspect: f64,
    pub texture_seed: u64,
    /// Neutral backing plate drawn around the animal, hiding the substrate
    /// in its immediate neighbourhood. Zero disables the plate.
    #[serde(default)]
    pub plate_margin: f64,
}

/// Procedural texture of one substrate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstrateStyle {
    pub base: [u8; 3],
    pub accent: [u8; 3],
    /// Noise lattice spacing in pixels.
    pub scale: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub frame_width: u32,
    pub frame_height: u32,
    pub fps: u32,
    /// Whole seconds.
    pub duration: f64,
    /// Mean seconds per substrate regime.
    pub substrate_segment_length: f64,
    /// Probability that a regime carries a second, overlapping substrate.
    pub substrate_overlap_prob: f64,
    /// Placement intensity of each species on each substrate, rows B, C, M, R.
    pub species_substrate_prior: [[f64; 10]; 4],
    /// Expected animals reaching the bottom edge per second.
    pub spawn_rate: f64,
    /// Downward scene motion in pixels per frame.
    pub object_speed: f64,
    pub species: Vec<SpeciesStyle>,
    pub substrates: Vec<SubstrateStyle>,
    /// Species pairs rendered identically; the second member borrows the
    /// appearance of the first.
    pub ambiguity_pairs: Vec<(SpeciesClass, SpeciesClass)>,
    pub withhold_fraction: f64,
    /// Inclusive range of frame gaps between consecutive keyframes.
    pub keyframe_gap: (u32, u32),
    /// Fraction of CABOF frames emitted as fully annotated evaluation frames.
    pub eval_frame_fraction: f64,
    /// Boxes clipped to fewer visible rows than this are not emitted.
    pub min_visible_height: f64,
}

/// Species-by-substrate co-occurrence fractions as printed for the survey
/// data; used as the default placement prior.
pub const SURVEY_PRIOR: [[f64; 10]; 4] = [
    [0.302, 0.059, 0.362, 0.206, 0.198, 0.219, 0.168, 0.224, 0.176, 0.340],
    [0.773, 0.370, 0.797, 0.575, 0.712, 0.581, 0.454, 0.754, 0.601, 0.887],
    [0.288, 0.813, 0.185, 0.951, 0.471, 0.689, 0.372, 0.467, 0.896, 0.127],
    [0.670, 0.424, 0.464, 0.297, 0.716, 0.745, 0.998, 0.585, 0.324, 0.380],
];

pub fn default_species_styles() -> Vec<SpeciesStyle> {
    let s = |shape, color, lo, hi, aspect, seed| SpeciesStyle {
        shape,
        color,
        size_range: (lo, hi),
        aspect,
        texture_seed: seed,
        plate_margin: 0.0,
    };
    vec![
        s(Shape::Saltire, [235, 150, 40], 18.0, 28.0, 1.0, 11),
        s(Shape::Ellipse, [250, 120, 190], 12.0, 18.0, 1.0, 12),
        s(Shape::Triangle, [200, 200, 210], 18.0, 30.0, 0.9, 13),
        s(Shape::Cross, [255, 90, 60], 20.0, 30.0, 1.0, 14),
        s(Shape::Triangle, [220, 40, 50], 16.0, 26.0, 0.7, 15),
        s(Shape::Diamond, [240, 100, 30], 10.0, 16.0, 1.3, 16),
        s(Shape::Ring, [245, 230, 170], 16.0, 26.0, 1.0, 17),
        s(Shape::Ellipse, [250, 250, 250], 12.0, 20.0, 1.8, 18),
        s(Shape::Rectangle, [235, 235, 255], 10.0, 16.0, 1.6, 19),
        s(Shape::Triangle, [250, 230, 40], 16.0, 26.0, 0.8, 20),
    ]
}

pub fn default_substrate_styles() -> Vec<SubstrateStyle> {
    vec![
        SubstrateStyle { base: [70, 62, 55], accent: [150, 140, 125], scale: 22.0, contrast: 0.9 },
        SubstrateStyle { base: [95, 85, 65], accent: [175, 160, 120], scale: 6.0, contrast: 0.9 },
        SubstrateStyle { base: [48, 58, 40], accent: [72, 82, 58], scale: 2.5, contrast: 0.5 },
        SubstrateStyle { base: [35, 45, 70], accent: [90, 100, 125], scale: 40.0, contrast: 0.8 },
    ]
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frame_width: 256,
            frame_height: 256,
            fps: 30,
            duration: 120.0,
            substrate_segment_length: 20.0,
            substrate_overlap_prob: 0.3,
            species_substrate_prior: SURVEY_PRIOR,
            spawn_rate: 1.0,
            object_speed: 2.0,
            species: default_species_styles(),
            substrates: default_substrate_styles(),
            ambiguity_pairs: Vec::new(),
            withhold_fraction: 0.5,
            keyframe_gap: (10, 30),
            eval_frame_fraction: 0.5,
            min_visible_height: 2.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.duration.round() < 1.0 || !self.duration.is_finite() {
            return Err(SynthError::ZeroDuration);
        }
        if self.frame_width == 0 || self.frame_height == 0 {
            return bad("frame size must be positive");
        }
        if self.fps == 0 {
            return bad("fps must be positive");
        }
        if !(self.object_speed > 0.0) {
            return bad("object_speed must be positive");
        }
        if self
            .species_substrate_prior
            .iter()
            .flatten()
            .any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return bad("prior intensities must be non-negative");
        }
        if !(self.spawn_rate >= 0.0) {
            return bad("spawn_rate must be non-negative");
        }
        if self.species.len() != SpeciesClass::COUNT {
            return bad("exactly ten species styles are required");
        }
        if self.substrates.len() != SubstrateClass::COUNT {
            return bad("exactly four substrate styles are required");
        }
        if self.species.iter().any(|s| {
            !(s.size_range.0 > 0.0) || s.size_range.1 < s.size_range.0 || !(s.aspect > 0.0)
        }) {
            return bad("species sizes and aspects must be positive");
        }
        if !(0.0..1.0).contains(&self.withhold_fraction) {
            return bad("withhold_fraction must lie in [0, 1)");
        }
        if self.keyframe_gap.0 == 0 || self.keyframe_gap.1 < self.keyframe_gap.0 {
            return bad("keyframe_gap must be a non-empty positive range");
        }
        if !(0.0..=1.0).contains(&self.eval_frame_fraction) {
            return bad("eval_frame_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.substrate_overlap_prob) {
            return bad("substrate_overlap_prob must lie in [0, 1]");
        }
        if !(self.substrate_segment_length > 0.0) {
            return bad("substrate_segment_length must be positive");
        }
        Ok(())
    }

    pub fn duration_secs(&self) -> u32 {
        self.duration.round() as u32
    }

    /// Frames `0..=duration*fps`; the last frame sits exactly on the end time.
    pub fn n_frames(&self) -> u32 {
        self.duration_secs() * self.fps + 1
    }

    /// Style used to draw `species`, following ambiguity pairs.
    pub fn appearance(&self, species: SpeciesClass) -> &SpeciesStyle {
        let shown = self
            .ambiguity_pairs
            .iter()
            .find(|(_, b)| *b == species)
            .map(|(a, _)| *a)
            .unwrap_or(species);
        &self.species[shown.index()]
    }

    /// Per-species placement weights for a frame showing `set`: the mean of
    /// the prior over the visible substrates.
    pub fn species_weights(&self, set: SubstrateSet) -> [f64; 10] {
        let mut w = [0.0; 10];
        if set.is_empty() {
            return w;
        }
        for s in set.iter() {
            for (sp, wsp) in w.iter_mut().enumerate() {
                *wsp += self.species_substrate_prior[s.index()][sp];
            }
        }
        let n = set.len() as f64;
        w.iter_mut().for_each(|x| *x /= n);
        w
    }
}

/// One ground-truth animal. The world is fixed relative to the seabed and
/// scrolls down the frame, so the box moves linearly with the frame index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub object_id: u32,
    pub species: SpeciesClass,
    pub x1: f64,
    pub width: f64,
    pub height: f64,
    /// Frame at which the unclipped box bottom equals `frame_height - 1`.
    pub contact_frame: i64,
    pub first_frame: u32,
    pub last_frame: u32,
}

impl GtObject {
    /// Unclipped box at `frame`.
    pub fn raw_box(&self, frame: u32, frame_height: u32, speed: f64) -> BBox {
        let y2 = f64::from(frame_height) - 1.0 + speed * (i64::from(frame) - self.contact_frame) as f64;
        BBox::new(self.x1, y2 - self.height, self.x1 + self.width, y2)
    }

    /// Clipped box if the object is visible at `frame`.
    pub fn box_at(&self, frame: u32, config: &SceneConfig) -> Option<BBox> {
        if frame < self.first_frame || frame > self.last_frame {
            return None;
        }
        Some(
            self.raw_box(frame, config.frame_height, config.object_speed)
                .clip(f64::from(config.frame_width), f64::from(config.frame_height)),
        )
    }
}

fn visible_height(obj: &GtObject, frame: i64, config: &SceneConfig) -> f64 {
    let h = f64::from(config.frame_height);
    let y2 = h - 1.0 + config.object_speed * (frame - obj.contact_frame) as f64;
    let y1 = y2 - obj.height;
    y2.min(h) - y1.max(0.0)
}

/// Partially annotated training targets plus fully annotated evaluation
/// frames derived from one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialTrainingSet {
    pub keyframes: Vec<KeyframeBox>,
    pub eval_frames: Vec<FrameGroundTruth>,
    pub withheld: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub video_id: String,
    pub config: SceneConfig,
    pub seed: u64,
    pub n_frames: u32,
    pub objects: Vec<GtObject>,
    pub intervals: Vec<SubstrateInterval>,
    pub cabofs: Vec<CabofLabel>,
    /// Object id of each CABOF label, index-aligned with `cabofs`.
    pub cabof_objects: Vec<u32>,
    pub keyframes: Vec<KeyframeBox>,
    pub full_frames: Vec<FrameGroundTruth>,
    pub withheld: BTreeSet<u32>,
}

const EMIT_STREAM: u64 = 0x6b65_7966_7261_6d65;

/// Generates a sequence; identical `(config, seed)` give identical output.
pub fn generate_sequence(config: &SceneConfig, seed: u64) -> Result<SyntheticSequence, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_frames = config.n_frames();
    let intervals = build_timeline(config, &mut rng);
    let fps = f64::from(config.fps);
    let labels: Vec<SubstrateSet> = (0..n_frames)
        .map(|f| frame_substrate_labels(&intervals, f64::from(f) / fps))
        .collect();

    let objects = place_objects(config, &labels, &mut rng);
    let mut cabofs = Vec::new();
    let mut cabof_objects = Vec::new();
    for o in &objects {
        if o.contact_frame >= 0 && (o.contact_frame as u64) < u64::from(n_frames) {
            cabofs.push(CabofLabel {
                species: o.species,
                at: o.contact_frame as f64 / fps,
                count: 1,
            });
            cabof_objects.push(o.object_id);
        }
    }

    let mut seq = SyntheticSequence {
        video_id: format!("syn-{seed}"),
        config: config.clone(),
        seed,
        n_frames,
        objects,
        intervals,
        cabofs,
        cabof_objects,
        keyframes: Vec::new(),
        full_frames: Vec::new(),
        withheld: BTreeSet::new(),
    };
    let partial = emit_partial_training_set(&seq, config.withhold_fraction);
    seq.keyframes = partial.keyframes;
    seq.full_frames = partial.eval_frames;
    seq.withheld = partial.withheld;
    Ok(seq)
}

fn build_timeline(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<SubstrateInterval> {
    let total = config.duration_secs();
    let seg_len = Exp::new(1.0 / config.substrate_segment_length).expect("positive rate");
    let mut intervals = Vec::new();
    let mut t = 0u32;
    let mut prev: Option<usize> = None;
    while t < total {
        let len = (seg_len.sample(rng).round() as u32).max(2);
        let end = (t + len).min(total);
        let mut s = rng.random_range(0..4);
        if Some(s) == prev {
            s = (s + 1 + rng.random_range(0..3)) % 4;
        }
        let host = SubstrateClass::from_index(s).expect("index < 4");
        intervals.push(SubstrateInterval {
            substrate: host,
            begin: f64::from(t),
            end: f64::from(end),
        });
        // Overlays sit strictly inside the host segment so they never touch
        // an adjacent interval of the same substrate.
        if end - t >= 4 && rng.random_bool(config.substrate_overlap_prob) {
            let o = (s + 1 + rng.random_range(0..3)) % 4;
            let a = t + 1 + rng.random_range(0..(end - t - 2) / 2);
            let b = end - 1 - rng.random_range(0..(end - a - 1).max(1));
            let b = b.max(a);
            intervals.push(SubstrateInterval {
                substrate: SubstrateClass::from_index(o).expect("index < 4"),
                begin: f64::from(a),
                end: f64::from(b),
            });
        }
        prev = Some(s);
        t = end;
    }
    intervals
}

fn place_objects(config: &SceneConfig, labels: &[SubstrateSet], rng: &mut ChaCha8Rng) -> Vec<GtObject> {
    let n_frames = labels.len() as i64;
    let h = f64::from(config.frame_height);
    let w = f64::from(config.frame_width);
    let speed = config.object_speed;
    // Animals keep arriving after the last frame; they are visible near the
    // end but never reach the bottom edge.
    let lead = (h / speed).ceil() as i64 + 1;
    let per_frame = config.spawn_rate / f64::from(config.fps);
    let arrivals = (per_frame > 0.0).then(|| Poisson::new(per_frame).expect("positive mean"));

    let mut objects: Vec<GtObject> = Vec::new();
    // World boxes (at frame 0) of recent objects, for overlap rejection.
    let mut recent: VecDeque<(BBox, f64)> = VecDeque::new();
    let max_extent = config
        .species
        .iter()
        .map(|s| s.size_range.1 * s.aspect.max(1.0) + 2.0 * s.plate_margin)
        .fold(0.0, f64::max);

    for fc in 0..(n_frames + lead) {
        let Some(arrivals) = &arrivals else { break };
        let k = arrivals.sample(rng) as usize;
        if k == 0 {
            continue;
        }
        let set = labels[fc.min(n_frames - 1) as usize];
        let weights = config.species_weights(set);
        let total: f64 = weights.iter().sum();
        for _ in 0..k {
            if total <= 0.0 {
                continue;
            }
            let mut pick = rng.random::<f64>() * total;
            let mut sp_idx = 9;
            for (i, wi) in weights.iter().enumerate() {
                if pick < *wi {
                    sp_idx = i;
                    break;
                }
                pick -= wi;
            }
            let species = SpeciesClass::from_index(sp_idx).expect("index < 10");
            let style = config.appearance(species);
            let height = rng.random_range(style.size_range.0..=style.size_range.1);
            let width = (height * style.aspect).min(w - 1.0);
            let margin = style.plate_margin + 1.0;
            let y2_0 = h - 1.0 - speed * fc as f64;
            let mut placed = None;
            for _ in 0..8 {
                let x1 = rng.random_range(0.0..=(w - width).max(0.0));
                let world = BBox::new(x1 - margin, y2_0 - height - margin, x1 + width + margin, y2_0 + margin);
                if recent.iter().all(|(b, _)| b.intersection_area(&world) <= 0.0) {
                    placed = Some((x1, world));
                    break;
                }
            }
            let Some((x1, world)) = placed else { continue };
            while let Some((b, _)) = recent.front() {
                if b.y1 > world.y2 + max_extent {
                    recent.pop_front();
                } else {
                    break;
                }
            }
            recent.push_back((world, height));

            let mut obj = GtObject {
                object_id: objects.len() as u32,
                species,
                x1,
                width,
                height,
                contact_frame: fc,
                first_frame: 0,
                last_frame: 0,
            };
            if let Some((first, last)) = visible_span(&obj, config, n_frames) {
                obj.first_frame = first;
                obj.last_frame = last;
                objects.push(obj);
            }
        }
    }
    for (i, o) in objects.iter_mut().enumerate() {
        o.object_id = i as u32;
    }
    objects
}

fn visible_span(obj: &GtObject, config: &SceneConfig, n_frames: i64) -> Option<(u32, u32)> {
    let m = config.min_visible_height;
    let h = f64::from(config.frame_height);
    let speed = config.object_speed;
    // Analytic estimates, then exact adjustment against the clipped height.
    let mut first = obj.contact_frame + ((m - (h - 1.0)) / speed).ceil() as i64;
    while visible_height(obj, first - 1, config) >= m {
        first -= 1;
    }
    while visible_height(obj, first, config) < m && first <= obj.contact_frame + 1 {
        first += 1;
    }
    let mut last = obj.contact_frame + ((obj.height + 1.0 - m) / speed).floor() as i64;
    while visible_height(obj, last + 1, config) >= m {
        last += 1;
    }
    while last > first && visible_height(obj, last, config) < m {
        last -= 1;
    }
    let first = first.max(0);
    let last = last.min(n_frames - 1);
    if first > last || visible_height(obj, first, config) < m {
        return None;
    }
    Some((first as u32, last as u32))
}

/// Selects the withheld objects and authors keyframes for every other one.
///
/// Withholding is per object: exactly `floor(withhold_fraction * N)` objects
/// chosen uniformly never appear in a keyframe. Evaluation frames list every
/// animal that is not entirely above the horizontal midline, withheld or not.
pub fn emit_partial_training_set(seq: &SyntheticSequence, withhold_fraction: f64) -> PartialTrainingSet {
    let config = &seq.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seq.seed ^ EMIT_STREAM);
    let n = seq.objects.len();
    let n_withheld = ((withhold_fraction.clamp(0.0, 1.0) * n as f64).floor() as usize).min(n);
    let withheld: BTreeSet<u32> = sample(&mut rng, n, n_withheld)
        .into_iter()
        .map(|i| seq.objects[i].object_id)
        .collect();

    let mut keyframes = Vec::new();
    for o in &seq.objects {
        if withheld.contains(&o.object_id) {
            continue;
        }
        let stop = if o.contact_frame >= i64::from(o.first_frame) && o.contact_frame <= i64::from(o.last_frame) {
            o.contact_frame as u32
        } else {
            o.last_frame
        };
        // Keyframe the first fully visible frame too, since interpolating
        // across the clipped entry is poor.
        let entry = (o.first_frame..=stop)
            .find(|&f| o.raw_box(f, config.frame_height, config.object_speed).y1 >= 0.0)
            .unwrap_or(stop);
        let mut f = o.first_frame;
        loop {
            if let Some(bbox) = o.box_at(f, config) {
                keyframes.push(KeyframeBox {
                    video_id: seq.video_id.clone(),
                    frame: f,
                    target_id: format!("t{:05}", o.object_id),
                    species: o.species,
                    bbox,
                });
            }
            if f >= stop {
                break;
            }
            let prev = f;
            f = (f + rng.random_range(config.keyframe_gap.0..=config.keyframe_gap.1)).min(stop);
            if prev < entry && f > entry {
                f = entry;
            }
        }
    }
    keyframes.sort_by(|a, b| a.frame.cmp(&b.frame).then_with(|| a.target_id.cmp(&b.target_id)));

    let fps = f64::from(config.fps);
    let cabof_frames: BTreeSet<u32> = seq
        .cabofs
        .iter()
        .map(|c| (c.at * fps).round() as u32)
        .collect();
    let cabof_frames: Vec<u32> = cabof_frames.into_iter().collect();
    let n_eval = if cabof_frames.is_empty() {
        0
    } else {
        ((config.eval_frame_fraction * cabof_frames.len() as f64).round() as usize).clamp(1, cabof_frames.len())
    };
    let mut chosen: Vec<u32> = sample(&mut rng, cabof_frames.len(), n_eval)
        .into_iter()
        .map(|i| cabof_frames[i])
        .collect();
    chosen.sort_unstable();
    let eval_frames = chosen
        .into_iter()
        .map(|f| seq.eval_ground_truth(f))
        .collect();

    PartialTrainingSet { keyframes, eval_frames, withheld }
}

impl SyntheticSequence {
    pub fn with_video_id(mut self, id: impl Into<String>) -> Self {
        let id = id.into();
        for k in &mut self.keyframes {
            k.video_id = id.clone();
        }
        for f in &mut self.full_frames {
            f.video_id = id.clone();
        }
        self.video_id = id;
        self
    }

    pub fn fps(&self) -> f64 {
        f64::from(self.config.fps)
    }

    pub fn frame_labels(&self, frame: u32) -> SubstrateSet {
        frame_substrate_labels(&self.intervals, f64::from(frame) / self.fps())
    }

    pub fn annotations(&self) -> VideoAnnotations {
        VideoAnnotations {
            video_id: self.video_id.clone(),
            fps: self.fps(),
            intervals: self.intervals.clone(),
            cabofs: self.cabofs.clone(),
        }
    }

    pub fn visible_objects(&self, frame: u32) -> impl Iterator<Item = (&GtObject, BBox)> {
        self.objects
            .iter()
            .filter_map(move |o| o.box_at(frame, &self.config).map(|b| (o, b)))
    }

    /// Per-frame boxes of one object over its visible span.
    pub fn track_of(&self, object_id: u32) -> Vec<(u32, BBox)> {
        let o = &self.objects[object_id as usize];
        (o.first_frame..=o.last_frame)
            .filter_map(|f| o.box_at(f, &self.config).map(|b| (f, b)))
            .collect()
    }

    /// Complete ground truth for `frame`, restricted to boxes that reach the
    /// bottom half of the frame.
    pub fn eval_ground_truth(&self, frame: u32) -> FrameGroundTruth {
        let mid = f64::from(self.config.frame_height) / 2.0;
        let boxes = self
            .visible_objects(frame)
            .filter(|(_, b)| b.y2 >= mid)
            .map(|(o, bbox)| LabeledBox { species: o.species, bbox })
            .collect();
        FrameGroundTruth {
            video_id: self.video_id.clone(),
            frame,
            boxes,
            fully_annotated_bottom_half: true,
        }
    }

    /// Rasterizes one frame.
    pub fn render_frame(&self, frame: u32) -> RgbImage {
        let cfg = &self.config;
        let (w, h) = (cfg.frame_width, cfg.frame_height);
        let scroll = cfg.object_speed * f64::from(frame);
        let active: Vec<SubstrateClass> = self.frame_labels(frame).iter().collect();
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            let wy = f64::from(y) - scroll;
            for x in 0..w {
                let wx = f64::from(x);
                let s = match active.len() {
                    0 => SubstrateClass::Mud,
                    1 => active[0],
                    n => {
                        let m = value_noise(wx / 48.0, wy / 48.0, self.seed ^ 0xA5A5);
                        active[((m * n as f64) as usize).min(n - 1)]
                    }
                };
                img.put_pixel(x, y, substrate_pixel(&cfg.substrates[s.index()], s, wx, wy, self.seed));
            }
        }
        for (obj, _) in self.visible_objects(frame) {
            draw_object(&mut img, obj, frame, cfg);
        }
        img
    }
}

fn substrate_pixel(style: &SubstrateStyle, s: SubstrateClass, wx: f64, wy: f64, seed: u64) -> Rgb<u8> {
    let tex_seed = seed.wrapping_mul(31).wrapping_add(s.index() as u64 + 1);
    let n1 = value_noise(wx / style.scale, wy / style.scale, tex_seed);
    let n2 = value_noise(wx / (style.scale * 0.5), wy / (style.scale * 0.5), tex_seed ^ 0x55);
    let v = (0.7 * n1 + 0.3 * n2 - 0.5) * style.contrast + 0.5;
    let v = v.clamp(0.0, 1.0);
    let mix = |a: u8, b: u8| (f64::from(a) + (f64::from(b) - f64::from(a)) * v).round() as u8;
    Rgb([
        mix(style.base[0], style.accent[0]),
        mix(style.base[1], style.accent[1]),
        mix(style.base[2], style.accent[2]),
    ])
}

fn draw_object(img: &mut RgbImage, obj: &GtObject, frame: u32, cfg: &SceneConfig) {
    let style = cfg.appearance(obj.species);
    let raw = obj.raw_box(frame, cfg.frame_height, cfg.object_speed);
    let (w, h) = (f64::from(cfg.frame_width), f64::from(cfg.frame_height));
    let plate = style.plate_margin;
    if plate > 0.0 {
        let p = BBox::new(raw.x1 - plate, raw.y1 - plate, raw.x2 + plate, raw.y2 + plate).clip(w, h);
        for y in p.y1.floor() as u32..(p.y2.ceil() as u32).min(cfg.frame_height) {
            for x in p.x1.floor() as u32..(p.x2.ceil() as u32).min(cfg.frame_width) {
                img.put_pixel(x, y, Rgb([118, 118, 118]));
            }
        }
    }
    let c = raw.clip(w, h);
    for y in c.y1.floor() as u32..(c.y2.ceil() as u32).min(cfg.frame_height) {
        for x in c.x1.floor() as u32..(c.x2.ceil() as u32).min(cfg.frame_width) {
            let (px, py) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
            let u = (px - raw.x1) / raw.width();
            let v = (py - raw.y1) / raw.height();
            if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) || !style.shape.covers(u, v) {
                continue;
            }
            // Speckle anchored to the animal so it moves with it.
            let lx = (px - raw.x1).floor() as i64;
            let ly = (py - raw.y1).floor() as i64;
            let k = 0.85 + 0.3 * hash_unit(lx, ly, style.texture_seed);
            let shade = |c: u8| (f64::from(c) * k).clamp(0.0, 255.0) as u8;
            img.put_pixel(x, y, Rgb([shade(style.color[0]), shade(style.color[1]), shade(style.color[2])]));
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_unit(ix: i64, iy: i64, seed: u64) -> f64 {
    let h = splitmix(seed ^ splitmix((ix as u64).wrapping_mul(0x1F1F_1F1F) ^ splitmix(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth lattice noise in `[0, 1)`.
fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (ix, iy) = (x0 as i64, y0 as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (smooth(fx), smooth(fy));
    let a = hash_unit(ix, iy, seed);
    let b = hash_unit(ix + 1, iy, seed);
    let c = hash_unit(ix, iy + 1, seed);
    let d = hash_unit(ix + 1, iy + 1, seed);
    let top = a + (b - a) * sx;
    let bottom = c + (d - c) * sx;
    top + (bottom - top) * sy
}

/// Expected co-occurrence fractions implied by the placement prior and a
/// realized substrate timeline. `None` where a species can never appear.
pub fn expected_cooccurrence(config: &SceneConfig, intervals: &[SubstrateInterval]) -> [[Option<f64>; 10]; 4] {
    let fps = f64::from(config.fps);
    let mut num = [[0.0; 10]; 4];
    let mut den = [0.0; 10];
    for f in 0..config.n_frames() {
        let set = frame_substrate_labels(intervals, f64::from(f) / fps);
        let w = config.species_weights(set);
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            continue;
        }
        for sp in 0..10 {
            let p = w[sp] / total;
            den[sp] += p;
            for s in set.iter() {
                num[s.index()][sp] += p;
            }
        }
    }
    let mut out = [[None; 10]; 4];
    for s in 0..4 {
        for sp in 0..10 {
            if den[sp] > 0.0 {
                out[s][sp] = Some(num[s][sp] / den[sp]);
            }
        }
    }
    out
}
