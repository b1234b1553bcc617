//! Conversion of sequences and annotation records into model inputs.

use image::RgbImage;
use ndarray::Array3;

use crate::annotations::{boxes_at_frame, group_keyframes, FrameGroundTruth, KeyframeBox, SubstrateInterval, frame_substrate_labels};
use crate::detector::DetectionSample;
use crate::synthgen::SyntheticSequence;

/// `(3, h, w)` tensor with pixels mapped to `[-0.5, 0.5]`.
pub fn image_tensor(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    let raw = img.as_raw();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        f64::from(raw[(y * w as usize + x) * 3 + c]) / 255.0 - 0.5
    })
}

/// Frames carrying at least one keyframed or interpolated box, every
/// `frame_stride` frames, with boxes from the keyframe records.
pub fn keyframe_samples(
    video_id: &str,
    keyframes: &[KeyframeBox],
    intervals: &[SubstrateInterval],
    fps: f64,
    n_frames: u32,
    frame_stride: u32,
    mut load: impl FnMut(u32) -> Array3<f64>,
) -> Vec<DetectionSample> {
    let grouped = group_keyframes(keyframes);
    let mut out = Vec::new();
    for frame in (0..n_frames).step_by(frame_stride.max(1) as usize) {
        let boxes = boxes_at_frame(&grouped, video_id, frame);
        if boxes.is_empty() {
            continue;
        }
        out.push(DetectionSample {
            video_id: video_id.to_string(),
            frame,
            image: load(frame),
            boxes,
            substrates: Some(frame_substrate_labels(intervals, f64::from(frame) / fps)),
        });
    }
    out
}

/// Fully annotated frames as validation samples.
pub fn ground_truth_samples(
    frames: &[FrameGroundTruth],
    intervals: &[SubstrateInterval],
    fps: f64,
    mut load: impl FnMut(&str, u32) -> Array3<f64>,
) -> Vec<DetectionSample> {
    frames
        .iter()
        .map(|f| DetectionSample {
            video_id: f.video_id.clone(),
            frame: f.frame,
            image: load(&f.video_id, f.frame),
            boxes: f.boxes.clone(),
            substrates: Some(frame_substrate_labels(intervals, f64::from(f.frame) / fps)),
        })
        .collect()
}

pub fn sequence_training_samples(seq: &SyntheticSequence, frame_stride: u32) -> Vec<DetectionSample> {
    keyframe_samples(
        &seq.video_id,
        &seq.keyframes,
        &seq.intervals,
        seq.fps(),
        seq.n_frames,
        frame_stride,
        |f| image_tensor(&seq.render_frame(f)),
    )
}

pub fn sequence_eval_samples(seq: &SyntheticSequence) -> Vec<DetectionSample> {
    ground_truth_samples(&seq.full_frames, &seq.intervals, seq.fps(), |_, f| image_tensor(&seq.render_frame(f)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_sequence, SceneConfig};

    #[test]
    fn tensor_normalization() {
        let mut img = RgbImage::new(2, 1);
        img.put_pixel(1, 0, image::Rgb([255, 0, 51]));
        let t = image_tensor(&img);
        assert_eq!(t.dim(), (3, 1, 2));
        assert_eq!(t[[0, 0, 1]], 0.5);
        assert_eq!(t[[1, 0, 1]], -0.5);
        assert!((t[[2, 0, 1]] + 0.3).abs() < 1e-12);
    }

    #[test]
    fn training_samples_only_hold_annotated_targets() {
        let cfg = SceneConfig { frame_width: 64, frame_height: 64, duration: 20.0, spawn_rate: 2.0, ..SceneConfig::default() };
        let seq = generate_sequence(&cfg, 1).unwrap();
        let samples = sequence_training_samples(&seq, 10);
        assert!(!samples.is_empty());
        for s in &samples {
            let visible: Vec<_> = seq.visible_objects(s.frame).collect();
            assert!(s.boxes.len() <= visible.len());
            for b in &s.boxes {
                let best = visible.iter().filter(|(o, _)| o.species == b.species).map(|(_, vb)| vb.iou(&b.bbox)).fold(0.0, f64::max);
                // Interpolating across the clipped entry frames is inexact.
                assert!(best > 0.5, "frame {} {:?} best {best}", s.frame, b);
            }
        }
    }
}
