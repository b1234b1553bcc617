use benthos_core::annotations::{
    interpolate_keyframes, read_annotation_csv, AnnotationFile, CabofLabel, FrameGroundTruth, KeyframeBox, LabeledBox,
    SubstrateInterval,
};
use benthos_core::evaluate::{average_precision, map_bottom_half, GtBox, ScoredBox};
use benthos_core::tracker::{kalman_predict, kalman_update, KalmanParams};
use benthos_core::{run_pipeline, BBox, Detection, KalmanState, PipelineParams, SpeciesClass, SubstrateClass};
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..200.0f64, 0.0..200.0f64, 1.0..60.0f64, 1.0..60.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn arb_species() -> impl Strategy<Value = SpeciesClass> {
    (0usize..SpeciesClass::COUNT).prop_map(|i| SpeciesClass::from_index(i).unwrap())
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let (ab, ba) = (a.iou(&b), b.iou(&a));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((a.iou(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interpolated_boxes_stay_between_keyframes(a in arb_box(), b in arb_box(), start in 0u32..100, gap in 1u32..40, pick in 0.0..1.0f64) {
        let kf = |frame, bbox| KeyframeBox { video_id: "v".into(), frame, target_id: "t".into(), species: SpeciesClass::BasketStar, bbox };
        let (ka, kb) = (kf(start, a), kf(start + gap, b));
        let frame = start + (pick * f64::from(gap)).round() as u32;
        let r = interpolate_keyframes(&ka, &kb, frame).unwrap();
        let between = |v: f64, p: f64, q: f64| v >= p.min(q) - 1e-9 && v <= p.max(q) + 1e-9;
        prop_assert!(between(r.x1, a.x1, b.x1) && between(r.y1, a.y1, b.y1));
        prop_assert!(between(r.x2, a.x2, b.x2) && between(r.y2, a.y2, b.y2));
        prop_assert_eq!(interpolate_keyframes(&kb, &ka, frame).unwrap(), r);
    }

    #[test]
    fn annotation_csv_round_trips(
        intervals in prop::collection::vec((0usize..4, 1u64..600_000, 0u64..600_000), 0..8),
        cabofs in prop::collection::vec((arb_species(), 0u64..7_200_000, 1u32..20), 0..12),
    ) {
        let file = AnnotationFile {
            // Same-substrate intervals may not overlap, so each substrate
            // advances its own cursor.
            intervals: {
                let mut cursor = [0u64; 4];
                intervals.iter().map(|&(s, gap, len)| {
                    let begin = cursor[s] + gap;
                    cursor[s] = begin + len;
                    SubstrateInterval {
                        substrate: SubstrateClass::from_index(s).unwrap(),
                        begin: begin as f64 / 1000.0,
                        end: (begin + len) as f64 / 1000.0,
                    }
                }).collect()
            },
            cabofs: cabofs.iter().map(|&(species, at, count)| CabofLabel { species, at: at as f64 / 1000.0, count }).collect(),
            others: Vec::new(),
        };
        let text = file.to_csv_string();
        let back = read_annotation_csv(text.as_bytes()).unwrap();
        prop_assert_eq!(back.to_csv_string(), text);
        prop_assert_eq!(back.intervals.len(), file.intervals.len());
        prop_assert_eq!(back.cabofs.len(), file.cabofs.len());
        let key = |v: &SubstrateInterval| (v.begin.to_bits(), v.end.to_bits(), v.substrate.index());
        let mut want: Vec<_> = file.intervals.iter().map(key).collect();
        let mut got: Vec<_> = back.intervals.iter().map(key).collect();
        want.sort();
        got.sort();
        for (w, g) in want.iter().zip(&got) {
            prop_assert!((f64::from_bits(w.0) - f64::from_bits(g.0)).abs() < 1e-9);
            prop_assert!((f64::from_bits(w.1) - f64::from_bits(g.1)).abs() < 1e-9);
        }
        let total = |f: &AnnotationFile| f.cabofs.iter().map(|c| u64::from(c.count)).sum::<u64>();
        prop_assert_eq!(total(&back), total(&file));
    }

    #[test]
    fn ap_rises_with_a_top_hit_and_never_with_a_bottom_miss(
        gts in prop::collection::vec(arb_box(), 0..6),
        dets in prop::collection::vec((arb_box(), 0.1..1.0f64), 0..8),
    ) {
        // One ground truth far from every generated box stays unclaimed.
        let spare = BBox::new(1000.0, 1000.0, 1020.0, 1020.0);
        let gt: Vec<GtBox> = gts.iter().chain([&spare]).map(|&bbox| GtBox { image: 0, bbox }).collect();
        let d: Vec<ScoredBox> = dets.iter().map(|&(bbox, score)| ScoredBox { image: 0, bbox, score }).collect();
        let base = average_precision(&d, &gt, 0.5).unwrap();

        let mut top = d.clone();
        top.push(ScoredBox { image: 0, bbox: spare, score: 2.0 });
        let with_hit = average_precision(&top, &gt, 0.5).unwrap();
        prop_assert!(with_hit >= base - 1e-12, "{base} -> {with_hit}");

        let mut bottom = d.clone();
        bottom.push(ScoredBox { image: 0, bbox: BBox::new(-500.0, -500.0, -480.0, -480.0), score: 0.0 });
        let with_miss = average_precision(&bottom, &gt, 0.5).unwrap();
        prop_assert!(with_miss <= base + 1e-12, "{base} -> {with_miss}");
    }

    #[test]
    fn bottom_half_map_equals_per_class_ap_on_filtered_input(
        frames in prop::collection::vec(prop::collection::vec((arb_species(), arb_box()), 0..4), 1..4),
        dets in prop::collection::vec((0usize..4, arb_species(), arb_box(), 0.0..1.0f64), 0..12),
    ) {
        let height = 256.0;
        let gt: Vec<FrameGroundTruth> = frames.iter().enumerate().map(|(i, bs)| FrameGroundTruth {
            video_id: "v".into(),
            frame: i as u32,
            boxes: bs.iter().map(|&(species, bbox)| LabeledBox { species, bbox }).collect(),
            fully_annotated_bottom_half: true,
        }).collect();
        let detections: Vec<Detection> = dets.iter().map(|&(f, species, bbox, score)| Detection {
            video_id: "v".into(), frame: f as u32, species, bbox, score,
        }).collect();
        let eval = map_bottom_half(&detections, &gt, height).unwrap();
        // Recompose from scratch: drop top-half detections, then per-class AP.
        let mut aps = Vec::new();
        for sp in (0..SpeciesClass::COUNT).filter_map(SpeciesClass::from_index) {
            let g: Vec<GtBox> = gt.iter().enumerate()
                .flat_map(|(i, f)| f.boxes.iter().filter(|b| b.species == sp).map(move |b| GtBox { image: i, bbox: b.bbox }))
                .collect();
            if g.is_empty() { continue; }
            let d: Vec<ScoredBox> = detections.iter()
                .filter(|d| d.species == sp && (d.frame as usize) < gt.len() && d.bbox.y2 >= height / 2.0)
                .map(|d| ScoredBox { image: d.frame as usize, bbox: d.bbox, score: d.score })
                .collect();
            aps.push(average_precision(&d, &g, 0.5).unwrap());
        }
        let want = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
        prop_assert!((eval.map50 - want).abs() < 1e-12);
    }

    #[test]
    fn shuffling_detections_within_a_frame_gives_identical_tracks(
        frames in prop::collection::vec(prop::collection::vec((arb_box(), 0.05..1.0f64), 0..6), 1..15),
        salt in any::<u64>(),
    ) {
        let mut stream = Vec::new();
        for (f, dets) in frames.iter().enumerate() {
            for &(bbox, score) in dets {
                stream.push(Detection { video_id: "v".into(), frame: f as u32, species: SpeciesClass::BasketStar, bbox, score });
            }
        }
        let mut shuffled = stream.clone();
        let mut state = salt | 1;
        let mut start = 0;
        while start < shuffled.len() {
            let frame = shuffled[start].frame;
            let end = start + shuffled[start..].iter().take_while(|d| d.frame == frame).count();
            for i in (start + 1..end).rev() {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                let j = start + (state % (i - start + 1) as u64) as usize;
                shuffled.swap(i, j);
            }
            start = end;
        }
        let params = PipelineParams::with_filters(0.0, 1);
        let a: Vec<_> = run_pipeline(&stream, &params).unwrap().iter().map(|t| t.record()).collect();
        let b: Vec<_> = run_pipeline(&shuffled, &params).unwrap().iter().map(|t| t.record()).collect();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn covariance_stays_symmetric_over_long_runs() {
    let kp = KalmanParams::default();
    let mut state = KalmanState::initiate(&BBox::new(40.0, 10.0, 60.0, 50.0), &kp);
    let mut seed = 99u64;
    for i in 0..10_000 {
        state = kalman_predict(&state, &kp);
        seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let jitter = (seed >> 40) as f64 / (1u64 << 24) as f64 - 0.5;
        let y = 10.0 + (i % 200) as f64 * 0.5 + jitter;
        state = kalman_update(&state, &BBox::new(40.0 + jitter, y, 60.0, y + 40.0), &kp).unwrap();
        assert!(state.is_symmetric(1e-9), "asymmetric after {i} cycles");
    }
}
