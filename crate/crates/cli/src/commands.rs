use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use benthos_core::annotations::{cabof_totals, frame_substrate_labels};
use benthos_core::dataset::{ground_truth_samples, keyframe_samples};
use benthos_core::detector::{self, Checkpoint};
use benthos_core::evaluate::{
    bar_chart, counting_error_table, improvement_report, map_bottom_half, per_class_ap_table, relative_errors,
    substrate_ap_table, substrate_average_precision, CountingErrors,
};
use benthos_core::substrate::{
    predictions_from_scores, train_combined, train_single, SubstrateCheckpoint, SubstrateSample,
};
use benthos_core::tracker::TrackRecord;
use benthos_core::{
    config_hash, count_cabof, generate_sequence, run_pipeline, Detection, DetectionSample, Detector, EvalReport,
    PipelineParams, SpeciesClass, Split, SubstrateSet,
};
use serde::{Deserialize, Serialize};

use crate::config::{DetectorPoint, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::layout::{read_json, read_records, write_json, write_records, write_sequence, Dataset, FrameLoader, Manifest, VideoEntry};

/// Settings shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub repeat: usize,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(std::fs::write(path, text)?)
}

pub fn gen(ctx: &Context) -> Result<Manifest> {
    let scene = &ctx.config.scene;
    let profile = &ctx.config.dataset;
    let mut plan = Vec::new();
    for (split, n) in [(Split::Train, profile.train), (Split::Val, profile.val), (Split::Test, profile.test)] {
        for i in 0..n {
            let seed = ctx.seed.wrapping_mul(1000).wrapping_add(plan.len() as u64);
            plan.push((split, format!("{split}-{i:02}"), seed));
        }
    }
    std::fs::create_dir_all(&ctx.out)?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(plan.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<VideoEntry>>>> = Mutex::new((0..plan.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((split, id, seed)) = plan.get(i) else { break };
                let r = generate_sequence(scene, *seed)
                    .map_err(CliError::from)
                    .and_then(|seq| write_sequence(&ctx.out, &seq.with_video_id(id.clone()), *split));
                results.lock().expect("poisoned")[i] = Some(r);
            });
        }
    });
    let videos = results.into_inner().expect("poisoned").into_iter().map(|r| r.expect("every video generated")).collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { config_hash: config_hash(scene), seed: ctx.seed, scene: scene.clone(), videos };
    write_json(&ctx.out.join("manifest.json"), &manifest)?;
    eprintln!("wrote {} videos to {}", manifest.videos.len(), ctx.out.display());
    Ok(manifest)
}

/// Keyframed training samples of the train split.
pub fn training_samples(ds: &Dataset, stride: u32) -> Result<Vec<DetectionSample>> {
    let mut loader = FrameLoader::new(ds);
    let mut out = Vec::new();
    for v in ds.videos(Split::Train) {
        let kfs = ds.keyframes(&v.video)?;
        let ann = ds.annotations(&v.video)?;
        out.extend(keyframe_samples(&v.video, &kfs, &ann.intervals, f64::from(v.fps), v.n_frames, stride, |f| {
            loader.load(&v.video, f)
        }));
    }
    loader.finish()?;
    Ok(out)
}

/// Fully annotated evaluation frames of one split.
pub fn evaluation_samples(ds: &Dataset, split: Split) -> Result<Vec<DetectionSample>> {
    let mut loader = FrameLoader::new(ds);
    let mut out = Vec::new();
    for v in ds.videos(split) {
        let frames = ds.eval_frames(&v.video)?;
        let ann = ds.annotations(&v.video)?;
        out.extend(ground_truth_samples(&frames, &ann.intervals, f64::from(v.fps), |vid, f| loader.load(vid, f)));
    }
    loader.finish()?;
    Ok(out)
}

fn data_dir<'a>(ctx: &'a Context, data: &'a Option<PathBuf>) -> &'a Path {
    data.as_deref().unwrap_or(&ctx.out)
}

pub fn train_detector(ctx: &Context, data: &Option<PathBuf>, checkpoint: &Option<PathBuf>) -> Result<PathBuf> {
    let ds = Dataset::open(data_dir(ctx, data))?;
    let (w, h) = ds.frame_size();
    let cfg = ctx.config.detector_for(w, h, ctx.seed);
    let train = training_samples(&ds, ctx.config.training.frame_stride)?;
    let val = evaluation_samples(&ds, Split::Val)?;
    eprintln!("training on {} frames, validating on {}", train.len(), val.len());
    let outcome = detector::train_with_progress(&train, &val, &cfg, |epoch, loss, map| {
        let map = map.map_or_else(|| "-".to_string(), |m| format!("{m:.3}"));
        eprintln!("epoch {epoch:>3}  loss {:.4} (det {:.4} rpn {:.4} ctx {:.4})  val mAP {map}", loss.total, loss.l_d, loss.l_p, loss.l_c);
    })?;
    let path = checkpoint.clone().unwrap_or_else(|| ctx.out.join("detector.json"));
    write_json(&path, &outcome.checkpoint())?;
    println!("best epoch {} -> {}", outcome.best_epoch, path.display());
    Ok(path)
}

/// Loads a checkpoint and returns it with its content hash.
pub fn load_detector(path: &Path) -> Result<(Detector, String)> {
    let ck: Checkpoint = read_json(path)?;
    let hash = config_hash(&ck);
    Ok((Detector::from_checkpoint(&ck)?, hash))
}

fn detect_samples(det: &Detector, samples: &[DetectionSample]) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for s in samples {
        out.extend(det.detect(&s.video_id, s.frame, &s.image)?);
    }
    Ok(out)
}

fn split_ground_truth(ds: &Dataset, split: Split) -> Result<Vec<benthos_core::FrameGroundTruth>> {
    let mut frames = Vec::new();
    for v in ds.videos(split) {
        frames.extend(ds.eval_frames(&v.video)?);
    }
    Ok(frames)
}

pub fn eval_det(
    ctx: &Context,
    data: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
    detections: &Option<PathBuf>,
    split: Split,
) -> Result<EvalReport> {
    let ds = Dataset::open(data_dir(ctx, data))?;
    let dets = match (detections, checkpoint) {
        (Some(p), _) => read_records::<Detection>(p)?,
        (None, Some(ck)) => {
            let (det, _) = load_detector(ck)?;
            detect_samples(&det, &evaluation_samples(&ds, split)?)?
        }
        (None, None) => {
            let ck = ctx.out.join("detector.json");
            if !ck.exists() {
                return Err(CliError::data(format!("missing checkpoint {}", ck.display())));
            }
            let (det, _) = load_detector(&ck)?;
            detect_samples(&det, &evaluation_samples(&ds, split)?)?
        }
    };
    let frames = split_ground_truth(&ds, split)?;
    let eval = map_bottom_half(&dets, &frames, f64::from(ds.frame_size().1))?;
    let report = EvalReport::default().with_detection(&eval);
    write_json(&ctx.out.join(format!("eval-det-{split}.json")), &report)?;
    write_text(&ctx.out.join(format!("eval-det-{split}.csv")), &per_class_ap_table(&[(split.to_string(), report.clone())]))?;
    print!("{}", report.summary());
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Regime {
    Single,
    Combined,
}

fn substrate_samples(ds: &Dataset, entry: &VideoEntry, frames: &[u32], loader: &mut FrameLoader) -> Result<Vec<SubstrateSample>> {
    let ann = ds.annotations(&entry.video)?;
    let fps = f64::from(entry.fps);
    Ok(frames
        .iter()
        .map(|&f| SubstrateSample {
            video_id: entry.video.clone(),
            frame: f,
            image: loader.load(&entry.video, f),
            labels: frame_substrate_labels(&ann.intervals, f64::from(f) / fps),
        })
        .collect())
}

fn test_wv_samples(ds: &Dataset, split: Split) -> Result<Vec<SubstrateSample>> {
    let mut loader = FrameLoader::new(ds);
    let mut out = Vec::new();
    for v in ds.videos(split) {
        let frames: Vec<u32> = benthos_core::substrate::sample_test_wv(v.n_frames, f64::from(v.fps));
        out.extend(substrate_samples(ds, v, &frames, &mut loader)?);
    }
    loader.finish()?;
    Ok(out)
}

pub fn train_substrate(ctx: &Context, data: &Option<PathBuf>, regime: Regime, checkpoint: &Option<PathBuf>) -> Result<PathBuf> {
    let ds = Dataset::open(data_dir(ctx, data))?;
    let stride = ctx.config.training.substrate_frame_stride.max(1);
    let mut loader = FrameLoader::new(&ds);
    let mut train = Vec::new();
    for v in ds.videos(Split::Train) {
        let frames: Vec<u32> = (0..v.n_frames).step_by(stride as usize).collect();
        train.extend(substrate_samples(&ds, v, &frames, &mut loader)?);
    }
    loader.finish()?;
    let val = test_wv_samples(&ds, Split::Val)?;
    let hyper = benthos_core::SubstrateHyper { seed: ctx.seed, ..ctx.config.substrate.clone() };
    eprintln!("training substrate classifier ({regime:?}) on {} frames", train.len());
    let ck = match regime {
        Regime::Single => SubstrateCheckpoint::single(&train_single(&train, &val, &hyper)?.0),
        Regime::Combined => SubstrateCheckpoint::combined(&train_combined(&train, &val, &hyper)?, &hyper),
    };
    let name = match regime {
        Regime::Single => "substrate-single.json",
        Regime::Combined => "substrate-combined.json",
    };
    let path = checkpoint.clone().unwrap_or_else(|| ctx.out.join(name));
    write_json(&path, &ck)?;
    println!("wrote {}", path.display());
    Ok(path)
}

pub fn eval_substrate(ctx: &Context, data: &Option<PathBuf>, checkpoint: &Path, split: Split) -> Result<EvalReport> {
    let ds = Dataset::open(data_dir(ctx, data))?;
    let ck: SubstrateCheckpoint = read_json(checkpoint)?;
    let scorer = ck.load()?;
    let samples = test_wv_samples(&ds, split)?;
    let scores: Vec<[f64; 4]> = samples.iter().map(|s| scorer(&s.image)).collect();
    let labels: Vec<SubstrateSet> = samples.iter().map(|s| s.labels).collect();
    let mut predictions = Vec::new();
    for v in ds.videos(split) {
        let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].video_id == v.video).collect();
        let frames: Vec<u32> = idx.iter().map(|&i| samples[i].frame).collect();
        let sc: Vec<[f64; 4]> = idx.iter().map(|&i| scores[i]).collect();
        predictions.extend(predictions_from_scores(&v.video, &frames, &sc));
    }
    write_records(&ctx.out.join(format!("substrate-predictions-{split}.jsonl")), &predictions)?;
    let report = EvalReport { substrate_ap: substrate_average_precision(&scores, &labels)?, ..EvalReport::default() };
    write_json(&ctx.out.join(format!("eval-substrate-{split}.json")), &report)?;
    write_text(&ctx.out.join(format!("eval-substrate-{split}.csv")), &substrate_ap_table(&[(ck.regime.clone(), report.clone())]))?;
    print!("{}", report.summary());
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheMeta {
    checkpoint_hash: String,
    video: String,
    n_frames: u32,
}

/// Full-rate detections of one video, cached per (checkpoint, video).
pub fn video_detections(out: &Path, det: &Detector, ck_hash: &str, ds: &Dataset, entry: &VideoEntry) -> Result<Vec<Detection>> {
    let dir = out.join("cache").join(&ck_hash[..16]);
    let meta_path = dir.join(format!("{}.meta.json", entry.video));
    let dets_path = dir.join(format!("{}.jsonl", entry.video));
    let meta = CacheMeta { checkpoint_hash: ck_hash.to_string(), video: entry.video.clone(), n_frames: entry.n_frames };
    if meta_path.exists() && dets_path.exists() {
        let found: CacheMeta = read_json(&meta_path)?;
        if found != meta {
            return Err(CliError::data(format!(
                "detection cache {} was produced by checkpoint {} for {}, refusing to reuse it",
                dets_path.display(),
                found.checkpoint_hash,
                found.video
            )));
        }
        return read_records(&dets_path);
    }
    let mut out = Vec::new();
    for f in 0..entry.n_frames {
        let img = ds.load_frame(&entry.video, f)?;
        out.extend(det.detect(&entry.video, f, &img)?);
    }
    benthos_core::detector::sort_detections(&mut out);
    write_records(&dets_path, &out)?;
    write_json(&meta_path, &meta)?;
    Ok(out)
}

fn split_totals(ds: &Dataset, split: Split) -> Result<[u64; SpeciesClass::COUNT]> {
    let mut videos = Vec::new();
    let mut splits = HashMap::new();
    for v in ds.videos(split) {
        videos.push(ds.video_annotations(v)?);
        splits.insert(v.video.clone(), split);
    }
    Ok(cabof_totals(&videos, &splits, split))
}

/// Counts and relative errors of one split for one (τ, γ) setting.
pub fn count_split(
    per_video: &[Vec<Detection>],
    params: &PipelineParams,
    frame_height: u32,
    gt: &[u64; SpeciesClass::COUNT],
) -> Result<(CountingErrors, [u64; SpeciesClass::COUNT], Vec<TrackRecord>)> {
    let mut pred = [0u64; SpeciesClass::COUNT];
    let mut records = Vec::new();
    for dets in per_video {
        let mut tracks = run_pipeline(dets, params)?;
        let c = count_cabof(&mut tracks, frame_height);
        for k in 0..SpeciesClass::COUNT {
            pred[k] += c[k];
        }
        records.extend(tracks.iter().map(|t| t.record()));
    }
    Ok((relative_errors(&pred, gt), pred, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountSummary {
    pub tau: f64,
    pub gamma: usize,
    pub predicted: [u64; SpeciesClass::COUNT],
    pub ground_truth: [u64; SpeciesClass::COUNT],
    pub errors: CountingErrors,
}

#[allow(clippy::too_many_arguments)]
pub fn pipeline(
    ctx: &Context,
    data: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
    detections: &Option<PathBuf>,
    split: Split,
    tau: Option<f64>,
    gamma: Option<usize>,
) -> Result<CountSummary> {
    let ds = Dataset::open(data_dir(ctx, data))?;
    let mut params = ctx.config.pipeline.clone();
    params.tau = tau.unwrap_or(params.tau);
    params.gamma = gamma.unwrap_or(params.gamma);
    let entries: Vec<&VideoEntry> = ds.videos(split).collect();
    let per_video: Vec<Vec<Detection>> = match detections {
        Some(p) => {
            let all: Vec<Detection> = read_records(p)?;
            entries.iter().map(|e| all.iter().filter(|d| d.video_id == e.video).cloned().collect()).collect()
        }
        None => {
            let path = checkpoint.clone().unwrap_or_else(|| ctx.out.join("detector.json"));
            if !path.exists() {
                return Err(CliError::data(format!("missing checkpoint {}", path.display())));
            }
            let (det, hash) = load_detector(&path)?;
            entries.iter().map(|e| video_detections(&ctx.out, &det, &hash, &ds, e)).collect::<Result<_>>()?
        }
    };
    let gt = split_totals(&ds, split)?;
    let (errors, predicted, records) = count_split(&per_video, &params, ds.frame_size().1, &gt)?;
    let dir = ctx.out.join(format!("pipeline-{split}"));
    write_records(&dir.join("tracks.jsonl"), &records)?;
    let summary = CountSummary { tau: params.tau, gamma: params.gamma, predicted, ground_truth: gt, errors };
    write_json(&dir.join("counts.json"), &summary)?;
    write_text(&dir.join("errors.csv"), &counting_error_table(&[(params.gamma as u32, params.tau, summary.errors.clone())]))?;
    print!("{}", EvalReport::default().with_counting(&summary.errors).summary());
    Ok(summary)
}

/// One line of the sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub tau: f64,
    pub gamma: usize,
    pub repeats: usize,
    pub val_map: f64,
    pub val_map_std: f64,
    pub test_map: f64,
    pub test_map_std: f64,
    pub val_count_error: f64,
    pub val_count_error_std: f64,
    pub test_count_error: f64,
    pub test_count_error_std: f64,
}

/// One trained model of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub seed: u64,
    pub val_map: f64,
    pub test_map: f64,
    pub checkpoint: String,
}

struct RunResult {
    point: usize,
    run: SweepRun,
    /// Per (τ, γ) index: val and test errors.
    counting: Vec<(CountingErrors, CountingErrors)>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

fn average_errors(errs: &[&CountingErrors]) -> CountingErrors {
    let mut sums: BTreeMap<SpeciesClass, (f64, usize)> = BTreeMap::new();
    for e in errs {
        for (sp, v) in &e.per_species {
            let s = sums.entry(*sp).or_default();
            s.0 += v;
            s.1 += 1;
        }
    }
    let per_species: BTreeMap<SpeciesClass, f64> = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    let excluded = SpeciesClass::ALL.into_iter().filter(|s| !per_species.contains_key(s)).collect();
    let mean_abs = mean_std(&errs.iter().map(|e| e.mean_abs).collect::<Vec<_>>()).0;
    CountingErrors { per_species, excluded, mean_abs }
}

fn run_point(
    ctx: &Context,
    ds: &Dataset,
    data: &SweepData,
    point: DetectorPoint,
    seed: u64,
    tracking: &[(f64, usize)],
) -> Result<(SweepRun, Vec<(CountingErrors, CountingErrors)>)> {
    let (w, h) = ds.frame_size();
    let mut cfg = ctx.config.detector_for(w, h, seed);
    cfg.lr = point.lr;
    cfg.alpha = point.alpha;
    cfg.beta = point.beta;
    cfg.rho = point.rho;
    let outcome = detector::train(&data.train, &data.val, &cfg)?;
    let ck = outcome.checkpoint();
    let hash = config_hash(&ck);
    let ck_path = ctx.out.join("sweep").join("runs").join(format!("{}.json", &hash[..16]));
    write_json(&ck_path, &ck)?;
    let det = &outcome.detector;
    let frame_map = |samples: &[DetectionSample]| -> Result<f64> {
        if samples.is_empty() {
            return Ok(f64::NAN);
        }
        Ok(detector::validation_map(det, samples)?)
    };
    let run = SweepRun {
        lr: point.lr,
        alpha: point.alpha,
        beta: point.beta,
        rho: point.rho,
        seed,
        val_map: frame_map(&data.val)?,
        test_map: frame_map(&data.test)?,
        checkpoint: ck_path.display().to_string(),
    };
    let mut per_split = Vec::new();
    for split in [Split::Val, Split::Test] {
        let dets: Vec<Vec<Detection>> =
            ds.videos(split).map(|e| video_detections(&ctx.out, det, &hash, ds, e)).collect::<Result<_>>()?;
        per_split.push(dets);
    }
    let mut counting = Vec::new();
    for &(tau, gamma) in tracking {
        let params = PipelineParams { tau, gamma, ..ctx.config.pipeline.clone() };
        let (val, _, _) = count_split(&per_split[0], &params, h, &data.val_totals)?;
        let (test, _, _) = count_split(&per_split[1], &params, h, &data.test_totals)?;
        counting.push((val, test));
    }
    Ok((run, counting))
}

struct SweepData {
    train: Vec<DetectionSample>,
    val: Vec<DetectionSample>,
    test: Vec<DetectionSample>,
    val_totals: [u64; SpeciesClass::COUNT],
    test_totals: [u64; SpeciesClass::COUNT],
}

pub fn sweep(ctx: &Context, data: &Option<PathBuf>) -> Result<Vec<SweepRow>> {
    let ds = Dataset::open(data_dir(ctx, data))?;
    let sd = SweepData {
        train: training_samples(&ds, ctx.config.training.frame_stride)?,
        val: evaluation_samples(&ds, Split::Val)?,
        test: evaluation_samples(&ds, Split::Test)?,
        val_totals: split_totals(&ds, Split::Val)?,
        test_totals: split_totals(&ds, Split::Test)?,
    };
    let grid = ctx.config.grid();
    let points = grid.detector_points();
    let tracking = grid.tracking_points();
    let jobs: Vec<(usize, u64)> =
        (0..points.len()).flat_map(|p| (0..ctx.repeat as u64).map(move |r| (p, r))).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    eprintln!("sweep: {} detector settings x {} repeats, {} tracking settings, {workers} workers", points.len(), ctx.repeat, tracking.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<RunResult>> = Mutex::new(Vec::new());
    let failure: Mutex<Option<CliError>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if failure.lock().expect("poisoned").is_some() {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(p, r)) = jobs.get(i) else { break };
                let seed = ctx.seed.wrapping_add(r);
                match run_point(ctx, &ds, &sd, points[p], seed, &tracking) {
                    Ok((run, counting)) => {
                        eprintln!(
                            "  lr {} alpha {} beta {} rho {} seed {seed}: val mAP {:.3} test mAP {:.3}",
                            run.lr, run.alpha, run.beta, run.rho, run.val_map, run.test_map
                        );
                        results.lock().expect("poisoned").push(RunResult { point: p, run, counting });
                    }
                    Err(e) => {
                        failure.lock().expect("poisoned").get_or_insert(e);
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("poisoned") {
        return Err(e);
    }
    let mut results = results.into_inner().expect("poisoned");
    results.sort_by_key(|r| (r.point, r.run.seed));

    let mut rows = Vec::new();
    for (p, point) in points.iter().enumerate() {
        let runs: Vec<&RunResult> = results.iter().filter(|r| r.point == p).collect();
        let (val_map, val_map_std) = mean_std(&runs.iter().map(|r| r.run.val_map).collect::<Vec<_>>());
        let (test_map, test_map_std) = mean_std(&runs.iter().map(|r| r.run.test_map).collect::<Vec<_>>());
        let mut val_table = Vec::new();
        let mut test_table = Vec::new();
        for (t, &(tau, gamma)) in tracking.iter().enumerate() {
            let (ve, ves) = mean_std(&runs.iter().map(|r| r.counting[t].0.mean_abs).collect::<Vec<_>>());
            let (te, tes) = mean_std(&runs.iter().map(|r| r.counting[t].1.mean_abs).collect::<Vec<_>>());
            rows.push(SweepRow {
                lr: point.lr,
                alpha: point.alpha,
                beta: point.beta,
                rho: point.rho,
                tau,
                gamma,
                repeats: runs.len(),
                val_map,
                val_map_std,
                test_map,
                test_map_std,
                val_count_error: ve,
                val_count_error_std: ves,
                test_count_error: te,
                test_count_error_std: tes,
            });
            let vals: Vec<&CountingErrors> = runs.iter().map(|r| &r.counting[t].0).collect();
            let tests: Vec<&CountingErrors> = runs.iter().map(|r| &r.counting[t].1).collect();
            val_table.push((gamma as u32, tau, average_errors(&vals)));
            test_table.push((gamma as u32, tau, average_errors(&tests)));
        }
        let tag = format!("lr{}-a{}-b{}-r{}", point.lr, point.alpha, point.beta, point.rho);
        write_text(&ctx.out.join("sweep").join(format!("counting-val-{tag}.csv")), &counting_error_table(&val_table))?;
        write_text(&ctx.out.join("sweep").join(format!("counting-test-{tag}.csv")), &counting_error_table(&test_table))?;
    }
    write_csv(&ctx.out.join("sweep.csv"), &rows)?;
    write_csv(&ctx.out.join("sweep_runs.csv"), &results.iter().map(|r| r.run.clone()).collect::<Vec<_>>())?;
    println!("{} rows -> {}", rows.len(), ctx.out.join("sweep.csv").display());
    Ok(rows)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportLine {
    pub name: String,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub val_map: f64,
    pub test_map: f64,
    pub gain_percent: f64,
}

/// Best row per model family and its gain over the plain detector.
pub fn report(ctx: &Context, input: &Option<PathBuf>) -> Result<Vec<ReportLine>> {
    let path = input.clone().unwrap_or_else(|| ctx.out.join("sweep.csv"));
    let rows = read_sweep(&path)?;
    let mut models: Vec<&SweepRow> = Vec::new();
    for r in &rows {
        if !models.iter().any(|m| (m.lr, m.alpha, m.beta, m.rho) == (r.lr, r.alpha, r.beta, r.rho)) {
            models.push(r);
        }
    }
    let context = |m: &SweepRow| m.alpha > 0.0 || m.beta > 0.0;
    let families: [(&str, Box<dyn Fn(&SweepRow) -> bool>); 4] = [
        ("vanilla", Box::new(|m: &SweepRow| !context(m) && m.rho == 0.0)),
        ("context", Box::new(|m: &SweepRow| context(m) && m.rho == 0.0)),
        ("nrd", Box::new(|m: &SweepRow| !context(m) && m.rho > 0.0)),
        ("context+nrd", Box::new(|m: &SweepRow| context(m) && m.rho > 0.0)),
    ];
    let best: Vec<(&str, &SweepRow)> = families
        .iter()
        .filter_map(|(name, f)| {
            models
                .iter()
                .filter(|m| f(m))
                .fold(None::<&SweepRow>, |b, m| match b {
                    Some(b) if b.val_map >= m.val_map => Some(b),
                    _ => Some(m),
                })
                .map(|m| (*name, m))
        })
        .collect();
    let Some(&(_, base)) = best.iter().find(|(n, _)| *n == "vanilla") else {
        return Err(CliError::data("sweep has no alpha = beta = rho = 0 row to compare against"));
    };
    let variants: Vec<(String, f64)> = best.iter().map(|(n, m)| (n.to_string(), m.test_map)).collect();
    let gains = improvement_report(base.test_map, &variants)?;
    let lines: Vec<ReportLine> = best
        .iter()
        .zip(&gains)
        .map(|((name, m), g)| ReportLine {
            name: name.to_string(),
            lr: m.lr,
            alpha: m.alpha,
            beta: m.beta,
            rho: m.rho,
            val_map: m.val_map,
            test_map: m.test_map,
            gain_percent: 100.0 * g.gain,
        })
        .collect();

    let mut md = String::from("# Sweep report\n\n| model | lr | alpha | beta | rho | val mAP | test mAP | gain |\n|---|---|---|---|---|---|---|---|\n");
    for l in &lines {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {:.3} | {:.3} | {:+.2}% |\n",
            l.name, l.lr, l.alpha, l.beta, l.rho, l.val_map, l.test_map, l.gain_percent
        ));
    }
    if let Some(c) = rows.iter().filter(|r| r.val_count_error.is_finite()).min_by(|a, b| a.val_count_error.total_cmp(&b.val_count_error)) {
        md.push_str(&format!(
            "\nLowest validation counting error: tau {} gamma {} (lr {} alpha {} beta {} rho {}), val {:.3}, test {:.3}\n",
            c.tau, c.gamma, c.lr, c.alpha, c.beta, c.rho, c.val_count_error, c.test_count_error
        ));
    }
    write_text(&ctx.out.join("report.md"), &md)?;
    write_csv(&ctx.out.join("improvement.csv"), &lines)?;
    bar_chart(&lines.iter().map(|l| l.test_map).collect::<Vec<_>>()).save(ctx.out.join("report_map.png"))?;
    print!("{md}");
    Ok(lines)
}
