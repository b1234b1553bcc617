use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use benthos_cli::commands::{read_sweep, CountSummary};
use benthos_cli::layout::{read_json, read_records, write_records, Dataset, Ledger};
use benthos_core::{Detection, EvalReport, FrameGroundTruth, SpeciesClass, Split, SubstratePrediction};

const TINY: &str = r#"
repeat = 1

[dataset]
train = 1
val = 1
test = 1

[scene]
frame_width = 64
frame_height = 64
fps = 10
duration = 8.0
spawn_rate = 2.0

[training]
frame_stride = 5
substrate_frame_stride = 4

[detector]
max_epochs = 1
batch_size = 2
box_feature_dim = 16
anchor_scales = [12.0, 20.0]
anchor_ratios = [1.0]
rpn_pre_nms_test = 50
rpn_post_nms_test = 20
backbone = [
  { channels = 4, kernel = 2, stride = 2 },
  { channels = 8, kernel = 2, stride = 2 },
  { channels = 8, kernel = 2, stride = 2 },
]

[substrate]
max_epochs = 1
hidden_dim = 4
backbone = [
  { channels = 4, kernel = 4, stride = 4 },
  { channels = 4, kernel = 2, stride = 2 },
]
"#;

fn benthos(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_benthos")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = benthos(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("exp.toml");
        fs::write(&config, format!("{TINY}\n{extra}")).unwrap();
        Self { _dir: dir, root, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn run(&self, out: &str, args: &[&str]) -> Output {
        let out = self.path(out);
        let mut all = vec!["--config", self.config.to_str().unwrap(), "--out", out.to_str().unwrap()];
        all.extend_from_slice(args);
        ok(&all)
    }

    fn gen(&self, out: &str, seed: &str) {
        self.run(out, &["--seed", seed, "gen"]);
    }
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn gt_detections(ds: &Dataset, split: Split) -> Vec<Detection> {
    let mut out = Vec::new();
    for v in ds.videos(split) {
        let frames: Vec<FrameGroundTruth> = ds.eval_frames(&v.video).unwrap();
        for f in frames {
            for b in f.boxes {
                out.push(Detection { video_id: f.video_id.clone(), frame: f.frame, species: b.species, bbox: b.bbox, score: 1.0 });
            }
        }
    }
    out
}

#[test]
fn gen_writes_layout_and_is_reproducible() {
    let ws = Workspace::new("");
    ws.gen("a", "3");
    ws.gen("b", "3");
    let a = tree(&ws.path("a"));
    assert_eq!(a, tree(&ws.path("b")));
    for f in ["manifest.json", "train-00/annotations.csv", "train-00/keyframes.jsonl", "val-00/eval_frames.jsonl", "test-00/frames/000000.png"] {
        assert!(a.contains_key(f), "missing {f}");
    }
    let ds = Dataset::open(&ws.path("a")).unwrap();
    assert_eq!(ds.manifest.videos.len(), 3);
    for v in &ds.manifest.videos {
        let frames = a.keys().filter(|k| k.starts_with(&format!("{}/frames/", v.video))).count();
        assert_eq!(frames as u32, v.n_frames);
        // Default withholding is one half of the objects.
        let ledger: Ledger = ds.ledger(&v.video).unwrap();
        assert_eq!(ledger.withheld.len(), ledger.objects / 2);
        let kfs = ds.keyframes(&v.video).unwrap();
        let targets: std::collections::BTreeSet<_> = kfs.iter().map(|k| k.target_id.clone()).collect();
        assert!(targets.len() <= ledger.objects - ledger.objects / 2);
        assert_eq!(targets.len(), ledger.keyframed_objects);
    }
    ws.gen("c", "4");
    assert_ne!(a, tree(&ws.path("c")));
}

#[test]
fn ground_truth_detections_score_perfectly() {
    let ws = Workspace::new("");
    ws.gen("data", "1");
    let ds = Dataset::open(&ws.path("data")).unwrap();
    let dets_path = ws.path("gt.jsonl");
    write_records(&dets_path, &gt_detections(&ds, Split::Test)).unwrap();
    ws.run("data", &["eval-det", "--detections", dets_path.to_str().unwrap()]);
    let report: EvalReport = read_json(&ws.path("data/eval-det-test.json")).unwrap();
    assert!(!report.per_class_ap.is_empty());
    assert_eq!(report.map50, 1.0);
}

#[test]
fn tau_one_counts_nothing() {
    let ws = Workspace::new("");
    ws.gen("data", "2");
    let ds = Dataset::open(&ws.path("data")).unwrap();
    let dets_path = ws.path("gt.jsonl");
    write_records(&dets_path, &gt_detections(&ds, Split::Test)).unwrap();
    ws.run("data", &["pipeline", "--detections", dets_path.to_str().unwrap(), "--tau", "1.0"]);
    let s: CountSummary = read_json(&ws.path("data/pipeline-test/counts.json")).unwrap();
    assert_eq!(s.predicted, [0; SpeciesClass::COUNT]);
    for sp in SpeciesClass::ALL {
        if s.ground_truth[sp.index()] > 0 {
            assert_eq!(s.errors.per_species[&sp], -1.0);
        } else {
            assert!(!s.errors.per_species.contains_key(&sp));
        }
    }
}

#[test]
fn train_eval_and_pipeline_share_the_detection_cache() {
    let ws = Workspace::new("");
    ws.gen("data", "5");
    ws.run("data", &["train-detector"]);
    assert!(ws.path("data/detector.json").exists());
    ws.run("data", &["eval-det"]);
    let report: EvalReport = read_json(&ws.path("data/eval-det-test.json")).unwrap();
    assert!((0.0..=1.0).contains(&report.map50));

    ws.run("data", &["pipeline", "--gamma", "2"]);
    let first: CountSummary = read_json(&ws.path("data/pipeline-test/counts.json")).unwrap();
    let cache: Vec<PathBuf> = fs::read_dir(ws.path("data/cache")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(cache.len(), 1);
    let dumps: Vec<PathBuf> = fs::read_dir(&cache[0]).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|e| e == "jsonl")).collect();
    assert_eq!(dumps.len(), 1);
    let stamp = fs::metadata(&dumps[0]).unwrap().modified().unwrap();
    ws.run("data", &["pipeline", "--gamma", "2"]);
    assert_eq!(fs::metadata(&dumps[0]).unwrap().modified().unwrap(), stamp);
    let second: CountSummary = read_json(&ws.path("data/pipeline-test/counts.json")).unwrap();
    assert_eq!(first, second);
    let tracks: Vec<benthos_core::tracker::TrackRecord> = read_records(&ws.path("data/pipeline-test/tracks.jsonl")).unwrap();
    assert!(tracks.iter().all(|t| t.frames.len() >= 2));

    // A cache entry written for another checkpoint is refused.
    let meta = dumps[0].with_extension("meta.json");
    let text = fs::read_to_string(&meta).unwrap().replace("\"checkpoint_hash\":\"", "\"checkpoint_hash\":\"ff");
    fs::write(&meta, text).unwrap();
    let out = benthos(&["--config", ws.config.to_str().unwrap(), "--out", ws.path("data").to_str().unwrap(), "pipeline"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn substrate_regimes_emit_four_scores() {
    let ws = Workspace::new("");
    ws.gen("data", "6");
    for regime in ["single", "combined"] {
        ws.run("data", &["train-substrate", "--regime", regime]);
        let ck = ws.path(&format!("data/substrate-{regime}.json"));
        ws.run("data", &["eval-substrate", "--checkpoint", ck.to_str().unwrap()]);
        let preds: Vec<SubstratePrediction> = read_records(&ws.path("data/substrate-predictions-test.jsonl")).unwrap();
        // Eight seconds at 10 fps with an extra final frame: nine samples.
        assert_eq!(preds.len(), 9);
        assert!(preds.iter().all(|p| p.scores.iter().all(|s| (0.0..=1.0).contains(s))));
    }
}

#[test]
fn sweep_grid_rows_and_report() {
    let ws = Workspace::new("[sweep]\nalpha = [0.0, 0.01]\nrho = [0.0, 0.75]\ntau = [0.3]\ngamma = [1]\n");
    ws.gen("data", "7");
    ws.run("data", &["--repeat", "2", "sweep"]);
    let rows = read_sweep(&ws.path("data/sweep.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.repeats == 2));
    let runs = fs::read_to_string(ws.path("data/sweep_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 8);

    ws.run("data", &["report"]);
    let report = fs::read_to_string(ws.path("data/report.md")).unwrap();
    for family in ["vanilla", "context", "nrd", "context+nrd"] {
        assert!(report.contains(&format!("| {family} |")), "{report}");
    }
    assert!(ws.path("data/report_map.png").exists());

    // Re-running one row with its recorded seeds reproduces its metrics.
    let cfg = format!("{TINY}\n[sweep]\nalpha = [0.01]\nrho = [0.75]\ntau = [0.3]\ngamma = [1]\n");
    fs::write(&ws.config, cfg).unwrap();
    ws.run("data", &["--repeat", "2", "sweep"]);
    let again = read_sweep(&ws.path("data/sweep.csv")).unwrap();
    let orig = rows.iter().find(|r| r.alpha == 0.01 && r.rho == 0.75).unwrap();
    assert!((again[0].val_map - orig.val_map).abs() < 1e-6);
    assert!((again[0].test_count_error - orig.test_count_error).abs() < 1e-6);
}

#[test]
fn exit_codes() {
    assert_eq!(benthos(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(benthos(&["--help"]).status.code(), Some(0));
    let ws = Workspace::new("");
    let missing = ws.path("nothing");
    let out = benthos(&["--out", missing.to_str().unwrap(), "train-detector"]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(ws.path("bad.toml"), "repeat = \"many\"").unwrap();
    let out = benthos(&["--config", ws.path("bad.toml").to_str().unwrap(), "gen"]);
    assert_eq!(out.status.code(), Some(1));

    ws.gen("data", "8");
    let out = benthos(&["--out", ws.path("data").to_str().unwrap(), "pipeline"]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(&ws.config, format!("{TINY}\n").replace("max_epochs = 1\nbatch_size = 2", "max_epochs = 1\nbatch_size = 2\nlr = 1e300")).unwrap();
    let out = benthos(&["--config", ws.config.to_str().unwrap(), "--out", ws.path("data").to_str().unwrap(), "train-detector"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
