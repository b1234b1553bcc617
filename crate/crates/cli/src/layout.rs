//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<video>/frames/000000.png
//! <root>/<video>/annotations.csv
//! <root>/<video>/keyframes.jsonl
//! <root>/<video>/eval_frames.jsonl
//! <root>/<video>/ledger.json
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use benthos_core::annotations::{
    parse_annotation_csv, read_jsonl, read_keyframes, write_jsonl, AnnotationFile, FrameGroundTruth, KeyframeBox,
};
use benthos_core::dataset::image_tensor;
use benthos_core::{SceneConfig, SpeciesClass, Split, SyntheticSequence, VideoAnnotations};
use ndarray::Array3;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub video: String,
    pub split: Split,
    pub seed: u64,
    pub fps: u32,
    pub n_frames: u32,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Hash of the scene config that produced the dataset.
    pub config_hash: String,
    pub seed: u64,
    pub scene: SceneConfig,
    pub videos: Vec<VideoEntry>,
}

/// Generator bookkeeping for one video, used by oracle checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub objects: usize,
    pub withheld: Vec<u32>,
    pub keyframed_objects: usize,
    pub cabof_totals: [u64; SpeciesClass::COUNT],
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, value)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(read_jsonl(BufReader::new(f))?)
}

/// Writes frames and annotation files of one sequence under `root`.
pub fn write_sequence(root: &Path, seq: &SyntheticSequence, split: Split) -> Result<VideoEntry> {
    let dir = root.join(&seq.video_id);
    let frames = dir.join("frames");
    fs::create_dir_all(&frames)?;
    for f in 0..seq.n_frames {
        seq.render_frame(f).save(frames.join(format!("{f:06}.png")))?;
    }
    let ann = AnnotationFile { intervals: seq.intervals.clone(), cabofs: seq.cabofs.clone(), others: Vec::new() };
    let mut w = BufWriter::new(File::create(dir.join("annotations.csv"))?);
    ann.write_csv(&mut w)?;
    w.flush()?;
    write_records(&dir.join("keyframes.jsonl"), &seq.keyframes)?;
    write_records(&dir.join("eval_frames.jsonl"), &seq.full_frames)?;
    let mut cabof_totals = [0u64; SpeciesClass::COUNT];
    for c in &seq.cabofs {
        cabof_totals[c.species.index()] += u64::from(c.count);
    }
    let keyframed: std::collections::BTreeSet<&str> = seq.keyframes.iter().map(|k| k.target_id.as_str()).collect();
    let ledger = Ledger {
        objects: seq.objects.len(),
        withheld: seq.withheld.iter().copied().collect(),
        keyframed_objects: keyframed.len(),
        cabof_totals,
    };
    write_json(&dir.join("ledger.json"), &ledger)?;
    Ok(VideoEntry {
        video: seq.video_id.clone(),
        split,
        seed: seq.seed,
        fps: seq.config.fps,
        n_frames: seq.n_frames,
        width: seq.config.frame_width,
        height: seq.config.frame_height,
    })
}

/// Read access to a generated dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        if !path.exists() {
            return Err(CliError::data(format!("no dataset at {} (missing manifest.json)", root.display())));
        }
        Ok(Self { root: root.to_path_buf(), manifest: read_json(&path)? })
    }

    pub fn videos(&self, split: Split) -> impl Iterator<Item = &VideoEntry> {
        self.manifest.videos.iter().filter(move |v| v.split == split)
    }

    pub fn frame_size(&self) -> (u32, u32) {
        (self.manifest.scene.frame_width, self.manifest.scene.frame_height)
    }

    pub fn frame_path(&self, video: &str, frame: u32) -> PathBuf {
        self.root.join(video).join("frames").join(format!("{frame:06}.png"))
    }

    pub fn load_frame(&self, video: &str, frame: u32) -> Result<Array3<f64>> {
        let path = self.frame_path(video, frame);
        let img = image::open(&path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        Ok(image_tensor(&img.to_rgb8()))
    }

    pub fn annotations(&self, video: &str) -> Result<AnnotationFile> {
        Ok(parse_annotation_csv(self.root.join(video).join("annotations.csv"))?)
    }

    pub fn video_annotations(&self, entry: &VideoEntry) -> Result<VideoAnnotations> {
        let ann = self.annotations(&entry.video)?;
        Ok(VideoAnnotations { video_id: entry.video.clone(), fps: f64::from(entry.fps), intervals: ann.intervals, cabofs: ann.cabofs })
    }

    pub fn keyframes(&self, video: &str) -> Result<Vec<KeyframeBox>> {
        let path = self.root.join(video).join("keyframes.jsonl");
        let f = File::open(&path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        Ok(read_keyframes(BufReader::new(f))?)
    }

    pub fn eval_frames(&self, video: &str) -> Result<Vec<FrameGroundTruth>> {
        read_records(&self.root.join(video).join("eval_frames.jsonl"))
    }

    pub fn ledger(&self, video: &str) -> Result<Ledger> {
        read_json(&self.root.join(video).join("ledger.json"))
    }
}

/// Runs `load` for every frame, keeping the first failure.
pub struct FrameLoader<'a> {
    pub dataset: &'a Dataset,
    pub error: Option<CliError>,
}

impl<'a> FrameLoader<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        Self { dataset, error: None }
    }

    pub fn load(&mut self, video: &str, frame: u32) -> Array3<f64> {
        match self.dataset.load_frame(video, frame) {
            Ok(a) => a,
            Err(e) => {
                self.error.get_or_insert(e);
                Array3::zeros((3, 1, 1))
            }
        }
    }

    pub fn finish(self) -> Result<()> {
        self.error.map_or(Ok(()), Err)
    }
}
