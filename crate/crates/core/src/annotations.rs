//! Annotation records: substrate intervals, count-at-bottom-of-frame (CABOF)
//! labels, keyframe boxes and fully annotated evaluation frames.
//!
//! The annotation CSV mixes two record kinds in one table. Substrate rows
//! carry a begin and end timestamp; species rows carry a single timestamp in
//! the `begin` column and a count:
//!
//! ```text
//! annotation,begin,end,count
//! Boulder,0:00:20,0:00:25,
//! FPU,0:00:21,,2
//! ```
//!
//! Timestamps are `H:MM:SS`. Sub-second timestamps (synthetic CABOF labels
//! sit on exact frames) are written as `H:MM:SS.fff`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("row {row}: unknown annotation name {name:?}")]
    UnknownName { row: usize, name: String },
    #[error("row {row}: end {end} precedes begin {begin}")]
    EndBeforeBegin { row: usize, begin: String, end: String },
    #[error("row {row}: species row without a count")]
    MissingCount { row: usize },
    #[error("row {row}: substrate row without an end timestamp")]
    MissingEnd { row: usize },
    #[error("row {row}: {msg}")]
    Malformed { row: usize, msg: String },
    #[error("row {row}: {substrate} interval overlaps an earlier {substrate} interval")]
    OverlappingInterval { row: usize, substrate: SubstrateClass },
    #[error("missing header column {0:?}")]
    MissingColumn(&'static str),
    #[error("keyframes belong to different targets ({0:?} vs {1:?})")]
    TargetMismatch(String, String),
    #[error("frame {frame} outside keyframe span {start}..={end}")]
    FrameOutOfRange { frame: u32, start: u32, end: u32 },
    #[error("invalid box {0:?}")]
    InvalidBox(BBox),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AnnotationError>;

/// Ocean-floor substrate. Multi-hot vectors use the B, C, M, R order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubstrateClass {
    Boulder,
    Cobble,
    Mud,
    Rock,
}

impl SubstrateClass {
    pub const ALL: [SubstrateClass; 4] = [Self::Boulder, Self::Cobble, Self::Mud, Self::Rock];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Boulder => "Boulder",
            Self::Cobble => "Cobble",
            Self::Mud => "Mud",
            Self::Rock => "Rock",
        }
    }

    pub fn abbrev(self) -> &'static str {
        &self.name()[..1]
    }

    pub fn parse(name: &str) -> Option<Self> {
        let n = name.trim();
        Self::ALL
            .into_iter()
            .find(|s| s.name().eq_ignore_ascii_case(n) || s.abbrev().eq_ignore_ascii_case(n))
    }
}

impl fmt::Display for SubstrateClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Set of substrates visible in a frame, stored as a 4-bit mask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubstrateSet(u8);

impl SubstrateSet {
    pub const EMPTY: SubstrateSet = SubstrateSet(0);

    pub fn from_bits(bits: u8) -> Self {
        Self(bits & 0b1111)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn insert(&mut self, s: SubstrateClass) {
        self.0 |= 1 << s.index();
    }

    pub fn contains(self, s: SubstrateClass) -> bool {
        self.0 & (1 << s.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = SubstrateClass> {
        SubstrateClass::ALL.into_iter().filter(move |s| self.contains(*s))
    }

    /// Multi-hot vector in B, C, M, R order.
    pub fn multi_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        for s in self.iter() {
            v[s.index()] = 1.0;
        }
        v
    }
}

impl FromIterator<SubstrateClass> for SubstrateSet {
    fn from_iter<I: IntoIterator<Item = SubstrateClass>>(iter: I) -> Self {
        let mut set = SubstrateSet::EMPTY;
        for s in iter {
            set.insert(s);
        }
        set
    }
}

/// The ten species of interest, in display order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpeciesClass {
    #[serde(rename = "BS")]
    BasketStar,
    #[serde(rename = "FPU")]
    FragilePinkUrchin,
    #[serde(rename = "GG")]
    GrayGorgonian,
    #[serde(rename = "LLS")]
    LongLeggedSunflowerStar,
    #[serde(rename = "RSG")]
    RedSwiftiaGorgonian,
    #[serde(rename = "SL")]
    SquatLobster,
    #[serde(rename = "LS")]
    LacedSponge,
    #[serde(rename = "WSSC")]
    WhiteSlipperSeaCucumber,
    #[serde(rename = "WSpSC")]
    WhiteSpineSeaCucumber,
    #[serde(rename = "YG")]
    YellowGorgonian,
}

impl SpeciesClass {
    pub const ALL: [SpeciesClass; 10] = [
        Self::BasketStar,
        Self::FragilePinkUrchin,
        Self::GrayGorgonian,
        Self::LongLeggedSunflowerStar,
        Self::RedSwiftiaGorgonian,
        Self::SquatLobster,
        Self::LacedSponge,
        Self::WhiteSlipperSeaCucumber,
        Self::WhiteSpineSeaCucumber,
        Self::YellowGorgonian,
    ];
    pub const COUNT: usize = 10;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn abbrev(self) -> &'static str {
        match self {
            Self::BasketStar => "BS",
            Self::FragilePinkUrchin => "FPU",
            Self::GrayGorgonian => "GG",
            Self::LongLeggedSunflowerStar => "LLS",
            Self::RedSwiftiaGorgonian => "RSG",
            Self::SquatLobster => "SL",
            Self::LacedSponge => "LS",
            Self::WhiteSlipperSeaCucumber => "WSSC",
            Self::WhiteSpineSeaCucumber => "WSpSC",
            Self::YellowGorgonian => "YG",
        }
    }

    pub fn common_name(self) -> &'static str {
        match self {
            Self::BasketStar => "Basket star",
            Self::FragilePinkUrchin => "Fragile pink urchin",
            Self::GrayGorgonian => "Gray gorgonian",
            Self::LongLeggedSunflowerStar => "Long legged sunflower star",
            Self::RedSwiftiaGorgonian => "Red swiftia gorgonian",
            Self::SquatLobster => "Squat lobster",
            Self::LacedSponge => "Laced sponge",
            Self::WhiteSlipperSeaCucumber => "White slipper sea cucumber",
            Self::WhiteSpineSeaCucumber => "White spine sea cucumber",
            Self::YellowGorgonian => "Yellow gorgonian",
        }
    }

    /// Accepts the abbreviation (case-sensitive, `WSSC` and `WSpSC` differ
    /// only by case) or the common name (case-insensitive).
    pub fn parse(name: &str) -> Option<Self> {
        let n = name.trim();
        Self::ALL
            .into_iter()
            .find(|s| s.abbrev() == n)
            .or_else(|| {
                let norm = normalize_name(n);
                Self::ALL
                    .into_iter()
                    .find(|s| normalize_name(s.common_name()) == norm)
            })
    }
}

impl fmt::Display for SpeciesClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbrev())
    }
}

impl FromStr for SpeciesClass {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::parse(s).ok_or_else(|| format!("unknown species {s:?}"))
    }
}

/// Counted species outside the ten detection classes.
const OTHER_SPECIES: &[&str] = &[
    "UI lobed sponge",
    "UI hairy boot sponge",
    "UI branched sponge",
    "UI vase sponge",
    "UI boot sponge",
    "Cookie star",
    "UI anemone 4",
    "UI sea star",
    "UI tubeworm",
    "Henricia complex",
    "UI large yellow sponge",
    "UI thin red star",
    "UI orange gorgonian",
    "Mushroom soft coral",
    "Black coral",
    "Benthic siphonophore",
    "Bubblegum coral",
    "Deep sea cucumber",
    "Fish eating star",
    "Spiny red star",
    "Spot prawn",
    "UI anemone",
    "Thorny sea star",
    "UI anemone 2",
    "California king crab",
    "UI trumpet sponge",
    "Pom-pom anemone",
    "UI prawn",
    "Crested sea star",
    "White sea pen",
    "Red sea star",
    "UI sea pen",
    "Solaster sun star complex",
    "UI octopus",
    "UI nipple sponge",
    "UI gorgonian",
    "Spiny/thorny star complex",
    "Gray moon sponge",
    "Brown box crab",
    "Decorator crab",
    "UI sand dwelling anemone",
    "UI nudibranch",
    "Orange puffball sponge",
    "Red octopus",
    "Red gorgonian",
    "Rose star",
    "Cushion star",
    "UI urchin",
    "UI anemone 1",
];

fn normalize_name(s: &str) -> String {
    s.split(|c: char| c.is_whitespace() || c == '-')
        .filter(|w| !w.is_empty())
        .map(|w| w.to_ascii_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

fn other_species_name(name: &str) -> Option<&'static str> {
    let norm = normalize_name(name);
    OTHER_SPECIES
        .iter()
        .copied()
        .find(|s| normalize_name(s) == norm)
}

/// Classification of the `annotation` column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnnotationName {
    Substrate(SubstrateClass),
    Species(SpeciesClass),
    Other(&'static str),
}

impl AnnotationName {
    pub fn parse(name: &str) -> Option<Self> {
        if let Some(s) = SubstrateClass::parse(name) {
            return Some(Self::Substrate(s));
        }
        if let Some(sp) = SpeciesClass::parse(name) {
            return Some(Self::Species(sp));
        }
        other_species_name(name).map(Self::Other)
    }
}

/// Parses `H:MM:SS` or `H:MM:SS.fff` into seconds.
pub fn parse_timestamp(s: &str) -> Option<f64> {
    let parts: Vec<&str> = s.trim().split(':').collect();
    if parts.len() != 3 {
        return None;
    }
    let h: u64 = parts[0].parse().ok()?;
    let m: u64 = parts[1].parse().ok()?;
    if parts[1].len() != 2 || m >= 60 {
        return None;
    }
    let (sec_int, frac) = match parts[2].split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (parts[2], None),
    };
    if sec_int.len() != 2 {
        return None;
    }
    let sec: u64 = sec_int.parse().ok()?;
    if sec >= 60 {
        return None;
    }
    let frac = match frac {
        Some(f) if !f.is_empty() && f.chars().all(|c| c.is_ascii_digit()) => {
            format!("0.{f}").parse::<f64>().ok()?
        }
        Some(_) => return None,
        None => 0.0,
    };
    Some((h * 3600 + m * 60 + sec) as f64 + frac)
}

/// Formats seconds as `H:MM:SS`, appending milliseconds when the value is
/// not a whole second.
pub fn format_timestamp(t: f64) -> String {
    let millis = (t * 1000.0).round() as u64;
    let whole = millis / 1000;
    let frac = millis % 1000;
    let (h, m, s) = (whole / 3600, (whole / 60) % 60, whole % 60);
    if frac == 0 {
        format!("{h}:{m:02}:{s:02}")
    } else {
        format!("{h}:{m:02}:{s:02}.{frac:03}")
    }
}

/// Frame index of a timestamp: `round(t * fps)`.
pub fn frame_index(t: f64, fps: f64) -> u32 {
    (t * fps).round().max(0.0) as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubstrateInterval {
    pub substrate: SubstrateClass,
    pub begin: f64,
    pub end: f64,
}

impl SubstrateInterval {
    /// Endpoints are inclusive.
    pub fn contains(&self, t: f64) -> bool {
        self.begin <= t && t <= self.end
    }

    pub fn overlaps(&self, other: &SubstrateInterval) -> bool {
        self.begin <= other.end && other.begin <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CabofLabel {
    pub species: SpeciesClass,
    pub at: f64,
    pub count: u32,
}

/// Count label for a species outside the detection classes.
#[derive(Debug, Clone, PartialEq)]
pub struct OtherCount {
    pub name: &'static str,
    pub at: f64,
    pub count: u32,
}

/// Parsed contents of one annotation CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationFile {
    pub intervals: Vec<SubstrateInterval>,
    pub cabofs: Vec<CabofLabel>,
    pub others: Vec<OtherCount>,
}

fn column(headers: &csv::StringRecord, name: &'static str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim().eq_ignore_ascii_case(name))
        .ok_or(AnnotationError::MissingColumn(name))
}

/// Reads an annotation CSV from any reader.
pub fn read_annotation_csv<R: Read>(reader: R) -> Result<AnnotationFile> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let ci = column(&headers, "annotation")?;
    let bi = column(&headers, "begin")?;
    let ei = column(&headers, "end")?;
    let ki = column(&headers, "count")?;

    let mut out = AnnotationFile::default();
    for (i, rec) in rdr.records().enumerate() {
        // Header is line 1.
        let row = i + 2;
        let rec = rec?;
        let field = |idx: usize| rec.get(idx).unwrap_or("").trim();
        let name = field(ci);
        if name.is_empty() && rec.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let kind = AnnotationName::parse(name).ok_or_else(|| AnnotationError::UnknownName {
            row,
            name: name.to_string(),
        })?;
        let begin_s = field(bi);
        let begin = parse_timestamp(begin_s).ok_or_else(|| AnnotationError::Malformed {
            row,
            msg: format!("bad begin timestamp {begin_s:?}"),
        })?;
        match kind {
            AnnotationName::Substrate(substrate) => {
                let end_s = field(ei);
                if end_s.is_empty() {
                    return Err(AnnotationError::MissingEnd { row });
                }
                let end = parse_timestamp(end_s).ok_or_else(|| AnnotationError::Malformed {
                    row,
                    msg: format!("bad end timestamp {end_s:?}"),
                })?;
                if end < begin {
                    return Err(AnnotationError::EndBeforeBegin {
                        row,
                        begin: begin_s.to_string(),
                        end: end_s.to_string(),
                    });
                }
                let iv = SubstrateInterval { substrate, begin, end };
                if out
                    .intervals
                    .iter()
                    .any(|o| o.substrate == substrate && o.overlaps(&iv))
                {
                    return Err(AnnotationError::OverlappingInterval { row, substrate });
                }
                out.intervals.push(iv);
            }
            AnnotationName::Species(_) | AnnotationName::Other(_) => {
                let count_s = field(ki);
                if count_s.is_empty() {
                    return Err(AnnotationError::MissingCount { row });
                }
                let count: u32 = count_s.parse().map_err(|_| AnnotationError::Malformed {
                    row,
                    msg: format!("bad count {count_s:?}"),
                })?;
                if count == 0 {
                    return Err(AnnotationError::Malformed {
                        row,
                        msg: "count must be at least 1".into(),
                    });
                }
                match kind {
                    AnnotationName::Species(species) => out.cabofs.push(CabofLabel {
                        species,
                        at: begin,
                        count,
                    }),
                    AnnotationName::Other(name) => out.others.push(OtherCount {
                        name,
                        at: begin,
                        count,
                    }),
                    AnnotationName::Substrate(_) => unreachable!(),
                }
            }
        }
    }
    Ok(out)
}

/// Parses an annotation CSV file into substrate intervals and CABOF labels.
pub fn parse_annotation_csv(path: impl AsRef<Path>) -> Result<AnnotationFile> {
    let file = std::fs::File::open(path)?;
    read_annotation_csv(std::io::BufReader::new(file))
}

impl AnnotationFile {
    /// Writes rows ordered by begin timestamp; substrate rows precede count
    /// rows sharing a timestamp.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        enum Row<'a> {
            Interval(&'a SubstrateInterval),
            Cabof(&'a CabofLabel),
            Other(&'a OtherCount),
        }
        let mut rows: Vec<(f64, u8, Row)> = Vec::new();
        rows.extend(self.intervals.iter().map(|r| (r.begin, 0, Row::Interval(r))));
        rows.extend(self.cabofs.iter().map(|r| (r.at, 1, Row::Cabof(r))));
        rows.extend(self.others.iter().map(|r| (r.at, 1, Row::Other(r))));
        rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["annotation", "begin", "end", "count"])?;
        for (_, _, row) in rows {
            match row {
                Row::Interval(iv) => w.write_record([
                    iv.substrate.name(),
                    &format_timestamp(iv.begin),
                    &format_timestamp(iv.end),
                    "",
                ])?,
                Row::Cabof(c) => w.write_record([
                    c.species.abbrev(),
                    &format_timestamp(c.at),
                    "",
                    &c.count.to_string(),
                ])?,
                Row::Other(o) => w.write_record([
                    o.name,
                    &format_timestamp(o.at),
                    "",
                    &o.count.to_string(),
                ])?,
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

/// Substrates whose interval covers `t` (inclusive endpoints).
pub fn frame_substrate_labels(intervals: &[SubstrateInterval], t: f64) -> SubstrateSet {
    intervals
        .iter()
        .filter(|iv| iv.contains(t))
        .map(|iv| iv.substrate)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeBox {
    #[serde(rename = "video")]
    pub video_id: String,
    pub frame: u32,
    #[serde(rename = "target")]
    pub target_id: String,
    pub species: SpeciesClass,
    #[serde(flatten)]
    pub bbox: BBox,
}

/// Linear per-coordinate interpolation between two keyframes of a target.
pub fn interpolate_keyframes(a: &KeyframeBox, b: &KeyframeBox, frame: u32) -> Result<BBox> {
    if a.target_id != b.target_id || a.video_id != b.video_id {
        return Err(AnnotationError::TargetMismatch(
            a.target_id.clone(),
            b.target_id.clone(),
        ));
    }
    let (a, b) = if a.frame <= b.frame { (a, b) } else { (b, a) };
    if frame < a.frame || frame > b.frame {
        return Err(AnnotationError::FrameOutOfRange {
            frame,
            start: a.frame,
            end: b.frame,
        });
    }
    if frame == a.frame {
        return Ok(a.bbox);
    }
    if frame == b.frame {
        return Ok(b.bbox);
    }
    let t = f64::from(frame - a.frame) / f64::from(b.frame - a.frame);
    Ok(a.bbox.lerp(&b.bbox, t))
}

/// Ground truth for one fully annotated evaluation frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameGroundTruth {
    #[serde(rename = "video")]
    pub video_id: String,
    pub frame: u32,
    pub boxes: Vec<LabeledBox>,
    pub fully_annotated_bottom_half: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub species: SpeciesClass,
    #[serde(flatten)]
    pub bbox: BBox,
}

/// Reads JSON-lines records, skipping blank lines.
pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| AnnotationError::Json {
            line: i + 1,
            source,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut writer: W, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r).map_err(|e| AnnotationError::Io(e.into()))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads keyframe JSON-lines and validates box geometry.
pub fn read_keyframes<R: BufRead>(reader: R) -> Result<Vec<KeyframeBox>> {
    let kfs: Vec<KeyframeBox> = read_jsonl(reader)?;
    if let Some(bad) = kfs.iter().find(|k| !k.bbox.is_valid()) {
        return Err(AnnotationError::InvalidBox(bad.bbox));
    }
    Ok(kfs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

/// Interval and count annotations of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnnotations {
    pub video_id: String,
    pub fps: f64,
    pub intervals: Vec<SubstrateInterval>,
    pub cabofs: Vec<CabofLabel>,
}

/// Count-weighted species-by-substrate tallies.
///
/// `individuals[s][sp]` counts individuals of `sp` whose CABOF frame shows
/// substrate `s`; `totals[sp]` counts all individuals of `sp`. A frame with
/// several substrates contributes to each of them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CooccurrenceTable {
    pub individuals: [[u64; 10]; 4],
    pub totals: [u64; 10],
}

impl CooccurrenceTable {
    /// Fraction of `sp` individuals seen on `s`; `None` when no individuals.
    pub fn fraction(&self, s: SubstrateClass, sp: SpeciesClass) -> Option<f64> {
        let total = self.totals[sp.index()];
        (total > 0).then(|| self.individuals[s.index()][sp.index()] as f64 / total as f64)
    }
}

pub fn cooccurrence_table(videos: &[VideoAnnotations]) -> CooccurrenceTable {
    let mut table = CooccurrenceTable::default();
    for v in videos {
        for c in &v.cabofs {
            let n = u64::from(c.count);
            table.totals[c.species.index()] += n;
            for s in frame_substrate_labels(&v.intervals, c.at).iter() {
                table.individuals[s.index()][c.species.index()] += n;
            }
        }
    }
    table
}

/// Per-species sum of CABOF counts over the videos assigned to `split`.
pub fn cabof_totals(
    videos: &[VideoAnnotations],
    splits: &HashMap<String, Split>,
    split: Split,
) -> [u64; 10] {
    let mut totals = [0u64; 10];
    for v in videos {
        if splits.get(&v.video_id) != Some(&split) {
            continue;
        }
        for c in &v.cabofs {
            totals[c.species.index()] += u64::from(c.count);
        }
    }
    totals
}

/// Groups keyframes by `(video, target)` with frames ascending.
pub fn group_keyframes(kfs: &[KeyframeBox]) -> BTreeMap<(String, String), Vec<KeyframeBox>> {
    let mut map: BTreeMap<(String, String), Vec<KeyframeBox>> = BTreeMap::new();
    for k in kfs {
        map.entry((k.video_id.clone(), k.target_id.clone()))
            .or_default()
            .push(k.clone());
    }
    for v in map.values_mut() {
        v.sort_by_key(|k| k.frame);
    }
    map
}

/// Boxes of every target whose keyframe span covers `frame`, interpolating
/// between the surrounding keyframes.
pub fn boxes_at_frame(
    grouped: &BTreeMap<(String, String), Vec<KeyframeBox>>,
    video_id: &str,
    frame: u32,
) -> Vec<LabeledBox> {
    let mut out = Vec::new();
    for ((vid, _), kfs) in grouped {
        if vid != video_id {
            continue;
        }
        let Some(pos) = kfs.iter().position(|k| k.frame >= frame) else {
            continue;
        };
        let bbox = if kfs[pos].frame == frame {
            Some(kfs[pos].bbox)
        } else if pos > 0 {
            interpolate_keyframes(&kfs[pos - 1], &kfs[pos], frame).ok()
        } else {
            None
        };
        if let Some(bbox) = bbox {
            out.push(LabeledBox {
                species: kfs[pos].species,
                bbox,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "Annotation,Begin,End,Count
Boulder,0:00:20,0:00:25,
FPU,0:00:21,,2
Cobble,0:00:23,0:01:30,
Mud,0:00:40,0:01:20,
SL,0:00:49,,1
SL,0:00:51,,3
Rock,0:01:00,0:03:50,
Mud,0:02:10,0:02:15,
";

    fn toy() -> AnnotationFile {
        read_annotation_csv(TOY.as_bytes()).unwrap()
    }

    #[test]
    fn parses_substrate_row() {
        let f = read_annotation_csv("Annotation,Begin,End,Count\nBoulder, 0:00:20, 0:00:25, \n".as_bytes()).unwrap();
        assert_eq!(
            f.intervals,
            vec![SubstrateInterval { substrate: SubstrateClass::Boulder, begin: 20.0, end: 25.0 }]
        );
        assert!(f.cabofs.is_empty());
    }

    #[test]
    fn parses_count_row() {
        let f = read_annotation_csv("Annotation,Begin,End,Count\nFPU, 0:00:21, , 2\n".as_bytes()).unwrap();
        assert_eq!(
            f.cabofs,
            vec![CabofLabel { species: SpeciesClass::FragilePinkUrchin, at: 21.0, count: 2 }]
        );
    }

    #[test]
    fn header_only_is_empty() {
        let f = read_annotation_csv("annotation,begin,end,count\n".as_bytes()).unwrap();
        assert!(f.intervals.is_empty() && f.cabofs.is_empty());
    }

    #[test]
    fn toy_table_frame_labels() {
        let f = toy();
        let at24 = frame_substrate_labels(&f.intervals, 24.0);
        assert_eq!(at24, [SubstrateClass::Boulder, SubstrateClass::Cobble].into_iter().collect());
        let at132 = frame_substrate_labels(&f.intervals, 132.0);
        assert_eq!(at132, [SubstrateClass::Rock, SubstrateClass::Mud].into_iter().collect());
        assert!(frame_substrate_labels(&[], 10.0).is_empty());
    }

    #[test]
    fn interval_endpoints_are_inclusive() {
        let f = toy();
        assert!(frame_substrate_labels(&f.intervals, 25.0).contains(SubstrateClass::Boulder));
        assert!(!frame_substrate_labels(&f.intervals, 25.001).contains(SubstrateClass::Boulder));
    }

    #[test]
    fn rejects_unknown_name_with_row() {
        let err = read_annotation_csv("annotation,begin,end,count\nMud,0:00:01,0:00:02,\nKraken,0:00:03,,1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, AnnotationError::UnknownName { row: 3, .. }), "{err}");
    }

    #[test]
    fn rejects_end_before_begin() {
        let err = read_annotation_csv("annotation,begin,end,count\nMud,0:00:05,0:00:02,\n".as_bytes()).unwrap_err();
        assert!(matches!(err, AnnotationError::EndBeforeBegin { row: 2, .. }));
    }

    #[test]
    fn rejects_species_without_count() {
        let err = read_annotation_csv("annotation,begin,end,count\nSL,0:00:05,,\n".as_bytes()).unwrap_err();
        assert!(matches!(err, AnnotationError::MissingCount { row: 2 }));
    }

    #[test]
    fn rejects_same_substrate_overlap() {
        let err = read_annotation_csv(
            "annotation,begin,end,count\nMud,0:00:05,0:00:10,\nMud,0:00:10,0:00:12,\n".as_bytes(),
        )
        .unwrap_err();
        assert!(matches!(err, AnnotationError::OverlappingInterval { row: 3, .. }));
    }

    #[test]
    fn non_interest_species_go_to_other_bucket() {
        let f = read_annotation_csv("annotation,begin,end,count\nUI lobed sponge,0:00:05,,4\nspot prawn,0:00:06,,1\n".as_bytes()).unwrap();
        assert!(f.cabofs.is_empty());
        assert_eq!(f.others.len(), 2);
        assert_eq!(f.others[0].name, "UI lobed sponge");
        assert_eq!(f.others[1].name, "Spot prawn");
    }

    #[test]
    fn species_abbreviations_are_case_sensitive_where_needed() {
        assert_eq!(SpeciesClass::parse("WSSC"), Some(SpeciesClass::WhiteSlipperSeaCucumber));
        assert_eq!(SpeciesClass::parse("WSpSC"), Some(SpeciesClass::WhiteSpineSeaCucumber));
        assert_eq!(SpeciesClass::parse("fragile pink urchin"), Some(SpeciesClass::FragilePinkUrchin));
    }

    #[test]
    fn timestamps_round_trip() {
        for t in [0.0, 21.0, 3599.0, 7322.0, 21.5, 1.033] {
            assert_eq!(parse_timestamp(&format_timestamp(t)), Some(t));
        }
        assert_eq!(format_timestamp(130.0), "0:02:10");
        assert_eq!(parse_timestamp("0:2:10"), None);
        assert_eq!(parse_timestamp("0:00:75"), None);
    }

    fn kf(frame: u32, b: [f64; 4]) -> KeyframeBox {
        KeyframeBox {
            video_id: "v".into(),
            frame,
            target_id: "t1".into(),
            species: SpeciesClass::SquatLobster,
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
        }
    }

    #[test]
    fn interpolation_examples() {
        let a = kf(100, [10.0, 10.0, 20.0, 20.0]);
        let b = kf(130, [10.0, 40.0, 20.0, 50.0]);
        assert_eq!(interpolate_keyframes(&a, &b, 115).unwrap(), BBox::new(10.0, 25.0, 20.0, 35.0));
        assert_eq!(interpolate_keyframes(&a, &b, 100).unwrap(), a.bbox);
        assert_eq!(interpolate_keyframes(&a, &b, 130).unwrap(), b.bbox);
        // fraction 24/30 = 0.8: y1 = 10 + 0.8 * 30 = 34
        let mid = interpolate_keyframes(&a, &b, 124).unwrap();
        for (got, want) in [(mid.x1, 10.0), (mid.y1, 34.0), (mid.x2, 20.0), (mid.y2, 44.0)] {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_errors() {
        let a = kf(100, [10.0, 10.0, 20.0, 20.0]);
        let mut b = kf(130, [10.0, 40.0, 20.0, 50.0]);
        assert!(matches!(interpolate_keyframes(&a, &b, 131), Err(AnnotationError::FrameOutOfRange { .. })));
        b.target_id = "t2".into();
        assert!(matches!(interpolate_keyframes(&a, &b, 110), Err(AnnotationError::TargetMismatch(..))));
    }

    #[test]
    fn keyframe_jsonl_layout() {
        let k = kf(7, [1.0, 2.0, 3.0, 4.0]);
        let line = serde_json::to_string(&k).unwrap();
        assert_eq!(
            line,
            r#"{"video":"v","frame":7,"target":"t1","species":"SL","x1":1.0,"y1":2.0,"x2":3.0,"y2":4.0}"#
        );
        let back = read_keyframes(line.as_bytes()).unwrap();
        assert_eq!(back, vec![k]);
    }

    #[test]
    fn single_label_cooccurrence() {
        let v = VideoAnnotations {
            video_id: "v".into(),
            fps: 30.0,
            intervals: vec![SubstrateInterval { substrate: SubstrateClass::Mud, begin: 0.0, end: 10.0 }],
            cabofs: vec![CabofLabel { species: SpeciesClass::SquatLobster, at: 5.0, count: 1 }],
        };
        let t = cooccurrence_table(&[v]);
        for s in SubstrateClass::ALL {
            let want = if s == SubstrateClass::Mud { 1.0 } else { 0.0 };
            assert_eq!(t.fraction(s, SpeciesClass::SquatLobster), Some(want));
        }
        assert_eq!(t.fraction(SubstrateClass::Mud, SpeciesClass::BasketStar), None);
    }

    #[test]
    fn toy_cooccurrence_weights_by_count() {
        let f = toy();
        let v = VideoAnnotations { video_id: "v".into(), fps: 30.0, intervals: f.intervals, cabofs: f.cabofs };
        let t = cooccurrence_table(&[v]);
        let sl = SpeciesClass::SquatLobster;
        // SL at 49 s (x1) and 51 s (x3): both on Cobble and Mud.
        assert_eq!(t.totals[sl.index()], 4);
        assert_eq!(t.fraction(SubstrateClass::Cobble, sl), Some(1.0));
        assert_eq!(t.fraction(SubstrateClass::Mud, sl), Some(1.0));
        assert_eq!(t.fraction(SubstrateClass::Rock, sl), Some(0.0));
    }

    #[test]
    fn totals_per_split() {
        let f = toy();
        let v = VideoAnnotations { video_id: "a".into(), fps: 30.0, intervals: f.intervals, cabofs: f.cabofs };
        let splits = HashMap::from([("a".to_string(), Split::Train)]);
        let train = cabof_totals(std::slice::from_ref(&v), &splits, Split::Train);
        assert_eq!(train[SpeciesClass::FragilePinkUrchin.index()], 2);
        assert_eq!(train[SpeciesClass::SquatLobster.index()], 4);
        assert_eq!(cabof_totals(&[v], &splits, Split::Test), [0; 10]);
    }
}
