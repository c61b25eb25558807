//! On-disk formats.
//!
//! Every file except `config.json` is line-delimited JSON: one object per
//! line, each line terminated by `\n`. Object keys appear in a fixed order.
//! Detection confidences are rounded to 6 significant digits before writing;
//! every other float is written in shortest round-trip form. Readers never
//! repair input: any invalid line is an error carrying its line number, and
//! a final line without its newline is reported as truncation.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::active_loop::{Budget, LoopConfig, LoopMode, SelectionRound, TrainMode};
use crate::dataset::{Dataset, DatasetRecord};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::geometry::{BinaryMask, BoundingBox};
use crate::ids::ImageId;
use crate::sampler::{Candidate, CandidateList, SelectionConfig, Strategy};
use crate::scoring::{Detection, ImageScore, PredictionRecord, ScoreConfig};
use crate::simulator::{DetectorConfig, Profile};

/// Rounds to 6 significant digits.
pub fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

struct Line {
    number: usize,
    text: String,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_lines(path: &Path) -> Result<Vec<Line>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if content.is_empty() {
        return Ok(Vec::new());
    }
    let complete = content.ends_with('\n');
    let lines: Vec<&str> = content.strip_suffix('\n').unwrap_or(&content).split('\n').collect();
    if !complete {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            line: lines.len(),
        });
    }
    lines
        .into_iter()
        .enumerate()
        .map(|(i, text)| {
            if text.trim().is_empty() {
                Err(parse_err(path, i + 1, "blank line"))
            } else {
                Ok(Line {
                    number: i + 1,
                    text: text.to_string(),
                })
            }
        })
        .collect()
}

fn parse_line<T: DeserializeOwned>(path: &Path, line: &Line) -> Result<T> {
    serde_json::from_str(&line.text).map_err(|e| parse_err(path, line.number, e.to_string()))
}

fn to_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("file records serialize");
    s.push('\n');
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_records<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let text: String = records.into_iter().map(|r| to_line(&r)).collect();
    write_text(path, &text)
}

fn check_unique<'a>(path: &Path, seen: &mut HashSet<&'a str>, id: &'a ImageId, line: usize) -> Result<()> {
    if seen.insert(id.as_str()) {
        Ok(())
    } else {
        Err(parse_err(path, line, format!("duplicate image id `{id}`")))
    }
}

// ---- datasets ----

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HardnessLine {
    style_cluster: u32,
    overlap_prone: bool,
    table_count: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetLine {
    image_id: ImageId,
    width: u32,
    height: u32,
    gt_boxes: Vec<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hardness: Option<HardnessLine>,
}

impl From<&DatasetRecord> for DatasetLine {
    fn from(r: &DatasetRecord) -> Self {
        Self {
            image_id: r.image_id.clone(),
            width: r.width,
            height: r.height,
            gt_boxes: r.gt_boxes.clone(),
            hardness: r.hardness.map(|h| HardnessLine {
                style_cluster: h.style_cluster,
                overlap_prone: h.overlap_prone,
                table_count: h.table_count,
            }),
        }
    }
}

impl From<DatasetLine> for DatasetRecord {
    fn from(l: DatasetLine) -> Self {
        Self {
            image_id: l.image_id,
            width: l.width,
            height: l.height,
            gt_boxes: l.gt_boxes,
            hardness: l.hardness.map(|h| crate::dataset::Hardness {
                style_cluster: h.style_cluster,
                overlap_prone: h.overlap_prone,
                table_count: h.table_count,
            }),
        }
    }
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    let mut records = Vec::with_capacity(lines.len());
    for line in &lines {
        let record: DatasetRecord = parse_line::<DatasetLine>(path, line)?.into();
        record
            .validate()
            .map_err(|e| parse_err(path, line.number, e.to_string()))?;
        records.push(record);
    }
    let mut seen = HashSet::new();
    for (line, r) in lines.iter().zip(&records) {
        check_unique(path, &mut seen, &r.image_id, line.number)?;
    }
    Dataset::new(records)
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_records(path.as_ref(), dataset.records().iter().map(DatasetLine::from))
}

// ---- masks ----

/// Run-length encoded mask. Each row lists alternating run lengths starting
/// with a run of zeros, which may be empty. Later runs are positive and the
/// runs of a row sum to `width`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRle {
    pub width: u32,
    pub height: u32,
    pub rows: Vec<Vec<u32>>,
}

pub fn encode_mask(mask: &BinaryMask) -> MaskRle {
    let rows = (0..mask.height())
        .map(|y| {
            let mut runs = Vec::new();
            let mut current = false;
            let mut len = 0u32;
            for bit in mask.iter_row(y) {
                if bit != current {
                    runs.push(len);
                    current = bit;
                    len = 0;
                }
                len += 1;
            }
            runs.push(len);
            runs
        })
        .collect();
    MaskRle {
        width: mask.width(),
        height: mask.height(),
        rows,
    }
}

pub fn decode_mask(rle: &MaskRle) -> Result<BinaryMask> {
    if rle.rows.len() != rle.height as usize {
        return Err(Error::InvalidMask(format!(
            "{} rows for height {}",
            rle.rows.len(),
            rle.height
        )));
    }
    let mut bits = Vec::with_capacity(rle.width as usize * rle.height as usize);
    for (y, runs) in rle.rows.iter().enumerate() {
        if runs.is_empty() || runs[1..].contains(&0) {
            return Err(Error::InvalidMask(format!("row {y}: runs must be non-empty and positive after the first")));
        }
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        if total != rle.width as u64 {
            return Err(Error::InvalidMask(format!(
                "row {y}: runs sum to {total}, width is {}",
                rle.width
            )));
        }
        for (i, &run) in runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, run as usize));
        }
    }
    BinaryMask::from_bits(rle.width, rle.height, &bits)
}

// ---- predictions ----

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionLine {
    #[serde(rename = "box")]
    bbox: BoundingBox,
    confidence: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionLine {
    image_id: ImageId,
    width: u32,
    height: u32,
    detections: Vec<DetectionLine>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<MaskRle>,
}

impl From<&PredictionRecord> for PredictionLine {
    fn from(r: &PredictionRecord) -> Self {
        Self {
            image_id: r.image_id.clone(),
            width: r.image_width,
            height: r.image_height,
            detections: r
                .detections
                .iter()
                .map(|d| DetectionLine {
                    bbox: d.bbox,
                    confidence: round_sig6(d.confidence),
                })
                .collect(),
            mask: r.segmentation_mask.as_ref().map(encode_mask),
        }
    }
}

impl PredictionLine {
    fn into_record(self) -> Result<PredictionRecord> {
        let detections = self
            .detections
            .into_iter()
            .map(|d| Detection::new(d.bbox, d.confidence))
            .collect::<Result<Vec<_>>>()?;
        let mut record = PredictionRecord::new(self.image_id, self.width, self.height).with_detections(detections);
        if let Some(rle) = &self.mask {
            record.segmentation_mask = Some(decode_mask(rle)?);
        }
        record.validate()?;
        Ok(record)
    }
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    let mut records = Vec::with_capacity(lines.len());
    for line in &lines {
        let record = parse_line::<PredictionLine>(path, line)?
            .into_record()
            .map_err(|e| parse_err(path, line.number, e.to_string()))?;
        records.push(record);
    }
    let mut seen = HashSet::new();
    for (line, r) in lines.iter().zip(&records) {
        check_unique(path, &mut seen, &r.image_id, line.number)?;
    }
    Ok(records)
}

pub fn write_predictions(records: &[PredictionRecord], path: impl AsRef<Path>) -> Result<()> {
    write_records(path.as_ref(), records.iter().map(PredictionLine::from))
}

// ---- scores ----

pub fn write_scores(scores: &[ImageScore], path: impl AsRef<Path>) -> Result<()> {
    write_records(path.as_ref(), scores)
}

// ---- candidate lists ----

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateHeader {
    strategy: Strategy,
    seed: u64,
    count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateLine {
    image_id: ImageId,
    weight: f64,
}

/// Header line `{strategy, seed, count}` followed by `count` entries in
/// selection order.
pub fn write_candidates(list: &CandidateList, path: impl AsRef<Path>) -> Result<()> {
    let mut text = to_line(&CandidateHeader {
        strategy: list.strategy,
        seed: list.seed,
        count: list.entries.len(),
    });
    for c in &list.entries {
        text.push_str(&to_line(&CandidateLine {
            image_id: c.image_id.clone(),
            weight: c.weight,
        }));
    }
    write_text(path.as_ref(), &text)
}

pub fn read_candidates(path: impl AsRef<Path>) -> Result<CandidateList> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    let (head, rest) = lines
        .split_first()
        .ok_or_else(|| parse_err(path, 1, "missing header line"))?;
    let header: CandidateHeader = parse_line(path, head)?;
    if header.count != rest.len() {
        return Err(parse_err(
            path,
            head.number,
            format!("header announces {} entries, file has {}", header.count, rest.len()),
        ));
    }
    let mut entries = Vec::with_capacity(rest.len());
    for line in rest {
        let c: CandidateLine = parse_line(path, line)?;
        if !c.weight.is_finite() {
            return Err(parse_err(path, line.number, "weight must be finite"));
        }
        entries.push(Candidate {
            image_id: c.image_id,
            weight: c.weight,
        });
    }
    let mut seen = HashSet::new();
    for (line, c) in rest.iter().zip(&entries) {
        check_unique(path, &mut seen, &c.image_id, line.number)?;
    }
    Ok(CandidateList {
        strategy: header.strategy,
        seed: header.seed,
        entries,
    })
}

// ---- round log ----

/// One selection round, with enough run context to be read on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundLogEntry {
    pub round_index: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub budget: Budget,
    pub picked_ids: Vec<ImageId>,
    pub budget_consumed: usize,
    pub cumulative_labeled: usize,
    pub labeled_size: usize,
    pub new_labeled_size: usize,
    pub unlabeled_size: usize,
    pub truncated: bool,
    pub map_50: f64,
    pub map_coco: f64,
    pub report: crate::eval::EvalReport,
}

impl RoundLogEntry {
    pub fn new(round: &SelectionRound, config: &LoopConfig) -> Self {
        Self {
            round_index: round.round_index,
            strategy: round.strategy,
            seed: config.seed,
            budget: config.budget,
            picked_ids: round.picked_ids.clone(),
            budget_consumed: round.budget_consumed,
            cumulative_labeled: round.cumulative_labeled,
            labeled_size: round.labeled_size,
            new_labeled_size: round.new_labeled_size,
            unlabeled_size: round.unlabeled_size,
            truncated: round.truncated,
            map_50: round.metrics.map_50,
            map_coco: round.metrics.map_coco,
            report: round.metrics.clone(),
        }
    }
}

/// Appends one line. The line is written with a single call so a reader
/// sees either the whole record or a truncated tail.
pub fn append_round_log(entry: &RoundLogEntry, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.write_all(to_line(entry).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn write_round_log(entries: &[RoundLogEntry], path: impl AsRef<Path>) -> Result<()> {
    write_records(path.as_ref(), entries)
}

pub fn read_round_log(path: impl AsRef<Path>) -> Result<Vec<RoundLogEntry>> {
    let path = path.as_ref();
    read_lines(path)?
        .iter()
        .map(|line| parse_line(path, line))
        .collect()
}

// ---- JSON documents ----

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("documents serialize");
    text.push('\n');
    write_text(path.as_ref(), &text)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

// ---- run configuration ----

/// Every knob of a run. Defaults: uncertainty threshold 0.95, bin edges
/// 40..95, `r_min` 40, box-ambiguity IoU threshold 0.004 for latex-like and
/// 0.006 for word-like corpora, table-count confidence floor 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub mode: LoopMode,
    pub train_mode: TrainMode,
    pub seed: u64,
    pub budget: Budget,
    pub selection: SelectionConfig,
    pub score: ScoreConfig,
    pub eval: EvalConfig,
    pub profile: Profile,
    /// Fraction of the dataset held out for evaluation (taken from the end).
    pub holdout: f64,
    pub detector: DetectorConfig,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            strategy: Strategy::Random,
            mode: LoopMode::default(),
            train_mode: TrainMode::default(),
            seed: 0,
            budget: Budget::new(1000, 50, 50),
            selection: SelectionConfig::default(),
            score: ScoreConfig {
                t_iou: profile.default_t_iou(),
                ..ScoreConfig::default()
            },
            eval: EvalConfig::default(),
            profile,
            holdout: 0.2,
            detector: DetectorConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        let sel = &self.selection;
        if sel.edges.len() < 2 || sel.edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("bin edges must be at least two strictly increasing values"));
        }
        let (first, last) = (sel.edges[0], sel.edges[sel.edges.len() - 1]);
        if !(sel.uncertainty_threshold > first && sel.uncertainty_threshold <= last) {
            return Err(Error::config(format!(
                "uncertainty threshold {} must lie in ({first}, {last}]",
                sel.uncertainty_threshold
            )));
        }
        if sel.r_min > first {
            return Err(Error::config(format!("r_min {} exceeds the lowest bin edge {first}", sel.r_min)));
        }
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("t_iou", self.score.t_iou)?;
        unit("conf_floor", self.score.conf_floor)?;
        unit("detector transfer", self.detector.transfer)?;
        if self.eval.iou_thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::config("evaluation IoU thresholds must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::config(format!("holdout must lie in [0, 1), got {}", self.holdout)));
        }
        if !(self.detector.m0 > 0.0 && self.detector.multi_layout_m0 > 0.0) {
            return Err(Error::config("detector half-saturation constants must be positive"));
        }
        Ok(())
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            strategy: self.strategy,
            budget: self.budget,
            mode: self.mode,
            train_mode: self.train_mode,
            seed: self.seed,
            score: self.score,
            selection: self.selection.clone(),
            eval: self.eval.clone(),
        }
    }
}

pub fn write_run_config(config: &RunConfig, path: impl AsRef<Path>) -> Result<()> {
    write_json(config, path)
}

pub fn read_run_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let config: RunConfig = read_json(path)?;
    config.validate()?;
    Ok(config)
}

/// `dir/name`, creating `dir` if needed.
pub fn output_path(dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.join(name))
}
