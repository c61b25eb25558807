//! Per-image selection scores computed from a detector's output.
//!
//! Confidences arrive precomputed from the detector (class probability times
//! localization quality); nothing here recomputes them.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_iou, mask_iou, rasterize_boxes, BinaryMask, BoundingBox};
use crate::ids::ImageId;

/// BBA overlap threshold tuned for Word-style documents.
pub const T_IOU_WORD: f64 = 0.006;
/// BBA overlap threshold tuned for LaTeX-style documents.
pub const T_IOU_LATEX: f64 = 0.004;
/// Minimum confidence for a detection to count as a table.
pub const DEFAULT_CONF_FLOOR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidConfidence(confidence));
        }
        Ok(Self { bbox, confidence })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub image_id: ImageId,
    pub image_width: u32,
    pub image_height: u32,
    pub detections: Vec<Detection>,
    pub segmentation_mask: Option<BinaryMask>,
}

impl PredictionRecord {
    pub fn new(image_id: impl Into<ImageId>, image_width: u32, image_height: u32) -> Self {
        Self {
            image_id: image_id.into(),
            image_width,
            image_height,
            detections: Vec::new(),
            segmentation_mask: None,
        }
    }

    pub fn with_detections(mut self, detections: Vec<Detection>) -> Self {
        self.detections = detections;
        self
    }

    pub fn with_mask(mut self, mask: BinaryMask) -> Self {
        self.segmentation_mask = Some(mask);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_id.as_str().is_empty() {
            return Err(Error::config("empty image id"));
        }
        for d in &self.detections {
            if !(0.0..=1.0).contains(&d.confidence) {
                return Err(Error::InvalidConfidence(d.confidence));
            }
        }
        if let Some(mask) = &self.segmentation_mask {
            if mask.width() != self.image_width || mask.height() != self.image_height {
                return Err(Error::MaskShape {
                    left_width: mask.width(),
                    left_height: mask.height(),
                    right_width: self.image_width,
                    right_height: self.image_height,
                });
            }
        }
        Ok(())
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.detections.iter().map(|d| d.bbox).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: ImageId,
    pub mean_confidence: Option<f64>,
    pub entropy: f64,
    pub bba: f64,
    pub ma: Option<f64>,
    pub table_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub t_iou: f64,
    pub conf_floor: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            t_iou: T_IOU_LATEX,
            conf_floor: DEFAULT_CONF_FLOOR,
        }
    }
}

pub fn mean_confidence(rec: &PredictionRecord) -> Option<f64> {
    if rec.detections.is_empty() {
        return None;
    }
    let sum: f64 = rec.detections.iter().map(|d| d.confidence).sum();
    Some(sum / rec.detections.len() as f64)
}

/// Binary entropy in nats; 0 at p = 0 and p = 1.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
    term(p) + term(1.0 - p)
}

/// Entropy of the most uncertain detected table (each detection is one table).
pub fn binary_entropy_score(rec: &PredictionRecord) -> f64 {
    rec.detections
        .iter()
        .map(|d| binary_entropy(d.confidence))
        .fold(0.0, f64::max)
}

/// Fraction of detections whose best overlap with another detection exceeds
/// `t_iou` (strictly).
pub fn bba_score(rec: &PredictionRecord, t_iou: f64) -> f64 {
    let n = rec.detections.len();
    if n <= 1 {
        return 0.0;
    }
    let ambiguous = (0..n)
        .filter(|&i| {
            let di = &rec.detections[i].bbox;
            let best = (0..n)
                .filter(|&j| j != i)
                .map(|j| box_iou(di, &rec.detections[j].bbox))
                .fold(0.0, f64::max);
            best > t_iou
        })
        .count();
    ambiguous as f64 / n as f64
}

/// `1 - IoU` between the rasterized union of all detection boxes and the
/// segmentation mask; absent without a mask.
pub fn ma_score(rec: &PredictionRecord) -> Result<Option<f64>> {
    let Some(seg) = &rec.segmentation_mask else {
        return Ok(None);
    };
    let det = rasterize_boxes(&rec.boxes(), rec.image_width, rec.image_height)?;
    Ok(Some(1.0 - mask_iou(&det, seg)?))
}

pub fn table_count(rec: &PredictionRecord, conf_floor: f64) -> u32 {
    rec.detections
        .iter()
        .filter(|d| d.confidence >= conf_floor)
        .count() as u32
}

pub fn score_record(rec: &PredictionRecord, config: &ScoreConfig) -> Result<ImageScore> {
    Ok(ImageScore {
        image_id: rec.image_id.clone(),
        mean_confidence: mean_confidence(rec),
        entropy: binary_entropy_score(rec),
        bba: bba_score(rec, config.t_iou),
        ma: ma_score(rec)?,
        table_count: table_count(rec, config.conf_floor),
    })
}

/// Scores every record, preserving input order.
pub fn score_all(records: &[PredictionRecord], config: &ScoreConfig) -> Result<Vec<ImageScore>> {
    let mut seen = HashSet::with_capacity(records.len());
    for rec in records {
        if !seen.insert(rec.image_id.as_str()) {
            return Err(Error::DuplicateId(rec.image_id.to_string()));
        }
    }
    records
        .par_iter()
        .map(|rec| score_record(rec, config))
        .collect()
}
