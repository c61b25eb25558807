//! Synthetic page corpus and a learning-curve detector simulator.
//!
//! Pages belong to latent style clusters. The simulated detector's competence
//! on a cluster grows as `m / (m + m0)` with the number `m` of annotated
//! tables from that cluster, so which pages get labeled changes what the
//! detector can find. This is a modeling assumption for desk-scale
//! experiments, not a claim about real detectors.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::active_loop::{AnnotatedImage, ModelAdapter};
use crate::dataset::{DatasetRecord, Hardness};
use crate::error::{Error, Result};
use crate::geometry::{rasterize_boxes, BoundingBox};
use crate::ids::ImageId;
use crate::scoring::{Detection, PredictionRecord, T_IOU_LATEX, T_IOU_WORD};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Profile {
    #[serde(rename = "latex-like")]
    LatexLike,
    #[serde(rename = "word-like")]
    WordLike,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::LatexLike => "latex-like",
            Profile::WordLike => "word-like",
        }
    }

    /// BBA overlap threshold tuned for this kind of document.
    pub fn default_t_iou(self) -> f64 {
        match self {
            Profile::LatexLike => T_IOU_LATEX,
            Profile::WordLike => T_IOU_WORD,
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latex-like" => Ok(Profile::LatexLike),
            "word-like" => Ok(Profile::WordLike),
            other => Err(Error::config(format!(
                "unknown profile `{other}` (expected latex-like|word-like)"
            ))),
        }
    }
}

/// Corpus generation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Number of latent style clusters.
    pub clusters: u32,
    /// Cluster frequencies follow `1 / (c + 1)^cluster_skew`.
    pub cluster_skew: f64,
    /// Probability that a page carries two or more tables.
    pub multi_table_prob: f64,
    pub max_tables: u32,
    pub overlap_prone_prob: f64,
    pub page_width: u32,
    pub page_height: u32,
    /// Table width as a fraction of the content width.
    pub table_width: (f64, f64),
    /// Table height as a fraction of its vertical slot.
    pub table_height: (f64, f64),
}

impl CorpusConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::LatexLike => Self {
                clusters: 5,
                cluster_skew: 0.0,
                multi_table_prob: 0.45,
                max_tables: 4,
                overlap_prone_prob: 0.15,
                page_width: 306,
                page_height: 396,
                table_width: (0.7, 1.0),
                table_height: (0.55, 0.85),
            },
            Profile::WordLike => Self {
                clusters: 12,
                cluster_skew: 1.0,
                multi_table_prob: 0.2,
                max_tables: 4,
                overlap_prone_prob: 0.25,
                page_width: 306,
                page_height: 396,
                table_width: (0.3, 1.0),
                table_height: (0.25, 0.95),
            },
        }
    }

    fn validate(&self) -> Result<()> {
        let frac = |(lo, hi): (f64, f64)| 0.0 < lo && lo <= hi && hi <= 1.0;
        if self.clusters == 0
            || self.max_tables < 2
            || !(0.0..=1.0).contains(&self.multi_table_prob)
            || !(0.0..=1.0).contains(&self.overlap_prone_prob)
            || self.page_width < 16
            || self.page_height < 16
            || !frac(self.table_width)
            || !frac(self.table_height)
            || !self.cluster_skew.is_finite()
        {
            return Err(Error::config(format!("invalid corpus config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub image_id: ImageId,
    pub width: u32,
    pub height: u32,
    pub gt_tables: Vec<BoundingBox>,
    pub hardness: Hardness,
}

impl SyntheticImage {
    pub fn to_record(&self) -> DatasetRecord {
        DatasetRecord {
            image_id: self.image_id.clone(),
            width: self.width,
            height: self.height,
            gt_boxes: self.gt_tables.clone(),
            hardness: Some(self.hardness),
        }
    }

    pub fn from_record(rec: &DatasetRecord) -> Result<Self> {
        let hardness = rec.hardness.ok_or_else(|| {
            Error::config(format!(
                "image `{}` has no hardness record; the simulator needs synthetic corpora",
                rec.image_id
            ))
        })?;
        Ok(Self {
            image_id: rec.image_id.clone(),
            width: rec.width,
            height: rec.height,
            gt_tables: rec.gt_boxes.clone(),
            hardness,
        })
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn layout_tables(cfg: &CorpusConfig, n: u32, rng: &mut ChaCha8Rng) -> Vec<BoundingBox> {
    let (w, h) = (cfg.page_width as f64, cfg.page_height as f64);
    let margin_x = 0.08 * w;
    let margin_y = 0.06 * h;
    let content_w = w - 2.0 * margin_x;
    let slot_h = (h - 2.0 * margin_y) / n as f64;
    (0..n)
        .map(|i| {
            let tw = (content_w * uniform(rng, cfg.table_width)).round().max(4.0);
            let th = (slot_h * uniform(rng, cfg.table_height)).round().max(4.0);
            let x0 = (margin_x + (content_w - tw) * rng.random::<f64>()).round();
            let slot_top = margin_y + slot_h * i as f64;
            let y0 = (slot_top + (slot_h - th) * rng.random::<f64>()).round();
            BoundingBox::new(x0, y0, x0 + tw, y0 + th).expect("layout stays on the page")
        })
        .collect()
}

pub fn generate_corpus(profile: Profile, n_images: usize, seed: u64) -> Result<Vec<SyntheticImage>> {
    generate_corpus_with(&CorpusConfig::for_profile(profile), n_images, seed)
}

/// Generates `n_images` pages; every page has at least one table.
pub fn generate_corpus_with(cfg: &CorpusConfig, n_images: usize, seed: u64) -> Result<Vec<SyntheticImage>> {
    if n_images == 0 {
        return Err(Error::config("corpus size must be positive"));
    }
    cfg.validate()?;
    let weights: Vec<f64> = (0..cfg.clusters)
        .map(|c| 1.0 / ((c + 1) as f64).powf(cfg.cluster_skew))
        .collect();
    let cluster_dist = WeightedIndex::new(&weights).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = seed::rng(seed::derive(seed, 0x636f_7270));
    let images = (0..n_images)
        .map(|i| {
            let style_cluster = cluster_dist.sample(&mut rng) as u32;
            let n_tables = if rng.random::<f64>() < cfg.multi_table_prob {
                rng.random_range(2..=cfg.max_tables)
            } else {
                1
            };
            let overlap_prone = rng.random::<f64>() < cfg.overlap_prone_prob;
            let gt_tables = layout_tables(cfg, n_tables, &mut rng);
            SyntheticImage {
                image_id: ImageId::new(format!("img{i:06}")),
                width: cfg.page_width,
                height: cfg.page_height,
                gt_tables,
                hardness: Hardness {
                    style_cluster,
                    overlap_prone,
                    table_count: n_tables,
                },
            }
        })
        .collect();
    Ok(images)
}

/// Detector simulator knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Half-saturation constant of `m / (m + m0)`.
    pub m0: f64,
    /// Coordinate noise, as a fraction of box size, at zero competence.
    pub jitter_scale: f64,
    /// Confidence spread at zero competence.
    pub conf_noise: f64,
    /// Probability of a spurious box at zero competence.
    pub fp_rate: f64,
    /// Whether predictions carry a segmentation mask.
    pub emit_masks: bool,
    /// Multi-table pages need their own experience: competence on them grows
    /// only with tables annotated on multi-table pages.
    pub separate_multi_layout: bool,
    /// Half-saturation constant for multi-table layout competence.
    pub multi_layout_m0: f64,
    /// Fraction of every annotated table credited to the other clusters.
    pub transfer: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            m0: 8.0,
            jitter_scale: 0.25,
            conf_noise: 0.35,
            fp_rate: 0.5,
            emit_masks: true,
            separate_multi_layout: true,
            multi_layout_m0: 40.0,
            transfer: 0.5,
        }
    }
}

/// `m / (m + m0)`.
pub fn competence_curve(m: f64, m0: f64) -> f64 {
    if m <= 0.0 {
        0.0
    } else {
        m / (m + m0)
    }
}

/// Per-cluster counts of annotated tables seen in training, plus the
/// constants that turn them into competence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDetectorState {
    /// Annotated tables per cluster.
    pub cluster_examples: Vec<u64>,
    /// Annotated tables per cluster that sat on multi-table pages.
    pub cluster_multi_examples: Vec<u64>,
    pub m0: f64,
    pub multi_layout_m0: f64,
    pub transfer: f64,
}

/// Own count plus the transferred share of every other cluster's count.
fn effective_count(counts: &[u64], cluster: u32, transfer: f64) -> f64 {
    let own = counts.get(cluster as usize).copied().unwrap_or(0) as f64;
    let total: u64 = counts.iter().sum();
    own + transfer * (total as f64 - own)
}

impl SimDetectorState {
    pub fn untrained(clusters: u32, m0: f64) -> Self {
        Self {
            cluster_examples: vec![0; clusters as usize],
            cluster_multi_examples: vec![0; clusters as usize],
            m0,
            multi_layout_m0: m0,
            transfer: 0.0,
        }
    }

    pub fn for_config(clusters: u32, cfg: &DetectorConfig) -> Self {
        Self {
            multi_layout_m0: cfg.multi_layout_m0,
            transfer: cfg.transfer,
            ..Self::untrained(clusters, cfg.m0)
        }
    }

    /// Competence on single-table pages of `cluster`.
    pub fn competence(&self, cluster: u32) -> f64 {
        competence_curve(effective_count(&self.cluster_examples, cluster, self.transfer), self.m0)
    }

    /// Competence on multi-table pages of `cluster`.
    pub fn multi_layout_competence(&self, cluster: u32) -> f64 {
        competence_curve(
            effective_count(&self.cluster_multi_examples, cluster, self.transfer),
            self.multi_layout_m0,
        )
    }

    /// Competence that applies to a given page.
    pub fn page_competence(&self, hardness: &Hardness, separate_multi_layout: bool) -> f64 {
        if separate_multi_layout && hardness.table_count > 1 {
            self.multi_layout_competence(hardness.style_cluster)
        } else {
            self.competence(hardness.style_cluster)
        }
    }
}

/// Updates competence from a labeled batch of `(cluster, annotated tables)`.
/// A warm start adds to the previous counts; a cold start counts only this
/// batch.
pub fn sim_train(state: &SimDetectorState, labeled: &[(u32, usize)], warm_start: bool) -> SimDetectorState {
    let mut next = state.clone();
    if !warm_start {
        next.cluster_examples.iter_mut().for_each(|c| *c = 0);
        next.cluster_multi_examples.iter_mut().for_each(|c| *c = 0);
    }
    for &(cluster, tables) in labeled {
        let c = cluster as usize;
        if c >= next.cluster_examples.len() {
            next.cluster_examples.resize(c + 1, 0);
            next.cluster_multi_examples.resize(c + 1, 0);
        }
        next.cluster_examples[c] += tables as u64;
        if tables > 1 {
            next.cluster_multi_examples[c] += tables as u64;
        }
    }
    next
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn jittered(b: &BoundingBox, scale: f64, rng: &mut ChaCha8Rng, w: f64, h: f64) -> BoundingBox {
    let (bw, bh) = (b.width(), b.height());
    let out = BoundingBox::from_corners(
        b.x_min() + normal(rng) * scale * bw,
        b.y_min() + normal(rng) * scale * bh,
        b.x_max() + normal(rng) * scale * bw,
        b.y_max() + normal(rng) * scale * bh,
    )
    .expect("finite jitter");
    out.clip(w, h)
}

/// Simulated inference on one page at a given competence. Each random event
/// draws from its own stream so that outcomes change smoothly with competence.
pub fn emit_predictions(image: &SyntheticImage, competence: f64, seed: u64, cfg: &DetectorConfig) -> PredictionRecord {
    let q = clamp01(competence);
    let (w, h) = (image.width as f64, image.height as f64);
    let base = seed::derive(seed, seed::hash_str(image.image_id.as_str()));
    let stream = |tag: u64| seed::rng(seed::derive(base, tag));
    let spread = 1.0 - q;
    let mut detections = Vec::new();

    if q > 0.0 {
        for (t, gt) in image.gt_tables.iter().enumerate() {
            let mut rng = stream(t as u64);
            if rng.random::<f64>() >= q {
                continue;
            }
            let bbox = jittered(gt, spread * cfg.jitter_scale, &mut rng, w, h);
            let confidence = clamp01(q + spread * cfg.conf_noise * normal(&mut rng));
            detections.push(Detection { bbox, confidence });
        }

        let mut rng = stream(1_000);
        if image.hardness.overlap_prone && !image.gt_tables.is_empty() && rng.random::<f64>() < spread {
            let gt = image.gt_tables[rng.random_range(0..image.gt_tables.len())];
            let dx = gt.width() * uniform(&mut rng, (0.1, 0.3)) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let dy = gt.height() * uniform(&mut rng, (-0.1, 0.1));
            let bbox = BoundingBox::new(gt.x_min() + dx, gt.y_min() + dy, gt.x_max() + dx, gt.y_max() + dy)
                .expect("shifted box")
                .clip(w, h);
            let confidence = clamp01(0.9 * q + spread * cfg.conf_noise * normal(&mut rng));
            detections.push(Detection { bbox, confidence });
        }

        let mut rng = stream(2_000);
        if rng.random::<f64>() < cfg.fp_rate * spread {
            let bw = w * uniform(&mut rng, (0.2, 0.6));
            let bh = h * uniform(&mut rng, (0.05, 0.25));
            let x0 = (w - bw) * rng.random::<f64>();
            let y0 = (h - bh) * rng.random::<f64>();
            let bbox = BoundingBox::new(x0, y0, x0 + bw, y0 + bh).expect("fp box");
            let confidence = clamp01(0.6 * q + spread * cfg.conf_noise * normal(&mut rng));
            detections.push(Detection { bbox, confidence });
        }
    }

    let mut record = PredictionRecord::new(image.image_id.clone(), image.width, image.height)
        .with_detections(detections);
    if cfg.emit_masks {
        let mut rng = stream(3_000);
        let regions: Vec<BoundingBox> = image
            .gt_tables
            .iter()
            .filter_map(|gt| {
                let keep = rng.random::<f64>() < 0.5 + 0.5 * q;
                let b = jittered(gt, 0.5 * spread * cfg.jitter_scale, &mut rng, w, h);
                keep.then_some(b)
            })
            .collect();
        let mask = rasterize_boxes(&regions, image.width, image.height).expect("page dims are positive");
        record.segmentation_mask = Some(mask);
    }
    record
}

pub fn sim_infer(state: &SimDetectorState, image: &SyntheticImage, seed: u64, cfg: &DetectorConfig) -> PredictionRecord {
    let q = state.page_competence(&image.hardness, cfg.separate_multi_layout);
    emit_predictions(image, q, seed, cfg)
}

/// [`ModelAdapter`] backed by the simulator. It knows every page's latent
/// attributes, as a real model would see its pixels.
#[derive(Debug, Clone)]
pub struct SimAdapter {
    images: HashMap<ImageId, SyntheticImage>,
    clusters: u32,
    config: DetectorConfig,
    seed: u64,
}

impl SimAdapter {
    pub fn new<'a>(
        images: impl IntoIterator<Item = &'a DatasetRecord>,
        config: DetectorConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut map = HashMap::new();
        let mut clusters = 0;
        for rec in images {
            let img = SyntheticImage::from_record(rec)?;
            clusters = clusters.max(img.hardness.style_cluster + 1);
            map.insert(img.image_id.clone(), img);
        }
        Ok(Self {
            images: map,
            clusters,
            config,
            seed,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    fn image(&self, id: &ImageId) -> Result<&SyntheticImage> {
        self.images
            .get(id)
            .ok_or_else(|| Error::config(format!("simulator has no page `{id}`")))
    }
}

impl ModelAdapter for SimAdapter {
    type Model = SimDetectorState;

    fn train(&self, previous: Option<&SimDetectorState>, batch: &[AnnotatedImage], warm_start: bool) -> Result<SimDetectorState> {
        let base = match previous {
            Some(p) => p.clone(),
            None => SimDetectorState::for_config(self.clusters, &self.config),
        };
        let labeled = batch
            .iter()
            .map(|a| Ok((self.image(&a.image_id)?.hardness.style_cluster, a.boxes.len())))
            .collect::<Result<Vec<_>>>()?;
        Ok(sim_train(&base, &labeled, warm_start && previous.is_some()))
    }

    fn infer(&self, model: &SimDetectorState, ids: &[ImageId]) -> Result<Vec<PredictionRecord>> {
        let images = ids.iter().map(|id| self.image(id)).collect::<Result<Vec<_>>>()?;
        Ok(images
            .par_iter()
            .map(|img| sim_infer(model, img, self.seed, &self.config))
            .collect())
    }
}
