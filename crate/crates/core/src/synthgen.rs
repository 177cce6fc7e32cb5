//! Synthetic page layouts composed from cropped element patches.
//!
//! Only geometry is produced: a COCO dataset plus a manifest telling an
//! external renderer which patch to paste where. All coordinates are integer
//! pixels so that a COCO round-trip is exact.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{BBox, CategoryMap, LayoutCategory, PageId};
use crate::ingest::{GroundTruthSet, GtBox, Page};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPatch")]
pub struct PatchRecord {
    pub category: LayoutCategory,
    pub width: u32,
    pub height: u32,
    pub source_ref: String,
}

#[derive(Deserialize)]
struct RawPatch {
    category: LayoutCategory,
    width: u32,
    height: u32,
    source_ref: String,
}

impl TryFrom<RawPatch> for PatchRecord {
    type Error = Error;

    fn try_from(r: RawPatch) -> Result<Self> {
        PatchRecord::new(r.category, r.width, r.height, r.source_ref)
    }
}

impl PatchRecord {
    pub fn new(category: LayoutCategory, width: u32, height: u32, source_ref: impl Into<String>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::BadDimensions {
                width: width as f64,
                height: height as f64,
            });
        }
        Ok(PatchRecord {
            category,
            width,
            height,
            source_ref: source_ref.into(),
        })
    }
}

pub fn parse_patches(bytes: &[u8]) -> Result<Vec<PatchRecord>> {
    serde_json::from_slice(bytes).map_err(|e| Error::json(bytes, e))
}

/// Categories that fill the columns; the rest are optional page furniture.
pub fn is_body(category: LayoutCategory) -> bool {
    !matches!(
        category,
        LayoutCategory::Title | LayoutCategory::PageHeader | LayoutCategory::PageFooter | LayoutCategory::Footnote
    )
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PatchPool {
    by_category: BTreeMap<LayoutCategory, Vec<PatchRecord>>,
    body: Vec<PatchRecord>,
}

impl PatchPool {
    pub fn get(&self, category: LayoutCategory) -> &[PatchRecord] {
        self.by_category.get(&category).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self, category: LayoutCategory) -> usize {
        self.get(category).len()
    }

    pub fn body(&self) -> &[PatchRecord] {
        &self.body
    }

    pub fn is_empty(&self) -> bool {
        self.by_category.is_empty()
    }
}

pub fn build_pool(records: impl IntoIterator<Item = PatchRecord>) -> PatchPool {
    let mut pool = PatchPool::default();
    for r in records {
        if is_body(r.category) {
            pool.body.push(r.clone());
        }
        pool.by_category.entry(r.category).or_default().push(r);
    }
    pool
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptionalProbs {
    pub title: f64,
    pub page_header: f64,
    pub page_footer: f64,
    pub footnote: f64,
}

impl Default for OptionalProbs {
    fn default() -> Self {
        OptionalProbs {
            title: 0.5,
            page_header: 0.7,
            page_footer: 0.7,
            footnote: 0.3,
        }
    }
}

impl OptionalProbs {
    pub fn none() -> Self {
        OptionalProbs {
            title: 0.0,
            page_header: 0.0,
            page_footer: 0.0,
            footnote: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub page_width: u32,
    pub page_height: u32,
    pub column_range: [u8; 2],
    pub optional_probs: OptionalProbs,
    pub margin: u32,
    pub gap: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            page_width: 1025,
            page_height: 1025,
            column_range: [1, 5],
            optional_probs: OptionalProbs::default(),
            margin: 40,
            gap: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.column_range;
        if lo < 1 || hi > 5 || lo > hi {
            return Err(Error::Config(format!("column_range [{lo}, {hi}] must lie within [1, 5]")));
        }
        let p = &self.optional_probs;
        for (name, v) in [
            ("title", p.title),
            ("page_header", p.page_header),
            ("page_footer", p.page_footer),
            ("footnote", p.footnote),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("probability {name} = {v} outside [0, 1]")));
            }
        }
        if self.page_width == 0 || self.page_height == 0 {
            return Err(Error::BadDimensions {
                width: self.page_width as f64,
                height: self.page_height as f64,
            });
        }
        if 2 * self.margin as u64 >= self.page_width as u64 || 2 * self.margin as u64 >= self.page_height as u64 {
            return Err(Error::Config(format!(
                "margin {} leaves no content area on a {}x{} page",
                self.margin, self.page_width, self.page_height
            )));
        }
        let content_w = self.page_width - 2 * self.margin;
        if (hi as u32 - 1) * self.gap >= content_w {
            return Err(Error::Config(format!(
                "{hi} columns with gap {} do not fit a content width of {content_w}",
                self.gap
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub source_ref: String,
    pub category: LayoutCategory,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub page_width: u32,
    pub page_height: u32,
    /// `[left, right]` of each column.
    pub columns: Vec<[u32; 2]>,
    pub placements: Vec<Placement>,
}

fn place(out: &mut Vec<Placement>, patch: &PatchRecord, l: u32, t: u32, w: u32, h: u32) {
    out.push(Placement {
        source_ref: patch.source_ref.clone(),
        category: patch.category,
        bbox: BBox {
            left: l as f64,
            top: t as f64,
            right: (l + w) as f64,
            bottom: (t + h) as f64,
        },
    });
}

/// Uniform down- or up-scale so the patch fits `max_w` x `max_h`.
fn fit(patch: &PatchRecord, max_w: u32, max_h: u32) -> Option<(u32, u32)> {
    let s = (max_w as f64 / patch.width as f64).min(max_h as f64 / patch.height as f64);
    let w = ((patch.width as f64 * s).floor() as u32).min(max_w);
    let h = ((patch.height as f64 * s).floor() as u32).min(max_h);
    (w > 0 && h > 0).then_some((w, h))
}

fn draw_optional<'a, R: Rng + ?Sized>(
    pool: &'a PatchPool,
    category: LayoutCategory,
    prob: f64,
    rng: &mut R,
) -> Option<&'a PatchRecord> {
    let hit = rng.gen_bool(prob);
    hit.then(|| pool.get(category).choose(rng)).flatten()
}

pub fn generate_layout<R: Rng + ?Sized>(pool: &PatchPool, cfg: &SynthConfig, rng: &mut R) -> Result<LayoutSpec> {
    cfg.validate()?;
    if pool.body().is_empty() {
        return Err(Error::Config("patch pool has no body-category patches".into()));
    }
    let x0 = cfg.margin;
    let content_w = cfg.page_width - 2 * cfg.margin;
    let mut top = cfg.margin;
    let mut bottom = cfg.page_height - cfg.margin;
    let band_h = (bottom - top) / 10;
    let title_h = (bottom - top) / 6;

    let [lo, hi] = cfg.column_range;
    let n_cols = rng.gen_range(lo..=hi) as u32;
    let probs = &cfg.optional_probs;
    let header = draw_optional(pool, LayoutCategory::PageHeader, probs.page_header, rng);
    let title = draw_optional(pool, LayoutCategory::Title, probs.title, rng);
    let footer = draw_optional(pool, LayoutCategory::PageFooter, probs.page_footer, rng);
    let footnote = draw_optional(pool, LayoutCategory::Footnote, probs.footnote, rng);

    let mut placements = Vec::new();
    for (patch, max_h) in [(header, band_h), (title, title_h)] {
        let Some(patch) = patch else { continue };
        let Some((w, h)) = fit(patch, content_w, max_h.min(bottom - top)) else {
            continue;
        };
        place(&mut placements, patch, x0 + (content_w - w) / 2, top, w, h);
        top = (top + h + cfg.gap).min(bottom);
    }
    for (patch, max_h) in [(footer, band_h), (footnote, band_h)] {
        let Some(patch) = patch else { continue };
        let Some((w, h)) = fit(patch, content_w, max_h.min(bottom - top)) else {
            continue;
        };
        place(&mut placements, patch, x0, bottom - h, w, h);
        bottom = bottom.saturating_sub(h + cfg.gap).max(top);
    }

    let col_w = (content_w - (n_cols - 1) * cfg.gap) / n_cols;
    let columns: Vec<[u32; 2]> = (0..n_cols)
        .map(|i| {
            let l = x0 + i * (col_w + cfg.gap);
            [l, l + col_w]
        })
        .collect();
    for &[l, _] in &columns {
        let mut y = top;
        loop {
            let patch = pool.body().choose(rng).expect("body pool is non-empty");
            let h = ((patch.height as u64 * col_w as u64) / patch.width as u64).max(1) as u32;
            if y as u64 + h as u64 > bottom as u64 {
                break;
            }
            place(&mut placements, patch, l, y, col_w, h);
            y += h + cfg.gap;
        }
    }

    Ok(LayoutSpec {
        page_width: cfg.page_width,
        page_height: cfg.page_height,
        columns,
        placements,
    })
}

/// Layout `i` draws from its own ChaCha stream of `cfg.seed`, so any subset
/// can be regenerated independently.
pub fn generate_layouts(pool: &PatchPool, cfg: &SynthConfig, count: usize) -> Result<Vec<LayoutSpec>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i);
            generate_layout(pool, cfg, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub page_id: PageId,
    pub file_name: String,
    pub source_ref: String,
    pub category: LayoutCategory,
    pub bbox: BBox,
}

/// Page ids are `1..=n`, annotation ids are consecutive from 1.
pub fn emit_dataset(layouts: &[LayoutSpec]) -> (Vec<u8>, Vec<u8>) {
    let mut gt = GroundTruthSet {
        pages: BTreeMap::new(),
        annotations: BTreeMap::new(),
        categories: CategoryMap::default(),
    };
    let mut manifest = Vec::new();
    let mut next_id = 1u64;
    for (i, layout) in layouts.iter().enumerate() {
        let page_id = PageId::from(i as u64 + 1);
        let file_name = format!("synth_{:06}.png", i + 1);
        gt.pages.insert(
            page_id.clone(),
            Page {
                page_id: page_id.clone(),
                file_name: Some(file_name.clone()),
                width: layout.page_width as f64,
                height: layout.page_height as f64,
                doc_label: None,
                scale_info: None,
            },
        );
        let boxes = gt.annotations.entry(page_id.clone()).or_default();
        for p in &layout.placements {
            boxes.push(GtBox {
                id: next_id,
                bbox: p.bbox,
                category: p.category,
            });
            next_id += 1;
            manifest.push(ManifestEntry {
                page_id: page_id.clone(),
                file_name: file_name.clone(),
                source_ref: p.source_ref.clone(),
                category: p.category,
                bbox: p.bbox,
            });
        }
    }
    let coco = gt.to_coco_json().expect("default category table covers every category");
    let manifest = serde_json::to_vec(&manifest).expect("manifest serialises");
    (coco, manifest)
}
