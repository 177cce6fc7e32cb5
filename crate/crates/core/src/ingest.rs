//! Readers and writers for the on-disk formats.
//!
//! * ground truth: COCO (`images`, `annotations`, `categories`; boxes as `[x, y, w, h]`)
//! * predictions: COCO results array `[{image_id, category_id, bbox, score}]`
//! * text cells: `{page_id: [{bbox: [l, t, r, b], text}]}`
//! * scale side-table: `{page_id: {orig_width, orig_height}}`
//!
//! Unknown fields are ignored everywhere.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{BBox, CategoryMap, Detection, LayoutCategory, PageId, TextCell};

/// COCO ids show up both as integers and as strings in the wild.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum RawId {
    Num(u64),
    Str(String),
}

impl From<RawId> for PageId {
    fn from(id: RawId) -> Self {
        match id {
            RawId::Num(n) => PageId::from(n),
            RawId::Str(s) => PageId(s),
        }
    }
}

impl From<&PageId> for RawId {
    fn from(id: &PageId) -> Self {
        match id.as_coco_id() {
            // Only canonical decimal strings become numbers, so "007" survives a round trip.
            Some(n) if n.to_string() == id.0 => RawId::Num(n),
            _ => RawId::Str(id.0.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Page {
    pub page_id: PageId,
    pub file_name: Option<String>,
    pub width: f64,
    pub height: f64,
    /// Original document label, e.g. "Scientific Articles".
    pub doc_label: Option<String>,
    /// Original `(width, height)` from the scale side-table.
    pub scale_info: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtBox {
    pub id: u64,
    pub bbox: BBox,
    pub category: LayoutCategory,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthSet {
    pub pages: BTreeMap<PageId, Page>,
    /// Has an entry (possibly empty) for every page.
    pub annotations: BTreeMap<PageId, Vec<GtBox>>,
    pub categories: CategoryMap,
}

impl GroundTruthSet {
    pub fn boxes(&self, page: &PageId) -> &[GtBox] {
        self.annotations.get(page).map_or(&[], Vec::as_slice)
    }

    pub fn annotation_count(&self) -> usize {
        self.annotations.values().map(Vec::len).sum()
    }

    pub fn attach_scales(&mut self, scales: &ScaleTable) {
        for (id, dims) in &scales.0 {
            if let Some(p) = self.pages.get_mut(id) {
                p.scale_info = Some(*dims);
            }
        }
    }

    pub fn to_coco_json(&self) -> Result<Vec<u8>> {
        let images = self
            .pages
            .values()
            .map(|p| CocoImage {
                id: RawId::from(&p.page_id),
                file_name: p.file_name.clone(),
                width: p.width,
                height: p.height,
                doc_category: p.doc_label.clone(),
            })
            .collect();
        let mut annotations = Vec::with_capacity(self.annotation_count());
        for (page, boxes) in &self.annotations {
            for g in boxes {
                annotations.push(CocoAnnotation {
                    id: g.id,
                    image_id: RawId::from(page),
                    category_id: self.categories.id_of(g.category).ok_or_else(|| {
                        Error::Config(format!("category {} missing from id table", g.category))
                    })?,
                    bbox: g.bbox.to_xywh().to_vec(),
                    area: Some(g.bbox.area()),
                    iscrowd: Some(0),
                });
            }
        }
        let categories = self
            .categories
            .iter()
            .map(|(id, c)| CocoCategory {
                id,
                name: c.name().to_string(),
            })
            .collect();
        let doc = CocoDataset {
            images,
            annotations,
            categories,
        };
        Ok(serde_json::to_vec(&doc).expect("COCO dataset serialises"))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoDataset {
    #[serde(default)]
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: RawId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file_name: Option<String>,
    width: f64,
    height: f64,
    #[serde(
        default,
        alias = "doc_label",
        skip_serializing_if = "Option::is_none"
    )]
    doc_category: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: RawId,
    category_id: u64,
    bbox: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    iscrowd: Option<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

fn xywh(v: &[f64]) -> std::result::Result<BBox, String> {
    let [x, y, w, h] = <[f64; 4]>::try_from(v)
        .map_err(|_| format!("bbox must have 4 numbers, got {}", v.len()))?;
    if w < 0.0 || h < 0.0 {
        return Err(format!("negative width/height in bbox {v:?}"));
    }
    BBox::from_xywh(x, y, w, h).map_err(|e| e.to_string())
}

pub fn parse_ground_truth(bytes: &[u8]) -> Result<GroundTruthSet> {
    let raw: CocoDataset = serde_json::from_slice(bytes).map_err(|e| Error::json(bytes, e))?;

    let categories = if raw.categories.is_empty() {
        CategoryMap::default()
    } else {
        CategoryMap::from_pairs(raw.categories.iter().map(|c| (c.id, c.name.as_str())))?
    };

    let mut pages = BTreeMap::new();
    let mut annotations = BTreeMap::new();
    for img in raw.images {
        let page_id = PageId::from(img.id);
        if !(img.width > 0.0 && img.height > 0.0) {
            return Err(Error::BadImage {
                id: page_id.0,
                reason: format!("non-positive size {}x{}", img.width, img.height),
            });
        }
        annotations.insert(page_id.clone(), Vec::new());
        let page = Page {
            page_id: page_id.clone(),
            file_name: img.file_name,
            width: img.width,
            height: img.height,
            doc_label: img.doc_category,
            scale_info: None,
        };
        if pages.insert(page_id.clone(), page).is_some() {
            return Err(Error::BadImage {
                id: page_id.0,
                reason: "duplicate image id".into(),
            });
        }
    }

    for ann in raw.annotations {
        let page_id = PageId::from(ann.image_id);
        let category = categories.category(ann.category_id)?;
        let bbox = xywh(&ann.bbox).map_err(|reason| Error::BadAnnotation { id: ann.id, reason })?;
        let slot = annotations
            .get_mut(&page_id)
            .ok_or_else(|| Error::MissingImage {
                id: ann.id,
                image_id: page_id.0.clone(),
            })?;
        slot.push(GtBox {
            id: ann.id,
            bbox,
            category,
        });
    }

    Ok(GroundTruthSet {
        pages,
        annotations,
        categories,
    })
}

/// Detections of one model, keyed by page.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionSet {
    pub model_id: String,
    pub detections: BTreeMap<PageId, Vec<Detection>>,
}

impl PredictionSet {
    pub fn new(model_id: impl Into<String>) -> Self {
        PredictionSet {
            model_id: model_id.into(),
            detections: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.detections.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn page(&self, page: &PageId) -> &[Detection] {
        self.detections.get(page).map_or(&[], Vec::as_slice)
    }

    pub fn push(&mut self, det: Detection) {
        self.detections
            .entry(det.page_id.clone())
            .or_default()
            .push(det);
    }

    /// Serialises to the COCO results format, in page order then input order.
    pub fn to_coco_results(&self, categories: &CategoryMap) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.len());
        for dets in self.detections.values() {
            for d in dets {
                out.push(CocoResult {
                    image_id: RawId::from(&d.page_id),
                    category_id: categories.id_of(d.category).ok_or_else(|| {
                        Error::Config(format!("category {} missing from id table", d.category))
                    })?,
                    bbox: d.bbox.to_xywh().to_vec(),
                    score: d.score,
                });
            }
        }
        Ok(serde_json::to_vec(&out).expect("results serialise"))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoResult {
    image_id: RawId,
    category_id: u64,
    bbox: Vec<f64>,
    score: f64,
}

pub fn parse_predictions(bytes: &[u8], model_id: &str) -> Result<PredictionSet> {
    parse_predictions_with(bytes, model_id, &CategoryMap::default())
}

/// Like [`parse_predictions`] but resolves category ids through `categories`
/// (normally the table from the ground-truth file).
pub fn parse_predictions_with(
    bytes: &[u8],
    model_id: &str,
    categories: &CategoryMap,
) -> Result<PredictionSet> {
    let entries: Vec<serde_json::Value> =
        serde_json::from_slice(bytes).map_err(|e| Error::json(bytes, e))?;
    let mut set = PredictionSet::new(model_id);
    for (index, value) in entries.into_iter().enumerate() {
        let bad = |reason: String| Error::BadPrediction { index, reason };
        let r: CocoResult = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
        if !(0.0..=1.0).contains(&r.score) {
            return Err(bad(format!("score {} outside [0, 1]", r.score)));
        }
        let category = categories
            .category(r.category_id)
            .map_err(|e| bad(e.to_string()))?;
        let bbox = xywh(&r.bbox).map_err(bad)?;
        set.push(Detection {
            page_id: r.image_id.into(),
            bbox,
            category,
            score: r.score,
        });
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CellSet {
    pub cells: BTreeMap<PageId, Vec<TextCell>>,
}

impl CellSet {
    pub fn page(&self, page: &PageId) -> &[TextCell] {
        self.cells.get(page).map_or(&[], Vec::as_slice)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let raw: BTreeMap<&str, Vec<RawCell>> = self
            .cells
            .iter()
            .map(|(k, v)| {
                let cells = v
                    .iter()
                    .map(|c| RawCell {
                        bbox: c.bbox.into(),
                        text: c.text.clone(),
                    })
                    .collect();
                (k.as_str(), cells)
            })
            .collect();
        serde_json::to_vec(&raw).expect("cells serialise")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawCell {
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

pub fn parse_cells(bytes: &[u8]) -> Result<CellSet> {
    let raw: BTreeMap<String, Vec<RawCell>> =
        serde_json::from_slice(bytes).map_err(|e| Error::json(bytes, e))?;
    let mut cells = BTreeMap::new();
    for (page, list) in raw {
        let mut out = Vec::with_capacity(list.len());
        for (index, c) in list.into_iter().enumerate() {
            let [l, t, r, b] = c.bbox;
            let bbox = BBox::new(l, t, r, b).map_err(|e| Error::BadCell {
                page: page.clone(),
                index,
                reason: e.to_string(),
            })?;
            out.push(TextCell { bbox, text: c.text });
        }
        cells.insert(PageId(page), out);
    }
    Ok(CellSet { cells })
}

/// Original page dimensions, keyed by page.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScaleTable(pub BTreeMap<PageId, (f64, f64)>);

#[derive(Debug, Deserialize)]
struct RawScale {
    orig_width: f64,
    orig_height: f64,
}

pub fn parse_scales(bytes: &[u8]) -> Result<ScaleTable> {
    let raw: BTreeMap<String, RawScale> =
        serde_json::from_slice(bytes).map_err(|e| Error::json(bytes, e))?;
    let mut out = BTreeMap::new();
    for (page, s) in raw {
        if !(s.orig_width > 0.0 && s.orig_height > 0.0) {
            return Err(Error::BadScale {
                page,
                reason: format!("non-positive size {}x{}", s.orig_width, s.orig_height),
            });
        }
        out.insert(PageId(page), (s.orig_width, s.orig_height));
    }
    Ok(ScaleTable(out))
}

fn check_dims((w, h): (f64, f64)) -> Result<()> {
    if w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite() {
        Ok(())
    } else {
        Err(Error::BadDimensions {
            width: w,
            height: h,
        })
    }
}

/// Maps boxes from a `from = (width, height)` frame into a `to` frame,
/// scaling x and y independently.
pub fn rescale_boxes(boxes: &[BBox], from: (f64, f64), to: (f64, f64)) -> Result<Vec<BBox>> {
    check_dims(from)?;
    check_dims(to)?;
    if from == to {
        return Ok(boxes.to_vec());
    }
    let (sx, sy) = (to.0 / from.0, to.1 / from.1);
    Ok(boxes
        .iter()
        .map(|b| BBox {
            left: b.left * sx,
            top: b.top * sy,
            right: b.right * sx,
            bottom: b.bottom * sy,
        })
        .collect())
}
