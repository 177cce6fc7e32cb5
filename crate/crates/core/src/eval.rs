//! COCO-style box mAP and the per-document-category competition score.
//!
//! Matching is greedy in score order: each detection takes the still-unmatched
//! ground-truth box of the same class with the highest IoU, provided that IoU
//! reaches the threshold. AP uses 101-point interpolated precision. Classes
//! without ground truth are left out of every mean.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{iou, BBox, Detection, LayoutCategory, PageId};
use crate::ingest::{GroundTruthSet, PredictionSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub recall_points: usize,
    /// Detections kept per page and class; `None` keeps all.
    pub max_dets: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            recall_points: 101,
            max_dets: Some(100),
        }
    }
}

impl EvalConfig {
    pub fn with_thresholds(iou_thresholds: Vec<f64>) -> Self {
        EvalConfig {
            iou_thresholds,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.iou_thresholds;
        if t.is_empty() {
            return Err(Error::Config("at least one IoU threshold is required".into()));
        }
        if t.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
            return Err(Error::Config("IoU thresholds must lie in (0, 1]".into()));
        }
        if t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("IoU thresholds must be strictly increasing".into()));
        }
        if self.recall_points < 2 {
            return Err(Error::Config("recall_points must be at least 2".into()));
        }
        if self.max_dets == Some(0) {
            return Err(Error::Config("max_dets must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DocCategory {
    Reports,
    Manuals,
    Patents,
    Others,
}

impl DocCategory {
    pub const ALL: [DocCategory; 4] = [
        DocCategory::Reports,
        DocCategory::Manuals,
        DocCategory::Patents,
        DocCategory::Others,
    ];

    /// The three classes a classifier scores, in probability-vector order.
    pub const CLASSIFIED: [DocCategory; 3] =
        [DocCategory::Reports, DocCategory::Manuals, DocCategory::Patents];

    pub fn name(self) -> &'static str {
        match self {
            DocCategory::Reports => "reports",
            DocCategory::Manuals => "manuals",
            DocCategory::Patents => "patents",
            DocCategory::Others => "others",
        }
    }
}

/// Matches one page's detections of one class against its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PageMatch {
    /// Scores in descending order, aligned with `tp`.
    pub scores: Vec<f64>,
    pub tp: Vec<bool>,
    pub unmatched_gt: usize,
}

pub fn match_page(dets: &[Detection], gts: &[BBox], iou_threshold: f64) -> PageMatch {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for &i in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&dets[i].bbox, gt);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        tp.push(best.is_some());
    }
    PageMatch {
        scores: order.iter().map(|&i| dets[i].score).collect(),
        tp,
        unmatched_gt: taken.iter().filter(|t| !**t).count(),
    }
}

/// Interpolated AP of score-ordered TP/FP flags.
pub fn average_precision(flags: &[bool], total_gt: usize, recall_points: usize) -> f64 {
    if total_gt == 0 || recall_points == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let steps = (recall_points - 1).max(1) as f64;
    let sum: f64 = (0..recall_points)
        .map(|k| {
            let r = k as f64 / steps;
            let i = recall.partition_point(|&x| x < r);
            precision.get(i).copied().unwrap_or(0.0)
        })
        .sum();
    sum / recall_points as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub gt_count: usize,
    /// AP at each configured IoU threshold.
    pub ap: Vec<f64>,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MapReport {
    pub iou_thresholds: Vec<f64>,
    /// Only classes that have ground truth.
    pub per_class: BTreeMap<LayoutCategory, ClassReport>,
    pub overall_map: Option<f64>,
    /// Only document categories with pages and ground truth.
    pub per_doc_category: BTreeMap<DocCategory, f64>,
    pub doc_category_mean: Option<f64>,
}

impl MapReport {
    /// The number to maximise: the document-category mean when categories are
    /// known, the pooled mAP otherwise.
    pub fn score(&self) -> f64 {
        self.doc_category_mean.or(self.overall_map).unwrap_or(0.0)
    }

    /// Plain-text table, values x100 with one decimal.
    pub fn table(&self) -> String {
        let pct = |v: f64| format!("{:.1}", v * 100.0);
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>7} {:>6}", "class", "mAP", "GT");
        for (c, r) in &self.per_class {
            let _ = writeln!(out, "{:<16} {:>7} {:>6}", c.name(), pct(r.map), r.gt_count);
        }
        if let Some(m) = self.overall_map {
            let _ = writeln!(out, "{:<16} {:>7}", "all", pct(m));
        }
        for (c, v) in &self.per_doc_category {
            let _ = writeln!(out, "{:<16} {:>7}", format!("doc:{}", c.name()), pct(*v));
        }
        if let Some(m) = self.doc_category_mean {
            let _ = writeln!(out, "{:<16} {:>7}", "doc-mean", pct(m));
        }
        out
    }
}

/// Arithmetic mean; `None` for no values.
pub fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean over the document categories present in `per_category`.
pub fn doc_category_mean(per_category: &BTreeMap<DocCategory, f64>) -> Option<f64> {
    mean(per_category.values().copied())
}

/// Per page, class and threshold match results; pooled afterwards for any page subset.
struct PageClassMatches {
    gt_count: usize,
    /// One entry per IoU threshold: (scores, tp flags), scores descending.
    per_threshold: Vec<(Vec<f64>, Vec<bool>)>,
}

pub fn evaluate(
    preds: &PredictionSet,
    gt: &GroundTruthSet,
    page_doc_categories: &BTreeMap<PageId, DocCategory>,
    cfg: &EvalConfig,
) -> Result<MapReport> {
    cfg.validate()?;
    if let Some(p) = preds.detections.keys().find(|p| !gt.pages.contains_key(*p)) {
        return Err(Error::UnknownPage(p.0.clone()));
    }

    // page -> class -> matches
    let mut table: BTreeMap<&PageId, BTreeMap<LayoutCategory, PageClassMatches>> = BTreeMap::new();
    for page in gt.pages.keys() {
        let mut dets_by_class: BTreeMap<LayoutCategory, Vec<Detection>> = BTreeMap::new();
        for d in preds.page(page) {
            dets_by_class.entry(d.category).or_default().push(d.clone());
        }
        let mut gts_by_class: BTreeMap<LayoutCategory, Vec<BBox>> = BTreeMap::new();
        for g in gt.boxes(page) {
            gts_by_class.entry(g.category).or_default().push(g.bbox);
        }
        let mut classes = BTreeMap::new();
        for c in LayoutCategory::ALL {
            let mut dets = dets_by_class.remove(&c).unwrap_or_default();
            let gts = gts_by_class.remove(&c).unwrap_or_default();
            if dets.is_empty() && gts.is_empty() {
                continue;
            }
            if let Some(cap) = cfg.max_dets {
                if dets.len() > cap {
                    // Stable, so equal scores keep input order like `match_page`.
                    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
                    dets.truncate(cap);
                }
            }
            let per_threshold = cfg
                .iou_thresholds
                .iter()
                .map(|&t| {
                    let m = match_page(&dets, &gts, t);
                    (m.scores, m.tp)
                })
                .collect();
            classes.insert(
                c,
                PageClassMatches {
                    gt_count: gts.len(),
                    per_threshold,
                },
            );
        }
        table.insert(page, classes);
    }

    let pool = |pages: &[&PageId]| -> BTreeMap<LayoutCategory, ClassReport> {
        let mut out = BTreeMap::new();
        for c in LayoutCategory::ALL {
            let entries: Vec<&PageClassMatches> =
                pages.iter().filter_map(|p| table[*p].get(&c)).collect();
            let gt_count: usize = entries.iter().map(|e| e.gt_count).sum();
            if gt_count == 0 {
                continue;
            }
            let ap: Vec<f64> = (0..cfg.iou_thresholds.len())
                .map(|t| {
                    let mut pooled: Vec<(f64, bool)> = entries
                        .iter()
                        .flat_map(|e| {
                            let (s, f) = &e.per_threshold[t];
                            s.iter().copied().zip(f.iter().copied())
                        })
                        .collect();
                    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
                    let flags: Vec<bool> = pooled.into_iter().map(|(_, f)| f).collect();
                    average_precision(&flags, gt_count, cfg.recall_points)
                })
                .collect();
            let map = mean(ap.iter().copied()).unwrap_or(0.0);
            out.insert(c, ClassReport { gt_count, ap, map });
        }
        out
    };

    let all_pages: Vec<&PageId> = table.keys().copied().collect();
    let per_class = pool(&all_pages);
    let overall_map = mean(per_class.values().map(|r| r.map));

    let mut per_doc_category = BTreeMap::new();
    for cat in DocCategory::ALL {
        let pages: Vec<&PageId> = all_pages
            .iter()
            .copied()
            .filter(|p| page_doc_categories.get(*p) == Some(&cat))
            .collect();
        if pages.is_empty() {
            continue;
        }
        if let Some(m) = mean(pool(&pages).values().map(|r| r.map)) {
            per_doc_category.insert(cat, m);
        }
    }
    let doc_category_mean = doc_category_mean(&per_doc_category);

    Ok(MapReport {
        iou_thresholds: cfg.iou_thresholds.clone(),
        per_class,
        overall_map,
        per_doc_category,
        doc_category_mean,
    })
}

/// Parses `{page_id: [p_reports, p_manuals, p_patents]}`.
pub fn parse_probabilities(bytes: &[u8]) -> Result<BTreeMap<PageId, Vec<f64>>> {
    let raw: BTreeMap<String, Vec<f64>> =
        serde_json::from_slice(bytes).map_err(|e| Error::json(bytes, e))?;
    Ok(raw.into_iter().map(|(k, v)| (PageId(k), v)).collect())
}

/// Top-1 category when its probability reaches `threshold`, `Others` otherwise.
pub fn assign_doc_categories(
    probs: &BTreeMap<PageId, Vec<f64>>,
    threshold: f64,
) -> Result<BTreeMap<PageId, DocCategory>> {
    let mut out = BTreeMap::new();
    for (page, v) in probs {
        let bad = |reason: String| Error::BadProbabilities {
            page: page.0.clone(),
            reason,
        };
        if v.len() != DocCategory::CLASSIFIED.len() {
            return Err(bad(format!("expected 3 probabilities, got {}", v.len())));
        }
        if v.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(bad("probabilities must be finite and non-negative".into()));
        }
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(bad(format!("probabilities sum to {sum}")));
        }
        // First maximum wins, i.e. Reports < Manuals < Patents on ties.
        let (best, p) = v
            .iter()
            .enumerate()
            .fold((0, v[0]), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
        let cat = if p >= threshold {
            DocCategory::CLASSIFIED[best]
        } else {
            DocCategory::Others
        };
        out.insert(page.clone(), cat);
    }
    Ok(out)
}

/// Maps a dataset document label onto the four scoring categories, if known.
pub fn try_map_original_label(label: &str) -> Option<DocCategory> {
    let norm: String = label
        .trim()
        .chars()
        .map(|c| if c == '_' || c == '-' { ' ' } else { c.to_ascii_lowercase() })
        .collect();
    match norm.as_str() {
        "scientific articles" | "laws and regulations" | "government tenders" | "financial reports" => {
            Some(DocCategory::Reports)
        }
        "manuals" => Some(DocCategory::Manuals),
        "patents" => Some(DocCategory::Patents),
        _ => None,
    }
}

/// Like [`try_map_original_label`], falling back to `Others` with a warning.
pub fn map_original_label(label: &str) -> DocCategory {
    try_map_original_label(label).unwrap_or_else(|| {
        log::warn!("unknown document label {label:?}, counting it as others");
        DocCategory::Others
    })
}

/// Document categories from the labels stored on ground-truth pages.
pub fn doc_categories_from_labels(gt: &GroundTruthSet) -> BTreeMap<PageId, DocCategory> {
    gt.pages
        .values()
        .filter_map(|p| Some((p.page_id.clone(), map_original_label(p.doc_label.as_deref()?))))
        .collect()
}
