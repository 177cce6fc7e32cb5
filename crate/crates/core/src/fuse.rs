//! Weighted Boxes Fusion across models, and plain NMS for comparison.
//!
//! WBF clusters boxes of one category greedily in order of effective score
//! (`score * model weight`). A box joins the first cluster whose running fused
//! box overlaps it by more than the IoU threshold and that holds no box from the
//! same model yet. The fused box is the effective-score weighted mean of its
//! members; the fused score is the mean effective score, optionally scaled by
//! `min(N, T) / T` where `N` is the member count and `T` the sum of weights.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{iou, BBox, Detection, LayoutCategory, PageId};
use crate::ingest::PredictionSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub iou_threshold: f64,
    /// One weight per model, in model order.
    pub weights: Vec<f64>,
    #[serde(default = "default_true")]
    pub score_rescale: bool,
    /// Boxes with effective score at or below this are dropped before fusion.
    #[serde(default)]
    pub skip_threshold: f64,
}

fn default_true() -> bool {
    true
}

impl FusionConfig {
    pub fn new(weights: Vec<f64>, iou_threshold: f64) -> Self {
        FusionConfig {
            iou_threshold,
            weights,
            score_rescale: true,
            skip_threshold: 0.0,
        }
    }

    /// Equal unit weights for `n` models.
    pub fn uniform(n: usize, iou_threshold: f64) -> Self {
        Self::new(vec![1.0; n], iou_threshold)
    }

    pub fn validate(&self, n_models: usize) -> Result<()> {
        if self.weights.len() != n_models {
            return Err(Error::WeightCount {
                expected: n_models,
                actual: self.weights.len(),
            });
        }
        if !(0.01..=0.99).contains(&self.iou_threshold) {
            return Err(Error::Config(format!(
                "iou_threshold {} outside [0.01, 0.99]",
                self.iou_threshold
            )));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("weights must be finite and non-negative".into()));
        }
        if !self.weights.iter().any(|w| *w > 0.0) {
            return Err(Error::Config("at least one weight must be positive".into()));
        }
        if !self.skip_threshold.is_finite() {
            return Err(Error::Config("skip_threshold must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMember {
    pub model: usize,
    pub effective_score: f64,
    pub bbox: BBox,
}

/// A group of same-category boxes from distinct models on one page.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub page_id: PageId,
    pub category: LayoutCategory,
    pub members: Vec<ClusterMember>,
    pub fused: BBox,
}

impl Cluster {
    fn start(page_id: PageId, category: LayoutCategory, member: ClusterMember) -> Self {
        Cluster {
            page_id,
            category,
            fused: member.bbox,
            members: vec![member],
        }
    }

    fn has_model(&self, model: usize) -> bool {
        self.members.iter().any(|m| m.model == model)
    }

    fn add(&mut self, member: ClusterMember) {
        self.members.push(member);
        let total: f64 = self.members.iter().map(|m| m.effective_score).sum();
        let mean = |f: fn(&BBox) -> f64| {
            self.members
                .iter()
                .map(|m| m.effective_score * f(&m.bbox))
                .sum::<f64>()
                / total
        };
        let mut fused = BBox {
            left: mean(|b| b.left),
            top: mean(|b| b.top),
            right: mean(|b| b.right),
            bottom: mean(|b| b.bottom),
        };
        // Rounding must not break the edge order the members all satisfy.
        fused.right = fused.right.max(fused.left);
        fused.bottom = fused.bottom.max(fused.top);
        self.fused = fused;
    }

    fn score(&self, rescale: Option<f64>) -> f64 {
        let n = self.members.len() as f64;
        let mut s = self.members.iter().map(|m| m.effective_score).sum::<f64>() / n;
        if let Some(total_weight) = rescale {
            s *= n.min(total_weight) / total_weight;
        }
        s.clamp(0.0, 1.0)
    }
}

/// Clusters one page's boxes; input is one detection list per model.
pub fn wbf_clusters<D: AsRef<[Detection]>>(per_model: &[D], cfg: &FusionConfig) -> Result<Vec<Cluster>> {
    cfg.validate(per_model.len())?;

    struct Entry<'a> {
        model: usize,
        order: usize,
        score: f64,
        det: &'a Detection,
    }

    let mut by_category: BTreeMap<LayoutCategory, Vec<Entry>> = BTreeMap::new();
    for (model, (dets, &w)) in per_model.iter().zip(&cfg.weights).enumerate() {
        if w <= 0.0 {
            continue;
        }
        for (order, det) in dets.as_ref().iter().enumerate() {
            let score = det.score * w;
            if score > cfg.skip_threshold {
                by_category.entry(det.category).or_default().push(Entry {
                    model,
                    order,
                    score,
                    det,
                });
            }
        }
    }

    let mut clusters = Vec::new();
    for (category, mut entries) in by_category {
        entries.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.model.cmp(&b.model))
                .then(a.order.cmp(&b.order))
        });
        let mut local: Vec<Cluster> = Vec::new();
        for e in entries {
            let member = ClusterMember {
                model: e.model,
                effective_score: e.score,
                bbox: e.det.bbox,
            };
            let target = local
                .iter()
                .position(|c| !c.has_model(e.model) && iou(&c.fused, &e.det.bbox) > cfg.iou_threshold);
            match target {
                Some(i) => local[i].add(member),
                None => local.push(Cluster::start(e.det.page_id.clone(), category, member)),
            }
        }
        clusters.extend(local);
    }
    Ok(clusters)
}

/// Fuses one page. Output is sorted by fused score, highest first.
pub fn wbf_page<D: AsRef<[Detection]>>(per_model: &[D], cfg: &FusionConfig) -> Result<Vec<Detection>> {
    let clusters = wbf_clusters(per_model, cfg)?;
    let total_weight: f64 = cfg.weights.iter().sum();
    let rescale = cfg.score_rescale.then_some(total_weight);
    let mut out: Vec<Detection> = clusters
        .iter()
        .map(|c| Detection {
            page_id: c.page_id.clone(),
            bbox: c.fused,
            category: c.category,
            score: c.score(rescale),
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

/// Greedy per-category non-maximum suppression.
pub fn nms_page(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept.iter().any(|&k| {
            dets[k].category == dets[i].category && iou(&dets[k].bbox, &dets[i].bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// Fuses whole prediction sets page by page; set order is weight order.
pub fn fuse_sets(sets: &[PredictionSet], cfg: &FusionConfig) -> Result<PredictionSet> {
    cfg.validate(sets.len())?;
    let pages: BTreeSet<&PageId> = sets.iter().flat_map(|s| s.detections.keys()).collect();
    let pages: Vec<&PageId> = pages.into_iter().collect();
    let fused: Vec<(PageId, Vec<Detection>)> = pages
        .par_iter()
        .map(|page| {
            let per_model: Vec<&[Detection]> = sets.iter().map(|s| s.page(page)).collect();
            Ok(((*page).clone(), wbf_page(&per_model, cfg)?))
        })
        .collect::<Result<_>>()?;
    let mut out = PredictionSet::new("wbf");
    out.detections = fused.into_iter().collect();
    Ok(out)
}
