//! Text-cell based box refinement.
//!
//! Each detection is compared edge by edge against the text cells around it.
//! The number of edges that sit close to a cell edge selects one of five cases:
//!
//! | close edges | action |
//! |---|---|
//! | 0, 1 | keep the box |
//! | 2 | inspect the two loose edges against the matched cells: both inside → replace with the closest cell, both outside → matched cells become snap candidates, mixed → keep |
//! | 3 | box inside a matched cell → replace with that cell; box contains the matched cells → snap candidates; otherwise keep |
//! | 4 | replace with the envelope of the matched cells |
//!
//! A box that was left alone but collected candidates has each edge snapped to
//! the nearest candidate edge within `snap_radius`.
//!
//! A refined box is only accepted once it is a fixed point of the step above
//! and stays within `max(epsilon, snap_radius)` of the input box. This makes
//! refinement idempotent and keeps every change local.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{contains, envelope, BBox, Detection, LayoutCategory, PageId, Side, TextCell};
use crate::ingest::{CellSet, PredictionSet};

/// Rounds of re-refinement allowed before a change is given up as unstable.
const MAX_ROUNDS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Per-edge closeness tolerance in pixels.
    pub epsilon: f64,
    /// Reach of the final candidate snap, in pixels.
    pub snap_radius: f64,
    pub exempt_categories: BTreeSet<LayoutCategory>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig::with_epsilon(5.0)
    }
}

impl RefineConfig {
    /// `snap_radius` defaults to three times `epsilon`.
    pub fn with_epsilon(epsilon: f64) -> Self {
        RefineConfig {
            epsilon,
            snap_radius: 3.0 * epsilon,
            exempt_categories: [LayoutCategory::Picture, LayoutCategory::Table]
                .into_iter()
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.snap_radius >= self.epsilon && self.snap_radius.is_finite()) {
            return Err(Error::Config(format!(
                "snap_radius {} must be at least epsilon {}",
                self.snap_radius, self.epsilon
            )));
        }
        Ok(())
    }

    /// Largest distance any edge may move.
    pub fn reach(&self) -> f64 {
        self.epsilon.max(self.snap_radius)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeMatch {
    pub close: bool,
    /// Indices of neighbour cells whose same-side edge is within epsilon.
    pub cells: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeMatchReport {
    /// Indexed by [`Side::index`].
    pub edges: [EdgeMatch; 4],
    /// Cells overlapping the detection grown by epsilon.
    pub neighbor_cells: Vec<usize>,
}

impl EdgeMatchReport {
    pub fn edge(&self, side: Side) -> &EdgeMatch {
        &self.edges[side.index()]
    }

    pub fn close_count(&self) -> usize {
        self.edges.iter().filter(|e| e.close).count()
    }

    /// Union of all per-edge matches, ascending.
    pub fn matched_cells(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.edges.iter().flat_map(|e| e.cells.iter().copied()).collect();
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RefinementAction {
    Unchanged,
    ReplacedByCell,
    ReplacedByEnvelope,
    SnappedToCandidates,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementOutcome {
    pub detection: Detection,
    pub action: RefinementAction,
    /// Cell indices kept as snap candidates.
    pub candidates: Vec<usize>,
}

pub fn classify_edges(d: &Detection, cells: &[TextCell], cfg: &RefineConfig) -> EdgeMatchReport {
    classify_box(&d.bbox, cells, cfg.epsilon)
}

fn classify_box(bbox: &BBox, cells: &[TextCell], epsilon: f64) -> EdgeMatchReport {
    let grown = bbox.expand(epsilon);
    let mut report = EdgeMatchReport {
        neighbor_cells: cells
            .iter()
            .enumerate()
            .filter(|(_, c)| grown.intersection_area(&c.bbox) > 0.0)
            .map(|(i, _)| i)
            .collect(),
        ..Default::default()
    };
    for side in Side::ALL {
        let edge = &mut report.edges[side.index()];
        edge.cells = report
            .neighbor_cells
            .iter()
            .copied()
            .filter(|&i| (cells[i].bbox.edge(side) - bbox.edge(side)).abs() <= epsilon)
            .collect();
        edge.close = !edge.cells.is_empty();
    }
    report
}

fn l1(a: &BBox, b: &BBox) -> f64 {
    Side::ALL
        .iter()
        .map(|&s| (a.edge(s) - b.edge(s)).abs())
        .sum()
}

/// Closest cell by L1 distance over the four edges; ties go to the lower index.
fn closest(bbox: &BBox, cells: &[TextCell], among: impl IntoIterator<Item = usize>) -> Option<usize> {
    among
        .into_iter()
        .map(|i| (l1(bbox, &cells[i].bbox), i))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, i)| i)
}

/// Whether the box edge lies on the inner side of the reference edge (ties inside).
fn edge_inside(bbox: &BBox, reference: &BBox, side: Side) -> bool {
    if side.is_far() {
        bbox.edge(side) <= reference.edge(side)
    } else {
        bbox.edge(side) >= reference.edge(side)
    }
}

struct Step {
    bbox: BBox,
    action: RefinementAction,
    candidates: Vec<usize>,
}

impl Step {
    fn keep(bbox: BBox) -> Self {
        Step {
            bbox,
            action: RefinementAction::Unchanged,
            candidates: Vec::new(),
        }
    }
}

/// One application of the five-case rule plus the candidate snap.
fn step(bbox: BBox, cells: &[TextCell], cfg: &RefineConfig) -> Step {
    let report = classify_box(&bbox, cells, cfg.epsilon);
    let matched = report.matched_cells();
    let cell_boxes = |idx: &[usize]| idx.iter().map(|&i| cells[i].bbox).collect::<Vec<_>>();

    let mut out = Step::keep(bbox);
    match report.close_count() {
        0 | 1 => return out,
        2 => {
            let env = envelope(&cell_boxes(&matched)).expect("two close edges imply matches");
            let loose: Vec<Side> = Side::ALL
                .into_iter()
                .filter(|s| !report.edge(*s).close)
                .collect();
            let inside = loose.iter().filter(|&&s| edge_inside(&bbox, &env, s)).count();
            if inside == 2 {
                let i = closest(&bbox, cells, report.neighbor_cells.iter().copied())
                    .expect("matched cells are neighbours");
                out.bbox = cells[i].bbox;
                out.action = RefinementAction::ReplacedByCell;
                return out;
            } else if inside == 0 {
                out.candidates = matched;
            }
        }
        3 => {
            let holders = matched
                .iter()
                .copied()
                .filter(|&i| contains(&cells[i].bbox, &bbox, cfg.epsilon));
            if let Some(i) = closest(&bbox, cells, holders) {
                out.bbox = cells[i].bbox;
                out.action = RefinementAction::ReplacedByCell;
                return out;
            }
            if matched
                .iter()
                .all(|&i| contains(&bbox, &cells[i].bbox, cfg.epsilon))
            {
                out.candidates = matched;
            }
        }
        _ => {
            out.bbox = envelope(&cell_boxes(&matched)).expect("four close edges imply matches");
            out.action = if matched.len() == 1 {
                RefinementAction::ReplacedByCell
            } else {
                RefinementAction::ReplacedByEnvelope
            };
            return out;
        }
    }

    if !out.candidates.is_empty() {
        let snapped = snap(&bbox, cells, &out.candidates, cfg.snap_radius);
        if snapped != bbox && snapped.validate().is_ok() {
            out.bbox = snapped;
            out.action = RefinementAction::SnappedToCandidates;
        }
    }
    out
}

/// Moves each edge to the nearest same-side candidate edge within `radius`.
fn snap(bbox: &BBox, cells: &[TextCell], candidates: &[usize], radius: f64) -> BBox {
    let mut out = *bbox;
    for side in Side::ALL {
        let current = bbox.edge(side);
        let best = candidates
            .iter()
            .map(|&i| cells[i].bbox.edge(side))
            .filter(|v| (v - current).abs() <= radius)
            .min_by(|a, b| (a - current).abs().total_cmp(&(b - current).abs()));
        if let Some(v) = best {
            out.set_edge(side, v);
        }
    }
    out
}

pub fn refine_detection(d: &Detection, cells: &[TextCell], cfg: &RefineConfig) -> RefinementOutcome {
    let unchanged = |candidates| RefinementOutcome {
        detection: d.clone(),
        action: RefinementAction::Unchanged,
        candidates,
    };
    if cfg.exempt_categories.contains(&d.category) {
        return unchanged(Vec::new());
    }

    let first = step(d.bbox, cells, cfg);
    let mut current = first.bbox;
    if current != d.bbox {
        let mut stable = false;
        for _ in 0..MAX_ROUNDS {
            let next = step(current, cells, cfg).bbox;
            if next == current {
                stable = true;
                break;
            }
            current = next;
        }
        if !stable || !contains(&d.bbox.expand(cfg.reach()), &current, 0.0) {
            return unchanged(first.candidates);
        }
    }

    RefinementOutcome {
        detection: Detection {
            bbox: current,
            ..d.clone()
        },
        action: first.action,
        candidates: first.candidates,
    }
}

/// Refines every detection of one page; `cells` are that page's cells.
pub fn refine_page(
    dets: &[Detection],
    cells: &[TextCell],
    cfg: &RefineConfig,
) -> Result<(Vec<Detection>, Vec<RefinementOutcome>)> {
    cfg.validate()?;
    if let Some(first) = dets.first() {
        if let Some(other) = dets.iter().find(|d| d.page_id != first.page_id) {
            return Err(Error::MixedPages(first.page_id.0.clone(), other.page_id.0.clone()));
        }
    }
    let outcomes: Vec<RefinementOutcome> = dets
        .iter()
        .map(|d| refine_detection(d, cells, cfg))
        .collect();
    let refined = outcomes.iter().map(|o| o.detection.clone()).collect();
    Ok((refined, outcomes))
}

/// One line of the refinement audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub page_id: PageId,
    pub category: LayoutCategory,
    pub input_bbox: BBox,
    pub action: RefinementAction,
    pub output_bbox: BBox,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub audit: Vec<AuditEntry>,
}

impl RefineReport {
    pub fn counts(&self) -> BTreeMap<RefinementAction, usize> {
        let mut out = BTreeMap::new();
        for e in &self.audit {
            *out.entry(e.action).or_insert(0) += 1;
        }
        out
    }
}

/// Refines a whole prediction set, page-parallel. Output order matches input.
pub fn refine_set(
    preds: &PredictionSet,
    cells: &CellSet,
    cfg: &RefineConfig,
) -> Result<(PredictionSet, RefineReport)> {
    cfg.validate()?;
    let pages: Vec<(&PageId, &Vec<Detection>)> = preds.detections.iter().collect();
    let refined: Vec<(PageId, Vec<Detection>, Vec<AuditEntry>)> = pages
        .par_iter()
        .map(|(page, dets)| {
            let (out, outcomes) = refine_page(dets, cells.page(page), cfg)?;
            let audit = dets
                .iter()
                .zip(&outcomes)
                .map(|(d, o)| AuditEntry {
                    page_id: (*page).clone(),
                    category: d.category,
                    input_bbox: d.bbox,
                    action: o.action,
                    output_bbox: o.detection.bbox,
                })
                .collect();
            Ok(((*page).clone(), out, audit))
        })
        .collect::<Result<_>>()?;

    let mut set = PredictionSet::new(preds.model_id.clone());
    let mut report = RefineReport::default();
    for (page, dets, audit) in refined {
        set.detections.insert(page, dets);
        report.audit.extend(audit);
    }
    Ok((set, report))
}
