//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero on any failure.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::Rng;

use common::*;
use doclayout_cli::{cmd_evaluate, cmd_tune, CommonArgs, EvaluateArgs, InputArgs, TuneArgs};
use doclayout_post::eval::{
    assign_doc_categories, average_precision, doc_category_mean, evaluate, map_original_label, DocCategory,
    EvalConfig,
};
use doclayout_post::fuse::{fuse_sets, wbf_clusters, wbf_page, FusionConfig};
use doclayout_post::geom::{contains, iou, BBox, Detection, LayoutCategory, PageId, TextCell};
use doclayout_post::ingest::{parse_ground_truth, rescale_boxes, GroundTruthSet, PredictionSet};
use doclayout_post::refine::{refine_page, refine_set, RefineConfig, RefinementAction};
use doclayout_post::synthgen::{build_pool, emit_dataset, generate_layouts, PatchRecord, SynthConfig};
use doclayout_post::tune::{optimize, space_cardinality, HyperSpace, TpeConfig, TrialPoint};

// Tolerances.
const IOU_TOL: f64 = 1e-4;
const IOU_TIME: Duration = Duration::from_secs(1);
const MAP_TOL: f64 = 1e-9;
const WBF_TOL: f64 = 1e-6;
const GAIN_TOL: f64 = 1e-9;
const RESCALE_TOL: f64 = 1e-9;
const TPE_TIME: Duration = Duration::from_secs(60);
const E2E_TOL: f64 = 1e-6;
const E2E_TIME: Duration = Duration::from_secs(120);

type Check = fn() -> Result<String, String>;

fn main() {
    let checks: [(&str, Check); 11] = [
        ("geometry oracle", geometry_oracle),
        ("mAP oracle", map_oracle),
        ("refinement suite", refinement_suite),
        ("refinement efficacy", refinement_efficacy),
        ("weighted boxes fusion", wbf_suite),
        ("ensemble gain", ensemble_gain),
        ("TPE search", tpe_search),
        ("scale and cardinality", scale_and_cardinality),
        ("document categories", doc_categories),
        ("synthetic layouts", synthgen_suite),
        ("end-to-end tune", end_to_end_tune),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("[PASS] {name}: {detail} ({secs:.2}s)"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail} ({secs:.2}s)");
            }
        }
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- geometry

const GRID: f64 = 8.0;

fn grid_box<R: Rng>(r: &mut R) -> BBox {
    let l = r.gen_range(0..160) as f64 / GRID;
    let t = r.gen_range(0..160) as f64 / GRID;
    let w = r.gen_range(1..80) as f64 / GRID;
    let h = r.gen_range(1..80) as f64 / GRID;
    bbox(l, t, l + w, t + h)
}

/// Counts grid cells by their centres; exact for boxes on the same grid.
fn pixel_iou(a: &BBox, b: &BBox) -> f64 {
    let inside = |x: &BBox, cx: f64, cy: f64| cx > x.left && cx < x.right && cy > x.top && cy < x.bottom;
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..(30.0 * GRID) as u32 {
        let cx = (i as f64 + 0.5) / GRID;
        for j in 0..(30.0 * GRID) as u32 {
            let cy = (j as f64 + 0.5) / GRID;
            let (ia, ib) = (inside(a, cx, cy), inside(b, cx, cy));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn geometry_oracle() -> Result<String, String> {
    let mut r = rng(1);
    let pairs: Vec<(BBox, BBox)> = (0..1000).map(|_| (grid_box(&mut r), grid_box(&mut r))).collect();
    let started = Instant::now();
    let fast: Vec<f64> = pairs.iter().map(|(a, b)| iou(a, b)).collect();
    let elapsed = started.elapsed();
    let mut worst = 0.0f64;
    let mut overlapping = 0;
    for ((a, b), v) in pairs.iter().zip(&fast) {
        let oracle = pixel_iou(a, b);
        overlapping += (oracle > 0.0) as usize;
        worst = worst.max((oracle - v).abs());
    }
    ensure(worst <= IOU_TOL, || format!("max |iou - oracle| = {worst:e}"))?;
    ensure(elapsed < IOU_TIME, || format!("1000 iou calls took {elapsed:?}"))?;
    Ok(format!(
        "1000 pairs ({overlapping} overlapping), max deviation {worst:e}, {:.3} ms",
        elapsed.as_secs_f64() * 1e3
    ))
}

// ---------------------------------------------------------------- mAP

const MAP_CLASSES: [LayoutCategory; 3] = [LayoutCategory::Text, LayoutCategory::Title, LayoutCategory::Table];

fn small_box<R: Rng>(r: &mut R) -> BBox {
    let l = r.gen_range(0.0..40.0);
    let t = r.gen_range(0.0..40.0);
    bbox(l, t, l + r.gen_range(2.0..20.0), t + r.gen_range(2.0..20.0))
}

fn map_instance(seed: u64) -> (GroundTruthSet, PredictionSet, BTreeMap<PageId, DocCategory>) {
    let mut r = rng(seed);
    let mut gt = empty_gt();
    let mut preds = PredictionSet::new("m");
    let mut docs = BTreeMap::new();
    for p in 0..r.gen_range(1..=5u64) {
        let page = PageId::from(p + 1);
        add_page(&mut gt, &page, None);
        docs.insert(page.clone(), DocCategory::ALL[r.gen_range(0..4)]);
        let mut gts = Vec::new();
        for _ in 0..r.gen_range(0..=5) {
            let b = (small_box(&mut r), MAP_CLASSES[r.gen_range(0..3)]);
            add_box(&mut gt, &page, b.0, b.1);
            gts.push(b);
        }
        for _ in 0..r.gen_range(0..=5) {
            let (b, c) = if !gts.is_empty() && r.gen_bool(0.6) {
                let (g, c) = gts[r.gen_range(0..gts.len())];
                let mut j = || r.gen_range(-3.0..3.0);
                let b = bbox(g.left + j(), g.top + j(), g.right + j() + 4.0, g.bottom + j() + 4.0);
                (b, if r.gen_bool(0.8) { c } else { MAP_CLASSES[r.gen_range(0..3)] })
            } else {
                (small_box(&mut r), MAP_CLASSES[r.gen_range(0..3)])
            };
            preds.push(Detection::new(page.clone(), b, c, r.gen_range(0.0..1.0)));
        }
    }
    (gt, preds, docs)
}

/// AP by recomputing the greedy matching from scratch for every score cut-off.
fn brute_force_ap(dets: &[&Detection], gt: &GroundTruthSet, class: LayoutCategory, thr: f64) -> Option<f64> {
    let total: usize = dets_gt_count(gt, class, None);
    if total == 0 {
        return None;
    }
    let mut sorted: Vec<&Detection> = dets.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut curve = Vec::new();
    for k in 1..=sorted.len() {
        let top = &sorted[..k];
        let mut tp = 0;
        for page in gt.pages.keys() {
            let gts: Vec<BBox> = gt.boxes(page).iter().filter(|g| g.category == class).map(|g| g.bbox).collect();
            let mut taken = vec![false; gts.len()];
            for d in top.iter().filter(|d| &d.page_id == page) {
                let mut best: Option<(usize, f64)> = None;
                for (i, g) in gts.iter().enumerate() {
                    let v = iou(&d.bbox, g);
                    if !taken[i] && v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((i, v));
                    }
                }
                if let Some((i, _)) = best {
                    taken[i] = true;
                    tp += 1;
                }
            }
        }
        curve.push((tp as f64 / k as f64, tp as f64 / total as f64));
    }
    let sum: f64 = (0..101)
        .map(|i| {
            let r = i as f64 / 100.0;
            curve
                .iter()
                .filter(|(_, rec)| *rec >= r)
                .map(|(p, _)| *p)
                .fold(0.0, f64::max)
        })
        .sum();
    Some(sum / 101.0)
}

fn dets_gt_count(gt: &GroundTruthSet, class: LayoutCategory, pages: Option<&[PageId]>) -> usize {
    gt.pages
        .keys()
        .filter(|p| pages.is_none_or(|ps| ps.contains(p)))
        .map(|p| gt.boxes(p).iter().filter(|g| g.category == class).count())
        .sum()
}

fn subset(gt: &GroundTruthSet, pages: &[PageId]) -> GroundTruthSet {
    let mut out = empty_gt();
    for p in pages {
        out.pages.insert(p.clone(), gt.pages[p].clone());
        out.annotations.insert(p.clone(), gt.boxes(p).to_vec());
    }
    out
}

fn brute_force_map(preds: &PredictionSet, gt: &GroundTruthSet, thresholds: &[f64]) -> Option<f64> {
    let maps: Vec<f64> = MAP_CLASSES
        .iter()
        .filter_map(|&c| {
            let dets: Vec<&Detection> = preds
                .detections
                .iter()
                .filter(|(p, _)| gt.pages.contains_key(*p))
                .flat_map(|(_, v)| v.iter())
                .filter(|d| d.category == c)
                .collect();
            let aps: Option<Vec<f64>> = thresholds.iter().map(|&t| brute_force_ap(&dets, gt, c, t)).collect();
            aps.map(|a| a.iter().sum::<f64>() / a.len() as f64)
        })
        .collect();
    (!maps.is_empty()).then(|| maps.iter().sum::<f64>() / maps.len() as f64)
}

fn map_oracle() -> Result<String, String> {
    let thresholds = [0.5, 0.75];
    let cfg = EvalConfig {
        iou_thresholds: thresholds.to_vec(),
        recall_points: 101,
        max_dets: None,
    };
    let mut worst = 0.0f64;
    let mut compared = 0;
    for seed in 0..200 {
        let (gt, preds, docs) = map_instance(seed);
        let report = evaluate(&preds, &gt, &docs, &cfg).map_err(|e| e.to_string())?;
        let expected = brute_force_map(&preds, &gt, &thresholds);
        match (report.overall_map, expected) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            (a, b) => return Err(format!("seed {seed}: overall {a:?} vs oracle {b:?}")),
        }
        let mut per_doc = BTreeMap::new();
        for cat in DocCategory::ALL {
            let pages: Vec<PageId> = docs.iter().filter(|(_, c)| **c == cat).map(|(p, _)| p.clone()).collect();
            if pages.is_empty() {
                continue;
            }
            if let Some(m) = brute_force_map(&preds, &subset(&gt, &pages), &thresholds) {
                per_doc.insert(cat, m);
            }
        }
        ensure(per_doc.keys().eq(report.per_doc_category.keys()), || {
            format!("seed {seed}: doc categories {:?} vs {:?}", report.per_doc_category, per_doc)
        })?;
        for (c, v) in &per_doc {
            worst = worst.max((report.per_doc_category[c] - v).abs());
        }
        compared += 1;
    }
    ensure(worst < MAP_TOL, || format!("max deviation {worst:e}"))?;

    let hand = average_precision(&[false, true], 1, 101);
    ensure(hand == 0.5, || format!("[FP, TP] gave {hand}"))?;
    let mut gt = empty_gt();
    let page = PageId::from(1);
    add_page(&mut gt, &page, None);
    add_box(&mut gt, &page, bbox(0.0, 0.0, 10.0, 10.0), LayoutCategory::Text);
    let mut preds = PredictionSet::new("m");
    preds.push(Detection::new(page.clone(), bbox(50.0, 50.0, 60.0, 60.0), LayoutCategory::Text, 0.9));
    preds.push(Detection::new(page.clone(), bbox(0.0, 0.0, 10.0, 10.0), LayoutCategory::Text, 0.8));
    let r = evaluate(&preds, &gt, &BTreeMap::new(), &EvalConfig::with_thresholds(vec![0.5])).map_err(|e| e.to_string())?;
    ensure(r.overall_map == Some(0.5), || format!("[FP, TP] instance mAP {:?}", r.overall_map))?;
    Ok(format!("{compared} instances, max deviation {worst:e}; [FP, TP] -> 0.5"))
}

// ---------------------------------------------------------------- refinement

fn fuzz_page<R: Rng>(r: &mut R) -> (Vec<Detection>, Vec<TextCell>, RefineConfig) {
    let eps = r.gen_range(1.0..6.0);
    let mut cfg = RefineConfig::with_epsilon(eps);
    if r.gen_bool(0.2) {
        cfg.snap_radius = eps * r.gen_range(1.0..5.0);
    }
    let cells: Vec<TextCell> = (0..r.gen_range(0..8))
        .map(|_| {
            let l = r.gen_range(0.0..250.0);
            let t = r.gen_range(0.0..250.0);
            TextCell::new(bbox(l, t, l + r.gen_range(1.0..80.0), t + r.gen_range(1.0..30.0)))
        })
        .collect();
    let dets = (0..r.gen_range(0..6))
        .map(|_| {
            let b = if !cells.is_empty() && r.gen_bool(0.7) {
                let mut base = cells[r.gen_range(0..cells.len())].bbox;
                if r.gen_bool(0.4) {
                    base = doclayout_post::geom::envelope([base, cells[r.gen_range(0..cells.len())].bbox].iter()).unwrap();
                }
                let s = eps * r.gen_range(0.0..2.5);
                let mut j = || r.gen_range(-s..=s);
                let (l, t, rr, bb) = (base.left + j(), base.top + j(), base.right + j(), base.bottom + j());
                bbox(l.min(rr), t.min(bb), l.max(rr), t.max(bb))
            } else {
                let l = r.gen_range(0.0..250.0);
                let t = r.gen_range(0.0..250.0);
                bbox(l, t, l + r.gen_range(0.0..80.0), t + r.gen_range(0.0..30.0))
            };
            let c = LayoutCategory::ALL[r.gen_range(0..LayoutCategory::ALL.len())];
            Detection::new("p", b, c, r.gen_range(0.0..1.0))
        })
        .collect();
    (dets, cells, cfg)
}

fn refine_hand_cases() -> Result<(), String> {
    let cell = [TextCell::new(bbox(10.0, 10.0, 110.0, 20.0))];
    let cases = [
        ("case 3", bbox(10.0, 12.0, 110.0, 18.0), 1.0, RefinementAction::ReplacedByCell),
        ("case 4", bbox(10.0, 11.0, 110.0, 17.0), 2.0, RefinementAction::ReplacedByCell),
        ("case 5", bbox(11.0, 9.0, 109.0, 21.0), 2.0, RefinementAction::ReplacedByCell),
    ];
    for (name, input, eps, action) in cases {
        let d = Detection::new("p", input, LayoutCategory::Text, 0.9);
        let (out, outcomes) = refine_page(&[d], &cell, &RefineConfig::with_epsilon(eps)).map_err(|e| e.to_string())?;
        ensure(out[0].bbox == cell[0].bbox && outcomes[0].action == action && out[0].score == 0.9, || {
            format!("{name}: got {:?} {:?}", out[0].bbox, outcomes[0].action)
        })?;
    }
    Ok(())
}

fn refinement_suite() -> Result<String, String> {
    refine_hand_cases()?;
    let mut r = rng(3);
    let mut actions: BTreeMap<RefinementAction, usize> = BTreeMap::new();
    for page in 0..10_000 {
        let (dets, cells, cfg) = fuzz_page(&mut r);
        let (out, outcomes) = refine_page(&dets, &cells, &cfg).map_err(|e| e.to_string())?;
        ensure(out.len() == dets.len(), || format!("page {page}: count changed"))?;
        let reach = cfg.epsilon.max(cfg.snap_radius);
        for ((d, o), oc) in dets.iter().zip(&out).zip(&outcomes) {
            *actions.entry(oc.action).or_default() += 1;
            ensure(o.category == d.category && o.score == d.score && o.page_id == d.page_id, || {
                format!("page {page}: non-geometric change {d:?} -> {o:?}")
            })?;
            if cfg.exempt_categories.contains(&d.category) {
                ensure(o == d, || format!("page {page}: exempt {:?} modified", d.category))?;
            }
            ensure(contains(&d.bbox.expand(reach), &o.bbox, 1e-9), || {
                format!("page {page}: {:?} moved beyond {reach} to {:?}", d.bbox, o.bbox)
            })?;
            if oc.action == RefinementAction::Unchanged {
                ensure(o == d, || format!("page {page}: Unchanged but modified"))?;
            }
        }
        let (again, _) = refine_page(&out, &cells, &cfg).map_err(|e| e.to_string())?;
        ensure(again == out, || format!("page {page}: not idempotent\n{out:?}\n{again:?}"))?;
        let (bare, _) = refine_page(&dets, &[], &cfg).map_err(|e| e.to_string())?;
        ensure(bare == dets, || format!("page {page}: changed without cells"))?;
    }
    Ok(format!("3 hand cases exact; 10000 pages, actions {actions:?}"))
}

fn refinement_efficacy() -> Result<String, String> {
    let cfg = RefineConfig::default();
    let eval_cfg = EvalConfig::default();
    let mut better = 0;
    let mut worst_delta = f64::INFINITY;
    for seed in 0..50 {
        let c = cell_corpus(seed, 4, cfg.epsilon / 2.0);
        let docs = BTreeMap::new();
        let before = evaluate(&c.preds, &c.gt, &docs, &eval_cfg).map_err(|e| e.to_string())?.score();
        let (refined, _) = refine_set(&c.preds, &c.cells, &cfg).map_err(|e| e.to_string())?;
        let after = evaluate(&refined, &c.gt, &docs, &eval_cfg).map_err(|e| e.to_string())?.score();
        ensure(after >= before, || format!("seed {seed}: {before} -> {after}"))?;
        better += (after > before) as usize;
        worst_delta = worst_delta.min(after - before);
    }
    ensure(better * 100 >= 90 * 50, || format!("strictly better on {better}/50"))?;
    Ok(format!("post >= pre on 50/50 corpora, strictly better on {better}/50, min gain {worst_delta:.4}"))
}

// ---------------------------------------------------------------- fusion

fn wbf_fuzz_page<R: Rng>(r: &mut R) -> (Vec<Vec<Detection>>, FusionConfig) {
    let n_models = r.gen_range(1..=3);
    let cats = [LayoutCategory::Text, LayoutCategory::Table, LayoutCategory::Picture];
    let anchors: Vec<(BBox, LayoutCategory)> = (0..r.gen_range(1..5))
        .map(|_| (small_box(r), cats[r.gen_range(0..3)]))
        .collect();
    let models = (0..n_models)
        .map(|_| {
            (0..r.gen_range(0..6))
                .map(|_| {
                    let (a, c) = anchors[r.gen_range(0..anchors.len())];
                    let mut j = || r.gen_range(-4.0..4.0);
                    let b = bbox(a.left + j(), a.top + j(), a.right + j() + 8.0, a.bottom + j() + 8.0);
                    let c = if r.gen_bool(0.85) { c } else { cats[r.gen_range(0..3)] };
                    Detection::new("p", b, c, r.gen_range(0.01..1.0))
                })
                .collect()
        })
        .collect();
    let mut weights: Vec<f64> = (0..n_models).map(|_| r.gen_range(0..=10) as f64).collect();
    if weights.iter().all(|w| *w == 0.0) {
        weights[0] = 1.0;
    }
    (models, FusionConfig::new(weights, r.gen_range(1..=99) as f64 / 100.0))
}

fn wbf_suite() -> Result<String, String> {
    let m1 = vec![Detection::new("p", bbox(0.0, 0.0, 10.0, 10.0), LayoutCategory::Text, 0.8)];
    let m2 = vec![Detection::new("p", bbox(0.0, 0.0, 20.0, 20.0), LayoutCategory::Text, 0.4)];
    let fused = wbf_page(&[m1, m2], &FusionConfig::uniform(2, 0.2)).map_err(|e| e.to_string())?;
    let expect = [0.0, 0.0, 13.3333, 13.3333];
    let got = fused[0].bbox;
    ensure(
        fused.len() == 1
            && [got.left, got.top, got.right, got.bottom].iter().zip(expect).all(|(g, e)| (g - e).abs() < 1e-4)
            && (fused[0].score - 0.6).abs() < WBF_TOL,
        || format!("two-box example gave {fused:?}"),
    )?;

    let mut r = rng(4);
    let mut clusters_seen = 0;
    for page in 0..10_000 {
        let (models, cfg) = wbf_fuzz_page(&mut r);

        let mut single = models[0].clone();
        single.sort_by(|a, b| b.score.total_cmp(&a.score));
        let ident = wbf_page(&[models[0].clone()], &FusionConfig::uniform(1, cfg.iou_threshold)).map_err(|e| e.to_string())?;
        ensure(ident == single, || format!("page {page}: single-model output differs"))?;

        let clusters = wbf_clusters(&models, &cfg).map_err(|e| e.to_string())?;
        let out = wbf_page(&models, &cfg).map_err(|e| e.to_string())?;
        for c in &clusters {
            clusters_seen += 1;
            let m = &c.members;
            let lo = |f: fn(&BBox) -> f64| m.iter().map(|x| f(&x.bbox)).fold(f64::INFINITY, f64::min);
            let hi = |f: fn(&BBox) -> f64| m.iter().map(|x| f(&x.bbox)).fold(f64::NEG_INFINITY, f64::max);
            let coords: [fn(&BBox) -> f64; 4] = [|b| b.left, |b| b.top, |b| b.right, |b| b.bottom];
            for f in coords {
                let v = f(&c.fused);
                ensure(v >= lo(f) - 1e-9 && v <= hi(f) + 1e-9, || format!("page {page}: fused edge outside members"))?;
            }
            for member in m {
                let source = models[member.model].iter().find(|d| d.bbox == member.bbox);
                ensure(source.is_some_and(|d| d.category == c.category), || {
                    format!("page {page}: cluster mixes categories")
                })?;
            }
        }
        for cat in LayoutCategory::ALL {
            let fused_n = out.iter().filter(|d| d.category == cat).count();
            let kept_n = models
                .iter()
                .zip(&cfg.weights)
                .filter(|(_, w)| **w > 0.0)
                .map(|(m, _)| m.iter().filter(|d| d.category == cat).count())
                .sum::<usize>();
            ensure(fused_n <= kept_n, || format!("page {page}: {cat:?} gained boxes"))?;
        }
        ensure(out.iter().all(|d| (0.0..=1.0).contains(&d.score)), || format!("page {page}: score out of range"))?;
    }
    Ok(format!(
        "two-box example [0, 0, 13.3333, 13.3333] score 0.6; 10000 pages, {clusters_seen} clusters convex and single-category"
    ))
}

fn ensemble_gain() -> Result<String, String> {
    let eval_cfg = EvalConfig::default();
    let space = HyperSpace::new(2).map_err(|e| e.to_string())?;
    let mut gains = 0;
    let mut min_margin = f64::INFINITY;
    for seed in 0..20 {
        let (gt, models) = complementary_pair(seed, 12);
        let docs = doc_cycle(&gt);
        let single = models
            .iter()
            .map(|m| evaluate(m, &gt, &docs, &eval_cfg).map(|r| r.score()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let best_single = single.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let objective = |p: &TrialPoint| -> Result<f64, String> {
            let fused = fuse_sets(&models, &p.fusion_config()).map_err(|e| e.to_string())?;
            Ok(evaluate(&fused, &gt, &docs, &eval_cfg).map_err(|e| e.to_string())?.score())
        };
        let tpe = TpeConfig { budget: 100, seed, ..Default::default() };
        let tuned = optimize(objective, &space, &tpe).map_err(|e| e.to_string())?.best.objective;
        ensure(tuned >= best_single - GAIN_TOL, || format!("seed {seed}: tuned {tuned} < single {best_single}"))?;
        gains += (tuned > best_single) as usize;
        min_margin = min_margin.min(tuned - best_single);
    }
    ensure(gains * 100 >= 80 * 20, || format!("strict gain on {gains}/20"))?;
    Ok(format!("tuned >= best single on 20/20, strictly on {gains}/20, min margin {min_margin:.4}"))
}

// ---------------------------------------------------------------- search

fn quadratic(p: &TrialPoint) -> Result<f64, String> {
    let w: f64 = p.weights.iter().map(|&w| (w as f64 - 5.0).powi(2)).sum();
    Ok(-w - 100.0 * (p.iou_threshold - 0.5).powi(2))
}

fn tpe_search() -> Result<String, String> {
    let started = Instant::now();
    let space = HyperSpace::new(3).map_err(|e| e.to_string())?;
    let mut optimum = f64::NEG_INFINITY;
    let mut points = 0u64;
    for a in space.weight_domain() {
        for b in space.weight_domain() {
            for c in space.weight_domain() {
                for t in space.iou_domain() {
                    optimum = optimum.max(quadratic(&TrialPoint { weights: vec![a, b, c], iou_threshold: t })?);
                    points += 1;
                }
            }
        }
    }
    ensure(points == 131_769, || format!("enumerated {points} points"))?;
    let (mut hits, mut tpe_sum, mut random_sum) = (0, 0.0, 0.0);
    for seed in 0..20 {
        let cfg = TpeConfig { budget: 300, parallelism: 1, seed, ..Default::default() };
        let tpe = optimize(quadratic, &space, &cfg).map_err(|e| e.to_string())?;
        let random = optimize(quadratic, &space, &TpeConfig { n_startup: 300, ..cfg }).map_err(|e| e.to_string())?;
        hits += (tpe.best.objective == optimum) as usize;
        tpe_sum += tpe.best.objective;
        random_sum += random.best.objective;
    }
    let elapsed = started.elapsed();
    let (tpe_mean, random_mean) = (tpe_sum / 20.0, random_sum / 20.0);
    ensure(hits >= 18, || format!("optimum found in {hits}/20 runs"))?;
    ensure(tpe_mean > random_mean, || format!("mean best {tpe_mean} vs random {random_mean}"))?;
    ensure(elapsed < TPE_TIME, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "optimum {optimum} over {points} points found in {hits}/20 runs; mean best {tpe_mean:.4} vs random {random_mean:.4}"
    ))
}

fn scale_and_cardinality() -> Result<String, String> {
    let n = space_cardinality(&HyperSpace::new(10).map_err(|e| e.to_string())?);
    ensure(n == 11u128.pow(10) * 99 && n == 2_567_805_035_499, || format!("cardinality {n}"))?;
    ensure(HyperSpace::new(0).is_err(), || "zero models accepted".into())?;
    let mut r = rng(8);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let boxes: Vec<BBox> = (0..5).map(|_| small_box(&mut r)).collect();
        let from = (r.gen_range(100.0..3000.0), r.gen_range(100.0..3000.0));
        let to = (r.gen_range(100.0..3000.0), r.gen_range(100.0..3000.0));
        let there = rescale_boxes(&boxes, from, to).map_err(|e| e.to_string())?;
        let back = rescale_boxes(&there, to, from).map_err(|e| e.to_string())?;
        for (a, b) in boxes.iter().zip(&back) {
            for d in [a.left - b.left, a.top - b.top, a.right - b.right, a.bottom - b.bottom] {
                worst = worst.max(d.abs());
            }
        }
    }
    ensure(worst <= RESCALE_TOL, || format!("rescale round-trip error {worst:e}"))?;
    Ok(format!("11^10 * 99 = {n}; rescale round-trip max error {worst:e}"))
}

fn doc_categories() -> Result<String, String> {
    let probs: BTreeMap<PageId, Vec<f64>> = [
        ("a", vec![0.6, 0.3, 0.1]),
        ("b", vec![0.4, 0.35, 0.25]),
        ("c", vec![0.5, 0.5, 0.0]),
    ]
    .into_iter()
    .map(|(k, v)| (PageId::from(k), v))
    .collect();
    let got = assign_doc_categories(&probs, 0.5).map_err(|e| e.to_string())?;
    let expect = [("a", DocCategory::Reports), ("b", DocCategory::Others), ("c", DocCategory::Reports)];
    for (p, c) in expect {
        ensure(got[&PageId::from(p)] == c, || format!("page {p}: {:?}", got[&PageId::from(p)]))?;
    }
    let labels = [
        ("Scientific Articles", DocCategory::Reports),
        ("Laws and Regulations", DocCategory::Reports),
        ("Government Tenders", DocCategory::Reports),
        ("Financial Reports", DocCategory::Reports),
        ("Manuals", DocCategory::Manuals),
        ("Patents", DocCategory::Patents),
        ("Cookbooks", DocCategory::Others),
    ];
    for (label, c) in labels {
        ensure(map_original_label(label) == c, || format!("{label}: {:?}", map_original_label(label)))?;
    }
    let per: BTreeMap<DocCategory, f64> = DocCategory::ALL.into_iter().zip([0.9, 0.7, 0.5, 0.3]).collect();
    let m = doc_category_mean(&per);
    ensure(m == Some(0.6), || format!("mean {m:?}"))?;
    Ok("3 probability vectors, 7 labels, mean {0.9, 0.7, 0.5, 0.3} = 0.6 exactly".into())
}

// ---------------------------------------------------------------- synthgen

fn patch_catalogue() -> Vec<PatchRecord> {
    use LayoutCategory::*;
    let mut r = rng(9);
    let mut out = Vec::new();
    for (i, c) in LayoutCategory::ALL.into_iter().enumerate() {
        for k in 0..4 {
            let (w, h) = match c {
                PageHeader | PageFooter => (r.gen_range(600..1000), r.gen_range(10..40)),
                Title => (r.gen_range(300..900), r.gen_range(30..90)),
                _ => (r.gen_range(50..900), r.gen_range(10..600)),
            };
            out.push(PatchRecord::new(c, w, h, format!("doc{i}.png@{k}")).unwrap());
        }
    }
    out
}

fn synthgen_suite() -> Result<String, String> {
    let pool = build_pool(patch_catalogue());
    let cfg = SynthConfig { seed: 2024, ..Default::default() };
    let layouts = generate_layouts(&pool, &cfg, 1000).map_err(|e| e.to_string())?;
    let again = generate_layouts(&pool, &cfg, 1000).map_err(|e| e.to_string())?;
    let (coco, manifest) = emit_dataset(&layouts);
    let (coco2, manifest2) = emit_dataset(&again);
    ensure(coco == coco2 && manifest == manifest2, || "re-generation differs".into())?;

    let mut columns = [0usize; 6];
    let mut placements = 0;
    for (i, l) in layouts.iter().enumerate() {
        let n = l.columns.len();
        ensure((1..=5).contains(&n), || format!("layout {i}: {n} columns"))?;
        columns[n] += 1;
        let page = bbox(0.0, 0.0, l.page_width as f64, l.page_height as f64);
        for (k, a) in l.placements.iter().enumerate() {
            ensure(contains(&page, &a.bbox, 0.0), || format!("layout {i}: {:?} out of bounds", a.bbox))?;
            for b in &l.placements[k + 1..] {
                let overlap = a.bbox.intersection_area(&b.bbox);
                ensure(overlap == 0.0, || format!("layout {i}: overlap {overlap}"))?;
            }
        }
        placements += l.placements.len();
    }
    ensure(columns[1..].iter().all(|c| *c > 0), || format!("column counts {columns:?}"))?;

    let gt = parse_ground_truth(&coco).map_err(|e| e.to_string())?;
    ensure(gt.pages.len() == 1000 && gt.annotation_count() == placements, || "COCO counts differ".into())?;
    for (i, l) in layouts.iter().enumerate() {
        let boxes = gt.boxes(&PageId::from(i as u64 + 1));
        ensure(boxes.len() == l.placements.len(), || format!("layout {i}: annotation count"))?;
        for (g, p) in boxes.iter().zip(&l.placements) {
            ensure(g.bbox == p.bbox && g.category == p.category, || format!("layout {i}: {:?} != {:?}", g.bbox, p.bbox))?;
        }
    }
    Ok(format!(
        "1000 layouts, {placements} placements, byte-identical, no overlap, in bounds, exact COCO round-trip; columns {:?}",
        &columns[1..]
    ))
}

// ---------------------------------------------------------------- end to end

fn end_to_end_tune() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (gt, models) = perfect_and_noise(21, 12);
    let files = write_fixture(dir.path(), &gt, &models);
    let input = InputArgs {
        gt: Some(files.gt.clone()),
        preds: files.preds.clone(),
        cells: None,
        scales: None,
        order: None,
    };
    let perfect = cmd_evaluate(&EvaluateArgs {
        common: CommonArgs { config: None, jobs: Some(4) },
        input: InputArgs { preds: vec![files.preds[0].clone()], ..input.clone() },
        probs: None,
        out: None,
    })
    .map_err(|e| format!("{e:#}"))?
    .score();

    let docs = doclayout_post::eval::doc_categories_from_labels(&gt);
    let uniform = fuse_sets(&models, &FusionConfig::uniform(2, 0.55)).map_err(|e| e.to_string())?;
    let uniform = evaluate(&uniform, &gt, &docs, &EvalConfig::default()).map_err(|e| e.to_string())?.score();
    ensure(uniform < perfect - 0.01, || format!("fixture too easy: uniform weights reach {uniform}"))?;

    let started = Instant::now();
    let outcome = cmd_tune(&TuneArgs {
        common: CommonArgs { config: None, jobs: Some(4) },
        input: input.clone(),
        probs: None,
        out: dir.path().join("best.json"),
        history: None,
        budget: Some(200),
        seed: Some(7),
    })
    .map_err(|e| format!("{e:#}"))?;
    let elapsed = started.elapsed();

    let fused = fuse_sets(&models, &outcome.fusion).map_err(|e| e.to_string())?;
    let refit = evaluate(&fused, &gt, &docs, &EvalConfig::default()).map_err(|e| e.to_string())?.score();
    ensure(outcome.trials == 200, || format!("{} trials", outcome.trials))?;
    ensure((outcome.objective - perfect).abs() <= E2E_TOL, || {
        format!("best {} vs perfect model {perfect}", outcome.objective)
    })?;
    ensure((refit - perfect).abs() <= E2E_TOL, || format!("re-fused mAP {refit} vs {perfect}"))?;
    ensure(elapsed < E2E_TIME, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "fused mAP {refit:.6} = perfect model {perfect:.6} (uniform weights {uniform:.4}); weights {:?} iou {:.2}; 200 trials at --jobs 4 in {:.1}s",
        outcome.fusion.weights,
        outcome.fusion.iou_threshold,
        elapsed.as_secs_f64()
    ))
}
