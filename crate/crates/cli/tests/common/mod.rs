//! Constructed corpora shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use doclayout_post::eval::DocCategory;
use doclayout_post::geom::{BBox, CategoryMap, Detection, LayoutCategory, PageId, TextCell};
use doclayout_post::ingest::{CellSet, GroundTruthSet, GtBox, Page, PredictionSet};

pub const PAGE: f64 = 1025.0;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn bbox(l: f64, t: f64, r: f64, b: f64) -> BBox {
    BBox::new(l, t, r, b).unwrap()
}

pub fn empty_gt() -> GroundTruthSet {
    GroundTruthSet {
        pages: BTreeMap::new(),
        annotations: BTreeMap::new(),
        categories: CategoryMap::default(),
    }
}

pub fn add_page(gt: &mut GroundTruthSet, page: &PageId, doc_label: Option<&str>) {
    gt.pages.insert(
        page.clone(),
        Page {
            page_id: page.clone(),
            file_name: Some(format!("{}.png", page.0)),
            width: PAGE,
            height: PAGE,
            doc_label: doc_label.map(str::to_string),
            scale_info: None,
        },
    );
    gt.annotations.entry(page.clone()).or_default();
}

pub fn add_box(gt: &mut GroundTruthSet, page: &PageId, bbox: BBox, category: LayoutCategory) {
    let id = gt.annotation_count() as u64 + 1;
    gt.annotations
        .entry(page.clone())
        .or_default()
        .push(GtBox { id, bbox, category });
}

/// Blocks of text lines: each ground-truth box is the envelope of its lines.
pub struct CellCorpus {
    pub gt: GroundTruthSet,
    pub cells: CellSet,
    pub preds: PredictionSet,
}

/// Predictions are ground truth with each edge jittered by at most `max_jitter`.
pub fn cell_corpus(seed: u64, pages: usize, max_jitter: f64) -> CellCorpus {
    let mut r = rng(seed);
    let mut gt = empty_gt();
    let mut cells = CellSet::default();
    let mut preds = PredictionSet::new("jittered");
    let categories = [LayoutCategory::Text, LayoutCategory::ListItem, LayoutCategory::SectionHeader, LayoutCategory::Caption];
    for p in 0..pages {
        let page = PageId::from(p as u64 + 1);
        add_page(&mut gt, &page, None);
        let page_cells = cells.cells.entry(page.clone()).or_default();
        let mut top = 40.0;
        while top < PAGE - 200.0 {
            for col in 0..2 {
                let left = 40.0 + col as f64 * 490.0 + r.gen_range(0..20) as f64;
                let width = r.gen_range(200..420) as f64;
                let lines = r.gen_range(1..=4);
                let mut lines_boxes = Vec::new();
                for i in 0..lines {
                    let t = top + i as f64 * 16.0;
                    let w = if i == 0 { width } else { width - r.gen_range(0..120) as f64 };
                    lines_boxes.push(bbox(left, t, left + w, t + 12.0));
                }
                let block = doclayout_post::geom::envelope(lines_boxes.iter()).unwrap();
                page_cells.extend(lines_boxes.into_iter().map(TextCell::new));
                let category = categories[r.gen_range(0..categories.len())];
                add_box(&mut gt, &page, block, category);
                let mut j = || r.gen_range(-max_jitter..=max_jitter);
                let jittered = bbox(block.left + j(), block.top + j(), block.right + j(), block.bottom + j());
                preds.push(Detection::new(page.clone(), jittered, category, r.gen_range(0.3..1.0)));
            }
            top += 4.0 * 16.0 + 40.0;
        }
    }
    CellCorpus { gt, cells, preds }
}

pub fn doc_cycle(gt: &GroundTruthSet) -> BTreeMap<PageId, DocCategory> {
    gt.pages
        .keys()
        .enumerate()
        .map(|(i, p)| (p.clone(), DocCategory::ALL[i % 4]))
        .collect()
}

fn layout_boxes<R: Rng>(r: &mut R) -> Vec<(BBox, LayoutCategory)> {
    let categories = [LayoutCategory::Text, LayoutCategory::Title, LayoutCategory::Table, LayoutCategory::Picture];
    let n = r.gen_range(4..=8);
    (0..n)
        .map(|i| {
            let (col, row) = ((i % 2) as f64, (i / 2) as f64);
            let l = 40.0 + col * 490.0 + r.gen_range(0.0..30.0);
            let t = 40.0 + row * 240.0 + r.gen_range(0.0..30.0);
            let w = r.gen_range(200.0..420.0);
            let h = r.gen_range(40.0..180.0);
            (bbox(l, t, l + w, t + h), categories[r.gen_range(0..categories.len())])
        })
        .collect()
}

fn jitter<R: Rng>(r: &mut R, b: &BBox, amount: f64) -> BBox {
    let mut j = || r.gen_range(-amount..=amount);
    bbox(b.left + j(), b.top + j(), b.right + j(), b.bottom + j())
}

fn random_box<R: Rng>(r: &mut R) -> BBox {
    let l = r.gen_range(0.0..900.0);
    let t = r.gen_range(0.0..900.0);
    bbox(l, t, l + r.gen_range(20.0..120.0), t + r.gen_range(20.0..120.0))
}

/// Two detectors with complementary misses: model A sees most boxes on even
/// pages and few on odd pages, model B the reverse. Both localise with
/// independent jitter and emit a few low-score false positives.
pub fn complementary_pair(seed: u64, pages: usize) -> (GroundTruthSet, [PredictionSet; 2]) {
    let mut r = rng(seed);
    let mut gt = empty_gt();
    let mut a = PredictionSet::new("a");
    let mut b = PredictionSet::new("b");
    for p in 0..pages {
        let page = PageId::from(p as u64 + 1);
        add_page(&mut gt, &page, None);
        let strong_a = p % 2 == 0;
        for (bb, cat) in layout_boxes(&mut r) {
            add_box(&mut gt, &page, bb, cat);
            for (set, strong) in [(&mut a, strong_a), (&mut b, !strong_a)] {
                let recall = if strong { 0.95 } else { 0.5 };
                if r.gen_bool(recall) {
                    let d = jitter(&mut r, &bb, 8.0);
                    set.push(Detection::new(page.clone(), d, cat, r.gen_range(0.5..1.0)));
                }
            }
        }
        for set in [&mut a, &mut b] {
            let fp = random_box(&mut r);
            set.push(Detection::new(page.clone(), fp, LayoutCategory::Text, r.gen_range(0.05..0.4)));
        }
    }
    (gt, [a, b])
}

/// Model A reproduces the ground truth exactly. Model B emits a badly
/// localised, confident copy of every box plus uniform noise.
pub fn perfect_and_noise(seed: u64, pages: usize) -> (GroundTruthSet, [PredictionSet; 2]) {
    let labels = ["Scientific Articles", "Manuals", "Patents", "Cookbooks"];
    let mut r = rng(seed);
    let mut gt = empty_gt();
    let mut a = PredictionSet::new("perfect");
    let mut b = PredictionSet::new("noise");
    for p in 0..pages {
        let page = PageId::from(p as u64 + 1);
        add_page(&mut gt, &page, Some(labels[p % labels.len()]));
        for (bb, cat) in layout_boxes(&mut r) {
            add_box(&mut gt, &page, bb, cat);
            a.push(Detection::new(page.clone(), bb, cat, 0.9));
            let off = jitter(&mut r, &bb, 30.0);
            b.push(Detection::new(page.clone(), off, cat, r.gen_range(0.5..1.0)));
        }
        for _ in 0..6 {
            let cat = LayoutCategory::ALL[r.gen_range(0..LayoutCategory::ALL.len())];
            let noise = random_box(&mut r);
            b.push(Detection::new(page.clone(), noise, cat, r.gen_range(0.0..1.0)));
        }
    }
    (gt, [a, b])
}

pub struct FixtureFiles {
    pub gt: PathBuf,
    pub preds: Vec<PathBuf>,
}

pub fn write_fixture(dir: &Path, gt: &GroundTruthSet, preds: &[PredictionSet]) -> FixtureFiles {
    let gt_path = dir.join("gt.json");
    std::fs::write(&gt_path, gt.to_coco_json().unwrap()).unwrap();
    let preds = preds
        .iter()
        .map(|p| {
            let path = dir.join(format!("{}.json", p.model_id));
            std::fs::write(&path, p.to_coco_results(&gt.categories).unwrap()).unwrap();
            path
        })
        .collect();
    FixtureFiles { gt: gt_path, preds }
}
