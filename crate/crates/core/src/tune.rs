//! Tree-structured Parzen Estimator search over ensemble settings.
//!
//! The space is a flat product of discrete dimensions: one integer weight in
//! `0..=10` per model and a fusion IoU threshold on the grid `0.01..=0.99`.
//! With no conditional parameters the estimator reduces to independent
//! densities per dimension. Each density is a smoothed histogram
//! `(count + prior) / (n + prior * |domain|)` whose counts are spread over
//! neighbouring values by a truncated Gaussian, since both dimensions are
//! ordered. Suggestions maximise the product of `l(x) / g(x)` over the
//! dimensions, where `l` is fitted on the best `gamma` fraction of finished
//! trials and `g` on the rest. `bandwidth = 0` gives the plain categorical
//! estimator.

use std::fmt::{Debug, Display};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fuse::FusionConfig;

const BW_DEFAULT: f64 = 0.18;
pub const MAX_WEIGHT: u8 = 10;
/// IoU grid is `k / 100` for `k` in this range.
pub const IOU_STEPS: std::ops::RangeInclusive<u8> = 1..=99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperSpace {
    n_models: usize,
}

impl HyperSpace {
    pub fn new(n_models: usize) -> Result<Self> {
        if n_models == 0 {
            return Err(Error::Config("the search space needs at least one model".into()));
        }
        Ok(HyperSpace { n_models })
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    pub fn weight_domain(&self) -> Vec<u8> {
        (0..=MAX_WEIGHT).collect()
    }

    pub fn iou_domain(&self) -> Vec<f64> {
        IOU_STEPS.map(iou_value).collect()
    }

    /// Domain size of each dimension: weights first, IoU last.
    fn dim_sizes(&self) -> Vec<usize> {
        let mut v = vec![MAX_WEIGHT as usize + 1; self.n_models];
        v.push(IOU_STEPS.count());
        v
    }

    pub fn contains(&self, p: &TrialPoint) -> bool {
        p.weights.len() == self.n_models
            && p.weights.iter().all(|w| *w <= MAX_WEIGHT)
            && iou_step(p.iou_threshold).is_some()
    }

    fn point(&self, idx: &[usize]) -> TrialPoint {
        TrialPoint {
            weights: idx[..self.n_models].iter().map(|&i| i as u8).collect(),
            iou_threshold: iou_value(*IOU_STEPS.start() + idx[self.n_models] as u8),
        }
    }

    fn indices(&self, p: &TrialPoint) -> Option<Vec<usize>> {
        if !self.contains(p) {
            return None;
        }
        let mut v: Vec<usize> = p.weights.iter().map(|&w| w as usize).collect();
        v.push((iou_step(p.iou_threshold)? - IOU_STEPS.start()) as usize);
        Some(v)
    }
}

fn iou_value(step: u8) -> f64 {
    step as f64 / 100.0
}

fn iou_step(v: f64) -> Option<u8> {
    let k = (v * 100.0).round();
    let ok = (k - v * 100.0).abs() < 1e-6 && IOU_STEPS.contains(&(k as u8)) && (1.0..=99.0).contains(&k);
    ok.then_some(k as u8)
}

/// `11^n_models * 99`.
pub fn space_cardinality(space: &HyperSpace) -> u128 {
    space
        .dim_sizes()
        .iter()
        .map(|&s| s as u128)
        .product()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPoint {
    pub weights: Vec<u8>,
    pub iou_threshold: f64,
}

impl TrialPoint {
    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig::new(self.weights.iter().map(|&w| w as f64).collect(), self.iou_threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub point: TrialPoint,
    /// Maximised. Failed trials carry `-inf` (written as `null`).
    #[serde(with = "objective_serde")]
    pub objective: f64,
    /// Not persisted, so that reruns produce identical history files.
    #[serde(skip)]
    pub wall_time: Duration,
}

mod objective_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpeConfig {
    pub gamma: f64,
    pub n_startup: usize,
    pub n_candidates: usize,
    pub prior_weight: f64,
    /// Ordinal kernel width relative to the domain span; 0 treats every
    /// dimension as an unordered categorical.
    pub bandwidth: f64,
    pub seed: u64,
    pub budget: usize,
    pub parallelism: usize,
}

impl Default for TpeConfig {
    fn default() -> Self {
        TpeConfig {
            gamma: 0.25,
            n_startup: 20,
            n_candidates: 24,
            prior_weight: 1.0,
            bandwidth: BW_DEFAULT,
            seed: 0,
            budget: 2500,
            parallelism: 1,
        }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        if !(self.bandwidth >= 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::Config("bandwidth must be a non-negative number".into()));
        }
        if !(self.prior_weight > 0.0 && self.prior_weight.is_finite()) {
            return Err(Error::Config("prior_weight must be positive".into()));
        }
        if self.n_startup == 0 || self.n_candidates == 0 || self.budget == 0 || self.parallelism == 0 {
            return Err(Error::Config(
                "n_startup, n_candidates, budget and parallelism must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Splits finished trials into the best `ceil(gamma * n)` and the rest.
pub fn split_good_bad(history: &[TrialRecord], gamma: f64) -> (Vec<&TrialRecord>, Vec<&TrialRecord>) {
    let mut sorted: Vec<&TrialRecord> = history.iter().collect();
    sorted.sort_by(|a, b| b.objective.total_cmp(&a.objective).then(a.trial_id.cmp(&b.trial_id)));
    let n_good = ((gamma * history.len() as f64).ceil() as usize).min(history.len());
    let bad = sorted.split_off(n_good);
    (sorted, bad)
}

/// Smoothed categorical density of `values` over `domain`.
pub fn parzen_weight<T: PartialEq + Debug>(values: &[T], domain: &[T], prior_weight: f64) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; domain.len()];
    for v in values {
        let i = domain
            .iter()
            .position(|d| d == v)
            .ok_or_else(|| Error::OutOfDomain(format!("{v:?}")))?;
        counts[i] += 1;
    }
    Ok(smoothed(&counts, values.len(), prior_weight))
}

fn smoothed(counts: &[usize], n: usize, prior_weight: f64) -> Vec<f64> {
    let denom = n as f64 + prior_weight * counts.len() as f64;
    counts.iter().map(|&c| (c as f64 + prior_weight) / denom).collect()
}

/// Density over an ordered domain given per-element counts. Each observation
/// spreads its unit of mass as a Gaussian of width `sigma` domain steps,
/// truncated and renormalised to the domain. `sigma == 0` is [`smoothed`].
pub fn ordinal_parzen(counts: &[usize], prior_weight: f64, sigma: f64) -> Vec<f64> {
    let n: usize = counts.iter().sum();
    if sigma <= 0.0 {
        return smoothed(counts, n, prior_weight);
    }
    let size = counts.len();
    let mut mass = vec![prior_weight; size];
    for (center, &c) in counts.iter().enumerate().filter(|(_, c)| **c > 0) {
        let kernel: Vec<f64> = (0..size)
            .map(|j| {
                let d = (j as f64 - center as f64) / sigma;
                (-0.5 * d * d).exp()
            })
            .collect();
        let total: f64 = kernel.iter().sum();
        for (m, k) in mass.iter_mut().zip(&kernel) {
            *m += c as f64 * k / total;
        }
    }
    let denom = n as f64 + prior_weight * size as f64;
    mass.iter().map(|m| m / denom).collect()
}

/// Kernel width in domain steps: `bandwidth * (size - 1) * n^(-1/5)`.
fn kernel_sigma(bandwidth: f64, size: usize, n: usize) -> f64 {
    if n == 0 || size < 2 {
        return 0.0;
    }
    bandwidth * (size - 1) as f64 * (n as f64).powf(-0.2)
}

fn histogram(records: &[&TrialRecord], space: &HyperSpace, dim: usize, size: usize) -> Vec<usize> {
    let mut counts = vec![0usize; size];
    for r in records {
        if let Some(idx) = space.indices(&r.point) {
            counts[idx[dim]] += 1;
        }
    }
    counts
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Proposes the next point given every finished trial.
pub fn suggest<R: Rng + ?Sized>(history: &[TrialRecord], space: &HyperSpace, cfg: &TpeConfig, rng: &mut R) -> TrialPoint {
    let sizes = space.dim_sizes();
    if history.len() < cfg.n_startup {
        let idx: Vec<usize> = sizes.iter().map(|&s| rng.gen_range(0..s)).collect();
        return space.point(&idx);
    }

    let (good, bad) = split_good_bad(history, cfg.gamma);
    let densities: Vec<(Vec<f64>, Vec<f64>)> = sizes
        .iter()
        .enumerate()
        .map(|(dim, &size)| {
            let l_sigma = kernel_sigma(cfg.bandwidth, size, good.len());
            let g_sigma = kernel_sigma(cfg.bandwidth, size, bad.len());
            let l = ordinal_parzen(&histogram(&good, space, dim, size), cfg.prior_weight, l_sigma);
            let g = ordinal_parzen(&histogram(&bad, space, dim, size), cfg.prior_weight, g_sigma);
            (l, g)
        })
        .collect();

    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..cfg.n_candidates {
        let idx: Vec<usize> = densities.iter().map(|(l, _)| sample_categorical(l, rng)).collect();
        let score: f64 = idx
            .iter()
            .zip(&densities)
            .map(|(&i, (l, g))| l[i].ln() - g[i].ln())
            .sum();
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, idx));
        }
    }
    space.point(&best.expect("n_candidates is positive").1)
}

/// Per-trial generator: one ChaCha stream per trial id, so resumed runs draw
/// the same numbers as uninterrupted ones.
fn trial_rng(seed: u64, trial_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial_id);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub best: TrialRecord,
    /// In completion order.
    pub history: Vec<TrialRecord>,
}

pub fn optimize<F, E>(objective: F, space: &HyperSpace, cfg: &TpeConfig) -> Result<OptimizeResult>
where
    F: Fn(&TrialPoint) -> std::result::Result<f64, E> + Sync,
    E: Display,
{
    optimize_resumable(objective, space, cfg, None)
}

/// Runs the search, appending each finished trial to `history_path` as a JSON
/// line. Trials already in that file count towards the budget.
pub fn optimize_resumable<F, E>(
    objective: F,
    space: &HyperSpace,
    cfg: &TpeConfig,
    history_path: Option<&Path>,
) -> Result<OptimizeResult>
where
    F: Fn(&TrialPoint) -> std::result::Result<f64, E> + Sync,
    E: Display,
{
    cfg.validate()?;
    let mut history = match history_path {
        Some(p) if p.exists() => read_history(p)?,
        _ => Vec::new(),
    };
    if let Some(bad) = history.iter().find(|r| !space.contains(&r.point)) {
        return Err(Error::History {
            line: 0,
            message: format!("trial {} lies outside the search space", bad.trial_id),
        });
    }
    let mut sink = match history_path {
        Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };

    let mut next_id = history.iter().map(|r| r.trial_id + 1).max().unwrap_or(0);
    let objective = &objective;
    let (tx, rx) = mpsc::channel::<TrialRecord>();

    std::thread::scope(|scope| -> Result<()> {
        let mut in_flight = 0usize;
        loop {
            while in_flight < cfg.parallelism && history.len() + in_flight < cfg.budget {
                let trial_id = next_id;
                next_id += 1;
                let point = suggest(&history, space, cfg, &mut trial_rng(cfg.seed, trial_id));
                let tx = tx.clone();
                scope.spawn(move || {
                    let started = Instant::now();
                    let objective = evaluate_point(objective, &point, trial_id);
                    let _ = tx.send(TrialRecord {
                        trial_id,
                        point,
                        objective,
                        wall_time: started.elapsed(),
                    });
                });
                in_flight += 1;
            }
            if in_flight == 0 {
                return Ok(());
            }
            let record = rx.recv().expect("workers hold a sender until they report");
            in_flight -= 1;
            if let Some(f) = sink.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&record).expect("record serialises"))?;
                f.flush()?;
            }
            history.push(record);
        }
    })?;

    let best = history
        .iter()
        .max_by(|a, b| a.objective.total_cmp(&b.objective).then(b.trial_id.cmp(&a.trial_id)))
        .cloned()
        .expect("budget is positive");
    Ok(OptimizeResult { best, history })
}

fn evaluate_point<F, E>(objective: &F, point: &TrialPoint, trial_id: u64) -> f64
where
    F: Fn(&TrialPoint) -> std::result::Result<f64, E>,
    E: Display,
{
    match catch_unwind(AssertUnwindSafe(|| objective(point))) {
        Ok(Ok(v)) if !v.is_nan() => v,
        Ok(Ok(_)) => {
            log::warn!("trial {trial_id}: objective returned NaN");
            f64::NEG_INFINITY
        }
        Ok(Err(e)) => {
            log::warn!("trial {trial_id}: objective failed: {e}");
            f64::NEG_INFINITY
        }
        Err(_) => {
            log::warn!("trial {trial_id}: objective panicked");
            f64::NEG_INFINITY
        }
    }
}

pub fn read_history(path: &Path) -> Result<Vec<TrialRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::History {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
