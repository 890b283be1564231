//! Binned calibration metrics (ECE, MCE, SCE, ACE), reliability tables and
//! local evaluation patches.
//!
//! Every metric treats each pixel as an independent sample and is reported
//! in percent. Even binning partitions `[0, 1]` into half-open intervals
//! `[k/B, (k+1)/B)` with the top interval closed. Adaptive binning sorts by
//! score and cuts the sequence into `B` near-equal-count groups, the
//! remainder going to the leading groups.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calib;
use crate::error::{Error, Result};
use crate::net::CalibratedOutput;
use crate::record::CalibRecord;

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinScheme {
    Even,
    Adaptive,
}

/// Summary of one confidence bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean score of the members; `None` for an empty bin.
    pub mean_confidence: Option<f64>,
    /// Fraction of correct members; `None` for an empty bin.
    pub accuracy: Option<f64>,
}

impl BinStats {
    pub fn gap(&self) -> Option<f64> {
        Some((self.accuracy? - self.mean_confidence?).abs())
    }
}

fn check_inputs(scores: &[f32], hits: &[bool], bins: usize) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::contract("calibration metrics need at least one sample"));
    }
    if scores.len() != hits.len() {
        return Err(Error::shape(format!(
            "{} scores but {} outcomes",
            scores.len(),
            hits.len()
        )));
    }
    if bins == 0 {
        return Err(Error::contract("bin count must be positive"));
    }
    if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::contract(format!("score {bad} outside [0, 1]")));
    }
    Ok(())
}

/// Index of the even bin containing `s`.
pub fn even_bin_index(s: f64, bins: usize) -> usize {
    let b = bins as f64;
    let mut k = ((s * b).floor() as usize).min(bins - 1);
    // Snap to the interval definition where the product rounded across an edge.
    if k > 0 && s < k as f64 / b {
        k -= 1;
    } else if k + 1 < bins && s >= (k + 1) as f64 / b {
        k += 1;
    }
    k
}

fn even_bins(scores: &[f32], hits: &[bool], bins: usize) -> Vec<BinStats> {
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0f64; bins];
    let mut acc = vec![0.0f64; bins];
    for (&s, &h) in scores.iter().zip(hits) {
        let k = even_bin_index(s as f64, bins);
        count[k] += 1;
        conf[k] += s as f64;
        if h {
            acc[k] += 1.0;
        }
    }
    (0..bins)
        .map(|k| {
            let n = count[k];
            BinStats {
                lower: k as f64 / bins as f64,
                upper: (k + 1) as f64 / bins as f64,
                count: n,
                mean_confidence: (n > 0).then(|| conf[k] / n as f64),
                accuracy: (n > 0).then(|| acc[k] / n as f64),
            }
        })
        .collect()
}

/// Equal-count groups over the sorted scores. Samples sharing a score
/// contribute their tie-group's mean outcome, so the result depends only on
/// the multiset of samples and never on which tied sample lands on which
/// side of a cut.
fn adaptive_bins(scores: &[f32], hits: &[bool], bins: usize) -> Vec<BinStats> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| scores[i] as f64).collect();
    let mut outcome: Vec<f64> = order.iter().map(|&i| if hits[i] { 1.0 } else { 0.0 }).collect();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && sorted[end] == sorted[start] {
            end += 1;
        }
        if end - start > 1 {
            let mean = outcome[start..end].iter().sum::<f64>() / (end - start) as f64;
            outcome[start..end].fill(mean);
        }
        start = end;
    }

    let base = n / bins;
    let extra = n % bins;
    let mut out = Vec::with_capacity(bins);
    let mut lo = 0;
    for k in 0..bins {
        let size = base + usize::from(k < extra);
        let hi = lo + size;
        let stats = if size == 0 {
            BinStats {
                lower: f64::NAN,
                upper: f64::NAN,
                count: 0,
                mean_confidence: None,
                accuracy: None,
            }
        } else {
            BinStats {
                lower: sorted[lo],
                upper: sorted[hi - 1],
                count: size,
                mean_confidence: Some(sorted[lo..hi].iter().sum::<f64>() / size as f64),
                accuracy: Some(outcome[lo..hi].iter().sum::<f64>() / size as f64),
            }
        };
        out.push(stats);
        lo = hi;
    }
    out
}

/// Groups samples by score into `bins` bins under `scheme`.
pub fn bin_samples(scores: &[f32], hits: &[bool], scheme: BinScheme, bins: usize) -> Result<Vec<BinStats>> {
    check_inputs(scores, hits, bins)?;
    Ok(match scheme {
        BinScheme::Even => even_bins(scores, hits, bins),
        BinScheme::Adaptive => adaptive_bins(scores, hits, bins),
    })
}

fn weighted_gap(stats: &[BinStats], total: usize) -> f64 {
    stats
        .iter()
        .filter_map(|b| Some(b.count as f64 / total as f64 * b.gap()?))
        .sum()
}

fn max_gap(stats: &[BinStats]) -> f64 {
    stats.iter().filter_map(BinStats::gap).fold(0.0, f64::max)
}

fn mean_gap(stats: &[BinStats]) -> (f64, usize) {
    stats
        .iter()
        .filter_map(BinStats::gap)
        .fold((0.0, 0), |(s, n), g| (s + g, n + 1))
}

/// Expected calibration error, percent.
pub fn ece(confidence: &[f32], correct: &[bool], bins: usize) -> Result<f64> {
    let stats = bin_samples(confidence, correct, BinScheme::Even, bins)?;
    Ok(100.0 * weighted_gap(&stats, confidence.len()))
}

/// Maximum calibration error over occupied bins, percent.
pub fn mce(confidence: &[f32], correct: &[bool], bins: usize) -> Result<f64> {
    let stats = bin_samples(confidence, correct, BinScheme::Even, bins)?;
    Ok(100.0 * max_gap(&stats))
}

/// Per-class (score, outcome) views: class 1 scored by `p`, class 0 by `1 − p`.
fn class_views(prob: &[f32], label: &[bool]) -> [(Vec<f32>, Vec<bool>); 2] {
    let zero = (prob.iter().map(|&p| 1.0 - p).collect(), label.iter().map(|&l| !l).collect());
    let one = (prob.to_vec(), label.to_vec());
    [zero, one]
}

/// Static calibration error, percent: even bins per class, count-weighted,
/// averaged over the two classes.
pub fn sce(prob: &[f32], label: &[bool], bins: usize) -> Result<f64> {
    check_inputs(prob, label, bins)?;
    let total: f64 = class_views(prob, label)
        .iter()
        .map(|(s, h)| weighted_gap(&even_bins(s, h, bins), s.len()))
        .sum();
    Ok(100.0 * total / 2.0)
}

/// Adaptive calibration error, percent: equal-count bins per class,
/// unweighted mean over occupied bins of both classes.
pub fn ace(prob: &[f32], label: &[bool], bins: usize) -> Result<f64> {
    check_inputs(prob, label, bins)?;
    let (sum, n) = class_views(prob, label)
        .iter()
        .map(|(s, h)| mean_gap(&adaptive_bins(s, h, bins)))
        .fold((0.0, 0), |(a, b), (s, n)| (a + s, b + n));
    Ok(100.0 * sum / n as f64)
}

/// One row of a reliability table. Accuracy, confidence and gap are `None`
/// for empty bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub bin_lower: f64,
    pub bin_upper: f64,
    pub count: usize,
    pub accuracy: Option<f64>,
    pub mean_confidence: Option<f64>,
    pub gap: Option<f64>,
}

/// Signed gap is `mean_confidence − accuracy`, so overconfidence is positive.
pub fn reliability_export(confidence: &[f32], correct: &[bool], bins: usize) -> Result<Vec<ReliabilityRow>> {
    let stats = bin_samples(confidence, correct, BinScheme::Even, bins)?;
    Ok(stats
        .into_iter()
        .map(|b| ReliabilityRow {
            bin_lower: b.lower,
            bin_upper: b.upper,
            count: b.count,
            accuracy: b.accuracy,
            mean_confidence: b.mean_confidence,
            gap: b.mean_confidence.zip(b.accuracy).map(|(c, a)| c - a),
        })
        .collect())
}

pub const RELIABILITY_HEADER: &str = "bin_lower,bin_upper,count,accuracy,mean_confidence,gap";

/// CSV with a header row; empty cells for undefined values.
pub fn reliability_csv(rows: &[ReliabilityRow]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.10}"));
    let mut s = String::from(RELIABILITY_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{:.1},{:.1},{},{},{},{}\n",
            r.bin_lower,
            r.bin_upper,
            r.count,
            cell(r.accuracy),
            cell(r.mean_confidence),
            cell(r.gap)
        ));
    }
    s
}

/// A square evaluation window `[u − size/2, u + size/2) × [v − size/2, v + size/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    /// Row of the center.
    pub u: usize,
    /// Column of the center.
    pub v: usize,
    pub size: usize,
}

impl PatchSpec {
    pub fn rows(&self) -> std::ops::Range<usize> {
        self.u - self.size / 2..self.u + self.size / 2
    }

    pub fn cols(&self) -> std::ops::Range<usize> {
        self.v - self.size / 2..self.v + self.size / 2
    }
}

/// Parameters of local patch sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub count: usize,
    pub size: usize,
    /// Centers are drawn from the open interval `(margin, extent − margin)`.
    pub margin: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            count: 10,
            size: 72,
            margin: 70,
        }
    }
}

/// Draws `cfg.count` window centers uniformly with integer coordinates in
/// the open interval `(margin, extent − margin)` on each axis.
pub fn sample_local_patches(height: usize, width: usize, cfg: &PatchConfig, seed: u64) -> Result<Vec<PatchSpec>> {
    if cfg.size == 0 || cfg.size % 2 != 0 {
        return Err(Error::contract(format!("patch size {} must be positive and even", cfg.size)));
    }
    let half = cfg.size / 2;
    let axis = |extent: usize| -> Result<(usize, usize)> {
        let lo = cfg.margin + 1;
        let hi = extent.checked_sub(cfg.margin + 1).filter(|&h| h >= lo);
        let hi = hi.ok_or_else(|| {
            Error::contract(format!(
                "image extent {extent} leaves no center strictly inside margin {}",
                cfg.margin
            ))
        })?;
        if lo < half || hi + half > extent {
            return Err(Error::contract(format!(
                "a {}-pixel window centered in ({}, {}) does not fit an extent of {extent}",
                cfg.size, cfg.margin, extent - cfg.margin
            )));
        }
        Ok((lo, hi))
    };
    let (ulo, uhi) = axis(height)?;
    let (vlo, vhi) = axis(width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..cfg.count)
        .map(|_| PatchSpec {
            u: rng.gen_range(ulo..=uhi),
            v: rng.gen_range(vlo..=vhi),
            size: cfg.size,
        })
        .collect())
}

/// Stream seed for record `index` under a global seed (SplitMix64 finalizer).
pub fn record_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Union of sampled local windows per record.
    Patches,
    Full,
    /// Pixels inside `union_mask(y, ŷ)`.
    Lesion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub bins: usize,
    pub seed: u64,
    pub patches: PatchConfig,
    /// In patch mode, average metrics over individual patches instead of
    /// pooling their pixels.
    pub per_patch: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::Full,
            bins: DEFAULT_BINS,
            seed: 0,
            patches: PatchConfig::default(),
            per_patch: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ece: f64,
    pub mce: f64,
    pub sce: f64,
    pub ace: f64,
    pub mode: EvalMode,
    pub seed: u64,
    pub n_pixels: usize,
    pub bins: usize,
}

/// Pooled per-pixel samples.
#[derive(Debug, Clone, Default)]
pub struct PixelPool {
    pub confidence: Vec<f32>,
    pub correct: Vec<bool>,
    pub probability: Vec<f32>,
    pub label: Vec<bool>,
}

impl PixelPool {
    fn push(&mut self, record: &CalibRecord, out: &CalibratedOutput, i: usize) {
        let y = record.label.is_set(i);
        self.confidence.push(out.confidence.values()[i]);
        self.correct.push(out.prediction.is_set(i) == y);
        self.probability.push(out.probability.values()[i]);
        self.label.push(y);
    }

    pub fn len(&self) -> usize {
        self.confidence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidence.is_empty()
    }

    pub fn metrics(&self, bins: usize) -> Result<[f64; 4]> {
        Ok([
            ece(&self.confidence, &self.correct, bins)?,
            mce(&self.confidence, &self.correct, bins)?,
            sce(&self.probability, &self.label, bins)?,
            ace(&self.probability, &self.label, bins)?,
        ])
    }
}

fn check_aligned(record: &CalibRecord, out: &CalibratedOutput) -> Result<()> {
    if out.probability.tensor().shape() != record.logits.tensor().shape() {
        return Err(Error::shape(format!(
            "record `{}` and its calibrated output differ in shape",
            record.id
        )));
    }
    Ok(())
}

/// Pixel pool for one record under `cfg.mode`; patches are drawn from the
/// stream of `(cfg.seed, index)`.
pub fn pool_record(
    record: &CalibRecord,
    out: &CalibratedOutput,
    index: usize,
    cfg: &EvalConfig,
    pool: &mut PixelPool,
) -> Result<()> {
    check_aligned(record, out)?;
    match cfg.mode {
        EvalMode::Full => (0..record.pixels()).for_each(|i| pool.push(record, out, i)),
        EvalMode::Lesion => {
            let m = calib::union_mask(&record.label, &out.prediction)?;
            (0..record.pixels())
                .filter(|&i| m.is_set(i))
                .for_each(|i| pool.push(record, out, i));
        }
        EvalMode::Patches => {
            let w = record.width();
            let patches = sample_local_patches(record.height(), w, &cfg.patches, record_seed(cfg.seed, index))?;
            let mut seen = HashSet::new();
            for p in &patches {
                for r in p.rows() {
                    for c in p.cols() {
                        seen.insert(r * w + c);
                    }
                }
            }
            let mut idx: Vec<usize> = seen.into_iter().collect();
            idx.sort_unstable();
            idx.into_iter().for_each(|i| pool.push(record, out, i));
        }
    }
    Ok(())
}

/// Pools pixels across records by mode and computes all four metrics.
pub fn evaluate(records: &[CalibRecord], outputs: &[CalibratedOutput], cfg: &EvalConfig) -> Result<MetricReport> {
    if records.len() != outputs.len() {
        return Err(Error::contract(format!(
            "{} records but {} calibrated outputs",
            records.len(),
            outputs.len()
        )));
    }
    if cfg.mode == EvalMode::Patches && cfg.per_patch {
        return evaluate_per_patch(records, outputs, cfg);
    }
    let mut pool = PixelPool::default();
    for (i, (r, o)) in records.iter().zip(outputs).enumerate() {
        pool_record(r, o, i, cfg, &mut pool)?;
    }
    if pool.is_empty() {
        return Err(Error::contract("evaluation pixel pool is empty"));
    }
    let [ece, mce, sce, ace] = pool.metrics(cfg.bins)?;
    Ok(MetricReport {
        ece,
        mce,
        sce,
        ace,
        mode: cfg.mode,
        seed: cfg.seed,
        n_pixels: pool.len(),
        bins: cfg.bins,
    })
}

fn evaluate_per_patch(records: &[CalibRecord], outputs: &[CalibratedOutput], cfg: &EvalConfig) -> Result<MetricReport> {
    let mut sums = [0.0f64; 4];
    let mut patches = 0usize;
    let mut pixels = 0usize;
    for (index, (r, o)) in records.iter().zip(outputs).enumerate() {
        check_aligned(r, o)?;
        let w = r.width();
        for p in sample_local_patches(r.height(), w, &cfg.patches, record_seed(cfg.seed, index))? {
            let mut pool = PixelPool::default();
            for row in p.rows() {
                for col in p.cols() {
                    pool.push(r, o, row * w + col);
                }
            }
            pixels += pool.len();
            for (s, m) in sums.iter_mut().zip(pool.metrics(cfg.bins)?) {
                *s += m;
            }
            patches += 1;
        }
    }
    if patches == 0 {
        return Err(Error::contract("evaluation pixel pool is empty"));
    }
    let inv = 1.0 / patches as f64;
    Ok(MetricReport {
        ece: sums[0] * inv,
        mce: sums[1] * inv,
        sce: sums[2] * inv,
        ace: sums[3] * inv,
        mode: cfg.mode,
        seed: cfg.seed,
        n_pixels: pixels,
        bins: cfg.bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_occupied_bin() {
        let stats = bin_samples(&[0.95; 7], &[true; 7], BinScheme::Even, 10).unwrap();
        let occupied: Vec<_> = stats.iter().filter(|b| b.count > 0).collect();
        assert_eq!(occupied.len(), 1);
        assert_eq!(occupied[0].accuracy, Some(1.0));
        assert!((occupied[0].mean_confidence.unwrap() - 0.95).abs() < 1e-7);
        assert_eq!(stats.iter().map(|b| b.count).sum::<usize>(), 7);
    }

    #[test]
    fn top_edge_is_closed() {
        let stats = bin_samples(&[1.0], &[true], BinScheme::Even, 10).unwrap();
        assert_eq!(stats[9].count, 1);
        assert_eq!(even_bin_index(0.0, 10), 0);
        assert_eq!(even_bin_index(0.3, 10), 3);
        assert_eq!(even_bin_index(0.7, 10), 7);
        assert_eq!(even_bin_index(0.5, 10), 5);
    }

    #[test]
    fn adaptive_equal_counts() {
        let s: Vec<f32> = (0..20).map(|i| 0.5 + i as f32 / 40.0).collect();
        let stats = bin_samples(&s, &[true; 20], BinScheme::Adaptive, 10).unwrap();
        assert!(stats.iter().all(|b| b.count == 2));
        let s: Vec<f32> = (0..23).map(|i| i as f32 / 23.0).collect();
        let counts: Vec<usize> = bin_samples(&s, &[false; 23], BinScheme::Adaptive, 10)
            .unwrap()
            .iter()
            .map(|b| b.count)
            .collect();
        assert_eq!(counts, vec![3, 3, 3, 2, 2, 2, 2, 2, 2, 2]);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(ece(&[], &[], 10), Err(Error::Contract(_))));
        assert!(bin_samples(&[0.5], &[true, false], BinScheme::Even, 10).is_err());
        assert!(ece(&[1.5], &[true], 10).is_err());
    }

    #[test]
    fn ece_examples() {
        assert_eq!(ece(&[1.0; 5], &[true; 5], 10).unwrap(), 0.0);
        let hits: Vec<bool> = (0..10).map(|i| i < 5).collect();
        assert!((ece(&[0.75; 10], &hits, 10).unwrap() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn mce_examples() {
        let hits: Vec<bool> = (0..10).map(|i| i < 5).collect();
        assert_eq!(mce(&[0.75; 10], &hits, 10).unwrap(), ece(&[0.75; 10], &hits, 10).unwrap());
        // 900 samples at 0.65 with accuracy 0.70, 100 at 0.85 with accuracy 0.65.
        let mut conf = vec![0.65f32; 900];
        conf.extend([0.85f32; 100]);
        let mut hits: Vec<bool> = (0..900).map(|i| i < 630).collect();
        hits.extend((0..100).map(|i| i < 65));
        assert!((mce(&conf, &hits, 10).unwrap() - 20.0).abs() < 1e-5);
        assert!((ece(&conf, &hits, 10).unwrap() - 6.5).abs() < 1e-5);
    }

    #[test]
    fn sce_examples() {
        assert_eq!(sce(&[1.0, 0.0, 1.0], &[true, false, true], 10).unwrap(), 0.0);
        let labels: Vec<bool> = (0..1000).map(|i| i % 10 < 7).collect();
        assert!(sce(&[0.7; 1000], &labels, 10).unwrap() < 1e-4);
        let labels: Vec<bool> = (0..1000).map(|i| i % 2 == 0).collect();
        assert!((sce(&[0.9; 1000], &labels, 10).unwrap() - 40.0).abs() < 1e-4);
    }

    #[test]
    fn ace_examples() {
        assert_eq!(ace(&[1.0, 0.0, 0.0, 1.0], &[true, false, false, true], 10).unwrap(), 0.0);
        let labels: Vec<bool> = (0..1000).map(|i| i % 2 == 0).collect();
        let a = ace(&[0.9; 1000], &labels, 10).unwrap();
        let s = sce(&[0.9; 1000], &labels, 10).unwrap();
        assert!((a - s).abs() < 1e-9);
    }

    #[test]
    fn schemes_agree_on_a_single_value() {
        let hits: Vec<bool> = (0..37).map(|i| i % 3 == 0).collect();
        let even = bin_samples(&[0.8; 37], &hits, BinScheme::Even, 10).unwrap();
        let adaptive = bin_samples(&[0.8; 37], &hits, BinScheme::Adaptive, 10).unwrap();
        let gap = even.iter().find_map(|b| b.gap()).unwrap();
        for b in adaptive.iter().filter(|b| b.count > 0) {
            assert!((b.gap().unwrap() - gap).abs() < 1e-12);
        }
    }

    #[test]
    fn reliability_rows() {
        let rows = reliability_export(&[0.55, 0.95, 0.95], &[true, true, false], 10).unwrap();
        assert_eq!(rows.len(), 10);
        assert_eq!(rows[0].count, 0);
        assert!(rows[0].accuracy.is_none() && rows[0].gap.is_none());
        assert_eq!(rows[9].count, 2);
        let csv = reliability_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(RELIABILITY_HEADER));
        assert_eq!(lines.next(), Some("0.0,0.1,0,,,"));
        assert_eq!(csv.lines().count(), 11);
    }

    #[test]
    fn patch_contract() {
        let cfg = PatchConfig::default();
        let ps = sample_local_patches(352, 352, &cfg, 4).unwrap();
        assert_eq!(ps.len(), 10);
        for p in &ps {
            assert!((71..=281).contains(&p.u) && (71..=281).contains(&p.v));
            assert!(p.rows().start >= 35 && p.rows().end <= 317);
        }
        assert_eq!(ps, sample_local_patches(352, 352, &cfg, 4).unwrap());
        assert!(sample_local_patches(64, 64, &cfg, 0).is_err());
        assert!(sample_local_patches(352, 352, &PatchConfig { size: 7, ..cfg }, 0).is_err());
    }
}
