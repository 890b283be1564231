//! Vanilla temperature scaling: one global temperature fitted by minimizing
//! the mean binary cross-entropy over every pixel of a record set.

use serde::{Deserialize, Serialize};

use crate::calib::{
    self, ConfidenceMap, LogitMap, ProbabilityMap, TemperatureMap, UncertaintyMap, T_MAX, T_MIN,
};
use crate::error::{Error, Result};
use crate::record::CalibRecord;

/// Grid points scanned before the golden-section refinement.
pub const PRESCAN_POINTS: usize = 512;
/// Absolute tolerance on log-temperature.
pub const LOG_T_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsFitResult {
    pub t0: f32,
    pub final_loss: f64,
    /// Golden-section iterations after the prescan.
    pub iterations: usize,
    pub loss_at_unity: f64,
}

/// Mean BCE of `σ(z/T)` against labels, over a set of (logits, labels)
/// slices.
pub struct TsObjective<'a> {
    parts: Vec<(&'a [f32], &'a [f32])>,
    count: usize,
}

impl<'a> TsObjective<'a> {
    pub fn new(parts: Vec<(&'a [f32], &'a [f32])>) -> Result<Self> {
        let mut count = 0;
        for (z, y) in &parts {
            if z.len() != y.len() {
                return Err(Error::shape(format!(
                    "logits ({}) and labels ({}) differ in length",
                    z.len(),
                    y.len()
                )));
            }
            if let Some(bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::contract(format!("label {bad} is not 0/1")));
            }
            if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
                return Err(Error::contract(format!("logit {bad} is not finite")));
            }
            count += z.len();
        }
        if count == 0 {
            return Err(Error::contract("temperature fit needs at least one pixel"));
        }
        Ok(TsObjective { parts, count })
    }

    pub fn from_records(records: &'a [CalibRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::contract("temperature fit needs at least one record"));
        }
        Self::new(
            records
                .iter()
                .map(|r| (r.logits.values(), r.label.values()))
                .collect(),
        )
    }

    pub fn pixel_count(&self) -> usize {
        self.count
    }

    /// Mean loss at temperature `t`.
    pub fn loss(&self, t: f64) -> f64 {
        let inv = 1.0 / t;
        let mut acc = 0.0f64;
        for (z, y) in &self.parts {
            for (&zv, &yv) in z.iter().zip(y.iter()) {
                let a = zv as f64 * inv;
                acc += a.max(0.0) + (-a.abs()).exp().ln_1p() - yv as f64 * a;
            }
        }
        acc / self.count as f64
    }

    /// Golden-section search on `ln T` over `[ln T_MIN, ln T_MAX]`, seeded by an
    /// evenly spaced prescan that picks the bracket.
    pub fn fit(&self) -> TsFitResult {
        let lo = (T_MIN as f64).ln();
        let hi = (T_MAX as f64).ln();
        let step = (hi - lo) / (PRESCAN_POINTS - 1) as f64;
        let grid: Vec<f64> = (0..PRESCAN_POINTS).map(|i| lo + step * i as f64).collect();
        let losses: Vec<f64> = grid.iter().map(|&x| self.loss(x.exp())).collect();
        let mut best = 0;
        for i in 1..PRESCAN_POINTS {
            let closer_to_unity = grid[i].abs() < grid[best].abs();
            if losses[i] < losses[best] || (losses[i] == losses[best] && closer_to_unity) {
                best = i;
            }
        }
        let mut a = grid[best.saturating_sub(1)];
        let mut b = grid[(best + 1).min(PRESCAN_POINTS - 1)];

        let ratio = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - ratio * (b - a);
        let mut d = a + ratio * (b - a);
        let mut fc = self.loss(c.exp());
        let mut fd = self.loss(d.exp());
        let mut iterations = 0;
        while b - a > LOG_T_TOLERANCE {
            iterations += 1;
            if fc <= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - ratio * (b - a);
                fc = self.loss(c.exp());
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + ratio * (b - a);
                fd = self.loss(d.exp());
            }
        }

        let mut t0 = (((a + b) / 2.0).exp() as f32).clamp(T_MIN, T_MAX);
        let mut final_loss = self.loss(t0 as f64);
        let loss_at_unity = self.loss(1.0);
        if loss_at_unity <= final_loss + 1e-12 {
            t0 = 1.0;
            final_loss = loss_at_unity;
        }
        TsFitResult {
            t0,
            final_loss,
            iterations,
            loss_at_unity,
        }
    }
}

pub fn fit_global_temperature(records: &[CalibRecord]) -> Result<TsFitResult> {
    Ok(TsObjective::from_records(records)?.fit())
}

/// Probability, confidence and uncertainty under a global temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalCalibrated {
    pub probability: ProbabilityMap,
    pub confidence: ConfidenceMap,
    pub uncertainty: UncertaintyMap,
}

pub fn apply_global_to_logits(logits: &LogitMap, t0: f32) -> Result<GlobalCalibrated> {
    let probability = calib::probability(logits, &TemperatureMap::uniform(t0)?)?;
    let confidence = calib::confidence(&probability);
    let uncertainty = calib::entropy(&confidence);
    Ok(GlobalCalibrated {
        probability,
        confidence,
        uncertainty,
    })
}

pub fn apply_global(record: &CalibRecord, t0: f32) -> Result<GlobalCalibrated> {
    apply_global_to_logits(&record.logits, t0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{predict, BinaryMask};
    use crate::tensor::Tensor;

    fn record(z: Vec<f32>, y: Vec<f32>) -> CalibRecord {
        let n = z.len();
        CalibRecord::new(
            "r",
            Tensor::plane(1, n, vec![0.0; n]).unwrap(),
            LogitMap::from_plane(1, n, z).unwrap(),
            BinaryMask::from_plane(1, n, y).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn empty_input_is_contract_error() {
        assert!(matches!(fit_global_temperature(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn apply_examples() {
        let r = record(vec![2.0, -1.0, 0.0], vec![1.0, 0.0, 1.0]);
        let one = apply_global(&r, 1.0).unwrap();
        assert_eq!(one.probability, r.probability());
        let two = apply_global(&r, 2.0).unwrap();
        assert!((two.probability.values()[0] - 0.731_059).abs() < 1e-6);
        for t in [0.05, 0.7, 3.0, 20.0] {
            assert_eq!(predict(&apply_global(&r, t).unwrap().probability), r.prediction());
        }
        assert!(apply_global(&r, 0.0).is_err());
    }

    #[test]
    fn fit_never_worse_than_unity() {
        // Overconfident: logits large but labels frequently disagree.
        let z: Vec<f32> = (0..400).map(|i| if i % 2 == 0 { 6.0 } else { -6.0 }).collect();
        // Every fifth label contradicts its logit.
        let y: Vec<f32> = (0..400)
            .map(|i| {
                let agrees = (i % 2 == 0) as u8 as f32;
                if i % 5 == 0 { 1.0 - agrees } else { agrees }
            })
            .collect();
        let fit = fit_global_temperature(&[record(z, y)]).unwrap();
        assert!(fit.final_loss <= fit.loss_at_unity + 1e-9);
        assert!(fit.t0 > 1.0);
        assert!(fit.iterations > 0);
    }

    #[test]
    fn underconfident_logits_get_sharpened() {
        let z: Vec<f32> = (0..100).map(|i| if i < 50 { 0.5 } else { -0.5 }).collect();
        let y: Vec<f32> = (0..100).map(|i| if i < 49 || i == 99 { 1.0 } else { 0.0 }).collect();
        let fit = fit_global_temperature(&[record(z, y)]).unwrap();
        assert!(fit.t0 < 1.0);
    }

    #[test]
    fn flat_objective_ties_to_unity() {
        // All logits zero: loss is ln 2 at every temperature.
        let fit = fit_global_temperature(&[record(vec![0.0; 10], vec![1.0; 10])]).unwrap();
        assert_eq!(fit.t0, 1.0);
        assert_eq!(fit.final_loss, fit.loss_at_unity);
    }
}
