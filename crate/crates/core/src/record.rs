//! One calibration sample.

use std::collections::BTreeMap;

use crate::calib::{self, BinaryMask, ConfidenceMap, LogitMap, ProbabilityMap, TemperatureMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Known-truth fields written by the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTruth {
    /// Calibrated logit `w`; labels were drawn from `σ(w)`.
    pub true_logit: Tensor,
    /// Temperature that maps `w` to the stored logits.
    pub true_temperature: Tensor,
}

/// An input image, the segmentation network's logits, and the label mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibRecord {
    pub id: String,
    /// Single grayscale plane, 1×1×H×W.
    pub image: Tensor,
    pub logits: LogitMap,
    pub label: BinaryMask,
    pub truth: Option<PlantedTruth>,
}

impl CalibRecord {
    pub fn new(id: impl Into<String>, image: Tensor, logits: LogitMap, label: BinaryMask) -> Result<Self> {
        if image.shape() != logits.tensor().shape() || label.tensor().shape() != logits.tensor().shape() {
            return Err(Error::shape(format!(
                "record fields disagree: image {:?}, logits {:?}, label {:?}",
                image.shape(),
                logits.tensor().shape(),
                label.tensor().shape()
            )));
        }
        Ok(CalibRecord {
            id: id.into(),
            image,
            logits,
            label,
            truth: None,
        })
    }

    pub fn height(&self) -> usize {
        self.logits.height()
    }

    pub fn width(&self) -> usize {
        self.logits.width()
    }

    pub fn pixels(&self) -> usize {
        self.logits.len()
    }

    /// The uncalibrated sigmoid output.
    pub fn probability(&self) -> ProbabilityMap {
        calib::probability(&self.logits, &TemperatureMap::Uniform(1.0)).expect("unit temperature")
    }

    pub fn confidence(&self) -> ConfidenceMap {
        calib::confidence(&self.probability())
    }

    /// The segmentation prediction ŷ.
    pub fn prediction(&self) -> BinaryMask {
        calib::predict(&self.probability())
    }

    /// Named tensors for the on-disk record layout.
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert("image".to_string(), self.image.clone());
        out.insert("logits".to_string(), self.logits.tensor().clone());
        out.insert("label".to_string(), self.label.tensor().clone());
        if let Some(t) = &self.truth {
            out.insert("true_logit".to_string(), t.true_logit.clone());
            out.insert("true_temperature".to_string(), t.true_temperature.clone());
        }
        out
    }

    pub fn from_tensors(id: impl Into<String>, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::contract(format!("record is missing `{name}`")))
        };
        let image = take("image")?;
        let logits = LogitMap::new(take("logits")?)?;
        let label = BinaryMask::new(take("label")?)?;
        let truth = match (take("true_logit"), take("true_temperature")) {
            (Ok(true_logit), Ok(true_temperature)) => Some(PlantedTruth {
                true_logit,
                true_temperature,
            }),
            _ => None,
        };
        let mut rec = CalibRecord::new(id, image, logits, label)?;
        rec.truth = truth;
        Ok(rec)
    }
}
