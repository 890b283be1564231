//! Pixel-wise calibration maps and the pure functions between them.
//!
//! Every map is a 1×1×H×W `f32` plane wrapped in a newtype that enforces its
//! value range at construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest admissible temperature.
pub const T_MIN: f32 = 0.05;
/// Largest admissible temperature.
pub const T_MAX: f32 = 20.0;

/// Largest `f32` strictly below one half.
const BELOW_HALF: f32 = f32::from_bits(0x3EFF_FFFF);

fn plane_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        &[1, 1, h, w] => Ok((h, w)),
        s => Err(Error::shape(format!("{what} must be 1×1×H×W, got {s:?}"))),
    }
}

macro_rules! plane_type {
    ($(#[$doc:meta])* $name:ident, $what:literal, |$v:ident| $ok:expr) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(Tensor);

        impl $name {
            pub fn new(t: Tensor) -> Result<Self> {
                plane_dims(&t, $what)?;
                if let Some(bad) = t.data().iter().find(|&&$v| !($ok)) {
                    return Err(Error::contract(format!(
                        concat!($what, " value {} out of range"),
                        bad
                    )));
                }
                Ok($name(t))
            }

            pub fn from_plane(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
                Self::new(Tensor::plane(height, width, data)?)
            }

            pub fn tensor(&self) -> &Tensor {
                &self.0
            }

            pub fn into_tensor(self) -> Tensor {
                self.0
            }

            pub fn values(&self) -> &[f32] {
                self.0.data()
            }

            pub fn height(&self) -> usize {
                self.0.shape()[2]
            }

            pub fn width(&self) -> usize {
                self.0.shape()[3]
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }
        }
    };
}

plane_type!(
    /// Pre-sigmoid scores.
    LogitMap, "logit", |v| v.is_finite()
);
plane_type!(
    /// Probability of label 1.
    ProbabilityMap, "probability", |v| (0.0..=1.0).contains(&v)
);
plane_type!(
    /// Probability assigned to the predicted label.
    ConfidenceMap, "confidence", |v| (0.5..=1.0).contains(&v)
);
plane_type!(
    /// Strictly two-valued 0/1 plane.
    BinaryMask, "mask", |v| v == 0.0 || v == 1.0
);
plane_type!(
    /// Binary entropy of the confidence, in bits.
    UncertaintyMap, "uncertainty", |v| (0.0..=1.0).contains(&v)
);

impl BinaryMask {
    pub fn count_ones(&self) -> usize {
        self.values().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn is_set(&self, i: usize) -> bool {
        self.values()[i] == 1.0
    }

    pub fn all(height: usize, width: usize, value: bool) -> Self {
        let v = if value { 1.0 } else { 0.0 };
        BinaryMask(Tensor::plane(height, width, vec![v; height * width]).expect("nonzero dims"))
    }
}

fn check_temperature(t: f32) -> Result<()> {
    if (T_MIN..=T_MAX).contains(&t) {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "temperature {t} outside [{T_MIN}, {T_MAX}]"
        )))
    }
}

/// Per-pixel temperature field or a single global temperature.
#[derive(Debug, Clone, PartialEq)]
pub enum TemperatureMap {
    Uniform(f32),
    PerPixel(Tensor),
}

impl TemperatureMap {
    pub fn uniform(t: f32) -> Result<Self> {
        check_temperature(t)?;
        Ok(TemperatureMap::Uniform(t))
    }

    pub fn per_pixel(t: Tensor) -> Result<Self> {
        plane_dims(&t, "temperature")?;
        for &v in t.data() {
            check_temperature(v)?;
        }
        Ok(TemperatureMap::PerPixel(t))
    }

    /// Temperature at flat pixel index `i`.
    #[inline]
    pub fn at(&self, i: usize) -> f32 {
        match self {
            TemperatureMap::Uniform(t) => *t,
            TemperatureMap::PerPixel(m) => m.data()[i],
        }
    }

    /// Materializes the field as an H×W plane.
    pub fn to_plane(&self, height: usize, width: usize) -> Tensor {
        match self {
            TemperatureMap::Uniform(t) => {
                Tensor::plane(height, width, vec![*t; height * width]).expect("nonzero dims")
            }
            TemperatureMap::PerPixel(m) => m.clone(),
        }
    }

    fn check_matches(&self, h: usize, w: usize) -> Result<()> {
        if let TemperatureMap::PerPixel(m) = self {
            if m.shape() != [1, 1, h, w] {
                return Err(Error::shape(format!(
                    "temperature map {:?} does not match {h}×{w}",
                    m.shape()
                )));
            }
        }
        Ok(())
    }
}

/// `σ(z / t)` evaluated in 64-bit and rounded so that the result is `≥ 0.5`
/// exactly when `z ≥ 0`. This sign-exactness is what makes thresholding
/// invariant under any positive temperature.
#[inline]
pub fn scaled_sigmoid(z: f32, t: f32) -> f32 {
    let x = z as f64 / t as f64;
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    let p = p as f32;
    if x < 0.0 && p >= 0.5 {
        BELOW_HALF
    } else {
        p
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Pointwise `σ(z / T)`.
pub fn probability(z: &LogitMap, t: &TemperatureMap) -> Result<ProbabilityMap> {
    let (h, w) = (z.height(), z.width());
    t.check_matches(h, w)?;
    if let TemperatureMap::Uniform(v) = t {
        check_temperature(*v)?;
    }
    let data = z
        .values()
        .iter()
        .enumerate()
        .map(|(i, &zv)| scaled_sigmoid(zv, t.at(i)))
        .collect();
    ProbabilityMap::from_plane(h, w, data)
}

/// `q = p` where `p ≥ 0.5`, else `1 − p`.
pub fn confidence(p: &ProbabilityMap) -> ConfidenceMap {
    let data = p
        .values()
        .iter()
        .map(|&v| if v >= 0.5 { v } else { 1.0 - v })
        .collect();
    ConfidenceMap(Tensor::plane(p.height(), p.width(), data).expect("same dims"))
}

/// Thresholds the label-1 probability at 0.5 (inclusive).
pub fn predict(p: &ProbabilityMap) -> BinaryMask {
    let data = p
        .values()
        .iter()
        .map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    BinaryMask(Tensor::plane(p.height(), p.width(), data).expect("same dims"))
}

/// Binary entropy in bits with `0·log₂0 = 0`.
pub fn binary_entropy(q: f64) -> f64 {
    let term = |v: f64| if v <= 0.0 { 0.0 } else { v * v.log2() };
    0.0 - (term(q) + term(1.0 - q))
}

pub fn entropy(q: &ConfidenceMap) -> UncertaintyMap {
    let data = q
        .values()
        .iter()
        .map(|&v| binary_entropy(v as f64).clamp(0.0, 1.0) as f32)
        .collect();
    UncertaintyMap(Tensor::plane(q.height(), q.width(), data).expect("same dims"))
}

/// `M = (y == 1) OR (ŷ == 1)`.
pub fn union_mask(y: &BinaryMask, y_hat: &BinaryMask) -> Result<BinaryMask> {
    check_same(y.tensor(), y_hat.tensor(), "union_mask")?;
    let data = y
        .values()
        .iter()
        .zip(y_hat.values())
        .map(|(&a, &b)| if a == 1.0 || b == 1.0 { 1.0 } else { 0.0 })
        .collect();
    Ok(BinaryMask(Tensor::plane(y.height(), y.width(), data)?))
}

/// Normalizer of the masked loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LossNorm {
    /// Divide by the number of masked pixels.
    #[default]
    Mask,
    /// Divide by H·W regardless of the mask.
    Hw,
}

impl LossNorm {
    pub fn denominator(self, mask_count: usize, pixels: usize) -> f64 {
        match self {
            LossNorm::Mask => mask_count as f64,
            LossNorm::Hw => pixels as f64,
        }
    }
}

/// Binary cross-entropy of `σ(z/T)` against `y` over the pixels where
/// `M = 1`. Pixels outside the mask are never read.
pub fn masked_bce_loss(
    z: &LogitMap,
    t: &TemperatureMap,
    y: &BinaryMask,
    mask: &BinaryMask,
    norm: LossNorm,
) -> Result<f64> {
    check_same(z.tensor(), y.tensor(), "masked_bce_loss")?;
    check_same(z.tensor(), mask.tensor(), "masked_bce_loss")?;
    t.check_matches(z.height(), z.width())?;
    let count = mask.count_ones();
    if count == 0 {
        return Err(Error::DegenerateMask);
    }
    let mut acc = 0.0f64;
    for i in 0..z.len() {
        if !mask.is_set(i) {
            continue;
        }
        let a = z.values()[i] as f64 / t.at(i) as f64;
        let yv = y.values()[i] as f64;
        // softplus(a) − y·a
        acc += a.max(0.0) + (-a.abs()).exp().ln_1p() - yv * a;
    }
    Ok(acc / norm.denominator(count, z.len()))
}

/// Mask-TS composition: `T'` on predicted-positive pixels, `t0` elsewhere.
pub fn compose_mask_ts(
    t_net: &TemperatureMap,
    y_hat: &BinaryMask,
    t0: f32,
) -> Result<TemperatureMap> {
    check_temperature(t0)?;
    let (h, w) = (y_hat.height(), y_hat.width());
    t_net.check_matches(h, w)?;
    let data = (0..h * w)
        .map(|i| if y_hat.is_set(i) { t_net.at(i) } else { t0 })
        .collect();
    Ok(TemperatureMap::PerPixel(Tensor::plane(h, w, data)?))
}
