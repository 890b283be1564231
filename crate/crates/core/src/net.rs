//! The four-branch temperature network.
//!
//! Each input plane (image, logits, TS probability, TS uncertainty) passes
//! its own block: `conv3×3(1→8) → ReLU → [conv3×3(8→8) → ReLU →
//! conv3×3(8→8)] + skip`. The branch outputs are concatenated, reweighted by
//! squeeze-and-excitation channel attention, and fused by a final 3×3 conv
//! into one channel. The temperature head is
//! `clamp(softplus(out) + T_MIN, T_MIN, T_MAX)`.

use std::fmt;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calib::{
    self, BinaryMask, ConfidenceMap, LossNorm, ProbabilityMap, TemperatureMap, UncertaintyMap,
    T_MAX, T_MIN,
};
use crate::error::{Error, Result};
use crate::record::CalibRecord;
use crate::tensor::{AdamConfig, AdamState, Graph, Scalar, Tensor, Var};

/// Channels produced by each branch block.
pub const BRANCH_WIDTH: usize = 8;
/// Hidden units of the attention bottleneck per enabled branch.
pub const ATTENTION_PER_BRANCH: usize = 2;
pub const KERNEL: usize = 3;
/// Variance floor of the per-record standardization.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Image,
    Logits,
    Probability,
    Uncertainty,
}

impl Branch {
    pub const ALL: [Branch; 4] = [
        Branch::Image,
        Branch::Logits,
        Branch::Probability,
        Branch::Uncertainty,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Image => "image",
            Branch::Logits => "logits",
            Branch::Probability => "prob",
            Branch::Uncertainty => "uncert",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Branch::ALL.into_iter().find(|b| b.name() == s)
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Training hyperparameters and ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub use_mask_loss: bool,
    pub use_mask_ts: bool,
    pub use_prob_branch: bool,
    pub use_uncert_branch: bool,
    pub loss_norm: LossNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 1e-4,
            seed: 0,
            batch_size: 1,
            use_mask_loss: true,
            use_mask_ts: true,
            use_prob_branch: true,
            use_uncert_branch: true,
            loss_norm: LossNorm::Mask,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::contract("epochs must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::contract(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        Ok(())
    }

    pub fn branches(&self) -> Vec<Branch> {
        Branch::ALL
            .into_iter()
            .filter(|b| match b {
                Branch::Probability => self.use_prob_branch,
                Branch::Uncertainty => self.use_uncert_branch,
                _ => true,
            })
            .collect()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// The four input planes of one record, each 1×1×H×W.
#[derive(Debug, Clone)]
pub struct BranchInputs<F: Scalar = f32> {
    pub image: Tensor<F>,
    pub logits: Tensor<F>,
    pub probability: Tensor<F>,
    pub uncertainty: Tensor<F>,
}

impl<F: Scalar> BranchInputs<F> {
    pub fn get(&self, b: Branch) -> &Tensor<F> {
        match b {
            Branch::Image => &self.image,
            Branch::Logits => &self.logits,
            Branch::Probability => &self.probability,
            Branch::Uncertainty => &self.uncertainty,
        }
    }

    pub fn cast<G: Scalar>(&self) -> BranchInputs<G> {
        BranchInputs {
            image: self.image.cast(),
            logits: self.logits.cast(),
            probability: self.probability.cast(),
            uncertainty: self.uncertainty.cast(),
        }
    }
}

/// Zero mean, unit variance, with the variance floored.
pub fn standardize(t: &Tensor) -> Tensor {
    let n = t.len() as f64;
    let mean = t.sum_f64() / n;
    let var = t
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let inv = 1.0 / var.max(VARIANCE_FLOOR).sqrt();
    t.map(|v| ((v as f64 - mean) * inv) as f32)
}

/// Image and logits standardized per record; the TS probability and its
/// entropy in their natural ranges.
pub fn build_branch_inputs(record: &CalibRecord, t0: f32) -> Result<BranchInputs> {
    let ts = crate::ts::apply_global(record, t0)?;
    Ok(BranchInputs {
        image: standardize(&record.image),
        logits: standardize(record.logits.tensor()),
        probability: ts.probability.into_tensor(),
        uncertainty: ts.uncertainty.into_tensor(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F: Scalar = f32> {
    pub name: String,
    pub value: Tensor<F>,
}

/// Trained (or freshly initialized) network parameters plus the global
/// temperature used to build its TS branches.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTsModel<F: Scalar = f32> {
    branches: Vec<Branch>,
    params: Vec<Param<F>>,
    t0: f32,
}

/// Parameter names and shapes in canonical order.
fn layout(branches: &[Branch]) -> Vec<(String, Vec<usize>)> {
    let w = BRANCH_WIDTH;
    let k = KERNEL;
    let channels = w * branches.len();
    let hidden = ATTENTION_PER_BRANCH * branches.len();
    let mut out = Vec::new();
    for b in branches {
        for (conv, cin) in [("conv1", 1), ("conv2", w), ("conv3", w)] {
            out.push((format!("{b}.{conv}.weight"), vec![w, cin, k, k]));
            out.push((format!("{b}.{conv}.bias"), vec![w]));
        }
    }
    out.push(("attention.fc1.weight".into(), vec![hidden, channels]));
    out.push(("attention.fc1.bias".into(), vec![hidden]));
    out.push(("attention.fc2.weight".into(), vec![channels, hidden]));
    out.push(("attention.fc2.bias".into(), vec![channels]));
    out.push(("head.weight".into(), vec![1, channels, k, k]));
    out.push(("head.bias".into(), vec![1]));
    out
}

fn fan_in(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

impl<F: Scalar> MaskTsModel<F> {
    fn check_branches(branches: &[Branch]) -> Result<()> {
        if branches.is_empty() {
            return Err(Error::contract("model needs at least one branch"));
        }
        let mut seen = branches.to_vec();
        seen.sort_by_key(|b| *b as u8);
        seen.dedup();
        if seen.len() != branches.len() {
            return Err(Error::contract("duplicate branch"));
        }
        Ok(())
    }

    /// Every parameter zero.
    pub fn zeros(branches: &[Branch], t0: f32) -> Result<Self> {
        Self::check_branches(branches)?;
        let params = layout(branches)
            .into_iter()
            .map(|(name, shape)| Ok(Param { name, value: Tensor::zeros(&shape)? }))
            .collect::<Result<_>>()?;
        Ok(MaskTsModel {
            branches: branches.to_vec(),
            params,
            t0,
        })
    }

    /// Kaiming-uniform weights (fan-in), zero biases.
    pub fn init(branches: &[Branch], t0: f32, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(branches, t0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut model.params {
            if p.name.ends_with(".bias") {
                continue;
            }
            let bound = (6.0 / fan_in(p.value.shape()) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            for v in p.value.data_mut() {
                *v = F::from_f64(dist.sample(&mut rng));
            }
        }
        Ok(model)
    }

    /// Rebuilds a model from named tensors, checking the layout.
    pub fn from_params(branches: &[Branch], t0: f32, params: Vec<Param<F>>) -> Result<Self> {
        Self::check_branches(branches)?;
        let expected = layout(branches);
        if expected.len() != params.len() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if &p.name != name || p.value.shape() != &shape[..] {
                return Err(Error::contract(format!(
                    "parameter `{}` {:?} does not match expected `{name}` {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
            if !p.value.all_finite() {
                return Err(Error::contract(format!("parameter `{name}` is not finite")));
            }
        }
        Ok(MaskTsModel {
            branches: branches.to_vec(),
            params,
            t0,
        })
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn t0(&self) -> f32 {
        self.t0
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> MaskTsModel<G> {
        MaskTsModel {
            branches: self.branches.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            t0: self.t0,
        }
    }

    /// Pushes the forward pass onto `g`. Returns the temperature node and the
    /// parameter leaves in canonical order.
    pub fn forward_graph(&self, g: &mut Graph<F>, inputs: &BranchInputs<F>) -> Result<(Var, Vec<Var>)> {
        let shape = inputs.get(self.branches[0]).shape().to_vec();
        let [1, 1, _, _] = shape[..] else {
            return Err(Error::shape(format!("branch inputs must be 1×1×H×W, got {shape:?}")));
        };
        for &b in &self.branches {
            if inputs.get(b).shape() != &shape[..] {
                return Err(Error::shape(format!(
                    "branch `{b}` has shape {:?}, expected {shape:?}",
                    inputs.get(b).shape()
                )));
            }
        }
        let vars: Vec<Var> = self.params.iter().map(|p| g.param(p.value.clone())).collect();
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("layout");

        let mut branch_out = Vec::with_capacity(self.branches.len());
        for &b in &self.branches {
            let x = g.constant(inputs.get(b).clone());
            let (k1, b1, k2, b2, k3, b3) = (next(), next(), next(), next(), next(), next());
            let h = g.conv2d(x, k1, b1)?;
            let h = g.relu(h);
            let r = g.conv2d(h, k2, b2)?;
            let r = g.relu(r);
            let r = g.conv2d(r, k3, b3)?;
            branch_out.push(g.add(r, h)?);
        }
        let feat = g.concat_channels(&branch_out)?;
        let channels = BRANCH_WIDTH * self.branches.len();

        let (w1, b1, w2, b2) = (next(), next(), next(), next());
        let squeezed = g.global_avg_pool(feat)?;
        let squeezed = g.reshape(squeezed, &[1, channels])?;
        let e = g.dense(squeezed, w1, b1)?;
        let e = g.relu(e);
        let e = g.dense(e, w2, b2)?;
        let e = g.sigmoid(e);
        let e = g.reshape(e, &[1, channels, 1, 1])?;
        let attended = g.mul(feat, e)?;

        let (kh, bh) = (next(), next());
        let out = g.conv2d(attended, kh, bh)?;
        let t = g.softplus(out);
        let floor = F::from_f64(T_MIN as f64);
        let t = g.add_scalar(t, floor);
        let t = g.clamp(t, floor, F::from_f64(T_MAX as f64));
        Ok((t, vars))
    }

    /// Masked BCE of `σ(z / T')` for one record, pushed onto `g`.
    pub fn loss_graph(
        &self,
        g: &mut Graph<F>,
        inputs: &BranchInputs<F>,
        logits: &Tensor<F>,
        labels: &Tensor<F>,
        mask: &Tensor<F>,
        denom: f64,
    ) -> Result<(Var, Vec<Var>)> {
        let (t, vars) = self.forward_graph(g, inputs)?;
        let z = g.constant(logits.clone());
        let scaled = g.div(z, t)?;
        let loss = g.bce_with_logits(scaled, labels, mask, denom)?;
        Ok((loss, vars))
    }
}

impl MaskTsModel<f32> {
    /// Network temperature `T'` for one record.
    pub fn forward(&self, inputs: &BranchInputs) -> Result<TemperatureMap> {
        let mut g = Graph::new();
        let (t, _) = self.forward_graph(&mut g, inputs)?;
        TemperatureMap::per_pixel(g.value(t).clone())
    }
}

/// Per-record material reused across epochs.
struct Prepared {
    inputs: BranchInputs,
    logits: Tensor,
    labels: Tensor,
    mask: Tensor,
    denom: f64,
}

fn prepare(record: &CalibRecord, t0: f32, cfg: &TrainConfig) -> Result<Option<Prepared>> {
    let mask = if cfg.use_mask_loss {
        calib::union_mask(&record.label, &record.prediction())?
    } else {
        BinaryMask::all(record.height(), record.width(), true)
    };
    let count = mask.count_ones();
    if count == 0 {
        warn!(
            "record `{}`: empty lesion and empty prediction, skipped by the masked loss",
            record.id
        );
        return Ok(None);
    }
    Ok(Some(Prepared {
        inputs: build_branch_inputs(record, t0)?,
        logits: record.logits.tensor().clone(),
        labels: record.label.tensor().clone(),
        mask: mask.into_tensor(),
        denom: cfg.loss_norm.denominator(count, record.pixels()),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch, measured during the epoch.
    pub history: Vec<f64>,
    /// Mean loss over the training records before the first update.
    pub initial_loss: f64,
    /// Mean loss over the training records after the last update.
    pub final_loss: f64,
    pub skipped: Vec<String>,
    pub steps: u64,
}

fn mean_loss(model: &MaskTsModel, data: &[Prepared]) -> Result<f64> {
    let mut acc = 0.0;
    for p in data {
        let mut g = Graph::new();
        let (l, _) = model.loss_graph(&mut g, &p.inputs, &p.logits, &p.labels, &p.mask, p.denom)?;
        acc += g.value(l).item() as f64;
    }
    Ok(acc / data.len() as f64)
}

/// Trains `model` in place with Adam, one record per step by default.
pub fn train(model: &mut MaskTsModel, records: &[CalibRecord], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let mut data = Vec::with_capacity(records.len());
    let mut skipped = Vec::new();
    for r in records {
        match prepare(r, model.t0, cfg)? {
            Some(p) => data.push(p),
            None => skipped.push(r.id.clone()),
        }
    }
    if data.is_empty() {
        return Err(Error::DegenerateMask);
    }

    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, model.params.iter().map(|p| &p.value));
    // Shuffling draws from its own stream so it is independent of init.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let initial_loss = mean_loss(model, &data)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let p = &data[i];
                let mut g = Graph::new();
                let (loss, vars) =
                    model.loss_graph(&mut g, &p.inputs, &p.logits, &p.labels, &p.mask, p.denom)?;
                epoch_loss += g.value(loss).item() as f64;
                let mut grads = g.backward(loss)?;
                let step: Vec<Tensor> = vars
                    .iter()
                    .zip(&model.params)
                    .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros_like(&p.value)))
                    .collect();
                acc = Some(match acc {
                    None => step,
                    Some(mut a) => {
                        for (x, y) in a.iter_mut().zip(&step) {
                            for (u, w) in x.data_mut().iter_mut().zip(y.data()) {
                                *u += *w;
                            }
                        }
                        a
                    }
                });
            }
            let mut grads = acc.expect("nonempty batch");
            if batch.len() > 1 {
                let inv = 1.0 / batch.len() as f32;
                for gt in &mut grads {
                    for v in gt.data_mut() {
                        *v *= inv;
                    }
                }
            }
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            let mut param_refs: Vec<&mut Tensor> = model.params.iter_mut().map(|p| &mut p.value).collect();
            adam.step(&mut param_refs, &grad_refs, &name_refs)?;
        }
        history.push(epoch_loss / data.len() as f64);
    }
    let final_loss = mean_loss(model, &data)?;
    Ok(TrainReport {
        history,
        initial_loss,
        final_loss,
        skipped,
        steps: adam.step_count(),
    })
}

/// Calibrated maps for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedOutput {
    pub probability: ProbabilityMap,
    pub confidence: ConfidenceMap,
    pub uncertainty: UncertaintyMap,
    pub prediction: BinaryMask,
    pub temperature: TemperatureMap,
}

impl CalibratedOutput {
    /// Derives confidence, uncertainty and prediction from a temperature.
    pub fn from_temperature(record: &CalibRecord, temperature: TemperatureMap) -> Result<Self> {
        let probability = calib::probability(&record.logits, &temperature)?;
        let confidence = calib::confidence(&probability);
        let uncertainty = calib::entropy(&confidence);
        let prediction = calib::predict(&probability);
        Ok(CalibratedOutput {
            probability,
            confidence,
            uncertainty,
            prediction,
            temperature,
        })
    }
}

/// Network temperature, composed with `t0` on predicted background when
/// `use_mask_ts` is set.
pub fn calibrate(model: &MaskTsModel, record: &CalibRecord, t0: f32, use_mask_ts: bool) -> Result<CalibratedOutput> {
    let inputs = build_branch_inputs(record, t0)?;
    let t_net = model.forward(&inputs)?;
    let temperature = if use_mask_ts {
        calib::compose_mask_ts(&t_net, &record.prediction(), t0)?
    } else {
        t_net
    };
    CalibratedOutput::from_temperature(record, temperature)
}
