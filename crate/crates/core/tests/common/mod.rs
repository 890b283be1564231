//! Shared test oracles: a finite-difference gradient checker, direct-sum
//! calibration metrics and a grid-search temperature fit.
#![allow(dead_code)]

use std::collections::HashMap;

use maskts::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Random values bounded away from zero (for kinks at 0 and divisors).
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize], gap: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(gap..hi);
            if rng.gen::<bool>() { v } else { -v }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub const FD_STEP: f64 = 1e-6;

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of `Σ out ⊙ R` for a fixed random projection `R`.
///
/// `build` receives the graph and one leaf per input and returns the output
/// node; it is re-run for every perturbation.
pub fn max_grad_error<B>(inputs: &[Tensor<f64>], seed: u64, build: B) -> f64
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor<f64>], projection: Option<&Tensor<f64>>| {
        let mut g = Graph::new();
        let leaves: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &leaves);
        let shape = g.value(out).shape().to_vec();
        let r = match projection {
            Some(r) => r.clone(),
            None => random_tensor(&mut rng(seed), &shape, -1.0, 1.0),
        };
        let rc = g.constant(r.clone());
        let prod = g.mul(out, rc).unwrap();
        let loss = g.sum(prod);
        (g, leaves, loss, r)
    };

    let (g, leaves, loss, r) = eval(inputs, None);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(leaves[k]).expect("leaf gradient");
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let (gp, _, lp, _) = eval(&plus, Some(&r));
            let (gm, _, lm, _) = eval(&minus, Some(&r));
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Even-bin statistics by direct membership tests against each interval.
fn even_bins_direct(scores: &[f32], hits: &[bool], bins: usize) -> Vec<(usize, f64, f64)> {
    (0..bins)
        .map(|k| {
            let lo = k as f64 / bins as f64;
            let hi = (k + 1) as f64 / bins as f64;
            let mut n = 0;
            let mut conf = 0.0;
            let mut acc = 0.0;
            for (&s, &h) in scores.iter().zip(hits) {
                let s = s as f64;
                let inside = lo <= s && (s < hi || (k == bins - 1 && s <= hi));
                if inside {
                    n += 1;
                    conf += s;
                    acc += h as u8 as f64;
                }
            }
            (n, conf, acc)
        })
        .collect()
}

pub fn ece_ref(conf: &[f32], hits: &[bool], bins: usize) -> f64 {
    let total = conf.len() as f64;
    100.0
        * even_bins_direct(conf, hits, bins)
            .into_iter()
            .filter(|b| b.0 > 0)
            .map(|(n, c, a)| n as f64 / total * (a / n as f64 - c / n as f64).abs())
            .sum::<f64>()
}

pub fn mce_ref(conf: &[f32], hits: &[bool], bins: usize) -> f64 {
    100.0
        * even_bins_direct(conf, hits, bins)
            .into_iter()
            .filter(|b| b.0 > 0)
            .map(|(n, c, a)| (a / n as f64 - c / n as f64).abs())
            .fold(0.0, f64::max)
}

fn flip(prob: &[f32], label: &[bool]) -> (Vec<f32>, Vec<bool>) {
    (prob.iter().map(|p| 1.0 - p).collect(), label.iter().map(|l| !l).collect())
}

pub fn sce_ref(prob: &[f32], label: &[bool], bins: usize) -> f64 {
    let (p0, l0) = flip(prob, label);
    (ece_ref(&p0, &l0, bins) + ece_ref(prob, label, bins)) / 2.0
}

/// Equal-count groups over sorted scores; each sample's outcome is replaced
/// by the mean outcome of all samples with the identical score.
fn ace_class(scores: &[f32], hits: &[bool], bins: usize) -> Vec<f64> {
    let mut tie: HashMap<u32, (f64, f64)> = HashMap::new();
    for (&s, &h) in scores.iter().zip(hits) {
        let e = tie.entry(s.to_bits()).or_default();
        e.0 += h as u8 as f64;
        e.1 += 1.0;
    }
    let mut sorted: Vec<f32> = scores.to_vec();
    sorted.sort_by(f32::total_cmp);
    let n = sorted.len();
    let mut gaps = Vec::new();
    let mut start = 0;
    for k in 0..bins {
        let size = n / bins + usize::from(k < n % bins);
        if size == 0 {
            continue;
        }
        let group = &sorted[start..start + size];
        let conf = group.iter().map(|&s| s as f64).sum::<f64>() / size as f64;
        let acc = group
            .iter()
            .map(|s| {
                let (h, c) = tie[&s.to_bits()];
                h / c
            })
            .sum::<f64>()
            / size as f64;
        gaps.push((acc - conf).abs());
        start += size;
    }
    gaps
}

pub fn ace_ref(prob: &[f32], label: &[bool], bins: usize) -> f64 {
    let (p0, l0) = flip(prob, label);
    let mut gaps = ace_class(&p0, &l0, bins);
    gaps.extend(ace_class(prob, label, bins));
    100.0 * gaps.iter().sum::<f64>() / gaps.len() as f64
}

/// Mean BCE of `σ(z/t)` written in the textbook form.
pub fn nll(z: &[f32], y: &[f32], t: f64) -> f64 {
    let mut acc = 0.0;
    for (&zv, &yv) in z.iter().zip(y) {
        let p = 1.0 / (1.0 + (-(zv as f64) / t).exp());
        let p = p.clamp(1e-300, 1.0 - 1e-16);
        acc -= yv as f64 * p.ln() + (1.0 - yv as f64) * (1.0 - p).ln();
    }
    acc / z.len() as f64
}

/// Grid search: a coarse log-spaced pass over [0.05, 20], then a linear
/// pass with relative step `fine` around the coarse winner.
pub fn grid_temperature(z: &[f32], y: &[f32], fine: f64) -> f64 {
    let coarse: Vec<f64> = (0..=120)
        .map(|i| (0.05f64.ln() + (20f64.ln() - 0.05f64.ln()) * i as f64 / 120.0).exp())
        .collect();
    let argmin = |ts: Vec<f64>| {
        ts.into_iter()
            .map(|t| (nll(z, y, t), t))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap()
            .1
    };
    let ratio = coarse[1] / coarse[0];
    let best = argmin(coarse);
    let (lo, hi) = (best / ratio, best * ratio);
    let step = fine * best;
    let steps = ((hi - lo) / step).ceil() as usize;
    argmin((0..=steps).map(|i| lo + step * i as f64).collect())
}

/// Largest relative error of the training-loss gradient with respect to
/// every model parameter, against central differences.
pub fn model_grad_error(
    model: &maskts::net::MaskTsModel<f64>,
    inputs: &maskts::net::BranchInputs<f64>,
    logits: &Tensor<f64>,
    labels: &Tensor<f64>,
    mask: &Tensor<f64>,
    denom: f64,
) -> f64 {
    let loss_of = |m: &maskts::net::MaskTsModel<f64>| {
        let mut g = Graph::new();
        let (l, vars) = m.loss_graph(&mut g, inputs, logits, labels, mask, denom).unwrap();
        (g, l, vars)
    };
    let (g, l, vars) = loss_of(model);
    let grads = g.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("parameter gradient").clone();
        for i in 0..analytic.len() {
            let mut plus = model.clone();
            plus.params_mut()[k].value.data_mut()[i] += FD_STEP;
            let mut minus = model.clone();
            minus.params_mut()[k].value.data_mut()[i] -= FD_STEP;
            let (gp, lp, _) = loss_of(&plus);
            let (gm, lm, _) = loss_of(&minus);
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    worst
}

pub const ELEMENTWISE: f64 = 1e-4;
pub const STRUCTURAL: f64 = 1e-3;

/// One gradient check: primitive name, worst relative error, tolerance.
pub type Check = (&'static str, f64, f64);

fn small_shape(rng: &mut impl Rng) -> Vec<usize> {
    vec![rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(2..=5), rng.gen_range(2..=5)]
}

/// Every autodiff primitive on randomized small shapes drawn from `seed`.
pub fn primitive_checks(seed: u64) -> Vec<Check> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    let [n, c, h, w] = [r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(3..=6), r.gen_range(3..=6)];
    let o = r.gen_range(1..=3);
    let k = [1, 3, 5][r.gen_range(0..3)];
    let x = random_tensor(&mut r, &[n, c, h, w], -1.0, 1.0);
    let kernel = random_tensor(&mut r, &[o, c, k, k], -1.0, 1.0);
    let bias = random_tensor(&mut r, &[o], -1.0, 1.0);
    out.push(("conv2d", max_grad_error(&[x, kernel, bias], seed, |g, v| g.conv2d(v[0], v[1], v[2]).unwrap()), STRUCTURAL));

    let shape = small_shape(&mut r);
    let x = away_from_zero(&mut r, &shape, 1e-2, 3.0);
    out.push(("relu", max_grad_error(&[x], seed, |g, v| g.relu(v[0])), ELEMENTWISE));
    let x = random_tensor(&mut r, &shape, -6.0, 6.0);
    out.push(("sigmoid", max_grad_error(&[x.clone()], seed, |g, v| g.sigmoid(v[0])), ELEMENTWISE));
    out.push(("softplus", max_grad_error(&[x.clone()], seed, |g, v| g.softplus(v[0])), ELEMENTWISE));
    out.push(("add_scalar", max_grad_error(&[x.clone()], seed, |g, v| g.add_scalar(v[0], 0.7)), ELEMENTWISE));
    out.push(("scale", max_grad_error(&[x], seed, |g, v| g.scale(v[0], -1.3)), ELEMENTWISE));
    // Keep every value at least 0.05 from either clamp bound.
    let x = random_tensor(&mut r, &shape, -2.0, 2.0)
        .map(|v| if (v - 0.5).abs() < 0.05 || (v + 0.5).abs() < 0.05 { v + 0.1 } else { v });
    out.push(("clamp", max_grad_error(&[x], seed, |g, v| g.clamp(v[0], -0.5, 0.5)), ELEMENTWISE));

    let a = random_tensor(&mut r, &shape, -2.0, 2.0);
    let b = random_tensor(&mut r, &shape, -2.0, 2.0);
    let d = away_from_zero(&mut r, &shape, 0.5, 3.0);
    let ab = [a.clone(), b];
    out.push(("add", max_grad_error(&ab, seed, |g, v| g.add(v[0], v[1]).unwrap()), ELEMENTWISE));
    out.push(("mul", max_grad_error(&ab, seed, |g, v| g.mul(v[0], v[1]).unwrap()), ELEMENTWISE));
    out.push(("div", max_grad_error(&[a.clone(), d], seed, |g, v| g.div(v[0], v[1]).unwrap()), ELEMENTWISE));
    let per_channel = random_tensor(&mut r, &[1, shape[1], 1, 1], -2.0, 2.0);
    let ac = [a.clone(), per_channel];
    out.push(("add (channel broadcast)", max_grad_error(&ac, seed, |g, v| g.add(v[0], v[1]).unwrap()), ELEMENTWISE));
    out.push(("mul (channel broadcast)", max_grad_error(&ac, seed, |g, v| g.mul(v[0], v[1]).unwrap()), ELEMENTWISE));

    out.push(("global_avg_pool", max_grad_error(&[a.clone()], seed, |g, v| g.global_avg_pool(v[0]).unwrap()), STRUCTURAL));
    let flat = [shape.iter().product::<usize>()];
    out.push(("reshape", max_grad_error(&[a.clone()], seed, |g, v| g.reshape(v[0], &flat).unwrap()), STRUCTURAL));
    out.push(("sum", max_grad_error(&[a.clone()], seed, |g, v| g.sum(v[0])), STRUCTURAL));
    let c2 = r.gen_range(1..=3);
    let other = random_tensor(&mut r, &[shape[0], c2, shape[2], shape[3]], -2.0, 2.0);
    out.push(("concat_channels", max_grad_error(&[a, other], seed, |g, v| g.concat_channels(&v[..2]).unwrap()), STRUCTURAL));

    let (n, c, d) = (r.gen_range(1..=3), r.gen_range(1..=6), r.gen_range(1..=5));
    let input = random_tensor(&mut r, &[n, c], -1.0, 1.0);
    let weight = random_tensor(&mut r, &[d, c], -1.0, 1.0);
    let bias = random_tensor(&mut r, &[d], -1.0, 1.0);
    out.push(("dense", max_grad_error(&[input, weight, bias], seed, |g, v| g.dense(v[0], v[1], v[2]).unwrap()), STRUCTURAL));

    let count: usize = shape.iter().product();
    let z = random_tensor(&mut r, &shape, -5.0, 5.0);
    let y = Tensor::new(&shape, (0..count).map(|_| r.gen_range(0..2) as f64).collect()).unwrap();
    let mut m: Vec<f64> = (0..count).map(|_| r.gen_range(0..2) as f64).collect();
    m[0] = 1.0;
    let denom = m.iter().sum::<f64>();
    let m = Tensor::new(&shape, m).unwrap();
    out.push(("bce_with_logits", max_grad_error(&[z], seed, |g, v| g.bce_with_logits(v[0], &y, &m, denom).unwrap()), ELEMENTWISE));
    out
}

/// A random 8×8 record with labels drawn at temperature 2.
pub fn grad_instance(seed: u64) -> maskts::record::CalibRecord {
    use maskts::calib::{scaled_sigmoid, BinaryMask, LogitMap};
    let mut r = rng(seed);
    let (h, w) = (8, 8);
    let z: Vec<f32> = (0..h * w).map(|_| r.gen_range(-4.0..4.0)).collect();
    let y: Vec<f32> = z.iter().map(|&v| (r.gen::<f32>() < scaled_sigmoid(v, 2.0)) as u8 as f32).collect();
    let x: Vec<f32> = (0..h * w).map(|_| r.gen()).collect();
    maskts::record::CalibRecord::new(
        "grad",
        Tensor::plane(h, w, x).unwrap(),
        LogitMap::from_plane(h, w, z).unwrap(),
        BinaryMask::from_plane(h, w, y).unwrap(),
    )
    .unwrap()
}

/// Worst parameter-gradient error of the masked training loss of a freshly
/// initialized model on an 8×8 instance.
pub fn full_model_check(seed: u64, branches: &[maskts::net::Branch]) -> f64 {
    use maskts::{calib, net};
    let rec = grad_instance(seed);
    let t0 = 1.6;
    let model = net::MaskTsModel::<f64>::init(branches, t0, seed).unwrap();
    let inputs = net::build_branch_inputs(&rec, t0).unwrap().cast();
    let mask = calib::union_mask(&rec.label, &rec.prediction()).unwrap();
    model_grad_error(
        &model,
        &inputs,
        &rec.logits.tensor().cast(),
        &rec.label.tensor().cast(),
        &mask.tensor().cast(),
        mask.count_ones() as f64,
    )
}
