//! Synthetic segmentation records with planted miscalibration.
//!
//! Each record holds 1–3 disc-shaped lesions. A smooth potential `φ` is
//! positive inside a lesion, negative outside and crosses zero at the rim
//! with slope `1/s`. The calibrated logit is `w = a·tanh(φ)` inside and
//! `c·tanh(φ)` outside, labels are drawn pixel-wise from `σ(w)`, and the
//! stored logits are `T·w` with `T = T_fg` where `φ > 0`, else `T_bg`. The
//! right calibration map is therefore known exactly.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::container::TensorFile;
use crate::calib::{BinaryMask, LogitMap, T_MAX, T_MIN};
use crate::error::{Error, Result};
use crate::record::{CalibRecord, PlantedTruth};
use crate::tensor::Tensor;

const MAX_ATTEMPTS: usize = 10_000;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 64×64 records.
    Mini,
    /// 352×352 records.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Blob radius range as a fraction of the shorter image side.
    pub radius_fraction: (f64, f64),
    /// Accepted range of the lesion pixel fraction.
    pub coverage: (f64, f64),
    pub t_fg: f32,
    pub t_bg: f32,
    /// Boundary width `s` in pixels.
    pub softness: f64,
    /// Saturation level `a` of the calibrated logit inside lesions.
    pub lesion_amplitude: f64,
    /// Saturation level `c` of the calibrated logit magnitude outside.
    pub background_amplitude: f64,
    pub image_noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn profile(profile: Profile) -> Self {
        let side = match profile {
            Profile::Mini => 64,
            Profile::Full => 352,
        };
        SynthConfig {
            n_train: 40,
            n_val: 10,
            n_test: 20,
            height: side,
            width: side,
            min_blobs: 1,
            max_blobs: 3,
            radius_fraction: (0.05, 0.2),
            coverage: (0.02, 0.12),
            t_fg: 3.0,
            t_bg: 1.5,
            softness: 1.5,
            lesion_amplitude: 2.0,
            background_amplitude: 8.0,
            image_noise: 0.1,
            seed: 0,
        }
    }

    pub fn with_temperatures(mut self, t_fg: f32, t_bg: f32) -> Self {
        self.t_fg = t_fg;
        self.t_bg = t_bg;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("t_fg", self.t_fg), ("t_bg", self.t_bg)] {
            if !(T_MIN..=T_MAX).contains(&t) {
                return Err(Error::contract(format!("{name} = {t} outside [{T_MIN}, {T_MAX}]")));
            }
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::contract("image size must be positive"));
        }
        if self.min_blobs == 0 || self.min_blobs > self.max_blobs {
            return Err(Error::contract("blob count range must satisfy 1 ≤ min ≤ max"));
        }
        let (rlo, rhi) = self.radius_fraction;
        if !(0.0 < rlo && rlo <= rhi && rhi < 0.5) {
            return Err(Error::contract("radius fraction range must lie in (0, 0.5)"));
        }
        let (clo, chi) = self.coverage;
        if !(0.0 <= clo && clo <= chi && chi <= 1.0) {
            return Err(Error::contract("coverage range must lie in [0, 1]"));
        }
        for (name, v) in [
            ("softness", self.softness),
            ("lesion_amplitude", self.lesion_amplitude),
            ("background_amplitude", self.background_amplitude),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        if !(self.image_noise >= 0.0 && self.image_noise.is_finite()) {
            return Err(Error::contract("image noise must be non-negative"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    fn rng(&self, split: Split, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((split as u64) << 32) | index as u64);
        rng
    }
}

struct Blob {
    row: f64,
    col: f64,
    radius: f64,
}

/// `max_k (r_k² − d_k²) / (2 r_k s)`: the log of the widest Gaussian bump
/// rescaled so that it is ≈ `(r − d)/s` near each rim.
fn potential(blobs: &[Blob], h: usize, w: usize, s: f64) -> Vec<f64> {
    let mut phi = vec![f64::NEG_INFINITY; h * w];
    for r in 0..h {
        for c in 0..w {
            let v = &mut phi[r * w + c];
            for b in blobs {
                let d2 = (r as f64 - b.row).powi(2) + (c as f64 - b.col).powi(2);
                *v = v.max((b.radius * b.radius - d2) / (2.0 * b.radius * s));
            }
        }
    }
    phi
}

fn draw_potential(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let (h, w) = (cfg.height, cfg.width);
    let side = h.min(w) as f64;
    for _ in 0..MAX_ATTEMPTS {
        let k = rng.gen_range(cfg.min_blobs..=cfg.max_blobs);
        let blobs: Vec<Blob> = (0..k)
            .map(|_| {
                let radius = side * rng.gen_range(cfg.radius_fraction.0..=cfg.radius_fraction.1);
                Blob {
                    row: rng.gen_range(radius..=h as f64 - radius),
                    col: rng.gen_range(radius..=w as f64 - radius),
                    radius,
                }
            })
            .collect();
        let phi = potential(&blobs, h, w, cfg.softness);
        let inside = phi.iter().filter(|&&v| v > 0.0).count() as f64 / phi.len() as f64;
        if (cfg.coverage.0..=cfg.coverage.1).contains(&inside) {
            return Ok(phi);
        }
    }
    Err(Error::contract(format!(
        "no lesion layout with coverage in {:?} after {MAX_ATTEMPTS} draws",
        cfg.coverage
    )))
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Record `index` of `split`. Each record draws from its own stream, so
/// records and splits are independent of each other and of generation order.
pub fn generate_record(cfg: &SynthConfig, split: Split, index: usize) -> Result<CalibRecord> {
    cfg.validate()?;
    let mut rng = cfg.rng(split, index);
    let phi = draw_potential(cfg, &mut rng)?;
    let noise = Normal::new(0.0, cfg.image_noise).expect("validated noise");
    let n = phi.len();
    let (mut w, mut t, mut z, mut y, mut x) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for &p in &phi {
        let th = p.tanh();
        let (wv, tv) = if p > 0.0 {
            (cfg.lesion_amplitude * th, cfg.t_fg)
        } else {
            (cfg.background_amplitude * th, cfg.t_bg)
        };
        let wv = wv as f32;
        w.push(wv);
        t.push(tv);
        z.push(tv * wv);
        y.push(if rng.gen::<f64>() < logistic(wv as f64) { 1.0 } else { 0.0 });
        x.push(((th + 1.0) / 2.0 + noise.sample(&mut rng)) as f32);
    }
    let (h, wd) = (cfg.height, cfg.width);
    let mut rec = CalibRecord::new(
        format!("{}-{index:04}", split.name()),
        Tensor::plane(h, wd, x)?,
        LogitMap::from_plane(h, wd, z)?,
        BinaryMask::from_plane(h, wd, y)?,
    )?;
    rec.truth = Some(PlantedTruth {
        true_logit: Tensor::plane(h, wd, w)?,
        true_temperature: Tensor::plane(h, wd, t)?,
    });
    Ok(rec)
}

pub fn generate_split(cfg: &SynthConfig, split: Split) -> Result<Vec<CalibRecord>> {
    (0..cfg.count(split)).map(|i| generate_record(cfg, split, i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    /// Relative to the manifest's directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SynthConfig,
    pub config_digest: String,
    pub records: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.records.iter().filter(move |e| e.split == split)
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.config.digest() != manifest.config_digest {
            return Err(Error::format(0, format!("{}: config digest mismatch", path.display())));
        }
        Ok(manifest)
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Generates every split under `dir` (one MTS1 file per record) and writes
/// `manifest.json`.
pub fn synth_generate(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let dir = dir.as_ref();
    let mut records = Vec::new();
    for split in Split::ALL {
        let sub = dir.join(split.name());
        create_dir(&sub)?;
        for i in 0..cfg.count(split) {
            let rec = generate_record(cfg, split, i)?;
            let rel = format!("{}/{}.mts", split.name(), rec.id);
            TensorFile::new(rec.to_tensors()).write(dir.join(&rel))?;
            records.push(ManifestEntry {
                id: rec.id,
                split,
                path: rel,
            });
        }
    }
    let manifest = DatasetManifest {
        config: cfg.clone(),
        config_digest: cfg.digest(),
        records,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads every record of `split` listed in the manifest under `dir`.
pub fn load_split(dir: impl AsRef<Path>, split: Split) -> Result<Vec<CalibRecord>> {
    let dir = dir.as_ref();
    let manifest = DatasetManifest::read(dir)?;
    manifest
        .entries(split)
        .map(|e| {
            let path: PathBuf = dir.join(&e.path);
            CalibRecord::from_tensors(e.id.clone(), TensorFile::read(&path)?.tensors)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_train: 2,
            n_val: 1,
            n_test: 1,
            ..SynthConfig::profile(Profile::Mini)
        }
    }

    #[test]
    fn planted_fields_are_consistent() {
        let cfg = small();
        let r = generate_record(&cfg, Split::Train, 0).unwrap();
        let truth = r.truth.as_ref().unwrap();
        let inside = truth.true_logit.data().iter().filter(|&&w| w > 0.0).count() as f64 / r.pixels() as f64;
        assert!((0.02..=0.12).contains(&inside), "coverage {inside}");
        for ((&z, &w), &t) in r
            .logits
            .values()
            .iter()
            .zip(truth.true_logit.data())
            .zip(truth.true_temperature.data())
        {
            assert_eq!(z, t * w);
            assert!(t == cfg.t_fg || t == cfg.t_bg);
            assert_eq!(t == cfg.t_fg, w > 0.0);
        }
    }

    #[test]
    fn streams_are_independent_of_order() {
        let cfg = small();
        let a = generate_split(&cfg, Split::Train).unwrap();
        assert_eq!(a[1], generate_record(&cfg, Split::Train, 1).unwrap());
        assert_ne!(a[0].logits, generate_record(&cfg, Split::Test, 0).unwrap().logits);
    }

    #[test]
    fn invalid_temperatures_rejected() {
        assert!(small().with_temperatures(0.0, 1.0).validate().is_err());
        assert!(small().with_temperatures(1.0, 25.0).validate().is_err());
    }
}
