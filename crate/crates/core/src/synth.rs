//! Synthetic registration pairs with known ground-truth deformations.
//!
//! An atlas of non-overlapping ellipses (ellipsoids in 3-D) serves as the fixed
//! image and mask of every pair; the moving side is the atlas pushed through a
//! random fold-free deformation. On disk a dataset is a directory holding
//! `manifest.json` and one sub-directory of `.scft` tensors per pair.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffeo::{integrate, VelocityField, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::field::{warp_image, warp_mask, DisplacementField, Grid, Image, InterpMode, SegMask};
use crate::metrics::{folding_fraction, jacobian_determinant};
use crate::tensorio::{read_tensor, write_tensor, Tensor};

pub const CT_MIN_HU: f64 = -500.0;
pub const CT_MAX_HU: f64 = 800.0;

const PLACEMENT_ATTEMPTS: usize = 2000;
const DIFFEO_RETRIES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Generic,
    CtLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub shape: Vec<usize>,
    /// Foreground regions; labels run `1..=num_regions`.
    pub num_regions: usize,
    pub num_pairs: usize,
    /// Largest velocity norm, in voxels.
    pub amplitude: f64,
    /// Gaussian smoothing of the velocity noise, in voxels.
    pub sigma: f64,
    pub noise_sd: f64,
    pub seed: u64,
    pub modality: Modality,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            shape: vec![64, 64],
            num_regions: 4,
            num_pairs: 10,
            amplitude: 6.0,
            sigma: 12.0,
            noise_sd: 0.02,
            seed: 0,
            modality: Modality::Generic,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        Grid::new(self.shape.clone())?;
        if !(self.amplitude >= 0.0) || !(self.sigma > 0.0) || !(self.noise_sd >= 0.0) {
            return Err(Error::InvalidConfig(
                "amplitude and noise_sd must be >= 0 and sigma > 0".into(),
            ));
        }
        if self.num_regions == 0 {
            return Err(Error::InvalidConfig("num_regions must be >= 1".into()));
        }
        Ok(())
    }

    /// Labels including background.
    pub fn num_labels(&self) -> usize {
        self.num_regions + 1
    }
}

/// splitmix64 finaliser; used to derive independent per-pair seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of stream `stream` under `master`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream))
}

/// Clamp Hounsfield units to the soft-tissue window and map it onto `[0, 1]`.
pub fn preprocess_ct(raw: &Tensor) -> Result<Image> {
    let img = Image::from_tensor(raw)?;
    let grid = img.grid().clone();
    let data = img
        .into_data()
        .into_iter()
        .map(|hu| (hu.clamp(CT_MIN_HU, CT_MAX_HU) - CT_MIN_HU) / (CT_MAX_HU - CT_MIN_HU))
        .collect();
    Image::new(grid, data)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable truncated Gaussian blur (radius 3σ) of one scalar channel, edge-replicated.
pub fn gaussian_smooth(grid: &Grid, data: &mut [f64], sigma: f64) {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let strides = grid.strides();
    let mut tmp = vec![0.0; data.len()];
    for (axis, &n) in grid.shape().iter().enumerate() {
        let stride = strides[axis];
        for (idx, t) in tmp.iter_mut().enumerate() {
            let pos = (idx / stride % n) as isize;
            let base = idx - pos as usize * stride;
            *t = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    let p = (pos + k as isize - radius).clamp(0, n as isize - 1) as usize;
                    w * data[base + p * stride]
                })
                .sum();
        }
        data.copy_from_slice(&tmp);
    }
}

/// White noise per component, Gaussian-smoothed and scaled so that the largest
/// vector norm equals `amplitude`.
pub fn smooth_noise_field(grid: &Grid, sigma: f64, amplitude: f64, seed: u64) -> Result<DisplacementField> {
    if !(sigma > 0.0) || !(amplitude >= 0.0) {
        return Err(Error::InvalidConfig(
            "sigma must be > 0 and amplitude >= 0".into(),
        ));
    }
    if amplitude == 0.0 {
        return Ok(DisplacementField::zeros(grid.clone()));
    }
    // Noise is drawn on a grid padded by the kernel radius and cropped after
    // smoothing; replicating edges instead would concentrate amplitude there.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, v) = (grid.rank(), grid.len());
    let radius = (3.0 * sigma).ceil() as usize;
    let padded = Grid::new(grid.shape().iter().map(|n| n + 2 * radius).collect())?;
    let pstrides = padded.strides();
    let mut data = Vec::with_capacity(d * v);
    let mut noise = vec![0.0; padded.len()];
    for _ in 0..d {
        for x in &mut noise {
            *x = StandardNormal.sample(&mut rng);
        }
        gaussian_smooth(&padded, &mut noise, sigma);
        data.extend((0..v).map(|idx| {
            let c = grid.coords(idx);
            (0..d).map(|a| (c[a] + radius) * pstrides[a]).sum::<usize>()
        }).map(|i| noise[i]));
    }
    let field = DisplacementField::new(grid.clone(), data)?;
    let m = field.max_norm();
    if m == 0.0 {
        return Ok(field);
    }
    Ok(field.scaled(amplitude / m))
}

/// Fold-free displacement obtained by integrating smoothed noise; regenerates
/// with a fresh stream when folding survives integration.
pub fn random_diffeo(grid: &Grid, sigma: f64, amplitude: f64, seed: u64) -> Result<DisplacementField> {
    for attempt in 0..DIFFEO_RETRIES as u64 {
        let v = smooth_noise_field(grid, sigma, amplitude, derive_seed(seed, attempt))?;
        let u = integrate(&VelocityField::new(v), DEFAULT_STEPS)?;
        if folding_fraction(&jacobian_determinant(&u)?) == 0.0 {
            return Ok(u);
        }
    }
    Err(Error::TooRough(DIFFEO_RETRIES))
}

#[derive(Debug, Clone)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3], rank: usize, grow: f64) -> bool {
        (0..rank)
            .map(|a| ((p[a] - self.center[a]) / (self.radii[a] + grow)).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

/// Atlas image and mask: `num_regions` disjoint ellipsoids on background.
pub fn make_atlas(cfg: &SynthConfig) -> Result<(Image, SegMask)> {
    cfg.validate()?;
    let grid = Grid::new(cfg.shape.clone())?;
    let rank = grid.rank();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX));
    let mut labels = vec![0i32; grid.len()];
    let point = |idx: usize| {
        let c = grid.coords(idx);
        [c[0] as f64, c[1] as f64, c[2] as f64]
    };
    let mut placed: Vec<Ellipsoid> = Vec::new();
    let mut attempts = 0;
    while placed.len() < cfg.num_regions {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS {
            return Err(Error::Crowded {
                wanted: cfg.num_regions,
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
        let mut e = Ellipsoid {
            center: [0.0; 3],
            radii: [0.0; 3],
        };
        for a in 0..rank {
            let n = grid.shape()[a] as f64;
            e.radii[a] = rng.random_range(0.06..0.14) * n + 1.0;
            let margin = e.radii[a] + 2.0;
            if 2.0 * margin >= n - 1.0 {
                e.center[a] = (n - 1.0) / 2.0;
            } else {
                e.center[a] = rng.random_range(margin..n - 1.0 - margin);
            }
        }
        let inside: Vec<usize> = (0..grid.len()).filter(|&i| e.contains(point(i), rank, 0.0)).collect();
        let touches = (0..grid.len()).any(|i| labels[i] != 0 && e.contains(point(i), rank, 2.0));
        if inside.is_empty() || touches {
            continue;
        }
        placed.push(e);
        for i in inside {
            labels[i] = placed.len() as i32;
        }
    }

    let levels = region_levels(cfg, &mut rng);
    let mut data: Vec<f64> = labels.iter().map(|&l| levels[l as usize]).collect();
    let noise_scale = match cfg.modality {
        Modality::Generic => 1.0,
        Modality::CtLike => CT_MAX_HU - CT_MIN_HU,
    };
    gaussian_smooth(&grid, &mut data, 1.0);
    if cfg.noise_sd > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sd * noise_scale).expect("finite sd");
        for v in &mut data {
            *v += normal.sample(&mut rng);
        }
    }
    let image = match cfg.modality {
        Modality::Generic => {
            for v in &mut data {
                *v = v.clamp(0.0, 1.0);
            }
            let (lo, hi) = data
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            if hi > lo {
                for v in &mut data {
                    *v = (*v - lo) / (hi - lo);
                }
            }
            Image::new(grid.clone(), data)?
        }
        Modality::CtLike => preprocess_ct(&Tensor::from_f64(grid.shape().to_vec(), data)?)?,
    };
    Ok((image, SegMask::new(grid, labels, None)?))
}

/// Background first, then one intensity per region, spread so neighbouring
/// labels stay distinguishable.
fn region_levels(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = cfg.num_regions;
    let mut levels = Vec::with_capacity(n + 1);
    match cfg.modality {
        Modality::Generic => {
            levels.push(0.1);
            for i in 0..n {
                let base = 0.3 + 0.65 * (i as f64 + 0.5) / n as f64;
                levels.push(base + rng.random_range(-0.1..0.1) / n as f64);
            }
        }
        Modality::CtLike => {
            levels.push(-900.0);
            for i in 0..n {
                let base = -300.0 + 900.0 * (i as f64 + 0.5) / n as f64;
                levels.push(base + rng.random_range(-50.0..50.0) / n as f64);
            }
        }
    }
    levels
}

/// One registration pair. The fixed side carries the mask that conditions the
/// model; `u_true` (when known) maps fixed voxels into the moving image.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationPair {
    pub moving: Image,
    pub fixed: Image,
    pub moving_seg: SegMask,
    pub fixed_seg: SegMask,
    pub u_true: Option<DisplacementField>,
}

impl RegistrationPair {
    pub fn grid(&self) -> &Grid {
        self.fixed.grid()
    }

    fn check(&self) -> Result<()> {
        let g = self.fixed.grid();
        g.check_same(self.moving.grid())?;
        g.check_same(self.moving_seg.grid())?;
        g.check_same(self.fixed_seg.grid())?;
        if let Some(u) = &self.u_true {
            g.check_same(u.grid())?;
        }
        Ok(())
    }
}

/// Deform the atlas by a fresh random diffeomorphism.
pub fn make_pair(atlas: &(Image, SegMask), cfg: &SynthConfig, seed: u64) -> Result<RegistrationPair> {
    let (fixed, fixed_seg) = atlas;
    let grid = fixed.grid();
    let u = random_diffeo(grid, cfg.sigma, cfg.amplitude, derive_seed(seed, 0))?;
    let warped = warp_image(fixed, &u, InterpMode::Linear)?;
    let mut data = warped.into_data();
    if cfg.noise_sd > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
        let normal = Normal::new(0.0, cfg.noise_sd).expect("finite sd");
        for v in &mut data {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(RegistrationPair {
        moving: Image::new(grid.clone(), data)?,
        fixed: fixed.clone(),
        moving_seg: warp_mask(fixed_seg, &u)?,
        fixed_seg: fixed_seg.clone(),
        u_true: Some(u),
    })
}

/// Flip `fraction` of the voxels (rounded) to a uniformly chosen different label in `0..n_labels`.
pub fn corrupt_mask(mask: &SegMask, fraction: f64, n_labels: usize, seed: u64) -> Result<SegMask> {
    if !(0.0..=1.0).contains(&fraction) || n_labels < 2 {
        return Err(Error::InvalidConfig(
            "fraction must lie in [0, 1] and at least 2 labels are needed".into(),
        ));
    }
    let v = mask.labels().len();
    let k = (fraction * v as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = mask.labels().to_vec();
    for i in sample(&mut rng, v, k) {
        let old = labels[i];
        let mut new = rng.random_range(0..n_labels as i32 - 1);
        if new >= old {
            new += 1;
        }
        labels[i] = new;
    }
    SegMask::new(mask.grid().clone(), labels, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub pairs: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: SynthConfig,
    pub pairs: Vec<RegistrationPair>,
}

impl Dataset {
    /// Labels including background.
    pub fn num_labels(&self) -> usize {
        self.config.num_labels()
    }

    pub fn split(mut self, train: usize) -> (Vec<RegistrationPair>, Vec<RegistrationPair>) {
        let val = self.pairs.split_off(train.min(self.pairs.len()));
        (self.pairs, val)
    }
}

pub fn pair_seed(cfg: &SynthConfig, index: usize) -> u64 {
    derive_seed(cfg.seed, index as u64)
}

/// Generate every pair of `cfg` in memory.
pub fn generate_pairs(cfg: &SynthConfig) -> Result<Dataset> {
    let atlas = make_atlas(cfg)?;
    let pairs = (0..cfg.num_pairs)
        .map(|i| make_pair(&atlas, cfg, pair_seed(cfg, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: cfg.clone(),
        pairs,
    })
}

/// Generate and write a dataset directory.
pub fn generate_dataset(cfg: &SynthConfig, dir: &Path) -> Result<Manifest> {
    let ds = generate_pairs(cfg)?;
    write_dataset(&ds, dir)
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.pairs.len());
    for (i, pair) in ds.pairs.iter().enumerate() {
        pair.check()?;
        let id = format!("pair_{i:04}");
        let sub = dir.join(&id);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut tensors = vec![
            ("im_m", pair.moving.to_tensor()),
            ("im_f", pair.fixed.to_tensor()),
            ("seg_m", pair.moving_seg.labels_tensor()),
            ("seg_f", pair.fixed_seg.labels_tensor()),
        ];
        if let Some(u) = &pair.u_true {
            tensors.push(("u_true", u.to_tensor()));
        }
        if let Some(p) = pair.fixed_seg.probs_tensor() {
            tensors.push(("probs_f", p));
        }
        let mut files = Vec::new();
        for (name, t) in tensors {
            let file = format!("{name}.scft");
            write_tensor(sub.join(&file), &t)?;
            files.push(file);
        }
        entries.push(ManifestEntry {
            id,
            seed: pair_seed(&ds.config, i),
            files,
        });
    }
    let manifest = Manifest {
        config: ds.config.clone(),
        pairs: entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for entry in &manifest.pairs {
        let sub = dir.join(&entry.id);
        let has = |name: &str| entry.files.iter().any(|f| f == &format!("{name}.scft"));
        let load = |name: &str| read_tensor(sub.join(format!("{name}.scft")));
        let probs = if has("probs_f") { Some(load("probs_f")?) } else { None };
        let pair = RegistrationPair {
            moving: Image::from_tensor(&load("im_m")?)?,
            fixed: Image::from_tensor(&load("im_f")?)?,
            moving_seg: SegMask::from_tensors(&load("seg_m")?, None)?,
            fixed_seg: SegMask::from_tensors(&load("seg_f")?, probs.as_ref())?,
            u_true: if has("u_true") {
                Some(DisplacementField::from_tensor(&load("u_true")?)?)
            } else {
                None
            },
        };
        pair.check()?;
        pairs.push(pair);
    }
    if pairs.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    Ok(Dataset {
        config: manifest.config,
        pairs,
    })
}
