use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use scfreg_core::embeddings::{load_embedding_files, load_embeddings, one_hot_embeddings, prepare, save_embeddings};
use scfreg_core::field::{warp_image, warp_mask, DisplacementField, Grid, Image, InterpMode, SegMask};
use scfreg_core::metrics::{
    correlation_study, folding_fraction, jacobian_determinant, min_max_normalize, sdlogj, CorrelationFit,
    MetricsReport, CLIP_EPS, DEFAULT_RHO,
};
use scfreg_core::nn::BackboneConfig;
use scfreg_core::scf::{complexity, ComplexityReport, ModelConfig, ScfModel};
use scfreg_core::synth::{derive_seed, generate_dataset, load_dataset, smooth_noise_field, Manifest, SynthConfig};
use scfreg_core::tensorio::{read_tensor, write_tensor};
use scfreg_core::train::{train_loop, HistoryRow, TrainConfig};
use scfreg_core::Error;

use crate::args::{BackgroundArgs, ComplexityArgs, EvalArgs, RegisterArgs, SweepArgs, SynthArgs, TrainArgs};

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn synth(args: &SynthArgs) -> Result<Manifest> {
    let cfg = SynthConfig {
        shape: args.shape.clone(),
        num_regions: args.regions,
        num_pairs: args.pairs,
        amplitude: args.amp,
        sigma: args.sigma,
        noise_sd: args.noise_sd,
        seed: args.seed,
        modality: args.modality.into(),
    };
    Ok(generate_dataset(&cfg, &args.out)?)
}

pub fn model_config(args: &TrainArgs) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            rank: 2,
            start_channels: args.ns,
            levels: args.levels,
            kernel_size: args.kernel,
            out_channels: args.c2,
            ..Default::default()
        },
        mlp_hidden: args.cphi,
        use_integration: args.integrate,
        integration_steps: args.steps,
        head: args.head.into(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub initial_val_dice: Option<f64>,
    pub final_val_dice: Option<f64>,
    pub history: Vec<HistoryRow>,
}

pub fn train(args: &TrainArgs) -> Result<TrainOutcome> {
    let ds = load_dataset(&args.data)?;
    let n_labels = ds.num_labels();
    let embedding = match &args.embeddings {
        Some(path) => load_embeddings(path)?,
        None => one_hot_embeddings(n_labels)?,
    };
    if embedding.n_regions() != n_labels {
        return Err(Error::LabelCountMismatch {
            embeddings: embedding.n_regions(),
            data: n_labels,
        }
        .into());
    }
    let mut cfg = model_config(args);
    cfg.backbone.rank = ds.config.shape.len();
    if args.val_pairs >= ds.pairs.len() {
        bail!("--val-pairs {} leaves no training pairs", args.val_pairs);
    }
    let n_train = ds.pairs.len() - args.val_pairs;
    let (train, val) = ds.split(n_train);
    let mut model = ScfModel::new(cfg, embedding, args.seed)?;
    let labels: Vec<i32> = (1..n_labels as i32).collect();
    let initial = if val.is_empty() {
        None
    } else {
        Some(scfreg_core::train::initial_dice(&val, &labels)?)
    };
    let tcfg = TrainConfig {
        lambda: args.lambda,
        lr0: args.lr,
        epochs: args.epochs,
        seed: args.seed,
        use_integration: args.integrate,
        checkpoint_every: args.checkpoint_every,
        ..Default::default()
    };
    let history = train_loop(&mut model, &train, &val, &tcfg, Some(&args.out))?;
    Ok(TrainOutcome {
        initial_val_dice: initial,
        final_val_dice: history.last().and_then(|r| r.val_dice),
        history,
    })
}

fn read_image(path: &Path) -> Result<Image> {
    Ok(Image::from_tensor(&read_tensor(path)?).with_context(|| format!("image {}", path.display()))?)
}

fn read_mask(labels: &Path, probs: Option<&Path>) -> Result<SegMask> {
    let l = read_tensor(labels)?;
    let p = probs.map(read_tensor).transpose()?;
    Ok(SegMask::from_tensors(&l, p.as_ref()).with_context(|| format!("mask {}", labels.display()))?)
}

fn same_grid(expected: &Grid, actual: &Grid) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            expected: expected.shape().to_vec(),
            actual: actual.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

pub fn register(args: &RegisterArgs) -> Result<Vec<PathBuf>> {
    let model = ScfModel::load(&args.ckpt)?;
    let moving = read_image(&args.moving)?;
    let fixed = read_image(&args.fixed)?;
    let fixed_seg = read_mask(&args.fixed_seg, args.fixed_probs.as_deref())?;
    same_grid(fixed.grid(), moving.grid())?;
    same_grid(fixed.grid(), fixed_seg.grid())?;
    let u = model.register(&moving, &fixed, &fixed_seg)?;
    create_dir(&args.out)?;
    let mut written = vec![args.out.join("u.scft"), args.out.join("warped.scft")];
    write_tensor(&written[0], &u.to_tensor())?;
    write_tensor(&written[1], &warp_image(&moving, &u, InterpMode::Linear)?.to_tensor())?;
    if let Some(path) = &args.moving_seg {
        let seg = read_mask(path, None)?;
        same_grid(fixed.grid(), seg.grid())?;
        let out = args.out.join("warped_seg.scft");
        write_tensor(&out, &warp_mask(&seg, &u)?.labels_tensor())?;
        written.push(out);
    }
    Ok(written)
}

pub fn eval(args: &EvalArgs) -> Result<MetricsReport> {
    let field = DisplacementField::from_tensor(&read_tensor(&args.field)?)?;
    let fixed = read_mask(&args.fixed_seg, None)?;
    let moving = read_mask(&args.moving_seg, None)?;
    same_grid(field.grid(), fixed.grid())?;
    same_grid(field.grid(), moving.grid())?;
    let rank = field.rank();
    let spacing = args.spacing.clone().unwrap_or_else(|| vec![1.0; rank]);
    if spacing.len() != rank || spacing.iter().any(|&s| !(s > 0.0)) {
        bail!("--spacing needs {rank} positive values, got {spacing:?}");
    }
    let report = MetricsReport::compute(&field, &fixed, &moving, args.labels.as_deref(), false, &spacing)?;
    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub field: String,
    pub amplitude: Option<f64>,
    pub sigma: Option<f64>,
    pub sdlogj: f64,
    pub fold_frac: f64,
    pub sdlogj_norm: f64,
    pub fold_frac_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepOutcome {
    pub n_fields: usize,
    #[serde(flatten)]
    pub fit: CorrelationFit,
    #[serde(skip)]
    pub rows: Vec<SweepRow>,
}

/// Raw smooth random displacement fields over an amplitude × smoothness grid
/// (not integrated, so strong ones fold), or fields read from a directory.
pub fn sweep_correlation(args: &SweepArgs) -> Result<SweepOutcome> {
    let mut fields: Vec<(String, Option<f64>, Option<f64>, DisplacementField)> = Vec::new();
    if let Some(dir) = &args.fields {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "scft"))
            .collect();
        paths.sort();
        for p in paths {
            let u = DisplacementField::from_tensor(&read_tensor(&p)?)?;
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            fields.push((name, None, None, u));
        }
    } else {
        let grid = Grid::new(args.shape.clone())?;
        for &amp in &args.amps {
            for &sigma in &args.sigmas {
                let k = fields.len() as u64;
                let u = smooth_noise_field(&grid, sigma, amp, derive_seed(args.seed, k))?;
                fields.push((format!("field_{k:03}"), Some(amp), Some(sigma), u));
            }
        }
    }
    let mut pairs = Vec::with_capacity(fields.len());
    for (_, _, _, u) in &fields {
        let j = jacobian_determinant(u)?;
        pairs.push((sdlogj(&j, DEFAULT_RHO, CLIP_EPS)?, folding_fraction(&j)));
    }
    let fit = correlation_study(&pairs)?;
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    // correlation_study has already rejected constant columns
    let (xn, yn) = (min_max_normalize(&xs).unwrap(), min_max_normalize(&ys).unwrap());
    let rows: Vec<SweepRow> = fields
        .into_iter()
        .enumerate()
        .map(|(i, (field, amplitude, sigma, _))| SweepRow {
            field,
            amplitude,
            sigma,
            sdlogj: xs[i],
            fold_frac: ys[i],
            sdlogj_norm: xn[i],
            fold_frac_norm: yn[i],
        })
        .collect();
    create_dir(&args.out)?;
    let mut w = csv::Writer::from_path(args.out.join("sweep.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let outcome = SweepOutcome {
        n_fields: rows.len(),
        fit,
        rows,
    };
    write_json(&args.out.join("fit.json"), &outcome)?;
    Ok(outcome)
}

pub fn background_vector(args: &BackgroundArgs) -> Result<usize> {
    let (raw, sidecar) = load_embedding_files(&args.embeddings)?;
    if sidecar.has_background_row {
        log::warn!("input already carries a background row; rows are only re-normalised");
    }
    let m = prepare(&raw, &sidecar)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_embeddings(&args.out, &m)?;
    Ok(m.n_regions())
}

pub fn complexity_of(args: &ComplexityArgs) -> Result<ComplexityReport> {
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            rank: args.shape.len(),
            start_channels: args.ns,
            levels: args.levels,
            kernel_size: args.kernel,
            out_channels: args.c2,
            ..Default::default()
        },
        mlp_hidden: args.cphi,
        ..Default::default()
    };
    let emb_dim = args.emb_dim.unwrap_or(args.regions);
    let report = complexity(&cfg, emb_dim, args.regions, &args.shape, args.cached)?;
    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(report)
}
