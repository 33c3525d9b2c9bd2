//! Weakly-supervised training: image similarity + soft Dice on warped moving
//! masks + λ·smoothness, optimised with Adam under a polynomial schedule.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{warp_mask, Grid, Image, SegMask};
use crate::metrics::dice;
use crate::nn::{Graph, ParamSet, Var};
use crate::scf::ScfModel;
use crate::synth::RegistrationPair;

pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr0: f64,
    pub epochs: usize,
    pub poly_power: f64,
    /// Pairs whose gradients are accumulated (and averaged) per optimiser step.
    pub batch: usize,
    pub seed: u64,
    /// Labels entering the Dice loss; all foreground labels when `None`.
    pub dice_labels: Option<Vec<i32>>,
    pub use_integration: bool,
    /// Extra checkpoint every this many epochs (final checkpoint is always written).
    pub checkpoint_every: Option<usize>,
    /// Validation Dice every this many epochs (and at the last one).
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lr0: 1e-4,
            epochs: 100,
            poly_power: 0.9,
            batch: 1,
            seed: 0,
            dice_labels: None,
            use_integration: false,
            checkpoint_every: None,
            validate_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.lr0 > 0.0) || self.epochs == 0 || self.batch == 0 {
            return Err(Error::InvalidConfig(
                "need lambda >= 0, lr0 > 0, epochs >= 1, batch >= 1".into(),
            ));
        }
        if self.validate_every == 0 {
            return Err(Error::InvalidConfig("validate_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// `lr0·(1 − epoch/epochs)^power`.
pub fn poly_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * (1.0 - epoch as f64 / cfg.epochs as f64).powf(cfg.poly_power)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sim: f64,
    pub dice: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub field: Var,
    pub sim: Var,
    pub dice: Var,
    pub reg: Var,
    pub total: Var,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            sim: g.scalar(self.sim),
            dice: g.scalar(self.dice),
            reg: g.scalar(self.reg),
            total: g.scalar(self.total),
        }
    }
}

/// Mean squared intensity difference.
pub fn loss_sim(g: &mut Graph, warped: Var, fixed: Var) -> Result<Var> {
    g.mse(warped, fixed)
}

/// Soft Dice between the linearly warped one-hot moving mask and the fixed mask.
pub fn loss_dice(
    g: &mut Graph,
    moving_seg: &SegMask,
    field: Var,
    fixed_seg: &SegMask,
    labels: &[i32],
) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Empty("dice label set"));
    }
    let grid = fixed_seg.grid();
    grid.check_same(moving_seg.grid())?;
    let mut shape = vec![labels.len()];
    shape.extend_from_slice(grid.shape());
    let m = g.input(shape.clone(), moving_seg.one_hot(labels))?;
    let f = g.input(shape, fixed_seg.one_hot(labels))?;
    let warped = g.sample(m, field, grid)?;
    g.soft_dice_loss(warped, f, DICE_EPS)
}

/// Squared forward-difference gradient norm, averaged per axis pair and over `d²` pairs.
pub fn loss_reg(g: &mut Graph, field: Var, grid: &Grid) -> Result<Var> {
    g.grad_reg(field, grid)
}

fn image_var(g: &mut Graph, img: &Image) -> Result<Var> {
    let mut shape = vec![1];
    shape.extend_from_slice(img.grid().shape());
    g.input(shape, img.data().to_vec())
}

/// Foreground labels `1..n`.
pub fn foreground_labels(n_labels: usize) -> Vec<i32> {
    (1..n_labels as i32).collect()
}

/// Record the full composite loss of one pair.
pub fn composite_loss(
    g: &mut Graph,
    model: &ScfModel,
    pair: &RegistrationPair,
    lambda: f64,
    dice_labels: &[i32],
) -> Result<LossNodes> {
    let grid = pair.grid();
    let field = model.forward_graph(g, &pair.moving, &pair.fixed, &pair.fixed_seg)?;
    let m = image_var(g, &pair.moving)?;
    let f = image_var(g, &pair.fixed)?;
    let warped = g.sample(m, field, grid)?;
    let sim = loss_sim(g, warped, f)?;
    let dice = loss_dice(g, &pair.moving_seg, field, &pair.fixed_seg, dice_labels)?;
    let reg = loss_reg(g, field, grid)?;
    let a = g.add(sim, dice)?;
    let r = g.scale(reg, lambda);
    let total = g.add(a, r)?;
    Ok(LossNodes {
        field,
        sim,
        dice,
        reg,
        total,
    })
}

/// Adam with bias correction; gradients are zeroed after each step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.value[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
            p.grad.fill(0.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    pub sim: f64,
    pub dice: f64,
    pub reg: f64,
    pub total: f64,
    pub val_dice: Option<f64>,
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean Dice of nearest-warped moving masks against the fixed masks.
///
/// `conditioning`, when given, replaces each pair's fixed mask as the model
/// input (e.g. a degraded segmentation) while the score is still taken
/// against the clean fixed mask.
pub fn evaluate_dice(
    model: &ScfModel,
    pairs: &[RegistrationPair],
    labels: &[i32],
    conditioning: Option<&[SegMask]>,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation pairs"));
    }
    let mut total = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        let cond = conditioning.map_or(&p.fixed_seg, |c| &c[i]);
        let u = model.register(&p.moving, &p.fixed, cond)?;
        let warped = warp_mask(&p.moving_seg, &u)?;
        total += dice(&warped, &p.fixed_seg, labels)?.mean;
    }
    Ok(total / pairs.len() as f64)
}

/// Mean Dice before registration.
pub fn initial_dice(pairs: &[RegistrationPair], labels: &[i32]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation pairs"));
    }
    let mut total = 0.0;
    for p in pairs {
        total += dice(&p.moving_seg, &p.fixed_seg, labels)?.mean;
    }
    Ok(total / pairs.len() as f64)
}

/// Train in place. With `out`, writes `history.csv` and `checkpoint/` there
/// (plus `checkpoint_epoch_<k>/` when requested).
pub fn train_loop(
    model: &mut ScfModel,
    train: &[RegistrationPair],
    val: &[RegistrationPair],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<Vec<HistoryRow>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let labels = match &cfg.dice_labels {
        Some(l) => l.clone(),
        None => foreground_labels(model.n_regions()),
    };
    for p in train.iter().chain(val) {
        let max = p.fixed_seg.max_label().max(p.moving_seg.max_label());
        if max as usize >= model.n_regions() {
            return Err(Error::LabelCountMismatch {
                embeddings: model.n_regions(),
                data: max as usize + 1,
            });
        }
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    model.set_integration(cfg.use_integration);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let start = model.epoch();
    for epoch in 0..cfg.epochs {
        let lr = poly_lr(epoch, cfg);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut g = Graph::new();
        for (k, chunk) in order.chunks(cfg.batch).enumerate() {
            for &i in chunk {
                let nodes = composite_loss(&mut g, model, &train[i], cfg.lambda, &labels)?;
                let b = nodes.breakdown(&g);
                if !b.total.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, lr });
                }
                for (s, v) in sums.iter_mut().zip([b.sim, b.dice, b.reg, b.total]) {
                    *s += v;
                }
                let loss = g.scale(nodes.total, 1.0 / chunk.len() as f64);
                g.backward(loss, model.params_mut())?;
            }
            log::trace!("epoch {epoch} step {k}");
            adam.step(model.params_mut(), lr);
        }
        let n = train.len() as f64;
        let last = epoch + 1 == cfg.epochs;
        let val_dice = if !val.is_empty() && ((epoch + 1) % cfg.validate_every == 0 || last) {
            Some(evaluate_dice(model, val, &labels, None)?)
        } else {
            None
        };
        let row = HistoryRow {
            epoch,
            lr,
            sim: sums[0] / n,
            dice: sums[1] / n,
            reg: sums[2] / n,
            total: sums[3] / n,
            val_dice,
        };
        log::debug!("{row:?}");
        history.push(row);
        model.set_epoch(start + epoch + 1);
        if let (Some(dir), Some(k)) = (out, cfg.checkpoint_every) {
            if (epoch + 1) % k == 0 && !last {
                model.save(&dir.join(format!("checkpoint_epoch_{}", epoch + 1)))?;
            }
        }
    }
    if let Some(dir) = out {
        model.save(&dir.join("checkpoint"))?;
        write_history(&dir.join("history.csv"), &history)?;
    }
    Ok(history)
}
