//! U-Net style encoder-decoder producing a `[C2, S..]` feature map from the
//! channel-stacked moving and fixed images.
//!
//! Layer list for `L` levels with widths `c_l = N_s·2^l`:
//!
//! | name      | input                         | channels                 | kernel | stride |
//! |-----------|-------------------------------|--------------------------|--------|--------|
//! | `enc0`    | `[I_m, I_f]`                  | `2 → c_0`                | k      | 1      |
//! | `enc{l}`  | `enc{l-1}`                    | `c_{l-1} → c_l`          | k      | 2      |
//! | `dec{l}`  | `[up2(dec{l+1}), enc{l}]`     | `c_{l+1} + c_l → c_l`    | k      | 1      |
//! | `head`    | `dec0` (or `enc0` if `L = 1`) | `c_0 → C2`               | 1      | 1      |
//!
//! `dec{l}` runs for `l = L-2 … 0`, and the deepest encoder output stands in
//! for `dec{L-1}`. Every layer but `head` is followed by a leaky ReLU. Each
//! layer owns `k^d·c_in·c_out` weights plus `c_out` biases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Grid;

use super::conv::ConvGeom;
use super::{Graph, Init, ParamId, ParamSet, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub rank: usize,
    pub start_channels: usize,
    pub levels: usize,
    pub kernel_size: usize,
    pub out_channels: usize,
    pub slope: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            rank: 2,
            start_channels: 16,
            levels: 3,
            kernel_size: 3,
            out_channels: 16,
            slope: 0.2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.rank) {
            return Err(Error::UnsupportedRank(self.rank));
        }
        if self.start_channels == 0 || self.levels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig(
                "start_channels, levels and out_channels must be >= 1".into(),
            ));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "kernel size {} must be odd",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.start_channels << level
    }

    /// Every convolution in forward order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let k = self.kernel_size;
        let mut out = vec![LayerSpec {
            name: "enc0".into(),
            cin: 2,
            cout: self.width(0),
            kernel: k,
            stride: 1,
            level: 0,
        }];
        for l in 1..self.levels {
            out.push(LayerSpec {
                name: format!("enc{l}"),
                cin: self.width(l - 1),
                cout: self.width(l),
                kernel: k,
                stride: 2,
                level: l,
            });
        }
        for l in (0..self.levels.saturating_sub(1)).rev() {
            out.push(LayerSpec {
                name: format!("dec{l}"),
                cin: self.width(l + 1) + self.width(l),
                cout: self.width(l),
                kernel: k,
                stride: 1,
                level: l,
            });
        }
        out.push(LayerSpec {
            name: "head".into(),
            cin: self.width(0),
            cout: self.out_channels,
            kernel: 1,
            stride: 1,
            level: 0,
        });
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count(self.rank)).sum()
    }

    /// Multiply-adds of one forward pass at the given spatial shape.
    pub fn mult_adds(&self, shape: &[usize]) -> Result<usize> {
        self.check_shape(shape)?;
        let voxels: usize = shape.iter().product();
        let per_level = |l: usize| voxels >> (self.rank * l);
        Ok(self
            .layers()
            .iter()
            .map(|layer| per_level(layer.level) * layer.weight_count(self.rank))
            .sum())
    }

    /// Spatial extents must survive `levels − 1` halvings.
    pub fn check_shape(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.rank {
            return Err(Error::UnsupportedRank(shape.len()));
        }
        let f = 1usize << (self.levels - 1);
        if let Some((axis, &extent)) = shape.iter().enumerate().find(|(_, &s)| s % f != 0) {
            return Err(Error::InvalidConfig(format!(
                "extent {extent} of axis {axis} is not divisible by {f}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Resolution level of the layer output (0 = full resolution).
    pub level: usize,
}

impl LayerSpec {
    pub fn weight_count(&self, rank: usize) -> usize {
        self.kernel.pow(rank as u32) * self.cin * self.cout
    }

    pub fn param_count(&self, rank: usize) -> usize {
        self.weight_count(rank) + self.cout
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    layers: Vec<(LayerSpec, ParamId, ParamId)>,
}

impl Backbone {
    /// Register `<layer>.weight` / `<layer>.bias` for every layer.
    pub fn register(config: BackboneConfig, params: &mut ParamSet) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        for spec in config.layers() {
            let mut shape = vec![spec.cout, spec.cin];
            shape.extend(std::iter::repeat_n(spec.kernel, config.rank));
            let w = params.add(
                format!("{}.weight", spec.name),
                shape,
                Init::KaimingUniform { slope: config.slope },
            )?;
            let b = params.add(format!("{}.bias", spec.name), vec![spec.cout], Init::Zero)?;
            layers.push((spec, w, b));
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn layers(&self) -> impl Iterator<Item = &(LayerSpec, ParamId, ParamId)> {
        self.layers.iter()
    }

    fn conv(&self, g: &mut Graph, params: &ParamSet, i: usize, x: Var) -> Result<Var> {
        let (spec, w, b) = &self.layers[i];
        let spatial = g.shape(x)[1..].to_vec();
        let geom = ConvGeom::new(&spatial, spec.cin, spec.cout, spec.kernel, spec.stride)?;
        let (wv, bv) = (g.param(params, *w), g.param(params, *b));
        let y = g.conv(x, wv, bv, geom)?;
        Ok(if spec.name == "head" {
            y
        } else {
            g.leaky_relu(y, self.config.slope)
        })
    }

    /// Feature map `[C2, S..]` of the moving/fixed pair, recorded on `g`.
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, moving: Var, fixed: Var, grid: &Grid) -> Result<Var> {
        self.config.check_shape(grid.shape())?;
        let x = g.concat(moving, fixed)?;
        let levels = self.config.levels;
        let mut skips = Vec::with_capacity(levels);
        let mut h = self.conv(g, params, 0, x)?;
        skips.push(h);
        for l in 1..levels {
            h = self.conv(g, params, l, h)?;
            skips.push(h);
        }
        for (i, l) in (0..levels - 1).rev().enumerate() {
            let up = g.upsample2(h);
            let cat = g.concat(up, skips[l])?;
            h = self.conv(g, params, levels + i, cat)?;
        }
        self.conv(g, params, self.layers.len() - 1, h)
    }
}
