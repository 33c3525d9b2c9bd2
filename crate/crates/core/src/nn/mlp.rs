//! Three-layer MLP mapping one embedding row to one flattened `[C2, d]` filter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Graph, Init, ParamId, ParamSet, Var};

/// Widths `in_dim → hidden → 2·hidden → out_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImplicitMlpConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl ImplicitMlpConfig {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        if in_dim == 0 || hidden == 0 || out_dim == 0 {
            return Err(Error::InvalidConfig("MLP widths must be >= 1".into()));
        }
        Ok(Self {
            in_dim,
            hidden,
            out_dim,
        })
    }

    /// Build from an explicit width list; exactly three layers are accepted.
    pub fn from_widths(widths: &[usize]) -> Result<Self> {
        match *widths {
            [i, h, h2, o] if h2 == 2 * h => Self::new(i, h, o),
            [_, h, h2, _] => Err(Error::InvalidConfig(format!(
                "second hidden width must be twice the first ({h2} != 2·{h})"
            ))),
            _ => Err(Error::InvalidConfig(format!(
                "implicit MLP needs exactly three layers, got {}",
                widths.len().saturating_sub(1)
            ))),
        }
    }

    pub fn widths(&self) -> [usize; 4] {
        [self.in_dim, self.hidden, 2 * self.hidden, self.out_dim]
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Multiply-adds for `rows` evaluations.
    pub fn mult_adds(&self, rows: usize) -> usize {
        rows * self.widths().windows(2).map(|w| w[0] * w[1]).sum::<usize>()
    }
}

#[derive(Debug, Clone)]
pub struct ImplicitMlp {
    config: ImplicitMlpConfig,
    layers: [(ParamId, ParamId); 3],
}

impl ImplicitMlp {
    /// Register `mlp{1,2,3}.{weight,bias}`; the last layer starts at zero.
    pub fn register(config: ImplicitMlpConfig, params: &mut ParamSet) -> Result<Self> {
        let w = config.widths();
        let mut ids = Vec::with_capacity(3);
        for i in 0..3 {
            let init = if i < 2 {
                Init::KaimingUniform { slope: 0.0 }
            } else {
                Init::Zero
            };
            let wid = params.add(format!("mlp{}.weight", i + 1), vec![w[i + 1], w[i]], init)?;
            let bid = params.add(format!("mlp{}.bias", i + 1), vec![w[i + 1]], Init::Zero)?;
            ids.push((wid, bid));
        }
        Ok(Self {
            config,
            layers: [ids[0], ids[1], ids[2]],
        })
    }

    pub fn config(&self) -> &ImplicitMlpConfig {
        &self.config
    }

    pub fn layer_ids(&self) -> &[(ParamId, ParamId); 3] {
        &self.layers
    }

    /// `rows: [M, in_dim]` → `[M, out_dim]`.
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, rows: Var) -> Result<Var> {
        let shape = g.shape(rows);
        if shape.len() != 2 || shape[1] != self.config.in_dim {
            return Err(Error::ShapeMismatch {
                expected: vec![shape.first().copied().unwrap_or(0), self.config.in_dim],
                actual: shape.to_vec(),
            });
        }
        let mut h = rows;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = (g.param(params, *w), g.param(params, *b));
            h = g.linear(h, wv, bv)?;
            if i < 2 {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}
