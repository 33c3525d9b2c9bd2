//! Full registration model: backbone features, per-region filters from the
//! implicit MLP, confidence blending with a uniform filter, optional
//! diffeomorphic integration.
//!
//! The MLP is evaluated once per embedding row, not per voxel; the per-voxel
//! filter is a lookup by region index. After training the filter bank can be
//! cached, at which point the mask branch costs nothing at inference.

use std::fs;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::diffeo::DEFAULT_STEPS;
use crate::embeddings::{conditioning_from_mask, load_embeddings, save_embeddings, EmbeddingMatrix, VoxelConditioning};
use crate::error::{Error, Result};
use crate::field::{DisplacementField, Grid, Image, SegMask};
use crate::nn::{init_parameters, Backbone, BackboneConfig, Graph, ImplicitMlp, ImplicitMlpConfig, Init, ParamId, ParamSet, Var};

/// How the filter at each voxel is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Region filter blended with the uniform filter by mask confidence.
    #[default]
    Textscf,
    /// Confidence forced to zero: a plain translation-invariant head.
    UniformOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Hidden width of the implicit MLP (second hidden layer is twice this).
    pub mlp_hidden: usize,
    pub use_integration: bool,
    pub integration_steps: u32,
    #[serde(default)]
    pub head: HeadMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            mlp_hidden: 256,
            use_integration: false,
            integration_steps: DEFAULT_STEPS,
            head: HeadMode::Textscf,
        }
    }
}

impl ModelConfig {
    pub fn mlp_config(&self, embedding_dim: usize) -> Result<ImplicitMlpConfig> {
        ImplicitMlpConfig::new(
            embedding_dim,
            self.mlp_hidden,
            self.backbone.out_channels * self.backbone.rank,
        )
    }
}

/// Per-region filters `[N, C2, d]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub n_regions: usize,
    pub channels: usize,
    pub rank: usize,
    pub weights: Vec<f64>,
}

impl FilterBank {
    /// Filter of region `r` as `[C2, d]`.
    pub fn region(&self, r: usize) -> &[f64] {
        let k = self.channels * self.rank;
        &self.weights[r * k..(r + 1) * k]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.n_regions, self.channels, self.rank]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub backbone_params: usize,
    pub mlp_params: usize,
    pub uniform_filter_params: usize,
    pub param_count: usize,
    pub backbone_mult_adds: usize,
    pub displace_mult_adds: usize,
    /// `N` MLP evaluations; paid once per forward unless the filters are cached.
    pub region_filter_mult_adds: usize,
    pub mult_adds: usize,
    /// Multiply-adds of the mask branch at inference with a cached filter bank.
    pub scf_inference_overhead: usize,
    pub n_regions: usize,
    pub shape: Vec<usize>,
}

/// Metadata stored as `model.json` in a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub parameters: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ScfModel {
    config: ModelConfig,
    params: ParamSet,
    backbone: Backbone,
    mlp: ImplicitMlp,
    uniform: ParamId,
    embedding: EmbeddingMatrix,
    seed: u64,
    epoch: usize,
    cached: Option<FilterBank>,
}

impl ScfModel {
    /// Build and initialise a model; displacement heads start at zero.
    pub fn new(config: ModelConfig, embedding: EmbeddingMatrix, seed: u64) -> Result<Self> {
        if config.integration_steps == 0 {
            return Err(Error::InvalidConfig("integration steps must be >= 1".into()));
        }
        let mut params = ParamSet::new();
        let backbone = Backbone::register(config.backbone.clone(), &mut params)?;
        let mlp = ImplicitMlp::register(config.mlp_config(embedding.dim())?, &mut params)?;
        let uniform = params.add(
            "uniform_filter",
            vec![config.backbone.out_channels, config.backbone.rank],
            Init::Zero,
        )?;
        init_parameters(&mut params, seed);
        Ok(Self {
            config,
            params,
            backbone,
            mlp,
            uniform,
            embedding,
            seed,
            epoch: 0,
            cached: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable access drops any cached filter bank.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.cached = None;
        &mut self.params
    }

    pub fn embedding(&self) -> &EmbeddingMatrix {
        &self.embedding
    }

    /// Swap in a different embedding of the same width (e.g. with an added region).
    pub fn set_embedding(&mut self, embedding: EmbeddingMatrix) -> Result<()> {
        if embedding.dim() != self.embedding.dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.embedding.dim()],
                actual: vec![embedding.dim()],
            });
        }
        self.embedding = embedding;
        self.cached = None;
        Ok(())
    }

    pub fn n_regions(&self) -> usize {
        self.embedding.n_regions()
    }

    pub fn rank(&self) -> usize {
        self.config.backbone.rank
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn set_integration(&mut self, on: bool) {
        self.config.use_integration = on;
    }

    pub fn head_mode(&self) -> HeadMode {
        self.config.head
    }

    pub fn set_head_mode(&mut self, head: HeadMode) {
        self.config.head = head;
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn mlp(&self) -> &ImplicitMlp {
        &self.mlp
    }

    pub fn uniform_filter_id(&self) -> ParamId {
        self.uniform
    }

    /// Ids of the backbone, MLP and uniform-filter parameters, in that grouping.
    pub fn parameter_groups(&self) -> [Vec<ParamId>; 3] {
        let bb = self.backbone.layers().flat_map(|(_, w, b)| [*w, *b]).collect();
        let mlp = self.mlp.layer_ids().iter().flat_map(|(w, b)| [*w, *b]).collect();
        [bb, mlp, vec![self.uniform]]
    }

    fn filters_on(&self, g: &mut Graph) -> Result<Var> {
        let e = &self.embedding;
        let rows = g.input(vec![e.n_regions(), e.dim()], e.data().to_vec())?;
        self.mlp.forward(g, &self.params, rows)
    }

    /// One MLP evaluation per embedding row.
    pub fn region_filters(&self) -> Result<FilterBank> {
        if let Some(c) = &self.cached {
            return Ok(c.clone());
        }
        let mut g = Graph::new();
        let w = self.filters_on(&mut g)?;
        Ok(FilterBank {
            n_regions: self.n_regions(),
            channels: self.config.backbone.out_channels,
            rank: self.rank(),
            weights: g.value(w).to_vec(),
        })
    }

    /// Compute and keep the filter bank for repeated inference.
    pub fn cache_filters(&mut self) -> Result<()> {
        self.cached = None;
        self.cached = Some(self.region_filters()?);
        Ok(())
    }

    pub fn has_cached_filters(&self) -> bool {
        self.cached.is_some()
    }

    pub fn conditioning(&self, fixed_seg: &SegMask) -> Result<VoxelConditioning> {
        let cond = conditioning_from_mask(fixed_seg, self.n_regions())?;
        Ok(match self.config.head {
            HeadMode::Textscf => cond,
            HeadMode::UniformOnly => cond.with_uniform_confidence(0.0),
        })
    }

    fn image_input(g: &mut Graph, img: &Image) -> Result<Var> {
        let mut shape = vec![1];
        shape.extend_from_slice(img.grid().shape());
        g.input(shape, img.data().to_vec())
    }

    /// Backbone features for a pair, recorded on `g`.
    pub fn features(&self, g: &mut Graph, moving: &Image, fixed: &Image) -> Result<Var> {
        moving.grid().check_same(fixed.grid())?;
        if fixed.grid().rank() != self.rank() {
            return Err(Error::UnsupportedRank(fixed.grid().rank()));
        }
        let m = Self::image_input(g, moving)?;
        let f = Self::image_input(g, fixed)?;
        self.backbone.forward(g, &self.params, m, f, fixed.grid())
    }

    /// Blend region and uniform filters per voxel and contract with the features.
    pub fn displace(&self, g: &mut Graph, features: Var, cond: Rc<VoxelConditioning>) -> Result<Var> {
        let filters = match &self.cached {
            Some(bank) => g.input(vec![bank.n_regions, bank.channels * bank.rank], bank.weights.clone())?,
            None => self.filters_on(g)?,
        };
        let uniform = g.param(&self.params, self.uniform);
        g.displace(features, filters, uniform, cond)
    }

    /// Record the whole forward pass; returns the displacement node `[d, S..]`.
    pub fn forward_graph(&self, g: &mut Graph, moving: &Image, fixed: &Image, fixed_seg: &SegMask) -> Result<Var> {
        fixed.grid().check_same(fixed_seg.grid())?;
        let cond = Rc::new(self.conditioning(fixed_seg)?);
        let features = self.features(g, moving, fixed)?;
        let v = self.displace(g, features, cond)?;
        if self.config.use_integration {
            g.integrate(v, self.config.integration_steps, fixed.grid())
        } else {
            Ok(v)
        }
    }

    /// Displacement mapping fixed voxels into the moving image.
    pub fn register(&self, moving: &Image, fixed: &Image, fixed_seg: &SegMask) -> Result<DisplacementField> {
        let mut g = Graph::new();
        let u = self.forward_graph(&mut g, moving, fixed, fixed_seg)?;
        DisplacementField::new(fixed.grid().clone(), g.value(u).to_vec())
    }

    pub fn complexity_report(&self, shape: &[usize]) -> Result<ComplexityReport> {
        complexity(&self.config, self.embedding.dim(), self.n_regions(), shape, self.cached.is_some())
    }

    /// Write parameters, embedding and `model.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save(dir)?;
        save_embeddings(&dir.join("embedding"), &self.embedding)?;
        let meta = CheckpointMeta {
            config: self.config.clone(),
            seed: self.seed,
            epoch: self.epoch,
            parameters: self.params.iter().map(|p| p.name.clone()).collect(),
        };
        let path = dir.join("model.json");
        let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let embedding = load_embeddings(&dir.join("embedding"))?;
        let mut model = Self::new(meta.config, embedding, meta.seed)?;
        model.params.load(dir)?;
        model.epoch = meta.epoch;
        Ok(model)
    }
}

/// Parameter and multiply-add counts from the configuration alone.
pub fn complexity(
    config: &ModelConfig,
    embedding_dim: usize,
    n_regions: usize,
    shape: &[usize],
    cached: bool,
) -> Result<ComplexityReport> {
    let bb = &config.backbone;
    bb.validate()?;
    let mlp = config.mlp_config(embedding_dim)?;
    let grid = Grid::new(shape.to_vec())?;
    let backbone_mult_adds = bb.mult_adds(shape)?;
    let uniform = bb.out_channels * bb.rank;
    // blend (2 per filter entry) + contraction (1 per entry) per voxel
    let displace_mult_adds = grid.len() * 3 * uniform;
    let region_filter_mult_adds = mlp.mult_adds(n_regions);
    let overhead = if cached { 0 } else { region_filter_mult_adds };
    let (bp, mp) = (bb.param_count(), mlp.param_count());
    Ok(ComplexityReport {
        backbone_params: bp,
        mlp_params: mp,
        uniform_filter_params: uniform,
        param_count: bp + mp + uniform,
        backbone_mult_adds,
        displace_mult_adds,
        region_filter_mult_adds,
        mult_adds: backbone_mult_adds + displace_mult_adds + overhead,
        scf_inference_overhead: overhead,
        n_regions,
        shape: shape.to_vec(),
    })
}
