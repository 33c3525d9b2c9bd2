//! Deformable image registration with region-conditioned, spatially covariant
//! filters derived from text embeddings of anatomical labels.
//!
//! A convolutional encoder-decoder produces a feature map from the moving and
//! fixed images. A small MLP maps each label's embedding to a filter; at each
//! voxel the filter of the label found in the fixed segmentation is blended
//! with a shared uniform filter by the mask's confidence, and the dot product
//! with the features gives the displacement.
//!
//! ```
//! use scfreg_core::{embeddings::one_hot_embeddings, field::{Grid, Image, SegMask}};
//! use scfreg_core::scf::{ModelConfig, ScfModel};
//! use scfreg_core::nn::BackboneConfig;
//!
//! let cfg = ModelConfig {
//!     backbone: BackboneConfig { start_channels: 2, levels: 2, out_channels: 4, ..Default::default() },
//!     mlp_hidden: 8,
//!     ..Default::default()
//! };
//! let model = ScfModel::new(cfg, one_hot_embeddings(3).unwrap(), 0).unwrap();
//! let grid = Grid::new(vec![8, 8]).unwrap();
//! let img = Image::new(grid.clone(), vec![0.5; 64]).unwrap();
//! let seg = SegMask::new(grid, vec![1; 64], None).unwrap();
//! let u = model.register(&img, &img, &seg).unwrap();
//! assert!(u.data().iter().all(|&v| v == 0.0)); // heads start at zero
//! ```

pub mod diffeo;
pub mod embeddings;
pub mod error;
pub mod field;
pub mod metrics;
pub mod nn;
pub mod scf;
pub mod synth;
pub mod tensorio;
pub mod train;

pub use error::{Error, Result};

// The guide in book/ is compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/fields.md")]
    mod fields {}
    #[doc = include_str!("../../../book/src/diffeo.md")]
    mod diffeo {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/embeddings.md")]
    mod embeddings {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
