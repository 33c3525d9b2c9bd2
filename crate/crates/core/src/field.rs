//! Images, label masks and displacement fields on a regular voxel grid.
//!
//! A displacement field `u` of rank `d` is stored as `[d, S_1, .., S_d]`; channel
//! `i` holds the displacement along spatial axis `i`, in voxels. The deformation
//! is `φ(x) = x + u(x)`. Sample positions that leave the grid are clamped to the
//! border, so warping replicates edge values.

use crate::error::{Error, Result};
use crate::tensorio::{Tensor, TensorData};

/// Spatial shape of a 2-D or 3-D grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    shape: Vec<usize>,
}

impl Grid {
    pub fn new(shape: Vec<usize>) -> Result<Self> {
        if !(2..=3).contains(&shape.len()) {
            return Err(Error::UnsupportedRank(shape.len()));
        }
        if let Some(axis) = shape.iter().position(|&s| s == 0) {
            return Err(Error::DegenerateExtent { axis, extent: 0 });
        }
        Ok(Self { shape })
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major stride of each spatial axis.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.rank()];
        for a in (0..self.rank().saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * self.shape[a + 1];
        }
        strides
    }

    /// Multi-index of a flat voxel offset (unused trailing entries are 0).
    #[inline]
    pub fn coords(&self, mut v: usize) -> [usize; 3] {
        let mut c = [0; 3];
        for a in (0..self.rank()).rev() {
            c[a] = v % self.shape[a];
            v /= self.shape[a];
        }
        c
    }

    /// Euclidean length of the grid diagonal between the outermost voxel centres.
    pub fn diagonal(&self, spacing: &[f64]) -> f64 {
        self.shape
            .iter()
            .zip(spacing)
            .map(|(&s, &h)| ((s - 1) as f64 * h).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn check_same(&self, other: &Grid) -> Result<()> {
        if self != other {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpMode {
    Linear,
    Nearest,
}

/// Scalar intensity image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    grid: Grid,
    data: Vec<f64>,
}

impl Image {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: grid.shape().to_vec(),
                actual: vec![data.len()],
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("image"));
        }
        Ok(Self { grid, data })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let data = t.to_f64_vec().ok_or(Error::DType {
            expected: "f32 or f64",
            actual: t.dtype().name(),
        })?;
        Self::new(Grid::new(t.shape().to_vec())?, data)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f64(self.grid.shape().to_vec(), self.data.clone())
            .expect("image buffer matches its grid")
    }
}

/// Integer label map with optional per-voxel confidence of the assigned label.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMask {
    grid: Grid,
    labels: Vec<i32>,
    probs: Option<Vec<f64>>,
}

impl SegMask {
    pub fn new(grid: Grid, labels: Vec<i32>, probs: Option<Vec<f64>>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: grid.shape().to_vec(),
                actual: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l < 0) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                n: usize::MAX,
            });
        }
        if let Some(p) = &probs {
            if p.len() != grid.len() {
                return Err(Error::ShapeMismatch {
                    expected: grid.shape().to_vec(),
                    actual: vec![p.len()],
                });
            }
            if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::InvalidConfig(
                    "mask probabilities must lie in [0, 1]".into(),
                ));
            }
        }
        Ok(Self {
            grid,
            labels,
            probs,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn probs(&self) -> Option<&[f64]> {
        self.probs.as_deref()
    }

    pub fn with_probs(mut self, probs: Option<Vec<f64>>) -> Result<Self> {
        self.probs = None;
        Self::new(self.grid, self.labels, probs)
    }

    pub fn max_label(&self) -> i32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// One channel per label in `labels`, 1.0 where the voxel carries it.
    pub fn one_hot(&self, labels: &[i32]) -> Vec<f64> {
        let v = self.grid.len();
        let mut out = vec![0.0; labels.len() * v];
        for (c, &l) in labels.iter().enumerate() {
            for (o, &m) in out[c * v..(c + 1) * v].iter_mut().zip(&self.labels) {
                if m == l {
                    *o = 1.0;
                }
            }
        }
        out
    }

    pub fn from_tensors(labels: &Tensor, probs: Option<&Tensor>) -> Result<Self> {
        let grid = Grid::new(labels.shape().to_vec())?;
        let l = labels.to_i32_vec().ok_or(Error::DType {
            expected: "i32 or u8",
            actual: labels.dtype().name(),
        })?;
        let p = match probs {
            Some(t) => {
                if t.shape() != labels.shape() {
                    return Err(Error::ShapeMismatch {
                        expected: labels.shape().to_vec(),
                        actual: t.shape().to_vec(),
                    });
                }
                Some(t.to_f64_vec().ok_or(Error::DType {
                    expected: "f32 or f64",
                    actual: t.dtype().name(),
                })?)
            }
            None => None,
        };
        Self::new(grid, l, p)
    }

    pub fn labels_tensor(&self) -> Tensor {
        Tensor::from_i32(self.grid.shape().to_vec(), self.labels.clone())
            .expect("label buffer matches its grid")
    }

    pub fn probs_tensor(&self) -> Option<Tensor> {
        self.probs.as_ref().map(|p| {
            Tensor::from_f64(self.grid.shape().to_vec(), p.clone())
                .expect("prob buffer matches its grid")
        })
    }
}

/// Per-voxel displacement `u`, stored channel-major as `[d, S..]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    grid: Grid,
    data: Vec<f64>,
}

impl DisplacementField {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.rank() * grid.len() {
            let mut expected = vec![grid.rank()];
            expected.extend_from_slice(grid.shape());
            return Err(Error::ShapeMismatch {
                expected,
                actual: vec![data.len()],
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("displacement field"));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.rank() * grid.len();
        Self {
            grid,
            data: vec![0.0; n],
        }
    }

    /// Field with every voxel displaced by `c`.
    pub fn constant(grid: Grid, c: &[f64]) -> Result<Self> {
        if c.len() != grid.rank() {
            return Err(Error::ShapeMismatch {
                expected: vec![grid.rank()],
                actual: vec![c.len()],
            });
        }
        let v = grid.len();
        let data = c.iter().flat_map(|&x| std::iter::repeat_n(x, v)).collect();
        Self::new(grid, data)
    }

    /// Field sampled from a closure of the voxel multi-index.
    pub fn from_fn(grid: Grid, f: impl Fn(&[usize]) -> Vec<f64>) -> Result<Self> {
        let d = grid.rank();
        let v = grid.len();
        let mut data = vec![0.0; d * v];
        for idx in 0..v {
            let c = grid.coords(idx);
            let u = f(&c[..d]);
            for i in 0..d {
                data[i * v + idx] = u[i];
            }
        }
        Self::new(grid, data)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn rank(&self) -> usize {
        self.grid.rank()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn component(&self, i: usize) -> &[f64] {
        let v = self.grid.len();
        &self.data[i * v..(i + 1) * v]
    }

    /// Displacement vector at voxel `idx`.
    pub fn at(&self, idx: usize) -> Vec<f64> {
        let v = self.grid.len();
        (0..self.rank()).map(|i| self.data[i * v + idx]).collect()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// Largest displacement magnitude over the grid.
    pub fn max_norm(&self) -> f64 {
        (0..self.grid.len())
            .map(|idx| self.at(idx).iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = t.shape();
        if shape.len() < 3 || shape[0] != shape.len() - 1 {
            return Err(Error::ShapeMismatch {
                expected: vec![shape.len().saturating_sub(1)],
                actual: shape.to_vec(),
            });
        }
        let data = t.to_f64_vec().ok_or(Error::DType {
            expected: "f32 or f64",
            actual: t.dtype().name(),
        })?;
        Self::new(Grid::new(shape[1..].to_vec())?, data)
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut shape = vec![self.rank()];
        shape.extend_from_slice(self.grid.shape());
        Tensor::new(shape, TensorData::F64(self.data.clone())).expect("field buffer matches grid")
    }
}

/// Up to eight interpolation corners with weights and weight derivatives.
pub(crate) struct Corners {
    pub n: usize,
    pub idx: [usize; 8],
    pub w: [f64; 8],
    /// `dw[i][c]` = ∂w_c / ∂(displacement along axis i).
    pub dw: [[f64; 8]; 3],
}

/// Linear interpolation stencil at `base + disp` with border clamping.
#[inline]
pub(crate) fn linear_corners(
    shape: &[usize],
    strides: &[usize],
    base: &[usize; 3],
    disp: &[f64; 3],
) -> Corners {
    let d = shape.len();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0.0f64; 3];
    let mut active = [0.0f64; 3];
    for a in 0..d {
        let max = (shape[a] - 1) as f64;
        let p = base[a] as f64 + disp[a];
        let pc = p.clamp(0.0, max);
        let l = (pc.floor() as usize).min(shape[a] - 1);
        lo[a] = l;
        hi[a] = (l + 1).min(shape[a] - 1);
        t[a] = pc - l as f64;
        active[a] = if p >= 0.0 && p <= max { 1.0 } else { 0.0 };
    }
    let n = 1usize << d;
    let mut out = Corners {
        n,
        idx: [0; 8],
        w: [0.0; 8],
        dw: [[0.0; 8]; 3],
    };
    for c in 0..n {
        let mut idx = 0;
        let mut w = 1.0;
        for a in 0..d {
            let bit = (c >> (d - 1 - a)) & 1 == 1;
            idx += if bit { hi[a] } else { lo[a] } * strides[a];
            w *= if bit { t[a] } else { 1.0 - t[a] };
        }
        out.idx[c] = idx;
        out.w[c] = w;
        for a in 0..d {
            let mut g = active[a];
            if g == 0.0 {
                continue;
            }
            for b in 0..d {
                let bit = (c >> (d - 1 - b)) & 1 == 1;
                g *= if b == a {
                    if bit {
                        1.0
                    } else {
                        -1.0
                    }
                } else if bit {
                    t[b]
                } else {
                    1.0 - t[b]
                };
            }
            out.dw[a][c] = g;
        }
    }
    out
}

#[inline]
fn nearest_index(shape: &[usize], strides: &[usize], base: &[usize; 3], disp: &[f64; 3]) -> usize {
    let mut idx = 0;
    for a in 0..shape.len() {
        let max = (shape[a] - 1) as f64;
        let p = (base[a] as f64 + disp[a]).clamp(0.0, max).round() as usize;
        idx += p.min(shape[a] - 1) * strides[a];
    }
    idx
}

#[inline]
fn disp_at(field: &[f64], d: usize, v: usize, idx: usize) -> [f64; 3] {
    let mut u = [0.0; 3];
    for (i, ui) in u.iter_mut().enumerate().take(d) {
        *ui = field[i * v + idx];
    }
    u
}

/// `out[c](x) = src[c](x + u(x))` with linear interpolation.
pub(crate) fn sample_linear(grid: &Grid, src: &[f64], channels: usize, field: &[f64]) -> Vec<f64> {
    let v = grid.len();
    let d = grid.rank();
    let shape = grid.shape();
    let strides = grid.strides();
    let mut out = vec![0.0; channels * v];
    for idx in 0..v {
        let base = grid.coords(idx);
        let k = linear_corners(shape, &strides, &base, &disp_at(field, d, v, idx));
        for c in 0..channels {
            let s = &src[c * v..(c + 1) * v];
            let mut acc = 0.0;
            for j in 0..k.n {
                acc += k.w[j] * s[k.idx[j]];
            }
            out[c * v + idx] = acc;
        }
    }
    out
}

/// Backward of [`sample_linear`]: accumulates into whichever gradients are requested.
pub(crate) fn sample_linear_backward(
    grid: &Grid,
    src: &[f64],
    channels: usize,
    field: &[f64],
    grad_out: &[f64],
    mut grad_src: Option<&mut [f64]>,
    mut grad_field: Option<&mut [f64]>,
) {
    let v = grid.len();
    let d = grid.rank();
    let shape = grid.shape();
    let strides = grid.strides();
    for idx in 0..v {
        let base = grid.coords(idx);
        let k = linear_corners(shape, &strides, &base, &disp_at(field, d, v, idx));
        for c in 0..channels {
            let g = grad_out[c * v + idx];
            if g == 0.0 {
                continue;
            }
            if let Some(gs) = grad_src.as_deref_mut() {
                for j in 0..k.n {
                    gs[c * v + k.idx[j]] += k.w[j] * g;
                }
            }
            if let Some(gf) = grad_field.as_deref_mut() {
                let s = &src[c * v..(c + 1) * v];
                for a in 0..d {
                    let mut acc = 0.0;
                    for j in 0..k.n {
                        acc += k.dw[a][j] * s[k.idx[j]];
                    }
                    gf[a * v + idx] += acc * g;
                }
            }
        }
    }
}

fn sample_nearest<T: Copy>(grid: &Grid, src: &[T], field: &[f64]) -> Vec<T> {
    let v = grid.len();
    let d = grid.rank();
    let strides = grid.strides();
    (0..v)
        .map(|idx| {
            let base = grid.coords(idx);
            src[nearest_index(grid.shape(), &strides, &base, &disp_at(field, d, v, idx))]
        })
        .collect()
}

/// Resample `img` at `x + u(x)`.
pub fn warp_image(img: &Image, field: &DisplacementField, mode: InterpMode) -> Result<Image> {
    img.grid.check_same(&field.grid)?;
    let data = match mode {
        InterpMode::Linear => sample_linear(&img.grid, &img.data, 1, &field.data),
        InterpMode::Nearest => sample_nearest(&img.grid, &img.data, &field.data),
    };
    Ok(Image {
        grid: img.grid.clone(),
        data,
    })
}

/// Resample a label map with nearest-neighbour lookup; confidences follow their labels.
pub fn warp_mask(mask: &SegMask, field: &DisplacementField) -> Result<SegMask> {
    mask.grid.check_same(&field.grid)?;
    Ok(SegMask {
        grid: mask.grid.clone(),
        labels: sample_nearest(&mask.grid, &mask.labels, &field.data),
        probs: mask
            .probs
            .as_ref()
            .map(|p| sample_nearest(&mask.grid, p, &field.data)),
    })
}

/// Field of `φ_outer ∘ φ_inner`: `u_inner(x) + u_outer(x + u_inner(x))`.
pub fn compose(outer: &DisplacementField, inner: &DisplacementField) -> Result<DisplacementField> {
    outer.grid.check_same(&inner.grid)?;
    let d = outer.rank();
    let mut data = sample_linear(&outer.grid, &outer.data, d, &inner.data);
    for (o, i) in data.iter_mut().zip(&inner.data) {
        *o += i;
    }
    Ok(DisplacementField {
        grid: outer.grid.clone(),
        data,
    })
}

/// Derivative of a scalar channel along `axis`: central differences inside,
/// one-sided differences on boundary faces.
pub(crate) fn partial(grid: &Grid, f: &[f64], axis: usize, out: &mut [f64]) {
    let shape = grid.shape();
    let stride = grid.strides()[axis];
    let n = shape[axis];
    for (idx, o) in out.iter_mut().enumerate() {
        let k = (idx / stride) % n;
        *o = if k == 0 {
            f[idx + stride] - f[idx]
        } else if k == n - 1 {
            f[idx] - f[idx - stride]
        } else {
            0.5 * (f[idx + stride] - f[idx - stride])
        };
    }
}

pub(crate) fn check_extents(grid: &Grid) -> Result<()> {
    match grid.shape().iter().position(|&s| s < 2) {
        Some(axis) => Err(Error::DegenerateExtent {
            axis,
            extent: grid.shape()[axis],
        }),
        None => Ok(()),
    }
}

/// `∂u_i/∂x_j` as a tensor of shape `[d, d, S..]`.
pub fn spatial_gradient(u: &DisplacementField) -> Result<Tensor> {
    check_extents(&u.grid)?;
    let d = u.rank();
    let v = u.grid.len();
    let mut out = vec![0.0; d * d * v];
    for i in 0..d {
        for j in 0..d {
            let k = i * d + j;
            partial(&u.grid, u.component(i), j, &mut out[k * v..(k + 1) * v]);
        }
    }
    let mut shape = vec![d, d];
    shape.extend_from_slice(u.grid.shape());
    Ok(Tensor::from_f64(shape, out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid2(h: usize, w: usize) -> Grid {
        Grid::new(vec![h, w]).unwrap()
    }

    fn smooth_field(grid: &Grid, amp: f64, phase: f64) -> DisplacementField {
        let s = grid.shape().to_vec();
        DisplacementField::from_fn(grid.clone(), |c| {
            let y = c[0] as f64 / s[0] as f64;
            let x = c[1] as f64 / s[1] as f64;
            vec![
                amp * (2.0 * y + phase).sin() * (1.5 * x).cos(),
                amp * (1.7 * x - phase).cos() * (2.3 * y).sin(),
            ]
        })
        .unwrap()
    }

    /// Independent bilinear lookup used as an oracle.
    fn bilinear(img: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let ty = y - y0 as f64;
        let tx = x - x0 as f64;
        let at = |r: usize, c: usize| img[r * w + c];
        (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x1))
            + ty * ((1.0 - tx) * at(y1, x0) + tx * at(y1, x1))
    }

    #[test]
    fn zero_field_is_identity_for_both_modes() {
        let g = grid2(5, 7);
        let img = Image::new(g.clone(), (0..35).map(|i| (i as f64).sin()).collect()).unwrap();
        let zero = DisplacementField::zeros(g);
        for mode in [InterpMode::Linear, InterpMode::Nearest] {
            assert_eq!(warp_image(&img, &zero, mode).unwrap(), img);
        }
    }

    #[test]
    fn integer_shift_replicates_edge() {
        let g = grid2(4, 3);
        let data: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let img = Image::new(g.clone(), data.clone()).unwrap();
        let u = DisplacementField::constant(g, &[1.0, 0.0]).unwrap();
        let out = warp_image(&img, &u, InterpMode::Linear).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                assert_eq!(out.data()[r * 3 + c], data[(r + 1).min(3) * 3 + c]);
            }
        }
    }

    #[test]
    fn half_voxel_shift_of_ramp() {
        let g = grid2(4, 4);
        let img = Image::new(g.clone(), (0..16).map(|i| (i % 4) as f64 / 3.0).collect()).unwrap();
        let u = DisplacementField::constant(g, &[0.0, 0.5]).unwrap();
        let out = warp_image(&img, &u, InterpMode::Linear).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                let got = out.data()[r * 4 + c];
                assert!((got - (c as f64 + 0.5) / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn nearest_warp_of_mask_keeps_label_set() {
        let g = grid2(4, 4);
        let mask = SegMask::new(g.clone(), (0..16).map(|i| i % 3).collect(), None).unwrap();
        let u = smooth_field(&g, 1.3, 0.2);
        let out = warp_mask(&mask, &u).unwrap();
        assert!(out.labels().iter().all(|l| (0..3).contains(l)));
    }

    #[test]
    fn compose_with_zero_is_identity() {
        let g = grid2(16, 16);
        let f = smooth_field(&g, 1.5, 0.3);
        let zero = DisplacementField::zeros(g);
        assert_eq!(compose(&zero, &f).unwrap(), f);
        assert_eq!(compose(&f, &zero).unwrap(), f);
    }

    #[test]
    fn constant_fields_add() {
        let g = grid2(10, 10);
        let a = DisplacementField::constant(g.clone(), &[0.5, -1.0]).unwrap();
        let b = DisplacementField::constant(g.clone(), &[1.0, 0.25]).unwrap();
        let c = compose(&a, &b).unwrap();
        for idx in 0..g.len() {
            let [y, x, _] = g.coords(idx);
            if (2..8).contains(&y) && (2..8).contains(&x) {
                assert_eq!(c.at(idx), vec![1.5, -0.75]);
            }
        }
    }

    #[test]
    fn compose_matches_pointwise_oracle() {
        let g = grid2(16, 16);
        let outer = smooth_field(&g, 1.7, 0.1);
        let inner = smooth_field(&g, 1.2, 1.4);
        let c = compose(&outer, &inner).unwrap();
        for idx in 0..g.len() {
            let [y, x, _] = g.coords(idx);
            let ui = inner.at(idx);
            let (py, px) = (y as f64 + ui[0], x as f64 + ui[1]);
            for i in 0..2 {
                let expect = ui[i] + bilinear(outer.component(i), 16, 16, py, px);
                assert!((c.component(i)[idx] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn compose_is_nearly_associative() {
        let g = grid2(16, 16);
        let a = smooth_field(&g, 0.3, 0.1);
        let b = smooth_field(&g, 0.25, 0.9);
        let c = smooth_field(&g, 0.35, 2.0);
        let left = compose(&a, &compose(&b, &c).unwrap()).unwrap();
        let right = compose(&compose(&a, &b).unwrap(), &c).unwrap();
        // Associativity only holds up to interpolation error, which scales
        // with displacement size times field curvature (the affine case below
        // is exact). Bilinear error is at most |∂²u|/8 per lookup; these
        // fields have |∂²u| ≲ 0.03 and each side performs two lookups.
        let mut worst: f64 = 0.0;
        for idx in 0..g.len() {
            if interior(&g, idx, 3) {
                for i in 0..2 {
                    worst = worst.max((left.component(i)[idx] - right.component(i)[idx]).abs());
                }
            }
        }
        assert!(worst < 2.0 * 2.0 * 0.03 / 8.0, "{worst}");
        assert!(worst > 1e-6, "smooth fields are expected to show interpolation error");
    }

    fn affine_field(grid: &Grid, a: [[f64; 2]; 2], b: [f64; 2]) -> DisplacementField {
        DisplacementField::from_fn(grid.clone(), |c| {
            let (y, x) = (c[0] as f64 - 8.0, c[1] as f64 - 8.0);
            (0..2).map(|i| a[i][0] * y + a[i][1] * x + b[i]).collect()
        })
        .unwrap()
    }

    fn interior(grid: &Grid, idx: usize, margin: usize) -> bool {
        let c = grid.coords(idx);
        (0..2).all(|a| c[a] >= margin && c[a] + margin < grid.shape()[a])
    }

    #[test]
    fn compose_of_affine_fields_is_associative() {
        // Bilinear interpolation reproduces affine fields, so the only error
        // source left is border clamping; the interior must agree to 1e-6.
        let g = grid2(16, 16);
        let a = affine_field(&g, [[0.05, -0.02], [0.03, 0.04]], [0.5, -0.3]);
        let b = affine_field(&g, [[-0.04, 0.01], [0.02, -0.03]], [-0.2, 0.6]);
        let c = affine_field(&g, [[0.02, 0.03], [-0.05, 0.01]], [0.4, 0.1]);
        let left = compose(&a, &compose(&b, &c).unwrap()).unwrap();
        let right = compose(&compose(&a, &b).unwrap(), &c).unwrap();
        let img = Image::new(g.clone(), (0..256).map(|i| ((i * 7) % 13) as f64).collect()).unwrap();
        let twice = warp_image(
            &warp_image(&img, &c, InterpMode::Linear).unwrap(),
            &a,
            InterpMode::Linear,
        )
        .unwrap();
        let ramp = Image::new(
            g.clone(),
            (0..256).map(|i| 0.3 * (i / 16) as f64 - 0.1 * (i % 16) as f64).collect(),
        )
        .unwrap();
        let ramp_twice = warp_image(
            &warp_image(&ramp, &c, InterpMode::Linear).unwrap(),
            &a,
            InterpMode::Linear,
        )
        .unwrap();
        let ramp_once = warp_image(&ramp, &compose(&c, &a).unwrap(), InterpMode::Linear).unwrap();
        assert!(twice.data().iter().all(|x| x.is_finite()));
        for idx in 0..g.len() {
            if interior(&g, idx, 4) {
                for i in 0..2 {
                    assert!((left.component(i)[idx] - right.component(i)[idx]).abs() < 1e-6);
                }
                assert!((ramp_twice.data()[idx] - ramp_once.data()[idx]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn warp_twice_matches_warp_by_composition() {
        let g = grid2(16, 16);
        let img = Image::new(
            g.clone(),
            (0..256)
                .map(|i| ((i / 16) as f64 * 0.1).sin() + (i % 16) as f64 * 0.05)
                .collect(),
        )
        .unwrap();
        let f1 = smooth_field(&g, 0.4, 0.3);
        let f2 = smooth_field(&g, 0.3, 1.1);
        let twice = warp_image(
            &warp_image(&img, &f2, InterpMode::Linear).unwrap(),
            &f1,
            InterpMode::Linear,
        )
        .unwrap();
        let once = warp_image(&img, &compose(&f1, &f2).unwrap(), InterpMode::Linear).unwrap();
        let err = twice
            .data()
            .iter()
            .zip(once.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-2, "{err}");
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let g = grid2(6, 5);
        let u = DisplacementField::constant(g, &[2.0, -3.0]).unwrap();
        let t = spatial_gradient(&u).unwrap();
        assert!(t.as_f64().unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_of_affine_field_is_exact() {
        let g = Grid::new(vec![5, 6, 7]).unwrap();
        let a = [[0.1, -0.2, 0.3], [0.5, 0.0, -0.4], [0.25, 0.125, 1.0]];
        let u = DisplacementField::from_fn(g.clone(), |c| {
            (0..3)
                .map(|i| (0..3).map(|j| a[i][j] * c[j] as f64).sum::<f64>() + 1.0)
                .collect()
        })
        .unwrap();
        let t = spatial_gradient(&u).unwrap();
        assert_eq!(t.shape(), &[3, 3, 5, 6, 7]);
        let data = t.as_f64().unwrap();
        let v = g.len();
        for i in 0..3 {
            for j in 0..3 {
                for idx in 0..v {
                    assert!((data[(i * 3 + j) * v + idx] - a[i][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradient_matches_difference_oracle() {
        let g = grid2(8, 8);
        let u = smooth_field(&g, 2.0, 0.7);
        let t = spatial_gradient(&u).unwrap();
        let data = t.as_f64().unwrap();
        let at = |i: usize, y: isize, x: isize| u.component(i)[(y * 8 + x) as usize];
        for i in 0..2 {
            for y in 0..8isize {
                for x in 0..8isize {
                    let dy = match y {
                        0 => at(i, 1, x) - at(i, 0, x),
                        7 => at(i, 7, x) - at(i, 6, x),
                        _ => (at(i, y + 1, x) - at(i, y - 1, x)) / 2.0,
                    };
                    let dx = match x {
                        0 => at(i, y, 1) - at(i, y, 0),
                        7 => at(i, y, 7) - at(i, y, 6),
                        _ => (at(i, y, x + 1) - at(i, y, x - 1)) / 2.0,
                    };
                    let idx = (y * 8 + x) as usize;
                    assert!((data[(i * 2) * 64 + idx] - dy).abs() < 1e-14);
                    assert!((data[(i * 2 + 1) * 64 + idx] - dx).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn degenerate_extent_rejected() {
        let g = grid2(1, 4);
        let u = DisplacementField::zeros(g);
        assert!(matches!(
            spatial_gradient(&u),
            Err(Error::DegenerateExtent { axis: 0, .. })
        ));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let img = Image::new(grid2(3, 3), vec![0.0; 9]).unwrap();
        let u = DisplacementField::zeros(grid2(3, 4));
        assert!(matches!(
            warp_image(&img, &u, InterpMode::Linear),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn trilinear_reproduces_affine_function() {
        let g = Grid::new(vec![4, 5, 6]).unwrap();
        let img = Image::new(
            g.clone(),
            (0..g.len())
                .map(|i| {
                    let c = g.coords(i);
                    0.5 * c[0] as f64 - 0.25 * c[1] as f64 + 0.125 * c[2] as f64
                })
                .collect(),
        )
        .unwrap();
        let u = DisplacementField::constant(g.clone(), &[0.3, 0.6, -0.45]).unwrap();
        let out = warp_image(&img, &u, InterpMode::Linear).unwrap();
        for idx in 0..g.len() {
            let c = g.coords(idx);
            if c[0] < 3 && (1..4).contains(&c[1]) && c[2] >= 1 {
                let expect = 0.5 * (c[0] as f64 + 0.3) - 0.25 * (c[1] as f64 + 0.6)
                    + 0.125 * (c[2] as f64 - 0.45);
                assert!((out.data()[idx] - expect).abs() < 1e-12);
            }
        }
    }
}
