//! Tape-based reverse-mode differentiation over dense f64 buffers.
//!
//! Every operation appends a node holding its output value; [`Graph::backward`]
//! walks the tape in reverse, accumulates gradients, adds the gradients of
//! parameter leaves into their [`Parameter`](super::Parameter)s and clears the
//! tape. Reductions run in a fixed order, so results do not depend on thread
//! scheduling.

use std::rc::Rc;

use crate::embeddings::VoxelConditioning;
use crate::error::{Error, Result};
use crate::field::{sample_linear, sample_linear_backward, Grid};

use super::conv::{conv_backward, conv_forward, ConvGeom};
use super::{ParamId, ParamSet};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    Upsample {
        input: Var,
        channels: usize,
        in_dims: [usize; 3],
        out_dims: [usize; 3],
    },
    Concat {
        a: Var,
        b: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Displace {
        features: Var,
        filters: Var,
        uniform: Var,
        cond: Rc<VoxelConditioning>,
    },
    Sample {
        src: Var,
        field: Var,
        grid: Grid,
        channels: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        s: f64,
    },
    Mse {
        a: Var,
        b: Var,
    },
    SoftDice {
        pred: Var,
        target: Var,
        channels: usize,
        eps: f64,
    },
    GradReg {
        u: Var,
        grid: Grid,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_shape(&self, v: Var, expected: &[usize]) -> Result<()> {
        if self.shape(v) != expected {
            return Err(Error::ShapeMismatch {
                expected: expected.to_vec(),
                actual: self.shape(v).to_vec(),
            });
        }
        Ok(())
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: vec![data.len()],
            });
        }
        Ok(self.push(data, shape, Op::Input, false))
    }

    /// Trainable leaf holding a copy of the parameter value.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let p = params.get(id);
        self.push(p.value.clone(), p.shape.clone(), Op::Param(id), true)
    }

    /// Convolution of a `[c_in, S..]` map.
    pub fn conv(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeom) -> Result<Var> {
        if self.value(input).len() != geom.cin * geom.in_len() {
            return Err(Error::ShapeMismatch {
                expected: vec![geom.cin, geom.in_len()],
                actual: self.shape(input).to_vec(),
            });
        }
        if self.value(weight).len() != geom.weight_len() || self.value(bias).len() != geom.cout {
            return Err(Error::ShapeMismatch {
                expected: vec![geom.weight_len(), geom.cout],
                actual: vec![self.value(weight).len(), self.value(bias).len()],
            });
        }
        let out = conv_forward(&geom, self.value(input), self.value(weight), self.value(bias));
        let rank = self.shape(input).len() - 1;
        let mut shape = vec![geom.cout];
        shape.extend_from_slice(&geom.out_dims[3 - rank..]);
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            out,
            shape,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let out = self
            .value(input)
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(input);
        self.push(out, shape, Op::LeakyRelu { input, slope }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.leaky_relu(input, 0.0)
    }

    /// Nearest-neighbour ×2 upsampling of a `[C, S..]` map along every spatial axis.
    pub fn upsample2(&mut self, input: Var) -> Var {
        let shape = self.shape(input).to_vec();
        let channels = shape[0];
        let in_dims = super::conv::dims3(&shape[1..]);
        let rank = shape.len() - 1;
        let mut out_dims = in_dims;
        for d in out_dims.iter_mut().skip(3 - rank) {
            *d *= 2;
        }
        let (il, ol) = (
            in_dims.iter().product::<usize>(),
            out_dims.iter().product::<usize>(),
        );
        let x = self.value(input);
        let mut out = vec![0.0; channels * ol];
        for c in 0..channels {
            for z in 0..out_dims[0] {
                let iz = z * in_dims[0] / out_dims[0];
                for y in 0..out_dims[1] {
                    let iy = y / 2;
                    let orow = ((c * out_dims[0] + z) * out_dims[1] + y) * out_dims[2];
                    let irow = c * il + (iz * in_dims[1] + iy) * in_dims[2];
                    for xx in 0..out_dims[2] {
                        out[orow + xx] = x[irow + xx / 2];
                    }
                }
            }
        }
        debug_assert_eq!(out.len(), channels * ol);
        let mut out_shape = vec![channels];
        out_shape.extend_from_slice(&out_dims[3 - rank..]);
        let rg = self.rg(input);
        self.push(
            out,
            out_shape,
            Op::Upsample {
                input,
                channels,
                in_dims,
                out_dims,
            },
            rg,
        )
    }

    /// Channel-axis concatenation of two maps with equal spatial shape.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa[1..] != sb[1..] {
            return Err(Error::ShapeMismatch {
                expected: sa,
                actual: sb,
            });
        }
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, Op::Concat { a, b }, rg))
    }

    /// `y = x Wᵀ + b` for `x: [M, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.shape(bias) != [ws[0]] {
            return Err(Error::ShapeMismatch {
                expected: ws,
                actual: xs,
            });
        }
        let (m, k, n) = (xs[0], xs[1], ws[0]);
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let xr = &x[r * k..(r + 1) * k];
            for o in 0..n {
                out[r * n + o] = b[o]
                    + w[o * k..(o + 1) * k]
                        .iter()
                        .zip(xr)
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            out,
            vec![m, n],
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Region-conditioned displacement synthesis.
    ///
    /// `features: [C2, S..]`, `filters: [N, C2·d]` (row-major `[C2, d]` per
    /// region), `uniform: [C2·d]`. At voxel `x` with region `r` and confidence
    /// `p`, `u(x) = (p·W[r] + (1−p)·w_r)ᵀ F(x)`. Output `[d, S..]`.
    pub fn displace(
        &mut self,
        features: Var,
        filters: Var,
        uniform: Var,
        cond: Rc<VoxelConditioning>,
    ) -> Result<Var> {
        let grid = cond.grid().clone();
        let (d, v) = (grid.rank(), grid.len());
        let fs = self.shape(features).to_vec();
        if fs[1..] != *grid.shape() {
            return Err(Error::ShapeMismatch {
                expected: grid.shape().to_vec(),
                actual: fs[1..].to_vec(),
            });
        }
        let c2 = fs[0];
        let n = self.shape(filters)[0];
        self.check_shape(filters, &[n, c2 * d])?;
        if self.value(uniform).len() != c2 * d {
            return Err(Error::ShapeMismatch {
                expected: vec![c2 * d],
                actual: self.shape(uniform).to_vec(),
            });
        }
        if let Some(&bad) = cond.region_index().iter().find(|&&r| r < 0 || r as usize >= n) {
            return Err(Error::LabelOutOfRange { label: bad, n });
        }
        let (f, w, wr) = (self.value(features), self.value(filters), self.value(uniform));
        let mut out = vec![0.0; d * v];
        let mut weff = vec![0.0; c2 * d];
        for x in 0..v {
            let r = cond.region_index()[x] as usize;
            let p = cond.confidence()[x];
            let wrow = &w[r * c2 * d..(r + 1) * c2 * d];
            for ((e, &a), &b) in weff.iter_mut().zip(wrow).zip(wr) {
                *e = p * a + (1.0 - p) * b;
            }
            for j in 0..d {
                let mut acc = 0.0;
                for c in 0..c2 {
                    acc += weff[c * d + j] * f[c * v + x];
                }
                out[j * v + x] = acc;
            }
        }
        let mut shape = vec![d];
        shape.extend_from_slice(grid.shape());
        let rg = self.rg(features) || self.rg(filters) || self.rg(uniform);
        Ok(self.push(
            out,
            shape,
            Op::Displace {
                features,
                filters,
                uniform,
                cond,
            },
            rg,
        ))
    }

    /// `out[c](x) = src[c](x + u(x))`, linear interpolation with border clamping.
    pub fn sample(&mut self, src: Var, field: Var, grid: &Grid) -> Result<Var> {
        let v = grid.len();
        let mut fshape = vec![grid.rank()];
        fshape.extend_from_slice(grid.shape());
        self.check_shape(field, &fshape)?;
        let sshape = self.shape(src).to_vec();
        if sshape.len() != grid.rank() + 1 || sshape[1..] != *grid.shape() {
            return Err(Error::ShapeMismatch {
                expected: fshape,
                actual: sshape,
            });
        }
        let channels = sshape[0];
        let out = sample_linear(grid, self.value(src), channels, self.value(field));
        debug_assert_eq!(out.len(), channels * v);
        let rg = self.rg(src) || self.rg(field);
        Ok(self.push(
            out,
            sshape,
            Op::Sample {
                src,
                field,
                grid: grid.clone(),
                channels,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        self.check_shape(b, &sa)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, sa, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, s: f64) -> Var {
        let out = self.value(input).iter().map(|x| x * s).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(input);
        self.push(out, shape, Op::Scale { input, s }, rg)
    }

    /// Field of `φ_outer ∘ φ_inner`.
    pub fn compose(&mut self, outer: Var, inner: Var, grid: &Grid) -> Result<Var> {
        let sampled = self.sample(outer, inner, grid)?;
        self.add(inner, sampled)
    }

    /// Scaling and squaring, unrolled on the tape.
    pub fn integrate(&mut self, velocity: Var, steps: u32, grid: &Grid) -> Result<Var> {
        if steps == 0 {
            return Err(Error::InvalidConfig("integration steps must be >= 1".into()));
        }
        let mut u = self.scale(velocity, 0.5f64.powi(steps as i32));
        for _ in 0..steps {
            u = self.compose(u, u, grid)?;
        }
        Ok(u)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        self.check_shape(b, &sa)?;
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![s / n], vec![1], Op::Mse { a, b }, rg))
    }

    /// `1 − mean_ℓ (2Σ pℓ tℓ + ε)/(Σ pℓ + Σ tℓ + ε)` over the leading channel axis.
    pub fn soft_dice_loss(&mut self, pred: Var, target: Var, eps: f64) -> Result<Var> {
        let sp = self.shape(pred).to_vec();
        self.check_shape(target, &sp)?;
        let channels = sp[0];
        if channels == 0 {
            return Err(Error::Empty("label set"));
        }
        let v = self.value(pred).len() / channels;
        let (p, t) = (self.value(pred), self.value(target));
        let mut total = 0.0;
        for c in 0..channels {
            let (pc, tc) = (&p[c * v..(c + 1) * v], &t[c * v..(c + 1) * v]);
            let inter: f64 = pc.iter().zip(tc).map(|(a, b)| a * b).sum();
            let den = pc.iter().sum::<f64>() + tc.iter().sum::<f64>() + eps;
            total += (2.0 * inter + eps) / den;
        }
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(
            vec![1.0 - total / channels as f64],
            vec![1],
            Op::SoftDice {
                pred,
                target,
                channels,
                eps,
            },
            rg,
        ))
    }

    /// `(1/d²) Σ_i Σ_j mean_x (u_i(x + e_j) − u_i(x))²` with forward differences.
    pub fn grad_reg(&mut self, u: Var, grid: &Grid) -> Result<Var> {
        crate::field::check_extents(grid)?;
        let mut fshape = vec![grid.rank()];
        fshape.extend_from_slice(grid.shape());
        self.check_shape(u, &fshape)?;
        let value = grad_reg_value(grid, self.value(u));
        let rg = self.rg(u);
        Ok(self.push(
            vec![value],
            vec![1],
            Op::GradReg {
                u,
                grid: grid.clone(),
            },
            rg,
        ))
    }

    /// Back-propagate from a scalar node, add parameter gradients into
    /// `params`, then clear the tape.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::StaleGraph);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            if let Op::Param(id) = self.nodes[i].op {
                let p = params.get_mut(id);
                for (a, b) in p.grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
        self.nodes.clear();
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.as_slice();
        match &nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            } => {
                acc(*input, &|buf| {
                    conv_backward(geom, val(*input), val(*weight), g, Some(buf), None, None)
                });
                acc(*weight, &|buf| {
                    conv_backward(geom, val(*input), val(*weight), g, None, Some(buf), None)
                });
                acc(*bias, &|buf| {
                    conv_backward(geom, val(*input), val(*weight), g, None, None, Some(buf))
                });
            }
            Op::LeakyRelu { input, slope } => acc(*input, &|buf| {
                for ((b, &x), &gg) in buf.iter_mut().zip(val(*input)).zip(g) {
                    *b += if x > 0.0 { gg } else { slope * gg };
                }
            }),
            Op::Upsample {
                input,
                channels,
                in_dims,
                out_dims,
            } => acc(*input, &|buf| {
                let il: usize = in_dims.iter().product();
                for c in 0..*channels {
                    for z in 0..out_dims[0] {
                        let iz = z * in_dims[0] / out_dims[0];
                        for y in 0..out_dims[1] {
                            let orow = ((c * out_dims[0] + z) * out_dims[1] + y) * out_dims[2];
                            let irow = c * il + (iz * in_dims[1] + y / 2) * in_dims[2];
                            for xx in 0..out_dims[2] {
                                buf[irow + xx / 2] += g[orow + xx];
                            }
                        }
                    }
                }
            }),
            Op::Concat { a, b } => {
                let na = val(*a).len();
                acc(*a, &|buf| add_into(buf, &g[..na]));
                acc(*b, &|buf| add_into(buf, &g[na..]));
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (m, k) = (nodes[input.0].shape[0], nodes[input.0].shape[1]);
                let n = nodes[weight.0].shape[0];
                let (x, w) = (val(*input), val(*weight));
                acc(*input, &|buf| {
                    for r in 0..m {
                        for o in 0..n {
                            let go = g[r * n + o];
                            for (b, &wv) in buf[r * k..(r + 1) * k].iter_mut().zip(&w[o * k..(o + 1) * k]) {
                                *b += go * wv;
                            }
                        }
                    }
                });
                acc(*weight, &|buf| {
                    for r in 0..m {
                        for o in 0..n {
                            let go = g[r * n + o];
                            for (b, &xv) in buf[o * k..(o + 1) * k].iter_mut().zip(&x[r * k..(r + 1) * k]) {
                                *b += go * xv;
                            }
                        }
                    }
                });
                acc(*bias, &|buf| {
                    for r in 0..m {
                        add_into(buf, &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Displace {
                features,
                filters,
                uniform,
                cond,
            } => {
                let (d, v) = (cond.grid().rank(), cond.grid().len());
                let c2 = nodes[features.0].shape[0];
                let (f, w, wr) = (val(*features), val(*filters), val(*uniform));
                let region = |x: usize| cond.region_index()[x] as usize;
                let conf = |x: usize| cond.confidence()[x];
                acc(*features, &|buf| {
                    for x in 0..v {
                        let (r, p) = (region(x), conf(x));
                        for c in 0..c2 {
                            let mut s = 0.0;
                            for j in 0..d {
                                let we = p * w[(r * c2 + c) * d + j] + (1.0 - p) * wr[c * d + j];
                                s += we * g[j * v + x];
                            }
                            buf[c * v + x] += s;
                        }
                    }
                });
                acc(*filters, &|buf| {
                    for x in 0..v {
                        let (r, p) = (region(x), conf(x));
                        if p == 0.0 {
                            continue;
                        }
                        for c in 0..c2 {
                            let fx = p * f[c * v + x];
                            for j in 0..d {
                                buf[(r * c2 + c) * d + j] += fx * g[j * v + x];
                            }
                        }
                    }
                });
                acc(*uniform, &|buf| {
                    for x in 0..v {
                        let q = 1.0 - conf(x);
                        if q == 0.0 {
                            continue;
                        }
                        for c in 0..c2 {
                            let fx = q * f[c * v + x];
                            for j in 0..d {
                                buf[c * d + j] += fx * g[j * v + x];
                            }
                        }
                    }
                });
            }
            Op::Sample {
                src,
                field,
                grid,
                channels,
            } => {
                acc(*src, &|buf| {
                    sample_linear_backward(grid, val(*src), *channels, val(*field), g, Some(buf), None)
                });
                acc(*field, &|buf| {
                    sample_linear_backward(grid, val(*src), *channels, val(*field), g, None, Some(buf))
                });
            }
            Op::Add { a, b } => {
                acc(*a, &|buf| add_into(buf, g));
                acc(*b, &|buf| add_into(buf, g));
            }
            Op::Scale { input, s } => acc(*input, &|buf| {
                for (b, &gg) in buf.iter_mut().zip(g) {
                    *b += s * gg;
                }
            }),
            Op::Mse { a, b } => {
                let n = val(*a).len() as f64;
                let k = 2.0 * g[0] / n;
                acc(*a, &|buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(val(*a)).zip(val(*b)) {
                        *o += k * (x - y);
                    }
                });
                acc(*b, &|buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(val(*a)).zip(val(*b)) {
                        *o -= k * (x - y);
                    }
                });
            }
            Op::SoftDice {
                pred,
                target,
                channels,
                eps,
            } => {
                let (p, t) = (val(*pred), val(*target));
                let v = p.len() / channels;
                let scale = -g[0] / *channels as f64;
                let stats: Vec<(f64, f64)> = (0..*channels)
                    .map(|c| {
                        let (pc, tc) = (&p[c * v..(c + 1) * v], &t[c * v..(c + 1) * v]);
                        let num = 2.0 * pc.iter().zip(tc).map(|(a, b)| a * b).sum::<f64>() + eps;
                        let den = pc.iter().sum::<f64>() + tc.iter().sum::<f64>() + eps;
                        (num, den)
                    })
                    .collect();
                let grad_wrt = |other: &[f64], buf: &mut [f64]| {
                    for (c, &(num, den)) in stats.iter().enumerate() {
                        for x in 0..v {
                            buf[c * v + x] += scale * (2.0 * other[c * v + x] * den - num) / (den * den);
                        }
                    }
                };
                acc(*pred, &|buf| grad_wrt(t, buf));
                acc(*target, &|buf| grad_wrt(p, buf));
            }
            Op::GradReg { u, grid } => acc(*u, &|buf| {
                grad_reg_backward(grid, val(*u), g[0], buf);
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Forward-difference pairs `(x, x + e_axis)` and the number of such pairs.
fn forward_pairs(grid: &Grid, axis: usize) -> (usize, usize) {
    let stride = grid.strides()[axis];
    let count = grid.len() / grid.shape()[axis] * (grid.shape()[axis] - 1);
    (stride, count)
}

fn grad_reg_value(grid: &Grid, u: &[f64]) -> f64 {
    let (d, v) = (grid.rank(), grid.len());
    let mut total = 0.0;
    for j in 0..d {
        let (stride, count) = forward_pairs(grid, j);
        let n = grid.shape()[j];
        let mut s = 0.0;
        for i in 0..d {
            let c = &u[i * v..(i + 1) * v];
            for x in 0..v {
                if (x / stride) % n + 1 < n {
                    let diff = c[x + stride] - c[x];
                    s += diff * diff;
                }
            }
        }
        total += s / count as f64;
    }
    total / (d * d) as f64
}

fn grad_reg_backward(grid: &Grid, u: &[f64], g: f64, buf: &mut [f64]) {
    let (d, v) = (grid.rank(), grid.len());
    for j in 0..d {
        let (stride, count) = forward_pairs(grid, j);
        let n = grid.shape()[j];
        let k = 2.0 * g / (count as f64 * (d * d) as f64);
        for i in 0..d {
            for x in 0..v {
                if (x / stride) % n + 1 < n {
                    let diff = u[i * v + x + stride] - u[i * v + x];
                    buf[i * v + x + stride] += k * diff;
                    buf[i * v + x] -= k * diff;
                }
            }
        }
    }
}
