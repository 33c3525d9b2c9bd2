//! Direct convolution over 2-D/3-D grids with zero padding.
//!
//! 2-D inputs are handled as 3-D volumes of depth 1 with a kernel depth of 1,
//! so a single loop nest serves both ranks. Weights are laid out
//! `[c_out, c_in, k_z, k_y, k_x]`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

/// Pad a 2-D or 3-D shape to three axes with a leading unit axis.
pub(crate) fn dims3(spatial: &[usize]) -> [usize; 3] {
    match spatial.len() {
        2 => [1, spatial[0], spatial[1]],
        _ => [spatial[0], spatial[1], spatial[2]],
    }
}

impl ConvGeom {
    /// "Same"-padded convolution with an odd cubic kernel.
    pub fn new(spatial: &[usize], cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        if kernel % 2 == 0 || kernel == 0 {
            return Err(Error::InvalidConfig(format!("kernel size {kernel} must be odd")));
        }
        if !(2..=3).contains(&spatial.len()) {
            return Err(Error::UnsupportedRank(spatial.len()));
        }
        let real = |a: usize| spatial.len() == 3 || a > 0;
        let in_dims = dims3(spatial);
        let mut out_dims = [1; 3];
        let mut k = [1; 3];
        let mut s = [1; 3];
        let mut p = [0; 3];
        for a in 0..3 {
            if real(a) {
                k[a] = kernel;
                s[a] = stride;
                p[a] = kernel / 2;
            }
            out_dims[a] = (in_dims[a] + 2 * p[a] - k[a]) / s[a] + 1;
        }
        Ok(Self {
            cin,
            cout,
            in_dims,
            out_dims,
            kernel: k,
            stride: s,
            pad: p,
        })
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel.iter().product::<usize>()
    }

    pub fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn mult_adds(&self) -> usize {
        self.out_len() * self.weight_len()
    }
}

/// Output indices `o` in `[lo, hi)` whose input index `o*s + k - p` is in range.
#[inline]
fn valid(out_len: usize, in_len: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let top = in_len + p;
    let hi = if top > k { ((top - 1 - k) / s + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

/// Walks every (output row, input row, x-range) triple touched by kernel tap
/// `(kz, ky, kx)`, calling `f(out_row_start, in_row_start, lo, hi)`.
#[inline]
fn for_each_row(g: &ConvGeom, kz: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    let [id, ih, iw] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let (zlo, zhi) = valid(od, id, g.stride[0], kz, g.pad[0]);
    let (ylo, yhi) = valid(oh, ih, g.stride[1], ky, g.pad[1]);
    let (xlo, xhi) = valid(ow, iw, g.stride[2], kx, g.pad[2]);
    if xlo >= xhi {
        return;
    }
    for oz in zlo..zhi {
        let iz = oz * g.stride[0] + kz - g.pad[0];
        for oy in ylo..yhi {
            let iy = oy * g.stride[1] + ky - g.pad[1];
            f((oz * oh + oy) * ow, (iz * ih + iy) * iw, xlo, xhi);
        }
    }
}

#[inline]
fn taps(g: &ConvGeom) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
    let [kd, kh, kw] = g.kernel;
    (0..kd).flat_map(move |kz| {
        (0..kh).flat_map(move |ky| (0..kw).map(move |kx| (kz, ky, kx, (kz * kh + ky) * kw + kx)))
    })
}

pub fn conv_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (il, ol) = (g.in_len(), g.out_len());
    let kl: usize = g.kernel.iter().product();
    let sx = g.stride[2];
    let mut out = vec![0.0; g.cout * ol];
    for co in 0..g.cout {
        let o = &mut out[co * ol..(co + 1) * ol];
        o.iter_mut().for_each(|x| *x = bias[co]);
        for ci in 0..g.cin {
            let inp = &input[ci * il..(ci + 1) * il];
            let wbase = (co * g.cin + ci) * kl;
            for (kz, ky, kx, t) in taps(g) {
                let w = weight[wbase + t];
                if w == 0.0 {
                    continue;
                }
                for_each_row(g, kz, ky, kx, |orow, irow, lo, hi| {
                    let (ib, px) = (irow + kx, g.pad[2]);
                    if sx == 1 {
                        let dst = &mut o[orow + lo..orow + hi];
                        let src = &inp[ib + lo - px..ib + hi - px];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += w * s;
                        }
                    } else {
                        for ox in lo..hi {
                            o[orow + ox] += w * inp[ib + ox * sx - px];
                        }
                    }
                });
            }
        }
    }
    out
}

/// Gradients of [`conv_forward`]; each requested buffer is accumulated into.
pub fn conv_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_in: Option<&mut [f64]>,
    grad_w: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    let (il, ol) = (g.in_len(), g.out_len());
    let kl: usize = g.kernel.iter().product();
    let sx = g.stride[2];
    if let Some(gb) = grad_b {
        for co in 0..g.cout {
            gb[co] += grad_out[co * ol..(co + 1) * ol].iter().sum::<f64>();
        }
    }
    if let Some(gw) = grad_w {
        for co in 0..g.cout {
            let go = &grad_out[co * ol..(co + 1) * ol];
            for ci in 0..g.cin {
                let inp = &input[ci * il..(ci + 1) * il];
                let wbase = (co * g.cin + ci) * kl;
                for (kz, ky, kx, t) in taps(g) {
                    let mut acc = 0.0;
                    for_each_row(g, kz, ky, kx, |orow, irow, lo, hi| {
                        let (ib, px) = (irow + kx, g.pad[2]);
                        if sx == 1 {
                            acc += go[orow + lo..orow + hi]
                                .iter()
                                .zip(&inp[ib + lo - px..ib + hi - px])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        } else {
                            for ox in lo..hi {
                                acc += go[orow + ox] * inp[ib + ox * sx - px];
                            }
                        }
                    });
                    gw[wbase + t] += acc;
                }
            }
        }
    }
    if let Some(gi) = grad_in {
        for ci in 0..g.cin {
            let gin = &mut gi[ci * il..(ci + 1) * il];
            for co in 0..g.cout {
                let go = &grad_out[co * ol..(co + 1) * ol];
                let wbase = (co * g.cin + ci) * kl;
                for (kz, ky, kx, t) in taps(g) {
                    let w = weight[wbase + t];
                    if w == 0.0 {
                        continue;
                    }
                    for_each_row(g, kz, ky, kx, |orow, irow, lo, hi| {
                        let (ib, px) = (irow + kx, g.pad[2]);
                        if sx == 1 {
                            let dst = &mut gin[ib + lo - px..ib + hi - px];
                            for (d, s) in dst.iter_mut().zip(&go[orow + lo..orow + hi]) {
                                *d += w * s;
                            }
                        } else {
                            for ox in lo..hi {
                                gin[ib + ox * sx - px] += w * go[orow + ox];
                            }
                        }
                    });
                }
            }
        }
    }
}
