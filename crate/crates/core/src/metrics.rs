//! Registration quality measures.
//!
//! Overlap (Dice, HD95) compares label maps; the Jacobian family (determinant,
//! SDlogJ, folding fraction) describes how regular a displacement field is.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{check_extents, partial, warp_mask, DisplacementField, Grid, SegMask};

/// Offset added to the determinant before taking logs in [`sdlogj`].
pub const DEFAULT_RHO: f64 = 3.0;
/// Floor applied after the offset so the logarithm stays finite.
pub const CLIP_EPS: f64 = 1e-9;

/// Per-voxel Jacobian determinant of `φ(x) = x + u(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianField {
    grid: Grid,
    det: Vec<f64>,
}

impl JacobianField {
    pub fn new(grid: Grid, det: Vec<f64>) -> Result<Self> {
        if det.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: grid.shape().to_vec(),
                actual: vec![det.len()],
            });
        }
        if det.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("jacobian determinant"));
        }
        Ok(Self { grid, det })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn det(&self) -> &[f64] {
        &self.det
    }
}

/// `det(I + ∇u)` per voxel, using the stencils of [`crate::field::spatial_gradient`].
pub fn jacobian_determinant(u: &DisplacementField) -> Result<JacobianField> {
    let grid = u.grid();
    check_extents(grid)?;
    let d = u.rank();
    let v = grid.len();
    let mut grads = vec![0.0; d * d * v];
    for i in 0..d {
        for j in 0..d {
            let k = i * d + j;
            partial(grid, u.component(i), j, &mut grads[k * v..(k + 1) * v]);
        }
    }
    let g = |i: usize, j: usize, idx: usize| {
        grads[(i * d + j) * v + idx] + if i == j { 1.0 } else { 0.0 }
    };
    let det = (0..v)
        .map(|p| {
            if d == 2 {
                g(0, 0, p) * g(1, 1, p) - g(0, 1, p) * g(1, 0, p)
            } else {
                g(0, 0, p) * (g(1, 1, p) * g(2, 2, p) - g(1, 2, p) * g(2, 1, p))
                    - g(0, 1, p) * (g(1, 0, p) * g(2, 2, p) - g(1, 2, p) * g(2, 0, p))
                    + g(0, 2, p) * (g(1, 0, p) * g(2, 1, p) - g(1, 1, p) * g(2, 0, p))
            }
        })
        .collect();
    JacobianField::new(grid.clone(), det)
}

/// Sample standard deviation (N−1 denominator) of `log(max(det + rho, eps))`.
pub fn sdlogj(j: &JacobianField, rho: f64, eps: f64) -> Result<f64> {
    let n = j.det.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let logs: Vec<f64> = j.det.iter().map(|&x| (x + rho).max(eps).ln()).collect();
    // shifted by the first sample: a constant field gives exactly zero
    let shift = logs[0];
    let (s, s2) = logs.iter().fold((0.0, 0.0), |(s, s2), &l| {
        let d = l - shift;
        (s + d, s2 + d * d)
    });
    let var = (s2 - s * s / n as f64) / (n - 1) as f64;
    Ok(var.max(0.0).sqrt())
}

/// Fraction of voxels with a non-positive determinant.
pub fn folding_fraction(j: &JacobianField) -> f64 {
    if j.det.is_empty() {
        return 0.0;
    }
    j.det.iter().filter(|&&x| x <= 0.0).count() as f64 / j.det.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum LocalDeformation {
    Expansion = 0,
    Preserving = 1,
    Contraction = 2,
    Collapse = 3,
    Inversion = 4,
}

impl LocalDeformation {
    pub fn of(det: f64, tol: f64) -> Self {
        if (det - 1.0).abs() <= tol {
            Self::Preserving
        } else if det > 1.0 {
            Self::Expansion
        } else if det.abs() <= tol {
            Self::Collapse
        } else if det < 0.0 {
            Self::Inversion
        } else {
            Self::Contraction
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

/// Classify every voxel by the volume change its determinant implies.
pub fn classify_local(j: &JacobianField, tol: f64) -> Vec<LocalDeformation> {
    j.det.iter().map(|&d| LocalDeformation::of(d, tol)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiceScores {
    pub per_label: BTreeMap<i32, f64>,
    pub mean: f64,
}

/// Dice overlap per label. Labels absent from both masks score 1.
pub fn dice(a: &SegMask, b: &SegMask, labels: &[i32]) -> Result<DiceScores> {
    a.grid().check_same(b.grid())?;
    if labels.is_empty() {
        return Err(Error::Empty("label set"));
    }
    let mut per_label = BTreeMap::new();
    for &l in labels {
        let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
        for (&x, &y) in a.labels().iter().zip(b.labels()) {
            let (ia, ib) = (x == l, y == l);
            na += ia as usize;
            nb += ib as usize;
            inter += (ia && ib) as usize;
        }
        let score = if na + nb == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (na + nb) as f64
        };
        per_label.insert(l, score);
    }
    let mean = per_label.values().sum::<f64>() / per_label.len() as f64;
    Ok(DiceScores { per_label, mean })
}

/// Voxels of `label` with at least one face neighbour carrying another label.
/// Neighbours outside the grid count as a different label.
pub(crate) fn boundary_voxels(mask: &SegMask, label: i32) -> Vec<[usize; 3]> {
    let grid = mask.grid();
    let shape = grid.shape();
    let strides = grid.strides();
    let labels = mask.labels();
    let mut out = Vec::new();
    for idx in 0..grid.len() {
        if labels[idx] != label {
            continue;
        }
        let c = grid.coords(idx);
        let on_edge = (0..grid.rank()).any(|a| {
            c[a] == 0
                || c[a] + 1 == shape[a]
                || labels[idx - strides[a]] != label
                || labels[idx + strides[a]] != label
        });
        if on_edge {
            out.push(c);
        }
    }
    out
}

/// Linear-interpolated percentile (`q` in [0, 1]) of unsorted samples.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// 95th percentile of the pooled symmetric boundary-to-boundary distances.
///
/// If the label is missing from exactly one mask the grid diagonal is
/// returned; if it is missing from both, zero.
pub fn hd95(a: &SegMask, b: &SegMask, label: i32, spacing: &[f64]) -> Result<f64> {
    a.grid().check_same(b.grid())?;
    let d = a.grid().rank();
    if spacing.len() != d {
        return Err(Error::ShapeMismatch {
            expected: vec![d],
            actual: vec![spacing.len()],
        });
    }
    let ba = boundary_voxels(a, label);
    let bb = boundary_voxels(b, label);
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(a.grid().diagonal(spacing)),
        _ => {}
    }
    let dist2 = |p: &[usize; 3], q: &[usize; 3]| {
        (0..d)
            .map(|k| ((p[k] as f64 - q[k] as f64) * spacing[k]).powi(2))
            .sum::<f64>()
    };
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> Vec<f64> {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| dist2(p, q))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    };
    let mut pooled = directed(&ba, &bb);
    pooled.extend(directed(&bb, &ba));
    Ok(percentile(&mut pooled, 0.95))
}

/// Least-squares fit between min-max normalised SDlogJ and folding fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationFit {
    pub pearson_r: f64,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn min_max_normalize(xs: &[f64]) -> Option<Vec<f64>> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return None;
    }
    Some(xs.iter().map(|x| (x - lo) / (hi - lo)).collect())
}

/// Pairs are `(sdlogj, folding_fraction)`.
pub fn correlation_study(pairs: &[(f64, f64)]) -> Result<CorrelationFit> {
    if pairs.len() < 3 {
        return Err(Error::TooFewSamples {
            needed: 3,
            got: pairs.len(),
        });
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let x = min_max_normalize(&xs).ok_or(Error::DegenerateSweep("SDlogJ has zero variance"))?;
    let y = min_max_normalize(&ys)
        .ok_or(Error::DegenerateSweep("folding fraction has zero variance"))?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let pearson_r = sxy / (sxx * syy).sqrt();
    Ok(CorrelationFit {
        pearson_r,
        slope,
        intercept: my - slope * mx,
        r_squared: pearson_r * pearson_r,
    })
}

/// Summary of one registration, serialised with these exact keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice_per_label: BTreeMap<String, f64>,
    pub dice_mean: f64,
    pub hd95_per_label: BTreeMap<String, f64>,
    pub hd95_mean: f64,
    pub sdlogj: f64,
    pub folding_fraction: f64,
}

impl MetricsReport {
    /// Warp `moving_seg` by `field` (nearest neighbour) and score it against
    /// `fixed_seg`. `labels` defaults to every label present in either mask,
    /// background (0) excluded unless `include_background`.
    pub fn compute(
        field: &DisplacementField,
        fixed_seg: &SegMask,
        moving_seg: &SegMask,
        labels: Option<&[i32]>,
        include_background: bool,
        spacing: &[f64],
    ) -> Result<Self> {
        let warped = warp_mask(moving_seg, field)?;
        let labels: Vec<i32> = match labels {
            Some(l) => l.to_vec(),
            None => {
                let mut set: Vec<i32> = fixed_seg
                    .labels()
                    .iter()
                    .chain(moving_seg.labels())
                    .copied()
                    .filter(|&l| include_background || l != 0)
                    .collect();
                set.sort_unstable();
                set.dedup();
                set
            }
        };
        let scores = dice(&warped, fixed_seg, &labels)?;
        let mut hd95_per_label = BTreeMap::new();
        for &l in &labels {
            hd95_per_label.insert(l.to_string(), hd95(&warped, fixed_seg, l, spacing)?);
        }
        let hd95_mean = hd95_per_label.values().sum::<f64>() / hd95_per_label.len() as f64;
        let jac = jacobian_determinant(field)?;
        Ok(Self {
            dice_per_label: scores
                .per_label
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
            dice_mean: scores.mean,
            hd95_per_label,
            hd95_mean,
            sdlogj: sdlogj(&jac, DEFAULT_RHO, CLIP_EPS)?,
            folding_fraction: folding_fraction(&jac),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid2(h: usize, w: usize) -> Grid {
        Grid::new(vec![h, w]).unwrap()
    }

    fn jac(det: Vec<f64>) -> JacobianField {
        JacobianField::new(grid2(1, det.len()), det).unwrap()
    }

    #[test]
    fn identity_has_unit_determinant() {
        let u = DisplacementField::zeros(grid2(5, 6));
        let j = jacobian_determinant(&u).unwrap();
        assert!(j.det().iter().all(|&x| x == 1.0));
        assert_eq!(sdlogj(&j, DEFAULT_RHO, CLIP_EPS).unwrap(), 0.0);
        assert_eq!(folding_fraction(&j), 0.0);
    }

    #[test]
    fn uniform_scaling_determinant() {
        let g = grid2(6, 6);
        let u = DisplacementField::from_fn(g, |c| vec![0.1 * c[0] as f64, 0.1 * c[1] as f64])
            .unwrap();
        let j = jacobian_determinant(&u).unwrap();
        assert!(j.det().iter().all(|&x| (x - 1.21).abs() < 1e-12));
    }

    #[test]
    fn translation_has_unit_determinant_exactly() {
        let u = DisplacementField::constant(Grid::new(vec![3, 4, 5]).unwrap(), &[0.3, -7.0, 2.5])
            .unwrap();
        let j = jacobian_determinant(&u).unwrap();
        assert!(j.det().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn sdlogj_of_alternating_determinants() {
        let j = jac(vec![1.0, 2.0, 1.0, 2.0]);
        let (a, b) = (4f64.ln(), 5f64.ln());
        let mean = (a + b) / 2.0;
        let expect = ((2.0 * (a - mean).powi(2) + 2.0 * (b - mean).powi(2)) / 3.0).sqrt();
        let got = sdlogj(&j, 3.0, CLIP_EPS).unwrap();
        assert!((got - expect).abs() < 1e-15);
        // N−1 denominator; the population value would be 0.111_571_775_657_104_85.
        assert!((got - 0.128_831_989_419_188_03).abs() < 1e-12);
    }

    #[test]
    fn sdlogj_clips_strongly_negative_determinants() {
        let got = sdlogj(&jac(vec![1.0, -5.0, 0.5]), 3.0, CLIP_EPS).unwrap();
        assert!(got.is_finite() && got > 0.0);
    }

    #[test]
    fn sdlogj_needs_two_voxels() {
        assert!(sdlogj(&jac(vec![1.0]), 3.0, CLIP_EPS).is_err());
    }

    #[test]
    fn folding_counts_non_positive() {
        assert_eq!(folding_fraction(&jac(vec![1.0, -1.0, 0.5, -2.0])), 0.5);
        assert_eq!(folding_fraction(&jac(vec![1.0, 0.0])), 0.5);
    }

    #[test]
    fn classification() {
        use LocalDeformation::*;
        let tol = 1e-12;
        assert_eq!(LocalDeformation::of(1.0, tol), Preserving);
        assert_eq!(LocalDeformation::of(1.21, tol), Expansion);
        assert_eq!(LocalDeformation::of(0.5, tol), Contraction);
        assert_eq!(LocalDeformation::of(0.0, tol), Collapse);
        assert_eq!(LocalDeformation::of(-0.3, tol), Inversion);
        let codes: Vec<u8> = classify_local(&jac(vec![1.21, 1.0, 0.5, 0.0, -0.3]), tol)
            .into_iter()
            .map(LocalDeformation::code)
            .collect();
        assert_eq!(codes, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn dice_half_versus_three_quarters() {
        let g = grid2(4, 4);
        let a = SegMask::new(g.clone(), (0..16).map(|i| (i % 4 < 2) as i32).collect(), None)
            .unwrap();
        let b = SegMask::new(g, (0..16).map(|i| (i % 4 < 3) as i32).collect(), None).unwrap();
        let s = dice(&a, &b, &[1]).unwrap();
        assert!((s.per_label[&1] - 0.8).abs() < 1e-15);
        assert_eq!(dice(&a, &a, &[0, 1]).unwrap().mean, 1.0);
    }

    #[test]
    fn dice_of_disjoint_and_absent_labels() {
        let g = grid2(2, 2);
        let a = SegMask::new(g.clone(), vec![1, 1, 0, 0], None).unwrap();
        let b = SegMask::new(g, vec![0, 0, 1, 1], None).unwrap();
        let s = dice(&a, &b, &[1, 7]).unwrap();
        assert_eq!(s.per_label[&1], 0.0);
        assert_eq!(s.per_label[&7], 1.0);
        assert!(dice(&a, &b, &[]).is_err());
    }

    #[test]
    fn hd95_single_voxels() {
        let g = grid2(5, 5);
        let mut la = vec![0; 25];
        let mut lb = vec![0; 25];
        la[5 + 1] = 1;
        lb[5 + 4] = 1;
        let a = SegMask::new(g.clone(), la, None).unwrap();
        let b = SegMask::new(g.clone(), lb, None).unwrap();
        assert_eq!(hd95(&a, &b, 1, &[1.0, 1.0]).unwrap(), 3.0);
        assert_eq!(hd95(&a, &b, 1, &[2.0, 2.0]).unwrap(), 6.0);
        assert_eq!(hd95(&a, &a, 1, &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(hd95(&a, &b, 3, &[1.0, 1.0]).unwrap(), 0.0);
        let empty = SegMask::new(g, vec![0; 25], None).unwrap();
        assert!((hd95(&a, &empty, 1, &[1.0, 1.0]).unwrap() - 32f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![3.0, 1.0, 2.0, 4.0, 5.0];
        assert!((percentile(&mut v, 0.95) - 4.8).abs() < 1e-12);
        assert_eq!(percentile(&mut [2.0], 0.95), 2.0);
    }

    #[test]
    fn correlation_of_exact_lines() {
        let up: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 2.0 * i as f64)).collect();
        let fit = correlation_study(&up).unwrap();
        assert!((fit.pearson_r - 1.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!((fit.slope - 1.0).abs() < 1e-12);
        let down: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, -3.0 * i as f64)).collect();
        assert!((correlation_study(&down).unwrap().pearson_r + 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_rejects_degenerate_sweeps() {
        let flat = vec![(1.0, 0.0), (2.0, 0.0), (3.0, 0.0)];
        assert!(matches!(
            correlation_study(&flat),
            Err(Error::DegenerateSweep(_))
        ));
        assert!(correlation_study(&[(1.0, 1.0), (2.0, 2.0)]).is_err());
    }

    #[test]
    fn report_for_identity() {
        let g = grid2(6, 6);
        let seg = SegMask::new(g.clone(), (0..36).map(|i| (i / 12) as i32).collect(), None)
            .unwrap();
        let r = MetricsReport::compute(
            &DisplacementField::zeros(g),
            &seg,
            &seg,
            None,
            false,
            &[1.0, 1.0],
        )
        .unwrap();
        assert_eq!(r.dice_mean, 1.0);
        assert_eq!(r.hd95_mean, 0.0);
        assert_eq!(r.sdlogj, 0.0);
        assert_eq!(r.folding_fraction, 0.0);
        assert_eq!(
            r.dice_per_label.keys().collect::<Vec<_>>(),
            vec!["1", "2"]
        );
    }
}
