use scfreg_core::diffeo::{integrate, VelocityField, DEFAULT_STEPS};
use scfreg_core::field::{compose, DisplacementField, Grid};
use scfreg_core::synth::smooth_noise_field;

fn grid32() -> Grid {
    Grid::new(vec![32, 32]).unwrap()
}

fn interior_max_diff(a: &DisplacementField, b: &DisplacementField, margin: usize) -> f64 {
    let g = a.grid();
    let mut worst: f64 = 0.0;
    for idx in 0..g.len() {
        let c = g.coords(idx);
        if (0..g.rank()).all(|k| c[k] >= margin && c[k] + margin < g.shape()[k]) {
            for i in 0..g.rank() {
                worst = worst.max((a.component(i)[idx] - b.component(i)[idx]).abs());
            }
        }
    }
    worst
}

/// `exp` of a 2×2 matrix by its power series, summed until terms vanish.
fn expm2(a: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut sum = [[1.0, 0.0], [0.0, 1.0]];
    let mut term = sum;
    for k in 1..60 {
        let mut next = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                next[i][j] = (term[i][0] * a[0][j] + term[i][1] * a[1][j]) / k as f64;
            }
        }
        term = next;
        for i in 0..2 {
            for j in 0..2 {
                sum[i][j] += term[i][j];
            }
        }
    }
    sum
}

#[test]
fn rotation_matches_matrix_exponential() {
    let omega = 0.1;
    let c = 15.5;
    let a = [[0.0, -omega], [omega, 0.0]];
    let e = expm2(a);
    let v = DisplacementField::from_fn(grid32(), |p| {
        let (y, x) = (p[0] as f64 - c, p[1] as f64 - c);
        vec![a[0][0] * y + a[0][1] * x, a[1][0] * y + a[1][1] * x]
    })
    .unwrap();
    let oracle = DisplacementField::from_fn(grid32(), |p| {
        let (y, x) = (p[0] as f64 - c, p[1] as f64 - c);
        vec![e[0][0] * y + e[0][1] * x - y, e[1][0] * y + e[1][1] * x - x]
    })
    .unwrap();
    assert!((e[0][0] - omega.cos()).abs() < 1e-15 && (e[1][0] - omega.sin()).abs() < 1e-15);
    let u = integrate(&VelocityField::new(v), DEFAULT_STEPS).unwrap();
    let err = interior_max_diff(&u, &oracle, 4);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn doubling_is_one_more_squaring() {
    // v/2 integrated with T steps, composed with itself, performs exactly the
    // operations of integrating v with T+1 steps.
    let v = smooth_noise_field(&grid32(), 6.0, 1.5, 2).unwrap();
    let half = integrate(&VelocityField::new(v.scaled(0.5)), 5).unwrap();
    let doubled = compose(&half, &half).unwrap();
    assert_eq!(doubled, integrate(&VelocityField::new(v), 6).unwrap());
}

#[test]
fn group_doubling_on_smooth_fields() {
    for seed in 0..5 {
        let v = smooth_noise_field(&grid32(), 8.0, 0.5, seed).unwrap();
        let full = integrate(&VelocityField::new(v.clone()), DEFAULT_STEPS).unwrap();
        let half = integrate(&VelocityField::new(v.scaled(0.5)), DEFAULT_STEPS).unwrap();
        let err = full.max_abs_diff(&compose(&half, &half).unwrap());
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn scaling_consistency_on_smooth_fields() {
    for seed in 0..5 {
        let v = VelocityField::new(smooth_noise_field(&grid32(), 8.0, 0.5, 10 + seed).unwrap());
        let a = integrate(&v, DEFAULT_STEPS).unwrap();
        let b = integrate(&v, DEFAULT_STEPS + 2).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-4);
    }
}

#[test]
fn step_error_is_quadratic_in_amplitude_and_shrinks_with_steps() {
    // The seed φ ≈ id + v/2^T is first-order, so T-vs-T+2 differences scale
    // like |v|·|∇v| (quadratic in amplitude) and fall as T grows.
    let gap = |amp: f64, t: u32| {
        let v = VelocityField::new(smooth_noise_field(&grid32(), 8.0, amp, 3).unwrap());
        integrate(&v, t)
            .unwrap()
            .max_abs_diff(&integrate(&v, t + 2).unwrap())
    };
    let ratio = gap(1.0, 7) / gap(0.5, 7);
    assert!((3.0..5.0).contains(&ratio), "{ratio}");
    let large = [5, 7, 9].map(|t| gap(2.0, t));
    assert!(large[1] < large[0] && large[2] < large[1], "{large:?}");
}
