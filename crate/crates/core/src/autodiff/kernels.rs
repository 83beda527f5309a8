//! Dense numeric kernels shared by the tape and the fused network passes.

use ndarray::Array2;

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
/// `1.5 * 2^52`: adding and subtracting it rounds to the nearest integer.
const SHIFT: f64 = 6_755_399_441_055_744.0;

/// `1 / k!` for `k = 13, 12, ..., 2`.
const INV_FACT: [f64; 12] = [
    1.0 / 6_227_020_800.0,
    1.0 / 479_001_600.0,
    1.0 / 39_916_800.0,
    1.0 / 3_628_800.0,
    1.0 / 362_880.0,
    1.0 / 40_320.0,
    1.0 / 5_040.0,
    1.0 / 720.0,
    1.0 / 120.0,
    1.0 / 24.0,
    1.0 / 6.0,
    1.0 / 2.0,
];

/// `exp(y)` for `y <= 0`, branch-free so loops over it vectorize. Inputs below
/// -700 are clamped; the result is then below 1e-304.
#[inline(always)]
pub(crate) fn exp_nonpos(y: f64) -> f64 {
    let y = if y < -700.0 { -700.0 } else { y };
    let kf = (y * LOG2E + SHIFT) - SHIFT;
    let r = (y - kf * LN2_HI) - kf * LN2_LO;
    let mut p = INV_FACT[0];
    for c in &INV_FACT[1..] {
        p = p * r + c;
    }
    p = p * r + 1.0;
    p = p * r + 1.0;
    let k = (kf + SHIFT).to_bits() as i64 - SHIFT.to_bits() as i64;
    p * f64::from_bits(((k + 1023) as u64) << 52)
}

#[inline(always)]
pub(crate) fn tanh(x: f64) -> f64 {
    let e = exp_nonpos(-2.0 * x.abs());
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

#[inline(always)]
pub(crate) fn sigmoid(x: f64) -> f64 {
    let e = exp_nonpos(-x.abs());
    let s = 1.0 / (1.0 + e);
    if x >= 0.0 {
        s
    } else {
        e * s
    }
}

/// Products with a small operand use direct loops; the blocked kernel only
/// pays off when both inner and outer sizes are large.
const SMALL: usize = 64;

/// `a . b`
pub(crate) fn dot(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    let m = b.ncols();
    if k * m > SMALL || !a.is_standard_layout() {
        return a.dot(b);
    }
    let av = a.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * m];
    if m == 1 {
        let col: Vec<f64> = b.iter().copied().collect();
        for (row, o) in av.chunks_exact(k).zip(out.iter_mut()) {
            *o = row.iter().zip(&col).map(|(x, w)| x * w).sum();
        }
    } else {
        let bv: Vec<f64> = b.iter().copied().collect();
        for (row, o) in av.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
            for (&x, brow) in row.iter().zip(bv.chunks_exact(m)) {
                for (oc, &bc) in o.iter_mut().zip(brow) {
                    *oc += x * bc;
                }
            }
        }
    }
    Array2::from_shape_vec((n, m), out).expect("sized above")
}

/// `a . b^T`
pub(crate) fn dot_bt(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    if a.ncols() * b.nrows() > SMALL {
        return a.dot(&b.t());
    }
    dot(a, &b.t().to_owned())
}

/// `a^T . b`, accumulated row by row when the result is small.
pub(crate) fn dot_at(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (k, m) = (a.ncols(), b.ncols());
    if k * m > SMALL || !a.is_standard_layout() || !b.is_standard_layout() {
        return a.t().dot(b);
    }
    let mut out = vec![0.0; k * m];
    let av = a.as_slice().expect("standard layout");
    let bv = b.as_slice().expect("standard layout");
    for (ra, rb) in av.chunks_exact(k).zip(bv.chunks_exact(m)) {
        for (&x, orow) in ra.iter().zip(out.chunks_exact_mut(m)) {
            for (o, &y) in orow.iter_mut().zip(rb) {
                *o += x * y;
            }
        }
    }
    Array2::from_shape_vec((k, m), out).expect("sized above")
}

/// `1 x m` row of column sums.
pub(crate) fn column_sums(g: &Array2<f64>) -> Array2<f64> {
    let m = g.ncols();
    let mut out = vec![0.0; m];
    match g.as_slice() {
        Some(v) => {
            for row in v.chunks_exact(m.max(1)) {
                for (o, &x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
        }
        None => {
            for row in g.rows() {
                for (o, &x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
        }
    }
    Array2::from_shape_vec((1, m), out).expect("sized above")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b.abs().max(f64::MIN_POSITIVE)).abs()
    }

    #[test]
    fn exp_matches_std_over_range() {
        let mut worst: f64 = 0.0;
        for i in 0..=200_000 {
            let y = -(i as f64) * 3.5e-3;
            worst = worst.max(rel(exp_nonpos(y), y.exp()));
        }
        assert!(worst < 5e-16, "worst relative error {worst}");
        assert_eq!(exp_nonpos(0.0), 1.0);
    }

    #[test]
    fn tanh_and_sigmoid_match_std() {
        for i in -4000..=4000 {
            let x = i as f64 * 5e-3;
            assert!((tanh(x) - x.tanh()).abs() < 4e-16, "tanh at {x}");
            let s = 1.0 / (1.0 + (-x).exp());
            assert!((sigmoid(x) - s).abs() < 4e-16, "sigmoid at {x}");
        }
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(50.0), 1.0);
        assert_eq!(tanh(-50.0), -1.0);
        assert!(tanh(f64::NAN).is_nan());
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(800.0), 1.0);
        assert!(sigmoid(-800.0) < 1e-300);
    }

    #[test]
    fn small_products_match_blocked_kernel() {
        let a = Array2::from_shape_fn((7, 3), |(i, j)| (i as f64 - 2.0 * j as f64).sin());
        let b = Array2::from_shape_fn((3, 4), |(i, j)| (i * 3 + j) as f64 * 0.1 - 0.5);
        let c = Array2::from_shape_fn((3, 1), |(i, _)| i as f64 - 1.0);
        assert!((dot(&a, &b) - a.dot(&b)).iter().all(|v| v.abs() < 1e-14));
        assert!((dot(&a, &c) - a.dot(&c)).iter().all(|v| v.abs() < 1e-14));
        let g = Array2::from_shape_fn((7, 4), |(i, j)| (i * j) as f64 * 0.01);
        assert!((dot_at(&a, &g) - a.t().dot(&g)).iter().all(|v| v.abs() < 1e-14));
        assert!((dot_bt(&g, &b) - g.dot(&b.t())).iter().all(|v| v.abs() < 1e-14));
        assert_eq!(column_sums(&array![[1.0, 2.0], [3.0, 4.0]]), array![[4.0, 6.0]]);
    }
}
