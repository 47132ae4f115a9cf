//! Central finite-difference gradient checking. This module is a test
//! oracle: it evaluates a scalar function twice per probed coordinate and
//! never touches the tape's backward pass.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Coordinate probe: (tensor index, row, column).
pub type Coord = (usize, usize, usize);

/// Central finite differences of `eval` at the probed coordinates.
pub fn central_diff<F>(eval: &mut F, params: &[Array2<f64>], coords: &[Coord], h: f64) -> Vec<f64>
where
    F: FnMut(&[Array2<f64>]) -> f64,
{
    let mut work: Vec<Array2<f64>> = params.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &(t, r, c) in coords {
        let orig = work[t][[r, c]];
        work[t][[r, c]] = orig + h;
        let fp = eval(&work);
        work[t][[r, c]] = orig - h;
        let fm = eval(&work);
        work[t][[r, c]] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Relative error with a small floor so near-zero gradients compare sanely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Every coordinate of every tensor.
pub fn all_coords(params: &[Array2<f64>]) -> Vec<Coord> {
    let mut out = Vec::new();
    for (t, p) in params.iter().enumerate() {
        for r in 0..p.nrows() {
            for c in 0..p.ncols() {
                out.push((t, r, c));
            }
        }
    }
    out
}

/// Up to `per_tensor` random coordinates from each tensor.
pub fn sample_coords(params: &[Array2<f64>], per_tensor: usize, rng: &mut ChaCha8Rng) -> Vec<Coord> {
    let mut out = Vec::new();
    for (t, p) in params.iter().enumerate() {
        let n = p.nrows() * p.ncols();
        for _ in 0..per_tensor.min(n) {
            let flat = rng.gen_range(0..n);
            out.push((t, flat / p.ncols(), flat % p.ncols()));
        }
    }
    out
}

/// Random matrix with entries in (-1, 1), biased away from zero so relu and
/// clamp kinks do not sit inside the finite-difference stencil.
pub fn smooth_random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}
