//! Oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};
use sheaf_flow::implicit::OptimalityJacobian;
use rand::Rng;
use sheaf_flow::measures::ParticleCloud;
use sheaf_flow::rng::substream;

pub fn cloud(seed: u64, idx: u64, n: usize, span: f64) -> ParticleCloud {
    let mut rng = substream(seed, 9, idx, 0);
    ParticleCloud::uniform(Array2::from_shape_fn((n, 2), |_| rng.random::<f64>() * span)).unwrap()
}

/// Entropic cost by plain dense log-domain sweeps run to marginal error 1e-14.
pub fn dense_cost(x: &Array2<f64>, y: &Array2<f64>, eps: f64) -> f64 {
    let (n, m) = (x.nrows(), y.nrows());
    let c = Array2::from_shape_fn((n, m), |(i, j)| (0..x.ncols()).map(|k| (x[[i, k]] - y[[j, k]]).powi(2)).sum::<f64>());
    let (la, lb) = (-(n as f64).ln(), -(m as f64).ln());
    let lse = |v: Vec<f64>| {
        let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
    };
    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(m);
    for _ in 0..200_000 {
        for i in 0..n {
            f[i] = -eps * lse((0..m).map(|j| lb + (g[j] - c[[i, j]]) / eps).collect());
        }
        for j in 0..m {
            g[j] = -eps * lse((0..n).map(|i| la + (f[i] - c[[i, j]]) / eps).collect());
        }
        let err: f64 = (0..n)
            .map(|i| ((0..m).map(|j| (la + lb + (f[i] + g[j] - c[[i, j]]) / eps).exp()).sum::<f64>() - 1.0 / n as f64).abs())
            .sum();
        if err < 1e-14 {
            break;
        }
    }
    f.sum() / n as f64 + g.sum() / m as f64
}

pub fn central_difference(x: &ParticleCloud, y: &ParticleCloud, eps: f64) -> (Array2<f64>, Array2<f64>) {
    let h = 1e-5;
    let fd = |pts: &Array2<f64>, other: &Array2<f64>, src_side: bool| {
        Array2::from_shape_fn(pts.dim(), |(i, k)| {
            let (mut p, mut q) = (pts.clone(), pts.clone());
            p[[i, k]] += h;
            q[[i, k]] -= h;
            let (up, down) = if src_side {
                (dense_cost(&p, other, eps), dense_cost(&q, other, eps))
            } else {
                (dense_cost(other, &p, eps), dense_cost(other, &q, eps))
            };
            (up - down) / (2.0 * h)
        })
    };
    let xp = x.points().to_owned();
    let yp = y.points().to_owned();
    (fd(&xp, &yp, true), fd(&yp, &xp, false))
}


/// Extremal non-zero eigenvalues of `D^{-1/2} S D^{-1/2}`, which shares its
/// spectrum with `H = D⁻¹ S`; the single zero is the gauge direction.
pub fn dense_condition(jac: &OptimalityJacobian) -> (f64, f64) {
    let s = jac.dense_s();
    let d = jac.diagonal();
    let k = d.len();
    let sym = DMatrix::from_fn(k, k, |i, j| s[[i, j]] / (d[i] * d[j]).sqrt());
    let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    assert!(ev[0].abs() < 1e-10, "gauge eigenvalue {}", ev[0]);
    (ev[k - 1], ev[1])
}

