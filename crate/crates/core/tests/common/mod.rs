#![allow(dead_code)]

use gdt_core::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn random(rows: usize, cols: usize, seed: u64) -> Mat {
    Mat::random_normal(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&Mat) -> f64, x: &Mat, h: f64) -> Mat {
    let mut g = Mat::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let orig = probe[(i, j)];
            probe[(i, j)] = orig + h;
            let up = f(&probe);
            probe[(i, j)] = orig - h;
            let down = f(&probe);
            probe[(i, j)] = orig;
            g[(i, j)] = (up - down) / (2.0 * h);
        }
    }
    g
}

pub fn relative_error(a: &Mat, b: &Mat) -> f64 {
    a.sub(b).frob_norm() / b.frob_norm().max(1e-300)
}
