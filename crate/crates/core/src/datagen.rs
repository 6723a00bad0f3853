//! Synthetic multi-task instances `Y = XΘ* + E` with `Θ* = U*V*ᵀ` low rank and
//! row/column sparse, plus the evaluation metrics used by the experiments.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GdtError, Result};
use crate::io::{read_matrix_csv, write_matrix_csv, write_text};
use crate::matrix::Mat;

/// Rows/columns with ℓ₂ norm above this count as part of the support.
pub const SUPPORT_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Noise {
    #[default]
    Gaussian,
    /// `±σ` with equal probability.
    Rademacher,
}

/// Dimensions and signal/noise settings of a synthetic instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceParams {
    pub n: usize,
    pub p: usize,
    pub k: usize,
    pub r: usize,
    pub s1_star: usize,
    pub s2_star: usize,
    pub sigma: f64,
    #[serde(default = "one")]
    pub signal_scale: f64,
    #[serde(default)]
    pub noise: Noise,
}

fn one() -> f64 {
    1.0
}

impl InstanceParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GdtError::InvalidConfig(msg));
        if self.n == 0 || self.p == 0 || self.k == 0 || self.r == 0 {
            return bad(format!(
                "n, p, k, r must be positive (got n={}, p={}, k={}, r={})",
                self.n, self.p, self.k, self.r
            ));
        }
        if self.s1_star > self.p || self.s2_star > self.k {
            return bad(format!(
                "true sparsity ({}, {}) exceeds dimensions ({}, {})",
                self.s1_star, self.s2_star, self.p, self.k
            ));
        }
        if self.r > self.s1_star.min(self.s2_star) {
            return bad(format!(
                "rank {} exceeds min(s1_star, s2_star) = {}",
                self.r,
                self.s1_star.min(self.s2_star)
            ));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad(format!("sigma must be finite and nonnegative, got {}", self.sigma));
        }
        if !self.signal_scale.is_finite() || self.signal_scale <= 0.0 {
            return bad(format!("signal_scale must be positive, got {}", self.signal_scale));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtlInstance {
    pub params: InstanceParams,
    pub x: Mat,
    pub y: Mat,
    pub theta_star: Mat,
    pub u_star: Mat,
    pub v_star: Mat,
    pub row_support: Vec<usize>,
    pub col_support: Vec<usize>,
    pub seed: u64,
}

fn noise_matrix(rows: usize, cols: usize, sigma: f64, noise: Noise, rng: &mut ChaCha8Rng) -> Mat {
    match noise {
        Noise::Gaussian => Mat::random_normal(rows, cols, rng).scale(sigma),
        Noise::Rademacher => Mat::from_fn(rows, cols, |_, _| {
            if rng.random::<bool>() {
                sigma
            } else {
                -sigma
            }
        }),
    }
}

fn sparse_factor(dim: usize, support: &[usize], r: usize, rng: &mut ChaCha8Rng) -> Mat {
    let block = Mat::random_normal(support.len(), r, rng);
    let mut out = Mat::zeros(dim, r);
    for (b, &i) in support.iter().enumerate() {
        out.row_mut(i).copy_from_slice(block.row(b));
    }
    out
}

/// Draws an instance. Everything is determined by `seed`.
pub fn generate(params: &InstanceParams, seed: u64) -> Result<MtlInstance> {
    params.validate()?;
    let InstanceParams { n, p, k, r, s1_star, s2_star, .. } = *params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Mat::random_normal(n, p, &mut rng);
    let mut row_support = sample(&mut rng, p, s1_star).into_vec();
    row_support.sort_unstable();
    let mut col_support = sample(&mut rng, k, s2_star).into_vec();
    col_support.sort_unstable();
    let u_star = sparse_factor(p, &row_support, r, &mut rng);
    let v_star = sparse_factor(k, &col_support, r, &mut rng);
    let theta_star = u_star.matmul_t(&v_star).scale(params.signal_scale);
    let mut y = x.matmul(&theta_star);
    if params.sigma > 0.0 {
        y.axpy(1.0, &noise_matrix(n, k, params.sigma, params.noise, &mut rng));
    }
    Ok(MtlInstance {
        params: params.clone(),
        x,
        y,
        theta_star,
        u_star,
        v_star,
        row_support,
        col_support,
        seed,
    })
}

impl MtlInstance {
    /// A fresh `(X, Y)` draw from the same model, e.g. for validation or testing.
    pub fn fresh_sample(&self, n: usize, seed: u64) -> (Mat, Mat) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Mat::random_normal(n, self.params.p, &mut rng);
        let mut y = x.matmul(&self.theta_star);
        if self.params.sigma > 0.0 {
            y.axpy(1.0, &noise_matrix(n, self.params.k, self.params.sigma, self.params.noise, &mut rng));
        }
        (x, y)
    }

    /// Writes `x.csv`, `y.csv`, `theta_star.csv`, `u_star.csv`, `v_star.csv` and `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| GdtError::io(dir, e))?;
        write_matrix_csv(dir.join("x.csv"), &self.x)?;
        write_matrix_csv(dir.join("y.csv"), &self.y)?;
        write_matrix_csv(dir.join("theta_star.csv"), &self.theta_star)?;
        write_matrix_csv(dir.join("u_star.csv"), &self.u_star)?;
        write_matrix_csv(dir.join("v_star.csv"), &self.v_star)?;
        let manifest = Manifest {
            params: self.params.clone(),
            seed: self.seed,
            row_support: self.row_support.clone(),
            col_support: self.col_support.clone(),
        };
        write_text(dir.join("manifest.json"), &(serde_json::to_string_pretty(&manifest)? + "\n"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| GdtError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        manifest.params.validate()?;
        let InstanceParams { n, p, k, r, .. } = manifest.params;
        let x = read_matrix_csv(dir.join("x.csv"))?;
        x.expect_shape("instance x.csv", (n, p))?;
        let y = read_matrix_csv(dir.join("y.csv"))?;
        y.expect_shape("instance y.csv", (n, k))?;
        let theta_star = read_matrix_csv(dir.join("theta_star.csv"))?;
        theta_star.expect_shape("instance theta_star.csv", (p, k))?;
        let u_star = read_matrix_csv(dir.join("u_star.csv"))?;
        u_star.expect_shape("instance u_star.csv", (p, r))?;
        let v_star = read_matrix_csv(dir.join("v_star.csv"))?;
        v_star.expect_shape("instance v_star.csv", (k, r))?;
        if manifest.row_support.iter().any(|&i| i >= p) || manifest.col_support.iter().any(|&j| j >= k) {
            return Err(GdtError::InvalidConfig(format!(
                "manifest support indices out of range: rows {:?}, cols {:?}",
                manifest.row_support, manifest.col_support
            )));
        }
        Ok(MtlInstance {
            params: manifest.params,
            x,
            y,
            theta_star,
            u_star,
            v_star,
            row_support: manifest.row_support,
            col_support: manifest.col_support,
            seed: manifest.seed,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    params: InstanceParams,
    seed: u64,
    row_support: Vec<usize>,
    col_support: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub est_error: f64,
    pub pred_rmse: f64,
    pub row_support_size: usize,
    pub col_support_size: usize,
    pub runtime_seconds: f64,
}

/// Metrics against the truth, with a test set of `n` fresh samples.
pub fn evaluate(theta_hat: &Mat, inst: &MtlInstance, test_seed: u64) -> Result<Metrics> {
    evaluate_with(theta_hat, inst, test_seed, inst.params.n)
}

pub fn evaluate_with(theta_hat: &Mat, inst: &MtlInstance, test_seed: u64, n_test: usize) -> Result<Metrics> {
    theta_hat.expect_shape("evaluate: theta_hat", inst.theta_star.shape())?;
    let (x, y) = inst.fresh_sample(n_test, test_seed);
    Ok(Metrics {
        est_error: relative_error(theta_hat, &inst.theta_star),
        pred_rmse: prediction_rmse(theta_hat, &x, &y),
        row_support_size: theta_hat.row_support(SUPPORT_THRESHOLD).len(),
        col_support_size: theta_hat.col_support(SUPPORT_THRESHOLD).len(),
        runtime_seconds: 0.0,
    })
}

/// `‖Θ̂ − Θ*‖_F / ‖Θ*‖_F`, or the absolute error when `Θ* = 0`.
pub fn relative_error(theta_hat: &Mat, theta_star: &Mat) -> f64 {
    let diff = theta_hat.sub(theta_star).frob_norm();
    let scale = theta_star.frob_norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

pub fn prediction_rmse(theta_hat: &Mat, x: &Mat, y: &Mat) -> f64 {
    let mut r = x.matmul(theta_hat);
    r.axpy(-1.0, y);
    (r.frob_norm_sq() / (r.rows() * r.cols()) as f64).sqrt()
}
