//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spp_core::harness::ExperimentConfig;
use spp_core::nn::{parse_architecture, ConvNet, Dataset};

/// Increment for an ascending rank `r`, evaluated from the schedule constants
/// `alpha = ln(2/u) / (R Nc)` and `N = -ln(u) / alpha`.
pub fn delta_oracle(r: f64, ratio: f64, groups: usize, a: f64, u: f64) -> f64 {
    let alpha = (2.0 / u).ln() / (ratio * groups as f64);
    let n = -u.ln() / alpha;
    if r <= n {
        a * (-alpha * r).exp()
    } else {
        2.0 * u * a - a * (-alpha * (2.0 * n - r)).exp()
    }
}

/// Update at which a group of fixed rank first reaches p = 1 under clamped
/// accumulation, or `None` if it never does within `limit` updates.
pub fn hitting_update(delta: f64, limit: usize) -> Option<usize> {
    let mut p = 0.0f64;
    for k in 1..=limit {
        p = (p + delta).clamp(0.0, 1.0);
        if p == 1.0 {
            return Some(k);
        }
    }
    None
}

/// Eigenvalues (descending) and matching eigenvectors (columns) of a symmetric
/// matrix by cyclic Jacobi rotations.
pub fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    let scale: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = (0..n).map(|r| order.iter().map(|&i| v[r][i]).collect()).collect();
    (values, vectors)
}

/// Relative Frobenius error of projecting the column-centred `rows x cols` matrix
/// onto its top `ceil(f * min(rows, cols))` covariance eigenvectors.
pub fn pca_error_oracle(m: &[f64], rows: usize, cols: usize, fractions: &[f64]) -> Vec<f64> {
    let mut x: Vec<Vec<f64>> = (0..rows).map(|i| m[i * cols..(i + 1) * cols].to_vec()).collect();
    for j in 0..cols {
        let mean = x.iter().map(|r| r[j]).sum::<f64>() / rows as f64;
        for r in x.iter_mut() {
            r[j] -= mean;
        }
    }
    let cov: Vec<Vec<f64>> = (0..cols)
        .map(|i| (0..cols).map(|j| x.iter().map(|r| r[i] * r[j]).sum()).collect())
        .collect();
    let (_, vecs) = jacobi_eigen(cov);
    let total: f64 = x.iter().flatten().map(|v| v * v).sum();
    let rank = rows.min(cols);
    fractions
        .iter()
        .map(|&f| {
            let k = ((f * rank as f64).ceil() as usize).clamp(1, rank);
            let mut err = 0.0;
            for r in &x {
                let coeffs: Vec<f64> = (0..k).map(|c| (0..cols).map(|j| r[j] * vecs[j][c]).sum()).collect();
                for j in 0..cols {
                    let rec: f64 = (0..k).map(|c| coeffs[c] * vecs[j][c]).sum();
                    err += (r[j] - rec).powi(2);
                }
            }
            (err / total).sqrt()
        })
        .collect()
}

pub fn random_dataset(shape: [usize; 3], classes: usize, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = shape.iter().product();
    let images = (0..n * len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|i| (i % classes) as u8).collect();
    Dataset::new(shape, classes, images, labels).unwrap()
}

pub fn net(arch: &str, shape: [usize; 3], seed: u64) -> ConvNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ConvNet::new(shape, &parse_architecture(arch).unwrap(), &mut rng).unwrap()
}

/// A desk-scale synthetic experiment that trains, prunes and retrains in seconds.
pub fn tiny_config() -> ExperimentConfig {
    ExperimentConfig::parse(
        "data.source = synthetic
data.classes = 4
data.samples = 300
data.validation = 60
data.shape = 1x8x8
data.margin = 1.0
model.architecture = conv(6,3,1,1) relu maxpool(2,2) conv(8,3,1,1) relu maxpool(2,2) fc(4)
train.epochs = 2
train.batch_size = 16
prune.ratio = 0.5
prune.interval = 4
prune.learning_rate = 0.005
prune.batch_size = 16
retrain.epochs = 2
retrain.batch_size = 16
bench.warmup = 1
bench.runs = 3
",
    )
    .unwrap()
}

/// Every regular file under `dir`, as (relative name, bytes), sorted by name.
pub fn dir_contents(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}
