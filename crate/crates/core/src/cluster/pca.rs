use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureVector};
use crate::linalg::{dot, norm2, symmetric_eigen};

pub const DEFAULT_PCA_DIM: usize = 32;
const MAX_ITER: usize = 200;
const TOL: f64 = 1e-9;
const OVERSAMPLE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm principal axes, by descending eigenvalue.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
}

impl Pca {
    pub fn out_dim(&self) -> usize {
        self.components.len()
    }

    pub fn transform(&self, v: &[f64]) -> Result<FeatureVector> {
        if v.len() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                actual: v.len(),
            });
        }
        let centred: Vec<f64> = v.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let values = self.components.iter().map(|c| dot(c, &centred)).collect();
        Ok(FeatureVector::new(FeatureKind::Reduced, values))
    }
}

/// Orthonormalises the columns in place (modified Gram-Schmidt, applied
/// twice for stability). Columns that collapse relative to the largest input
/// column are replaced by zeros.
fn orthonormalise(q: &mut [Vec<f64>]) {
    let scale = q.iter().map(|c| norm2(c)).fold(0.0, f64::max);
    for i in 0..q.len() {
        let before = norm2(&q[i]);
        for _ in 0..2 {
            for j in 0..i {
                let (head, tail) = q.split_at_mut(i);
                let p = dot(&head[j], &tail[0]);
                for (x, y) in tail[0].iter_mut().zip(&head[j]) {
                    *x -= p * y;
                }
            }
        }
        let n = norm2(&q[i]);
        if n > 1e-10 * scale && n > 1e-10 * before {
            q[i].iter_mut().for_each(|x| *x /= n);
        } else {
            q[i].iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Principal components by orthogonal (subspace) iteration on the sample
/// covariance followed by a Rayleigh-Ritz step. If the covariance has fewer
/// than `out_dim` non-zero eigenvalues the output dimension shrinks.
pub fn pca_fit(vectors: &[Vec<f64>], out_dim: usize, seed: u64) -> Result<Pca> {
    if vectors.len() < out_dim.max(2) {
        return Err(Error::TooFewPoints {
            needed: out_dim.max(2),
            got: vectors.len(),
        });
    }
    let d = vectors[0].len();
    for v in vectors {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: v.len(),
            });
        }
    }
    let n = vectors.len() as f64;
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let centred: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(a, m)| a - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for v in &centred {
        for i in 0..d {
            if v[i] == 0.0 {
                continue;
            }
            for j in i..d {
                cov[i * d + j] += v[i] * v[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= n - 1.0;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let mul = |x: &[f64]| -> Vec<f64> { (0..d).map(|i| dot(&cov[i * d..(i + 1) * d], x)).collect() };

    let block = (out_dim + OVERSAMPLE).min(d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<Vec<f64>> = (0..block)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    orthonormalise(&mut q);
    let mut prev_ritz: Vec<f64> = Vec::new();
    for _ in 0..MAX_ITER {
        let mut z: Vec<Vec<f64>> = q.iter().map(|c| mul(c)).collect();
        orthonormalise(&mut z);
        q = z;
        let ritz: Vec<f64> = q.iter().map(|c| dot(c, &mul(c))).collect();
        let converged = prev_ritz.len() == ritz.len()
            && ritz
                .iter()
                .zip(&prev_ritz)
                .take(out_dim)
                .all(|(a, b)| (a - b).abs() <= TOL * a.abs().max(1.0));
        prev_ritz = ritz;
        if converged {
            break;
        }
    }

    // Rayleigh-Ritz on the block
    let cq: Vec<Vec<f64>> = q.iter().map(|c| mul(c)).collect();
    let mut t = vec![0.0; block * block];
    for i in 0..block {
        for j in 0..block {
            t[i * block + j] = dot(&q[i], &cq[j]);
        }
    }
    for i in 0..block {
        for j in i + 1..block {
            let s = 0.5 * (t[i * block + j] + t[j * block + i]);
            t[i * block + j] = s;
            t[j * block + i] = s;
        }
    }
    let (vals, vecs) = symmetric_eigen(t, block);
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let cutoff = 1e-12 * trace.max(f64::MIN_POSITIVE);
    let rank = vals.iter().filter(|&&v| v > cutoff).count();
    if rank == 0 {
        return Err(Error::RankDeficient {
            rank: 0,
            requested: out_dim,
        });
    }
    let k = out_dim.min(rank);
    if k < out_dim {
        log::warn!("covariance has rank {rank}; reducing to {k} components instead of {out_dim}");
    }
    let mut components = Vec::with_capacity(k);
    for row in vecs.iter().take(k) {
        let mut c = vec![0.0; d];
        for (w, qi) in row.iter().zip(&q) {
            for (ci, x) in c.iter_mut().zip(qi) {
                *ci += w * x;
            }
        }
        let nrm = norm2(&c);
        c.iter_mut().for_each(|x| *x /= nrm);
        let pivot = c
            .iter()
            .enumerate()
            .fold(
                (0, 0.0f64),
                |acc, (i, &x)| if x.abs() > acc.1 { (i, x.abs()) } else { acc },
            )
            .0;
        if c[pivot] < 0.0 {
            c.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(c);
    }
    Ok(Pca {
        mean,
        components,
        eigenvalues: vals[..k].to_vec(),
        total_variance: trace,
    })
}
