//! Sparse-representation classification with SCI rejection.
//!
//! A query column is coded over a dictionary of training columns by solving
//! an L1-regularised least-squares problem. If the coefficients concentrate
//! on one class the query gets the class with the smallest reconstruction
//! residual, otherwise it is rejected.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Classifier, Prediction};
use crate::error::{Error, Result};
use crate::linalg::{gram_spectral_norm, norm2, ColMatrix};
use crate::raster::GrayImage;

pub const DICTIONARY_SIDE: u32 = 16;
pub const DEFAULT_LAMBDA: f64 = 0.01;
pub const DEFAULT_SCI_THRESHOLD: f64 = 0.1;
const POWER_ITERATIONS: usize = 100;
pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_TOL: f64 = 1e-6;

/// Downsamples to 16x16, subtracts the mean and scales to unit L2 norm.
pub fn dictionary_column(image_id: &str, img: &GrayImage) -> Result<Vec<f64>> {
    let small = img.resize(DICTIONARY_SIDE, DICTIONARY_SIDE);
    let raw: Vec<f64> = small.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let centred: Vec<f64> = raw.iter().map(|v| v - mean).collect();
    let n = norm2(&centred);
    if n < 1e-12 {
        return Err(Error::DegenerateImage(image_id.to_owned()));
    }
    Ok(centred.into_iter().map(|v| v / n).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseDictionary {
    a: ColMatrix,
    /// Class index of each column; columns are grouped by class.
    column_class: Vec<usize>,
    classes: Vec<String>,
    lipschitz: f64,
    pub lambda: f64,
    pub sci_threshold: f64,
    pub max_iter: usize,
    pub tol: f64,
}

/// Builds a dictionary from `(image_id, template, image)` triples. With
/// `per_class_cap`, only the first `cap` images of each class (in input
/// order) are kept.
pub fn build_dictionary<'a>(
    items: impl IntoIterator<Item = (&'a str, &'a str, &'a GrayImage)>,
    per_class_cap: Option<usize>,
) -> Result<SparseDictionary> {
    let mut by_class: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for (id, label, img) in items {
        let bucket = by_class.entry(label).or_default();
        if per_class_cap.is_some_and(|cap| bucket.len() >= cap) {
            continue;
        }
        bucket.push(dictionary_column(id, img)?);
    }
    let grouped = by_class.into_iter().map(|(k, v)| (k.to_owned(), v)).collect::<Vec<_>>();
    SparseDictionary::from_grouped_columns(grouped)
}

impl SparseDictionary {
    /// Columns must already be unit-norm. Classes are sorted by name.
    pub fn from_grouped_columns(mut grouped: Vec<(String, Vec<Vec<f64>>)>) -> Result<Self> {
        grouped.retain(|(_, cols)| !cols.is_empty());
        grouped.sort_by(|a, b| a.0.cmp(&b.0));
        if grouped.is_empty() {
            return Err(Error::EmptyReference);
        }
        if grouped.len() < 2 {
            return Err(Error::SingleClass);
        }
        let rows = grouped[0].1[0].len();
        let mut columns = Vec::new();
        let mut column_class = Vec::new();
        let mut classes = Vec::new();
        for (k, (name, cols)) in grouped.into_iter().enumerate() {
            classes.push(name);
            for c in cols {
                if c.len() != rows {
                    return Err(Error::DimensionMismatch {
                        expected: rows,
                        actual: c.len(),
                    });
                }
                columns.push(c);
                column_class.push(k);
            }
        }
        let a = ColMatrix::from_columns(rows, &columns);
        let lipschitz = gram_spectral_norm(&a, POWER_ITERATIONS);
        Ok(Self {
            a,
            column_class,
            classes,
            lipschitz,
            lambda: DEFAULT_LAMBDA,
            sci_threshold: DEFAULT_SCI_THRESHOLD,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        })
    }

    pub fn matrix(&self) -> &ColMatrix {
        &self.a
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn column_classes(&self) -> &[usize] {
        &self.column_class
    }

    /// Classifies an already preprocessed query column.
    pub fn predict_column(&self, image_id: &str, y: &[f64]) -> Result<Prediction> {
        if y.len() != self.a.rows() {
            return Err(Error::DimensionMismatch {
                expected: self.a.rows(),
                actual: y.len(),
            });
        }
        let sol = solve_l1_with_lipschitz(&self.a, y, self.lambda, self.max_iter, self.tol, self.lipschitz)?;
        let k = self.classes.len();
        let s = match sci(&sol.x, &self.column_class, k) {
            Ok(s) => s,
            // an all-zero code carries no class evidence
            Err(Error::ZeroCoefficients) => 0.0,
            Err(e) => return Err(e),
        };
        if s < self.sci_threshold {
            return Ok(Prediction::templateless(image_id, "sparse"));
        }
        let mut best = (f64::INFINITY, 0);
        for class in 0..k {
            let masked: Vec<f64> = sol
                .x
                .iter()
                .zip(&self.column_class)
                .map(|(&v, &c)| if c == class { v } else { 0.0 })
                .collect();
            let recon = self.a.mul_vec(&masked);
            let r = norm2(&y.iter().zip(&recon).map(|(a, b)| a - b).collect::<Vec<_>>());
            if r < best.0 {
                best = (r, class);
            }
        }
        Ok(Prediction::template(image_id, &self.classes[best.1], s, "sparse"))
    }
}

pub fn predict_sparse(dict: &SparseDictionary, image_id: &str, img: &GrayImage) -> Result<Prediction> {
    let y = dictionary_column(image_id, img)?;
    dict.predict_column(image_id, &y)
}

impl Classifier<GrayImage> for SparseDictionary {
    fn classify(&self, image_id: &str, input: &GrayImage) -> Result<Prediction> {
        predict_sparse(self, image_id, input)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct L1Solution {
    pub x: Vec<f64>,
    /// Objective at the start and after every iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

/// `(1/2)‖Ax − y‖² + λ‖x‖₁`.
pub fn l1_objective(a: &ColMatrix, x: &[f64], y: &[f64], lambda: f64) -> f64 {
    let ax = a.mul_vec(x);
    let r2: f64 = ax.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
    0.5 * r2 + lambda * x.iter().map(|v| v.abs()).sum::<f64>()
}

/// Accelerated proximal gradient with step `1/L`. The momentum restarts
/// whenever a step would raise the objective, so the iterates are monotone.
/// Stops after an accepted step whose relative objective change is at most
/// `tol`.
pub fn solve_l1(a: &ColMatrix, y: &[f64], lambda: f64, max_iter: usize, tol: f64) -> Result<L1Solution> {
    let l = gram_spectral_norm(a, POWER_ITERATIONS);
    solve_l1_with_lipschitz(a, y, lambda, max_iter, tol, l)
}

fn solve_l1_with_lipschitz(
    a: &ColMatrix,
    y: &[f64],
    lambda: f64,
    max_iter: usize,
    tol: f64,
    lipschitz: f64,
) -> Result<L1Solution> {
    let n = a.cols();
    if y.len() != a.rows() {
        return Err(Error::DimensionMismatch {
            expected: a.rows(),
            actual: y.len(),
        });
    }
    let mut x = vec![0.0; n];
    let mut f_x = l1_objective(a, &x, y, lambda);
    let mut history = vec![f_x];
    if lipschitz <= 0.0 || n == 0 {
        return Ok(L1Solution {
            x,
            objective: history,
            iterations: 0,
        });
    }
    let step = 1.0 / lipschitz;
    let mut v = x.clone();
    let mut t = 1.0f64;
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let resid: Vec<f64> = a.mul_vec(&v).iter().zip(y).map(|(p, q)| p - q).collect();
        let grad = a.tmul_vec(&resid);
        let z: Vec<f64> = v
            .iter()
            .zip(&grad)
            .map(|(vi, gi)| soft_threshold(vi - step * gi, step * lambda))
            .collect();
        let f_z = l1_objective(a, &z, y, lambda);
        if !f_z.is_finite() {
            return Err(Error::NonFinite("L1 objective".into()));
        }
        let prev_f = f_x;
        let restarted = f_z > f_x;
        if !restarted {
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            v = (0..n).map(|i| z[i] + ((t - 1.0) / t_next) * (z[i] - x[i])).collect();
            x = z;
            f_x = f_z;
            t = t_next;
        } else {
            // objective went up: drop the momentum and restart from x
            v = x.clone();
            t = 1.0;
        }
        history.push(f_x);
        if !restarted && (prev_f - f_x).abs() <= tol * prev_f.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(L1Solution {
        x,
        objective: history,
        iterations,
    })
}

#[inline]
fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Sparsity concentration index of `x` given the class of each entry.
pub fn sci(x: &[f64], classes: &[usize], k: usize) -> Result<f64> {
    let total: f64 = x.iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return Err(Error::ZeroCoefficients);
    }
    if k < 2 {
        return Ok(1.0);
    }
    let mut per = vec![0.0; k];
    for (v, &c) in x.iter().zip(classes) {
        per[c] += v.abs();
    }
    let max = per.iter().copied().fold(0.0, f64::max);
    let s = (k as f64 * max / total - 1.0) / (k as f64 - 1.0);
    Ok(s.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(n: usize) -> ColMatrix {
        ColMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    #[test]
    fn identity_soft_thresholds() {
        let y = [0.0, 1.0, 0.0, 0.0];
        let sol = solve_l1(&identity(4), &y, 0.01, 500, 1e-12).unwrap();
        let want = [0.0, 0.99, 0.0, 0.0];
        for (a, b) in sol.x.iter().zip(want) {
            assert!((a - b).abs() < 1e-3, "{:?}", sol.x);
        }
    }

    #[test]
    fn huge_lambda_gives_zero() {
        let y = [0.5, 0.5, 0.5, 0.5];
        let sol = solve_l1(&identity(4), &y, 1e6, 500, 1e-6).unwrap();
        assert!(sol.x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sci_closed_forms() {
        assert_eq!(sci(&[1.0, 2.0, 0.0, 0.0], &[0, 0, 1, 1], 2).unwrap(), 1.0);
        assert_eq!(sci(&[1.0, 1.0, 1.0], &[0, 1, 2], 3).unwrap(), 0.0);
        assert_eq!(sci(&[0.75, -0.25], &[0, 1], 2).unwrap(), 0.5);
        assert!(matches!(sci(&[0.0, 0.0], &[0, 1], 2), Err(Error::ZeroCoefficients)));
    }

    #[test]
    fn constant_image_is_degenerate() {
        let img = GrayImage::from_fn(32, 32, |_, _| 77);
        assert!(matches!(dictionary_column("c", &img), Err(Error::DegenerateImage(_))));
    }

    #[test]
    fn dictionary_shape() {
        let imgs: Vec<(String, String, GrayImage)> = (0..50)
            .map(|i| {
                let img = GrayImage::from_fn(40, 40, move |x, y| ((x * (i + 1) + y * 7 + i) % 251) as u8);
                (format!("i{i}"), format!("c{}", i % 5), img)
            })
            .collect();
        let d = build_dictionary(imgs.iter().map(|(a, b, c)| (a.as_str(), b.as_str(), c)), None).unwrap();
        assert_eq!((d.matrix().rows(), d.matrix().cols()), (256, 50));
        for j in 0..50 {
            assert!((norm2(d.matrix().column(j)) - 1.0).abs() < 1e-9);
        }
        let mut sorted = d.column_classes().to_vec();
        sorted.sort();
        assert_eq!(sorted, d.column_classes());
        let capped = build_dictionary(imgs.iter().map(|(a, b, c)| (a.as_str(), b.as_str(), c)), Some(3)).unwrap();
        assert_eq!(capped.matrix().cols(), 15);
    }

    #[test]
    fn zero_threshold_never_rejects() {
        let cols = vec![
            ("a".to_string(), vec![vec![1.0, 0.0, 0.0]]),
            ("b".to_string(), vec![vec![0.0, 1.0, 0.0]]),
        ];
        let mut d = SparseDictionary::from_grouped_columns(cols).unwrap();
        d.sci_threshold = 0.0;
        let s = 0.5f64.sqrt();
        let p = d.predict_column("q", &[s, s, 0.0]).unwrap();
        assert!(p.label.is_templated());
        let p = d.predict_column("q", &[0.0, 0.0, 1.0]).unwrap();
        assert!(p.label.is_templated());
        d.sci_threshold = DEFAULT_SCI_THRESHOLD;
        let p = d.predict_column("q", &[0.0, 0.0, 1.0]).unwrap();
        assert!(!p.label.is_templated());
    }
}
