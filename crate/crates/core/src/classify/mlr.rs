//! Multinomial logistic regression baseline.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Classifier, Prediction};
use crate::error::{Error, Result};
use crate::features::FeatureVector;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlrHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for MlrHyper {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 50,
            batch: 64,
            l2: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlrModel {
    classes: Vec<String>,
    dim: usize,
    /// `classes x dim`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
    /// Per-feature standardisation fitted on the training set.
    mean: Vec<f64>,
    scale: Vec<f64>,
    method: String,
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

fn logits(weights: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    bias.iter()
        .enumerate()
        .map(|(k, b)| {
            b + weights[k * d..(k + 1) * d]
                .iter()
                .zip(x)
                .map(|(w, v)| w * v)
                .sum::<f64>()
        })
        .collect()
}

/// Mean cross-entropy plus `l2 / 2 * ||W||²` (bias unregularised), and its
/// gradient with respect to `W` (row-major) and `b`.
pub fn mlr_loss_and_grad(
    weights: &[f64],
    bias: &[f64],
    xs: &[&[f64]],
    ys: &[usize],
    l2: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let k = bias.len();
    let d = weights.len().checked_div(k).unwrap_or(0);
    let n = xs.len().max(1) as f64;
    let mut gw = vec![0.0; weights.len()];
    let mut gb = vec![0.0; k];
    let mut loss = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let mut p = logits(weights, bias, x);
        softmax_in_place(&mut p);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        for c in 0..k {
            let g = p[c] - if c == y { 1.0 } else { 0.0 };
            gb[c] += g;
            for (gwi, xi) in gw[c * d..(c + 1) * d].iter_mut().zip(x.iter()) {
                *gwi += g * xi;
            }
        }
    }
    loss /= n;
    gb.iter_mut().for_each(|g| *g /= n);
    for (g, w) in gw.iter_mut().zip(weights) {
        *g = *g / n + l2 * w;
    }
    loss += 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>();
    (loss, gw, gb)
}

pub fn fit_mlr(features: &[FeatureVector], labels: &[String], hyper: MlrHyper) -> Result<MlrModel> {
    fit_mlr_with_history(features, labels, hyper).map(|(m, _)| m)
}

/// Mini-batch gradient descent from zero weights. Also returns the full
/// training loss after each epoch.
pub fn fit_mlr_with_history(
    features: &[FeatureVector],
    labels: &[String],
    hyper: MlrHyper,
) -> Result<(MlrModel, Vec<f64>)> {
    assert_eq!(features.len(), labels.len(), "one label per feature");
    let classes: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::SingleClass);
    }
    let dim = features[0].dim();
    for f in features {
        if f.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: f.dim(),
            });
        }
    }
    let n = features.len();
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f.values()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut scale = vec![0.0; dim];
    for f in features {
        for ((s, v), m) in scale.iter_mut().zip(f.values()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in scale.iter_mut() {
        let sd = (*s / n as f64).sqrt();
        *s = if sd > 1e-12 { sd } else { 1.0 };
    }
    let xs: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            f.values()
                .iter()
                .zip(&mean)
                .zip(&scale)
                .map(|((v, m), s)| (v - m) / s)
                .collect()
        })
        .collect();
    let ys: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label is registered"))
        .collect();

    let k = classes.len();
    let mut weights = vec![0.0; k * dim];
    let mut bias = vec![0.0; k];
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let batch = hyper.batch.max(1);
    let all_x: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let bx: Vec<&[f64]> = chunk.iter().map(|&i| xs[i].as_slice()).collect();
            let by: Vec<usize> = chunk.iter().map(|&i| ys[i]).collect();
            let (_, gw, gb) = mlr_loss_and_grad(&weights, &bias, &bx, &by, hyper.l2);
            for (w, g) in weights.iter_mut().zip(&gw) {
                *w -= hyper.lr * g;
            }
            for (b, g) in bias.iter_mut().zip(&gb) {
                *b -= hyper.lr * g;
            }
        }
        let (loss, _, _) = mlr_loss_and_grad(&weights, &bias, &all_x, &ys, hyper.l2);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(epoch));
        }
        history.push(loss);
    }
    Ok((
        MlrModel {
            classes,
            dim,
            weights,
            bias,
            mean,
            scale,
            method: "mlr:baseline".into(),
        },
        history,
    ))
}

impl MlrModel {
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn set_method(&mut self, method: impl Into<String>) {
        self.method = method.into();
    }

    pub fn predict_proba(&self, feature: &FeatureVector) -> Result<Vec<f64>> {
        if feature.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: feature.dim(),
            });
        }
        let x: Vec<f64> = feature
            .values()
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        let mut p = logits(&self.weights, &self.bias, &x);
        softmax_in_place(&mut p);
        Ok(p)
    }
}

/// Softmax argmax; with `reject_threshold`, a maximum probability below it
/// yields templateless.
pub fn predict_mlr(
    model: &MlrModel,
    image_id: &str,
    feature: &FeatureVector,
    reject_threshold: Option<f64>,
) -> Result<Prediction> {
    let p = model.predict_proba(feature)?;
    let (best, &prob) = p.iter().enumerate().fold(
        (0, &f64::NEG_INFINITY),
        |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc },
    );
    if reject_threshold.is_some_and(|t| prob < t) {
        return Ok(Prediction::templateless(image_id, &model.method));
    }
    Ok(Prediction::template(
        image_id,
        &model.classes[best],
        prob,
        &model.method,
    ))
}

impl Classifier<FeatureVector> for MlrModel {
    fn classify(&self, image_id: &str, input: &FeatureVector) -> Result<Prediction> {
        predict_mlr(self, image_id, input, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;
    use crate::ingest::TemplateLabel;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(n: usize, seed: u64) -> (Vec<FeatureVector>, Vec<String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let (cx, label) = if i % 2 == 0 { (-2.0, "a") } else { (2.0, "b") };
            xs.push(FeatureVector::new(
                FeatureKind::BaselineConcat,
                vec![cx + noise.sample(&mut rng), noise.sample(&mut rng)],
            ));
            ys.push(label.to_string());
        }
        (xs, ys)
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let (xs, ys) = blobs(10, 1);
        let hyper = MlrHyper {
            epochs: 0,
            ..MlrHyper::default()
        };
        let m = fit_mlr(&xs, &ys, hyper).unwrap();
        let p = m.predict_proba(&xs[0]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (xs, ys) = blobs(200, 2);
        let m = fit_mlr(&xs, &ys, MlrHyper::default()).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert_eq!(predict_mlr(&m, "i", x, None).unwrap().label, TemplateLabel::template(y));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (k, d, n) = (3, 4, 12);
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ys: Vec<usize> = (0..n).map(|i| i % k).collect();
        let xr: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        for w0 in [
            vec![0.0; k * d],
            (0..k * d).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>(),
        ] {
            let b0: Vec<f64> = vec![0.1, -0.2, 0.05];
            let (_, gw, gb) = mlr_loss_and_grad(&w0, &b0, &xr, &ys, 1e-2);
            let h = 1e-6;
            for i in 0..k * d {
                let mut wp = w0.clone();
                let mut wm = w0.clone();
                wp[i] += h;
                wm[i] -= h;
                let fd = (mlr_loss_and_grad(&wp, &b0, &xr, &ys, 1e-2).0
                    - mlr_loss_and_grad(&wm, &b0, &xr, &ys, 1e-2).0)
                    / (2.0 * h);
                assert!(
                    (fd - gw[i]).abs() <= 1e-5 * gw[i].abs().max(1e-3),
                    "w[{i}]: {fd} vs {}",
                    gw[i]
                );
            }
            for c in 0..k {
                let mut bp = b0.clone();
                let mut bm = b0.clone();
                bp[c] += h;
                bm[c] -= h;
                let fd = (mlr_loss_and_grad(&w0, &bp, &xr, &ys, 1e-2).0
                    - mlr_loss_and_grad(&w0, &bm, &xr, &ys, 1e-2).0)
                    / (2.0 * h);
                assert!((fd - gb[c]).abs() <= 1e-5 * gb[c].abs().max(1e-3));
            }
        }
    }

    #[test]
    fn full_batch_loss_is_monotone() {
        let (xs, ys) = blobs(40, 4);
        let hyper = MlrHyper {
            lr: 1e-3,
            epochs: 100,
            batch: 40,
            ..MlrHyper::default()
        };
        let (_, hist) = fit_mlr_with_history(&xs, &ys, hyper).unwrap();
        for w in hist.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn prediction_contracts() {
        let (xs, ys) = blobs(50, 5);
        let m = fit_mlr(&xs, &ys, MlrHyper::default()).unwrap();
        let p = m.predict_proba(&xs[3]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for x in &xs {
            let pred = predict_mlr(&m, "i", x, Some(1.01)).unwrap();
            assert_eq!(pred.label, TemplateLabel::Templateless);
            assert_eq!(pred.score, 0.0);
        }
        let bad = FeatureVector::new(FeatureKind::BaselineConcat, vec![1.0]);
        assert!(matches!(
            predict_mlr(&m, "i", &bad, None),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn single_class_rejected() {
        let (xs, _) = blobs(4, 6);
        let ys = vec!["a".to_string(); 4];
        assert!(matches!(
            fit_mlr(&xs, &ys, MlrHyper::default()),
            Err(Error::SingleClass)
        ));
    }
}
