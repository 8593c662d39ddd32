//! Two-stage composition: a binary gate decides whether an image shows a
//! known template at all, and only accepted images reach the head.

use serde::{Deserialize, Serialize};

use super::mlr::{fit_mlr, predict_mlr, MlrHyper, MlrModel};
use super::{Classifier, Prediction};
use crate::error::Result;
use crate::features::FeatureVector;

const ACCEPT: &str = "templated";
const REJECT: &str = "nonmeme";

/// Runs `gate` first; a templateless gate output short-circuits to
/// templateless, anything else returns the head's prediction unchanged.
pub fn predict_gated<G: ?Sized, H: ?Sized>(
    gate: &dyn Classifier<G>,
    gate_input: &G,
    head: &dyn Classifier<H>,
    head_input: &H,
    image_id: &str,
    method: &str,
) -> Result<Prediction> {
    if !gate.classify(image_id, gate_input)?.label.is_templated() {
        return Ok(Prediction::templateless(image_id, method));
    }
    head.classify(image_id, head_input)
}

/// A gate that accepts everything.
#[derive(Clone, Copy, Debug, Default)]
pub struct AlwaysAccept;

impl<I: ?Sized> Classifier<I> for AlwaysAccept {
    fn classify(&self, image_id: &str, _input: &I) -> Result<Prediction> {
        Ok(Prediction::template(image_id, ACCEPT, 1.0, "gate:always"))
    }
}

/// Templated-vs-nonmeme logistic regression gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryGate {
    model: MlrModel,
}

impl BinaryGate {
    pub fn fit(templated: &[FeatureVector], nonmeme: &[FeatureVector], hyper: MlrHyper) -> Result<Self> {
        let features: Vec<FeatureVector> = templated.iter().chain(nonmeme).cloned().collect();
        let labels: Vec<String> = std::iter::repeat_n(ACCEPT.to_string(), templated.len())
            .chain(std::iter::repeat_n(REJECT.to_string(), nonmeme.len()))
            .collect();
        let mut model = fit_mlr(&features, &labels, hyper)?;
        model.set_method("gate:mlr");
        Ok(Self { model })
    }
}

impl Classifier<FeatureVector> for BinaryGate {
    fn classify(&self, image_id: &str, input: &FeatureVector) -> Result<Prediction> {
        let p = predict_mlr(&self.model, image_id, input, None)?;
        if p.label.template_id() == Some(ACCEPT) {
            Ok(p)
        } else {
            Ok(Prediction::templateless(image_id, &p.method))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::features::FeatureKind;
    use crate::ingest::TemplateLabel;

    struct Fixed(Option<&'static str>);

    impl Classifier<u32> for Fixed {
        fn classify(&self, image_id: &str, _: &u32) -> Result<Prediction> {
            Ok(match self.0 {
                Some(t) => Prediction::template(image_id, t, 0.7, "head"),
                None => Prediction::templateless(image_id, "head"),
            })
        }
    }

    struct Boom;

    impl Classifier<u32> for Boom {
        fn classify(&self, _: &str, _: &u32) -> Result<Prediction> {
            Err(Error::EmptyReference)
        }
    }

    #[test]
    fn rejecting_gate_skips_head() {
        let p = predict_gated(&Fixed(None), &0, &Boom, &0, "x", "gated").unwrap();
        assert_eq!(p.label, TemplateLabel::Templateless);
        assert_eq!(p.score, 0.0);
    }

    #[test]
    fn accepting_gate_passes_through() {
        let head = Fixed(Some("A"));
        let p = predict_gated(&AlwaysAccept, &0u32, &head, &0, "x", "gated").unwrap();
        assert_eq!(p, head.classify("x", &0).unwrap());
    }

    #[test]
    fn binary_gate_separates() {
        let t: Vec<FeatureVector> = (0..20)
            .map(|i| FeatureVector::new(FeatureKind::BaselineConcat, vec![1.0 + i as f64 * 0.01, 0.0]))
            .collect();
        let n: Vec<FeatureVector> = (0..20)
            .map(|i| FeatureVector::new(FeatureKind::BaselineConcat, vec![-1.0 - i as f64 * 0.01, 0.0]))
            .collect();
        let g = BinaryGate::fit(&t, &n, MlrHyper::default()).unwrap();
        assert!(g.classify("a", &t[3]).unwrap().label.is_templated());
        assert!(!g.classify("b", &n[3]).unwrap().label.is_templated());
    }
}
