//! Training objectives: color regression, semantic distillation, relevance BCE.

use crate::error::{Error, Result};

/// A scalar loss plus named sub-terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub components: Vec<(String, f64)>,
}

impl LossValue {
    pub fn single(name: &str, value: f64) -> Self {
        Self {
            value,
            components: vec![(name.to_string(), value)],
        }
    }
}

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{what}: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Shape(format!("{what}: empty input")));
    }
    Ok(())
}

/// Pluggable colorization objective over normalized ab values.
pub trait ColorLoss: Send + Sync {
    fn name(&self) -> &'static str;

    fn loss(&self, pred: &[f64], target: &[f64]) -> Result<LossValue>;

    /// Gradient of [`ColorLoss::loss`] with respect to `pred`.
    fn gradient(&self, pred: &[f64], target: &[f64]) -> Result<Vec<f64>>;
}

/// Mean smooth-L1 (Huber with threshold 1) over all components.
#[derive(Clone, Copy, Debug, Default)]
pub struct SmoothL1;

impl ColorLoss for SmoothL1 {
    fn name(&self) -> &'static str {
        "smooth_l1"
    }

    fn loss(&self, pred: &[f64], target: &[f64]) -> Result<LossValue> {
        same_len(pred, target, "color loss")?;
        let sum: f64 = pred
            .iter()
            .zip(target)
            .map(|(p, t)| {
                let d = (p - t).abs();
                if d < 1.0 {
                    0.5 * d * d
                } else {
                    d - 0.5
                }
            })
            .sum();
        Ok(LossValue::single("color", sum / pred.len() as f64))
    }

    fn gradient(&self, pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
        same_len(pred, target, "color loss")?;
        let n = pred.len() as f64;
        Ok(pred
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t).clamp(-1.0, 1.0) / n)
            .collect())
    }
}

pub fn color_loss(pred_ab: &[f64], true_ab: &[f64]) -> Result<LossValue> {
    SmoothL1.loss(pred_ab, true_ab)
}

/// `‖f_a − f_v‖²`, summed over dimensions.
pub fn semantic_loss(audio: &[f64], visual: &[f64]) -> Result<LossValue> {
    same_len(audio, visual, "semantic loss")?;
    let v = audio.iter().zip(visual).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(LossValue::single("semantic", v))
}

/// Gradient of [`semantic_loss`] with respect to the audio embedding.
pub fn semantic_loss_grad(audio: &[f64], visual: &[f64]) -> Result<Vec<f64>> {
    same_len(audio, visual, "semantic loss")?;
    Ok(audio.iter().zip(visual).map(|(a, b)| 2.0 * (a - b)).collect())
}

fn check_label(h: f64) -> Result<()> {
    if h != 0.0 && h != 1.0 {
        return Err(Error::Validation(format!("label {h} is not 0 or 1")));
    }
    Ok(())
}

/// Binary cross-entropy `−[h ln r + (1−h) ln(1−r)]` for `r ∈ (0,1)`.
pub fn relevance_loss(r: f64, h: f64) -> Result<LossValue> {
    check_label(h)?;
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Validation(format!("relevance {r} outside (0,1)")));
    }
    let v = -(h * r.ln() + (1.0 - h) * (1.0 - r).ln());
    Ok(LossValue::single("relevance", v))
}

pub fn relevance_loss_grad(r: f64, h: f64) -> Result<f64> {
    check_label(h)?;
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Validation(format!("relevance {r} outside (0,1)")));
    }
    Ok(-h / r + (1.0 - h) / (1.0 - r))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// BCE of `sigmoid(z)` against `h`, evaluated stably; returns `(loss, dL/dz)`.
pub fn bce_with_logits(z: f64, h: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * h + (-z.abs()).exp().ln_1p();
    (loss, sigmoid(z) - h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn color_loss_examples() {
        let a = [0.1, -0.3, 0.7, 0.0];
        assert_eq!(color_loss(&a, &a).unwrap().value, 0.0);
        let b: Vec<f64> = a.iter().map(|v| v - 0.5).collect();
        // every difference is 0.5, so each term is 0.5·0.25
        assert!((color_loss(&a, &b).unwrap().value - 0.125).abs() < 1e-12);
        assert!(color_loss(&a, &a[..3]).is_err());
        // linear branch
        assert!((color_loss(&[3.0], &[0.0]).unwrap().value - 2.5).abs() < 1e-12);
    }

    #[test]
    fn semantic_loss_examples() {
        assert_eq!(semantic_loss(&[0.3, 0.4], &[0.3, 0.4]).unwrap().value, 0.0);
        let v = semantic_loss(&[0.6, 0.8], &[0.0, 1.0]).unwrap().value;
        assert!((v - 0.40).abs() < 1e-12);
        assert!(semantic_loss(&[1.0], &[1.0, 2.0]).is_err());
        let g = semantic_loss_grad(&[0.6, 0.8], &[0.0, 1.0]).unwrap();
        assert!((g[0] - 1.2).abs() < 1e-12 && (g[1] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn relevance_loss_examples() {
        let v = relevance_loss(0.5, 1.0).unwrap().value;
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(relevance_loss(0.999_999, 1.0).unwrap().value < 1e-5);
        assert!(relevance_loss(0.0, 1.0).is_err());
        assert!(relevance_loss(1.0, 0.0).is_err());
        assert!(relevance_loss(0.5, 0.5).is_err());
        let (l, _) = bce_with_logits(0.0, 1.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (l, g) = bce_with_logits(-800.0, 1.0);
        assert!(l.is_finite() && (g + 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn color_loss_symmetric_and_non_negative(
            a in proptest::collection::vec(-3.0f64..3.0, 1..20),
            shift in -2.0f64..2.0,
        ) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v + shift * (i as f64).sin()).collect();
            let l1 = color_loss(&a, &b).unwrap().value;
            let l2 = color_loss(&b, &a).unwrap().value;
            prop_assert!(l1 >= 0.0);
            prop_assert!((l1 - l2).abs() < 1e-12);
        }

        #[test]
        fn bce_symmetry_identity(r in 0.001f64..0.999) {
            let lhs = relevance_loss(r, 1.0).unwrap().value + relevance_loss(1.0 - r, 0.0).unwrap().value;
            let rhs = 2.0 * relevance_loss(r, 1.0).unwrap().value;
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn bce_logits_agrees_with_probability_form(z in -12.0f64..12.0, h in 0u8..2) {
            let h = h as f64;
            let (l, dz) = bce_with_logits(z, h);
            let r = sigmoid(z);
            let direct = relevance_loss(r, h).unwrap().value;
            prop_assert!((l - direct).abs() < 1e-9 * (1.0 + direct));
            // chain rule through the sigmoid
            let chain = relevance_loss_grad(r, h).unwrap() * r * (1.0 - r);
            prop_assert!((dz - chain).abs() < 1e-9);
        }
    }
}
