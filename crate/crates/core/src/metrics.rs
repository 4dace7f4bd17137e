//! Image quality metrics and evaluation reports.
//!
//! PSNR is computed on RGB in `[0,1]`. SSIM is computed on luma
//! (`0.299 R + 0.587 G + 0.114 B`) with an 11×11 Gaussian window (σ = 1.5),
//! `K1 = 0.01`, `K2 = 0.03`, dynamic range 1, averaged over the valid region.
//!
//! # Report format
//!
//! [`MetricsReport::to_jsonl`] emits one JSON object per line. Per-image rows
//! carry `"kind": "image"` with fields `mode`, `id`, `psnr_db` (null when
//! infinite), `psnr_infinite`, `ssim`, `perceptual` (null unless a perceptual
//! metric is plugged in), `relevance` and `clipped_fraction`. The final row has
//! `"kind": "summary"` with `mode`, `count`, `mean_psnr_db` (mean over finite
//! values, null if none), `infinite_psnr_count`, `mean_ssim`,
//! `perceptual_metric`, `mean_perceptual`, plus optional `hue_accuracy` and
//! `ab_mse` for labelled synthetic data.

use serde::{Deserialize, Serialize};

use crate::colorspace::RgbImage;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    /// The images are identical.
    Infinite,
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }
    }
}

fn check_shapes(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "images are {}x{} and {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn psnr(pred: &RgbImage, reference: &RgbImage) -> Result<Psnr> {
    check_shapes(pred, reference)?;
    let n = pred.data().len() as f64;
    let mse = pred
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(Psnr::Infinite);
    }
    Ok(Psnr::Finite(10.0 * (1.0 / mse).log10()))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub fn luma(img: &RgbImage) -> Vec<f64> {
    img.data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect()
}

pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering of an `h×w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

pub fn ssim(pred: &RgbImage, reference: &RgbImage) -> Result<f64> {
    check_shapes(pred, reference)?;
    let (h, w) = (pred.height(), pred.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Validation(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let (x, y) = (luma(pred), luma(reference));
    let k = gaussian_window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let sxx = filter_valid(&xx, h, w, &k);
    let syy = filter_valid(&yy, h, w, &k);
    let sxy = filter_valid(&xy, h, w, &k);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok((total / n as f64).clamp(-1.0, 1.0))
}

/// Area under the ROC curve via the rank-sum statistic (ties count ½).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l)
        .map(|(s, _)| *s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, l)| !**l)
        .map(|(s, _)| *s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Validation("AUC needs both positive and negative samples".into()));
    }
    let mut all: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|(_, l)| *l).count() as f64 * avg_rank;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Optional learned-perceptual distance; none ships by default because a
/// faithful one needs external pretrained weights.
pub trait PerceptualMetric: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, pred: &RgbImage, reference: &RgbImage) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr_db: Option<f64>,
    pub psnr_infinite: bool,
    pub ssim: f64,
    pub perceptual: Option<f64>,
    pub relevance: f64,
    pub clipped_fraction: f64,
}

impl ImageMetrics {
    pub fn compute(
        id: impl Into<String>,
        pred: &RgbImage,
        reference: &RgbImage,
        perceptual: Option<&dyn PerceptualMetric>,
    ) -> Result<Self> {
        let p = psnr(pred, reference)?;
        Ok(Self {
            id: id.into(),
            psnr_db: p.db(),
            psnr_infinite: p == Psnr::Infinite,
            ssim: ssim(pred, reference)?,
            perceptual: perceptual.map(|m| m.distance(pred, reference)).transpose()?,
            relevance: 0.0,
            clipped_fraction: 0.0,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub mode: String,
    pub count: usize,
    pub mean_psnr_db: Option<f64>,
    pub infinite_psnr_count: usize,
    pub mean_ssim: f64,
    pub perceptual_metric: Option<String>,
    pub mean_perceptual: Option<f64>,
    pub hue_accuracy: Option<f64>,
    pub ab_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mode: String,
    pub images: Vec<ImageMetrics>,
    pub perceptual_metric: Option<String>,
    pub hue_accuracy: Option<f64>,
    pub ab_mse: Option<f64>,
}

impl MetricsReport {
    pub fn summary(&self) -> MetricsSummary {
        let finite: Vec<f64> = self.images.iter().filter_map(|m| m.psnr_db).collect();
        let n = self.images.len();
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let ssims: Vec<f64> = self.images.iter().map(|m| m.ssim).collect();
        let perc: Vec<f64> = self.images.iter().filter_map(|m| m.perceptual).collect();
        MetricsSummary {
            mode: self.mode.clone(),
            count: n,
            mean_psnr_db: mean(&finite),
            infinite_psnr_count: n - finite.len(),
            mean_ssim: mean(&ssims).unwrap_or(0.0),
            perceptual_metric: self.perceptual_metric.clone(),
            mean_perceptual: mean(&perc),
            hue_accuracy: self.hue_accuracy,
            ab_mse: self.ab_mse,
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for m in &self.images {
            let mut v = serde_json::to_value(m)?;
            let obj = v.as_object_mut().expect("struct serializes to object");
            obj.insert("kind".into(), "image".into());
            obj.insert("mode".into(), self.mode.clone().into());
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        let mut v = serde_json::to_value(self.summary())?;
        v.as_object_mut()
            .expect("struct serializes to object")
            .insert("kind".into(), "summary".into());
        out.push_str(&serde_json::to_string(&v)?);
        out.push('\n');
        Ok(out)
    }

    /// One-line human readable summary.
    pub fn summary_line(&self) -> String {
        let s = self.summary();
        let psnr = match (s.mean_psnr_db, s.infinite_psnr_count) {
            (Some(p), 0) => format!("{p:8.3} dB"),
            (Some(p), k) => format!("{p:8.3} dB ({k} inf)"),
            (None, _) => "     inf".to_string(),
        };
        let perceptual = match (&s.perceptual_metric, s.mean_perceptual) {
            (Some(name), Some(v)) => format!("{name} {v:.4}"),
            _ => "perceptual omitted".to_string(),
        };
        let mut line = format!(
            "{:<20} n={:<5} PSNR {}  SSIM {:.4}  {}",
            s.mode, s.count, psnr, s.mean_ssim, perceptual
        );
        if let Some(a) = s.hue_accuracy {
            line.push_str(&format!("  hue-acc {:.3}", a));
        }
        if let Some(e) = s.ab_mse {
            line.push_str(&format!("  ab-mse {:.2}", e));
        }
        line
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> RgbImage {
        let mut d = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    d.push(f(y, x, c));
                }
            }
        }
        RgbImage::new(h, w, d).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = img(4, 4, |y, x, c| ((y + x + c) % 5) as f64 / 5.0);
        assert_eq!(psnr(&a, &a).unwrap(), Psnr::Infinite);
        let b = img(4, 4, |y, x, c| ((y + x + c) % 5) as f64 / 5.0 + 1.0 / 255.0);
        let p = psnr(&a, &b).unwrap().db().unwrap();
        assert!((p - 48.1308).abs() < 1e-3);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &img(4, 5, |_, _, _| 0.0)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = img(16, 16, |y, x, _| if (y / 2 + x / 2) % 2 == 0 { 1.0 } else { 0.0 });
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let c = img(12, 12, |_, _, _| 0.4);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        let neg = img(16, 16, |y, x, _| if (y / 2 + x / 2) % 2 == 0 { 0.0 } else { 1.0 });
        assert!(ssim(&a, &neg).unwrap() < 0.5);
        let small = img(10, 16, |_, _, _| 0.0);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            roc_auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(),
            1.0
        );
        assert_eq!(
            roc_auc(&[0.1, 0.2, 0.9, 0.8], &[true, true, false, false]).unwrap(),
            0.0
        );
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(roc_auc(&[0.5], &[true]).is_err());
    }

    #[test]
    fn report_serialization() {
        let a = img(12, 12, |y, _, _| y as f64 / 12.0);
        let m = ImageMetrics::compute("x", &a, &a, None).unwrap();
        let rep = MetricsReport {
            mode: "full".into(),
            images: vec![m.clone(), m],
            perceptual_metric: None,
            hue_accuracy: None,
            ab_mse: None,
        };
        let text = rep.to_jsonl().unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["kind"], "image");
        assert_eq!(lines[0]["psnr_infinite"], true);
        assert!(lines[0]["psnr_db"].is_null());
        assert_eq!(lines[2]["kind"], "summary");
        assert_eq!(lines[2]["infinite_psnr_count"], 2);
        assert!(rep.summary_line().contains("perceptual omitted"));
    }
}
