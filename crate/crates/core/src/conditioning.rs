//! Semantic guidance injection.
//!
//! `SG(x, c) = γ(c) · (x − μ(x)) / sqrt(σ²(x) + ε) + β(c)` per channel, with
//! population statistics over spatial positions, and the relevance-gated
//! blend `DSG(x, c, r) = r · SG(x, c) + (1 − r) · x` with a scalar `r`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Mlp2, MlpTape, Params};
use crate::tensor::{FeatureMap, Tensor};

pub const ADAIN_EPS: f64 = 1e-5;

/// Scalar audio/visual relevance in `[0,1]`; `0` disables guidance.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct RelevanceScore(f64);

impl RelevanceScore {
    pub const ZERO: RelevanceScore = RelevanceScore(0.0);
    pub const ONE: RelevanceScore = RelevanceScore(1.0);

    pub fn new(r: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Validation(format!("relevance {r} outside [0,1]")));
        }
        Ok(Self(r))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0.0
    }
}

/// The two MLPs producing per-channel scale and shift from a conditioning
/// vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineHeads {
    pub gamma: Mlp2,
    pub beta: Mlp2,
}

impl AffineHeads {
    /// Final layers start at zero weight with γ bias 1, so a fresh head
    /// yields `γ(c) = 1`, `β(c) = 0` for every `c`.
    pub fn new(rng: &mut ChaCha8Rng, cond_dim: usize, hidden: usize, channels: usize) -> Self {
        let mut gamma = Mlp2::new(rng, cond_dim, hidden, channels);
        let mut beta = Mlp2::new(rng, cond_dim, hidden, channels);
        gamma.fc2.weight.fill(0.0);
        gamma.fc2.bias.fill(1.0);
        beta.fc2.weight.fill(0.0);
        beta.fc2.bias.fill(0.0);
        Self { gamma, beta }
    }

    pub fn cond_dim(&self) -> usize {
        self.gamma.input_dim()
    }

    pub fn channels(&self) -> usize {
        self.gamma.output_dim()
    }
}

impl Params for AffineHeads {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.gamma.visit(&join(prefix, "gamma"), f);
        self.beta.visit(&join(prefix, "beta"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.gamma.visit_mut(&join(prefix, "gamma"), f);
        self.beta.visit_mut(&join(prefix, "beta"), f);
    }
}

/// Per-channel normalization statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct AdainTape {
    normalized: FeatureMap,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
}

/// Instance-normalize `x` and apply explicit per-channel `gamma` / `beta`.
pub fn adain(x: &FeatureMap, gamma: &[f64], beta: &[f64], eps: f64) -> Result<(FeatureMap, AdainTape)> {
    if gamma.len() != x.channels || beta.len() != x.channels {
        return Err(Error::Shape(format!(
            "affine parameters have {} / {} entries for {} channels",
            gamma.len(),
            beta.len(),
            x.channels
        )));
    }
    let n = x.plane_len() as f64;
    let mut out = FeatureMap::zeros(x.channels, x.height, x.width);
    let mut normalized = FeatureMap::zeros(x.channels, x.height, x.width);
    let mut inv_std = Vec::with_capacity(x.channels);
    for k in 0..x.channels {
        let p = x.plane(k);
        let mean = p.iter().sum::<f64>() / n;
        let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let s = 1.0 / (var + eps).sqrt();
        inv_std.push(s);
        let np = normalized.plane_mut(k);
        for (o, v) in np.iter_mut().zip(p) {
            *o = (v - mean) * s;
        }
        let (g, b) = (gamma[k], beta[k]);
        for (o, z) in out.plane_mut(k).iter_mut().zip(normalized.plane(k)) {
            *o = g * z + b;
        }
    }
    Ok((
        out,
        AdainTape {
            normalized,
            inv_std,
            gamma: gamma.to_vec(),
        },
    ))
}

/// Gradients of [`adain`] with respect to `(x, gamma, beta)`.
pub fn adain_backward(tape: &AdainTape, dy: &FeatureMap) -> (FeatureMap, Vec<f64>, Vec<f64>) {
    let z = &tape.normalized;
    let n = z.plane_len() as f64;
    let mut dx = FeatureMap::zeros(z.channels, z.height, z.width);
    let mut dgamma = Vec::with_capacity(z.channels);
    let mut dbeta = Vec::with_capacity(z.channels);
    for k in 0..z.channels {
        let zp = z.plane(k);
        let gp = dy.plane(k);
        let sum_dy: f64 = gp.iter().sum();
        let sum_dy_z: f64 = gp.iter().zip(zp).map(|(g, z)| g * z).sum();
        dgamma.push(sum_dy_z);
        dbeta.push(sum_dy);
        let g = tape.gamma[k];
        let s = tape.inv_std[k];
        // dz = g·dy;  dx = s/n · (n·dz − Σdz − z·Σ(dz·z))
        let (sum_dz, sum_dz_z) = (g * sum_dy, g * sum_dy_z);
        for ((d, gy), zz) in dx.plane_mut(k).iter_mut().zip(gp).zip(zp) {
            *d = s / n * (n * g * gy - sum_dz - zz * sum_dz_z);
        }
    }
    (dx, dgamma, dbeta)
}

/// Everything [`sg_backward`] needs from a forward pass.
#[derive(Clone, Debug)]
pub struct SgTape {
    adain: AdainTape,
    gamma_tape: MlpTape,
    beta_tape: MlpTape,
}

fn check_inputs(x: &FeatureMap, c: &[f64], heads: &AffineHeads) -> Result<()> {
    if heads.channels() != x.channels {
        return Err(Error::Shape(format!(
            "affine heads produce {} channels, feature map has {}",
            heads.channels(),
            x.channels
        )));
    }
    if c.len() != heads.cond_dim() {
        return Err(Error::Shape(format!(
            "conditioning vector has length {}, heads expect {}",
            c.len(),
            heads.cond_dim()
        )));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite conditioning vector".into()));
    }
    Ok(())
}

pub fn sg_inject(x: &FeatureMap, c: &[f64], heads: &AffineHeads) -> Result<FeatureMap> {
    Ok(sg_forward(x, c, heads)?.0)
}

pub fn sg_forward(x: &FeatureMap, c: &[f64], heads: &AffineHeads) -> Result<(FeatureMap, SgTape)> {
    check_inputs(x, c, heads)?;
    let (gamma, gamma_tape) = heads.gamma.forward_tape(c);
    let (beta, beta_tape) = heads.beta.forward_tape(c);
    let (out, adain) = adain(x, &gamma, &beta, ADAIN_EPS)?;
    Ok((
        out,
        SgTape {
            adain,
            gamma_tape,
            beta_tape,
        },
    ))
}

/// Returns `(dx, dc)` and accumulates head gradients into `grads` if given.
pub fn sg_backward(
    tape: &SgTape,
    dy: &FeatureMap,
    heads: &AffineHeads,
    grads: Option<&mut AffineHeads>,
) -> (FeatureMap, Vec<f64>) {
    let (dx, dgamma, dbeta) = adain_backward(&tape.adain, dy);
    let (gg, gb) = match grads {
        Some(g) => (Some(&mut g.gamma), Some(&mut g.beta)),
        None => (None, None),
    };
    let mut dc = heads.gamma.backward(&tape.gamma_tape, &dgamma, gg);
    let dc_beta = heads.beta.backward(&tape.beta_tape, &dbeta, gb);
    for (a, b) in dc.iter_mut().zip(dc_beta) {
        *a += b;
    }
    (dx, dc)
}

pub fn dsg_inject(x: &FeatureMap, c: &[f64], r: RelevanceScore, heads: &AffineHeads) -> Result<FeatureMap> {
    Ok(dsg_forward(x, c, r, heads)?.0)
}

/// Tape of the gated blend; `None` inside when `r = 0` skipped the SG branch.
#[derive(Clone, Debug)]
pub struct DsgTape {
    r: f64,
    sg: Option<SgTape>,
}

pub fn dsg_forward(x: &FeatureMap, c: &[f64], r: RelevanceScore, heads: &AffineHeads) -> Result<(FeatureMap, DsgTape)> {
    check_inputs(x, c, heads)?;
    let r = r.value();
    if r == 0.0 {
        return Ok((x.clone(), DsgTape { r, sg: None }));
    }
    let (sg, tape) = sg_forward(x, c, heads)?;
    if r == 1.0 {
        return Ok((sg, DsgTape { r, sg: Some(tape) }));
    }
    let mut out = sg;
    for (o, v) in out.data.iter_mut().zip(&x.data) {
        *o = r * *o + (1.0 - r) * v;
    }
    Ok((out, DsgTape { r, sg: Some(tape) }))
}

/// Returns `(dx, dc)`; `dc` is all zeros when the SG branch was skipped.
pub fn dsg_backward(
    tape: &DsgTape,
    dy: &FeatureMap,
    heads: &AffineHeads,
    grads: Option<&mut AffineHeads>,
) -> (FeatureMap, Vec<f64>) {
    let Some(sg) = &tape.sg else {
        return (dy.clone(), vec![0.0; heads.cond_dim()]);
    };
    let r = tape.r;
    let mut scaled = dy.clone();
    scaled.data.iter_mut().for_each(|v| *v *= r);
    let (mut dx, dc) = sg_backward(sg, &scaled, heads, grads);
    if r != 1.0 {
        for (d, g) in dx.data.iter_mut().zip(&dy.data) {
            *d += (1.0 - r) * g;
        }
    }
    (dx, dc)
}
