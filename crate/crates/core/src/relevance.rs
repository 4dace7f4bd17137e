//! Relevance network (RNet): scores how well an audio clip matches a
//! grayscale image, `r = σ(w·cos(g_a(f_a), g_v(f_v)) + b)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::RelevanceScore;
use crate::error::{Error, Result};
use crate::losses::{bce_with_logits, sigmoid};
use crate::nn::{join, Mlp2, MlpTape, Params};
use crate::semantics::AudioFeature;
use crate::tensor::Tensor;

const COS_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelevanceConfig {
    pub hidden: usize,
    /// Shared projection size `d′`.
    pub projection_dim: usize,
    /// Initial slope `w` of the cosine-to-logit map.
    pub init_scale: f64,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            projection_dim: 64,
            init_scale: 1.0,
        }
    }
}

/// Trainable elementwise input map `(x − shift) · gain`, initialized from
/// feature statistics so that frozen encoder outputs with a large common
/// component reach the heads centred.
#[derive(Clone, Debug, PartialEq)]
pub struct InputScaler {
    pub shift: Tensor,
    pub gain: Tensor,
}

impl InputScaler {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: Tensor::zeros(&[dim]),
            gain: Tensor::from_vec(&[dim], vec![1.0; dim]).expect("shape matches"),
        }
    }

    /// Set `shift` to the per-feature mean and `gain` to `1 / (std + floor)`.
    pub fn fit(&mut self, rows: &[&[f64]], floor: f64) -> Result<()> {
        let d = self.shift.len();
        if rows.is_empty() || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape(format!("cannot fit a {d}-feature scaler to these rows")));
        }
        let n = rows.len() as f64;
        for j in 0..d {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            self.shift.data_mut()[j] = mean;
            self.gain.data_mut()[j] = 1.0 / (var.sqrt() + floor);
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.shift.data())
            .zip(self.gain.data())
            .map(|((x, s), g)| (x - s) * g)
            .collect()
    }

    fn backward(&self, x: &[f64], dy: &[f64], grads: &mut InputScaler) {
        let g = self.gain.data();
        let s = self.shift.data();
        for j in 0..x.len() {
            grads.gain.data_mut()[j] += dy[j] * (x[j] - s[j]);
            grads.shift.data_mut()[j] -= dy[j] * g[j];
        }
    }
}

impl Params for InputScaler {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f(&join(prefix, "shift"), &self.shift);
        f(&join(prefix, "gain"), &self.gain);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "shift"), &mut self.shift);
        f(&join(prefix, "gain"), &mut self.gain);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceNet {
    pub audio_scaler: InputScaler,
    pub visual_scaler: InputScaler,
    pub audio_head: Mlp2,
    pub visual_head: Mlp2,
    /// `[w, b]` of the final scalar affine map.
    pub calibration: Tensor,
}

#[derive(Clone, Debug)]
pub struct RelevanceTape {
    fa: Vec<f64>,
    fv: Vec<f64>,
    audio: MlpTape,
    visual: MlpTape,
    ga: Vec<f64>,
    gv: Vec<f64>,
    cos: f64,
    logit: f64,
}

impl RelevanceTape {
    pub fn logit(&self) -> f64 {
        self.logit
    }

    pub fn cosine(&self) -> f64 {
        self.cos
    }
}

fn cosine(a: &[f64], v: &[f64]) -> (f64, f64, f64) {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot: f64 = a.iter().zip(v).map(|(x, y)| x * y).sum();
    (dot / (na * nv + COS_EPS), na, nv)
}

/// Gradient of the cosine w.r.t. `a` (swap arguments for `v`).
fn cosine_grad(a: &[f64], v: &[f64], na: f64, nv: f64, cos: f64) -> Vec<f64> {
    let denom = na * nv + COS_EPS;
    a.iter()
        .zip(v)
        .map(|(x, y)| {
            let radial = if na > 0.0 { cos * nv * x / na } else { 0.0 };
            (y - radial) / denom
        })
        .collect()
}

impl RelevanceNet {
    pub fn new(config: &RelevanceConfig, audio_dim: usize, visual_dim: usize, seed: u64) -> Result<Self> {
        if config.hidden == 0 || config.projection_dim == 0 || audio_dim == 0 || visual_dim == 0 {
            return Err(Error::Validation("relevance network sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            audio_scaler: InputScaler::identity(audio_dim),
            visual_scaler: InputScaler::identity(visual_dim),
            audio_head: Mlp2::new(&mut rng, audio_dim, config.hidden, config.projection_dim),
            visual_head: Mlp2::new(&mut rng, visual_dim, config.hidden, config.projection_dim),
            calibration: Tensor::from_vec(&[2], vec![config.init_scale, 0.0])?,
        })
    }

    fn check(&self, fa: &[f64], fv: &[f64]) -> Result<()> {
        if fa.len() != self.audio_head.input_dim() || fv.len() != self.visual_head.input_dim() {
            return Err(Error::Shape(format!(
                "relevance inputs ({}, {}) do not match network ({}, {})",
                fa.len(),
                fv.len(),
                self.audio_head.input_dim(),
                self.visual_head.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward_tape(&self, fa: &[f64], fv: &[f64]) -> Result<RelevanceTape> {
        self.check(fa, fv)?;
        let (ga, audio) = self.audio_head.forward_tape(&self.audio_scaler.forward(fa));
        let (gv, visual) = self.visual_head.forward_tape(&self.visual_scaler.forward(fv));
        let (cos, ..) = cosine(&ga, &gv);
        let c = self.calibration.data();
        let logit = c[0] * cos + c[1];
        Ok(RelevanceTape {
            fa: fa.to_vec(),
            fv: fv.to_vec(),
            audio,
            visual,
            ga,
            gv,
            cos,
            logit,
        })
    }

    pub fn score(&self, fa: &AudioFeature, fv: &[f64]) -> Result<RelevanceScore> {
        let t = self.forward_tape(&fa.0, fv)?;
        RelevanceScore::new(sigmoid(t.logit))
    }

    /// Backpropagate `dlogit` into the parameter gradients.
    pub fn backward(&self, tape: &RelevanceTape, dlogit: f64, grads: &mut RelevanceNet) {
        let c = self.calibration.data();
        {
            let g = grads.calibration.data_mut();
            g[0] += dlogit * tape.cos;
            g[1] += dlogit;
        }
        let dcos = dlogit * c[0];
        let (_, na, nv) = cosine(&tape.ga, &tape.gv);
        let dga: Vec<f64> = cosine_grad(&tape.ga, &tape.gv, na, nv, tape.cos)
            .into_iter()
            .map(|g| g * dcos)
            .collect();
        let dgv: Vec<f64> = cosine_grad(&tape.gv, &tape.ga, nv, na, tape.cos)
            .into_iter()
            .map(|g| g * dcos)
            .collect();
        let dxa = self.audio_head.backward(&tape.audio, &dga, Some(&mut grads.audio_head));
        let dxv = self
            .visual_head
            .backward(&tape.visual, &dgv, Some(&mut grads.visual_head));
        self.audio_scaler.backward(&tape.fa, &dxa, &mut grads.audio_scaler);
        self.visual_scaler.backward(&tape.fv, &dxv, &mut grads.visual_scaler);
    }

    /// BCE loss of one labelled pair; accumulates gradients when asked.
    pub fn pair_loss(&self, fa: &[f64], fv: &[f64], label: f64, grads: Option<&mut RelevanceNet>) -> Result<f64> {
        let tape = self.forward_tape(fa, fv)?;
        let (loss, dz) = bce_with_logits(tape.logit, label);
        if let Some(g) = grads {
            self.backward(&tape, dz, g);
        }
        Ok(loss)
    }
}

impl Params for RelevanceNet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.audio_scaler.visit(&join(prefix, "audio_scaler"), f);
        self.visual_scaler.visit(&join(prefix, "visual_scaler"), f);
        self.audio_head.visit(&join(prefix, "audio_head"), f);
        self.visual_head.visit(&join(prefix, "visual_head"), f);
        f(&join(prefix, "calibration"), &self.calibration);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.audio_scaler.visit_mut(&join(prefix, "audio_scaler"), f);
        self.visual_scaler.visit_mut(&join(prefix, "visual_scaler"), f);
        self.audio_head.visit_mut(&join(prefix, "audio_head"), f);
        self.visual_head.visit_mut(&join(prefix, "visual_head"), f);
        f(&join(prefix, "calibration"), &mut self.calibration);
    }
}

/// `r = 0` when audio is absent, otherwise the network score.
pub fn compute_relevance(net: &RelevanceNet, audio: Option<&AudioFeature>, visual: &[f64]) -> Result<RelevanceScore> {
    match audio {
        None => Ok(RelevanceScore::ZERO),
        Some(fa) => net.score(fa, visual),
    }
}

/// One labelled (image, audio) pairing by sample index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelevancePair {
    pub image: usize,
    pub audio: usize,
    pub matched: bool,
}

/// For every sample: its own audio as a positive and the audio of a sample
/// from a different video as a negative. Classes stay balanced.
pub fn sample_pairs(video_ids: &[String], rng: &mut ChaCha8Rng) -> Result<Vec<RelevancePair>> {
    let n = video_ids.len();
    if n < 2 || video_ids.iter().all(|v| v == &video_ids[0]) {
        return Err(Error::Data(
            "negative sampling needs at least two distinct videos".into(),
        ));
    }
    let mut pairs = Vec::with_capacity(2 * n);
    for i in 0..n {
        pairs.push(RelevancePair {
            image: i,
            audio: i,
            matched: true,
        });
        let j = loop {
            let j = rng.gen_range(0..n);
            if video_ids[j] != video_ids[i] {
                break j;
            }
        };
        pairs.push(RelevancePair {
            image: i,
            audio: j,
            matched: false,
        });
    }
    pairs.shuffle(rng);
    Ok(pairs)
}
