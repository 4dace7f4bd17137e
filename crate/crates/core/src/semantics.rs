//! Semantic encoders: the visual encoder `E_s` over color images, the audio
//! encoder `E_a` over log-mel spectrograms, the audio-to-visual translator
//! (A2V), and the condition MLP that maps a semantic into AdaIN space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Spectrogram;
use crate::colorspace::RgbImage;
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, join, max_pool2, max_pool2_backward, relu_backward_inplace,
    relu_inplace, Conv2d, Mlp2, MlpTape, Params,
};
use crate::tensor::{FeatureMap, Tensor};

const NORM_FLOOR: f64 = 1e-12;
const SPEC_STD_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemanticConfig {
    /// Shared semantic dimension `d`.
    pub embedding_dim: usize,
    pub visual_channels: Vec<usize>,
    pub visual_hidden: usize,
    /// Channels of the audio conv blocks. `d_a` is the last entry times the
    /// number of mel bins left after pooling.
    pub audio_channels: Vec<usize>,
    pub a2v_hidden: usize,
    pub cond_hidden: usize,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 128,
            visual_channels: vec![32, 64, 128, 128],
            visual_hidden: 128,
            audio_channels: vec![32, 64, 128, 256],
            a2v_hidden: 256,
            cond_hidden: 128,
        }
    }
}

impl SemanticConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: &[usize]| !v.is_empty() && v.iter().all(|&c| c > 0);
        if self.embedding_dim == 0 || self.visual_hidden == 0 || self.a2v_hidden == 0 || self.cond_hidden == 0 {
            return Err(Error::Validation("semantic sizes must be positive".into()));
        }
        if !positive(&self.visual_channels) || !positive(&self.audio_channels) {
            return Err(Error::Validation(
                "encoder channel lists must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }

    /// `d_a` for spectrograms with `n_mels` bins.
    pub fn audio_dim(&self, n_mels: usize) -> usize {
        let bins = self.audio_channels.iter().fold(n_mels, |w, _| pooled_len(w));
        self.audio_channels.last().expect("validated") * bins
    }
}

/// Unit-norm visual semantic `f_v^s`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualSemantic(Vec<f64>);

impl VisualSemantic {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Audio feature `f_a` from the audio encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioFeature(pub Vec<f64>);

/// Translated semantic `f_a^s` from A2V (not re-normalized).
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSemantic(pub Vec<f64>);

/// `v / ‖v‖`, failing for (near-)zero vectors.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n.is_nan() || n <= NORM_FLOOR {
        return Err(Error::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Gradient through [`normalize`]: `(du − u (u·du)) / ‖v‖`.
pub fn normalize_backward(v: &[f64], du: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot: f64 = v.iter().zip(du).map(|(a, b)| a * b).sum::<f64>() / n;
    v.iter().zip(du).map(|(x, g)| (g - x / n * dot) / n).collect()
}

/// Extent of one axis after [`max_pool2`].
fn pooled_len(n: usize) -> usize {
    if n >= 2 {
        n / 2
    } else {
        n
    }
}

/// How a [`ConvPoolStack`] reduces its last feature map to a vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// Mean over the whole plane: one value per channel.
    Global,
    /// Mean over rows only, keeping the column axis: `channels × width`
    /// values. For a `T×M` spectrogram this keeps the mel position.
    Rows,
}

/// Stack of `conv3×3 → ReLU → maxpool` blocks followed by average pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvPoolStack {
    pub blocks: Vec<Conv2d>,
    pub pooling: Pooling,
}

fn row_avg_pool(x: &FeatureMap) -> Vec<f64> {
    let mut out = vec![0.0; x.channels * x.width];
    for c in 0..x.channels {
        let o = &mut out[c * x.width..(c + 1) * x.width];
        for row in x.plane(c).chunks(x.width) {
            for (acc, v) in o.iter_mut().zip(row) {
                *acc += v;
            }
        }
        o.iter_mut().for_each(|v| *v /= x.height as f64);
    }
    out
}

fn row_avg_pool_backward(shape: &FeatureMap, dy: &[f64]) -> FeatureMap {
    let mut dx = FeatureMap::zeros(shape.channels, shape.height, shape.width);
    let w = shape.width;
    for c in 0..shape.channels {
        let g = &dy[c * w..(c + 1) * w];
        for row in dx.plane_mut(c).chunks_mut(w) {
            for (d, v) in row.iter_mut().zip(g) {
                *d = v / shape.height as f64;
            }
        }
    }
    dx
}

#[derive(Clone, Debug)]
pub struct ConvPoolTape {
    inputs: Vec<FeatureMap>,
    activations: Vec<FeatureMap>,
    argmax: Vec<Vec<usize>>,
    last: FeatureMap,
}

impl ConvPoolStack {
    pub fn new(rng: &mut ChaCha8Rng, input: usize, channels: &[usize], pooling: Pooling) -> Self {
        let mut cin = input;
        let blocks = channels
            .iter()
            .map(|&c| {
                let conv = Conv2d::new(rng, cin, c, 3);
                cin = c;
                conv
            })
            .collect();
        Self { blocks, pooling }
    }

    /// Length of the pooled output. `width` is the input width and only
    /// matters for [`Pooling::Rows`].
    pub fn output_dim(&self, width: usize) -> usize {
        let channels = self.blocks.last().map_or(0, |c| c.out_channels());
        match self.pooling {
            Pooling::Global => channels,
            Pooling::Rows => channels * self.blocks.iter().fold(width, |w, _| pooled_len(w)),
        }
    }

    fn pool(&self, h: &FeatureMap) -> Vec<f64> {
        match self.pooling {
            Pooling::Global => global_avg_pool(h),
            Pooling::Rows => row_avg_pool(h),
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> Vec<f64> {
        let mut h = x.clone();
        for conv in &self.blocks {
            let mut a = conv.forward(&h);
            relu_inplace(&mut a.data);
            h = max_pool2(&a).0;
        }
        self.pool(&h)
    }

    pub fn forward_tape(&self, x: &FeatureMap) -> (Vec<f64>, ConvPoolTape) {
        let mut inputs = Vec::with_capacity(self.blocks.len());
        let mut activations = Vec::with_capacity(self.blocks.len());
        let mut argmax = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for conv in &self.blocks {
            let mut a = conv.forward(&h);
            relu_inplace(&mut a.data);
            let (p, arg) = max_pool2(&a);
            inputs.push(h);
            activations.push(a);
            argmax.push(arg);
            h = p;
        }
        let out = self.pool(&h);
        (
            out,
            ConvPoolTape {
                inputs,
                activations,
                argmax,
                last: h,
            },
        )
    }

    /// Accumulate parameter gradients; the input gradient is not needed by
    /// any caller and is not computed.
    pub fn backward(&self, tape: &ConvPoolTape, dy: &[f64], grads: &mut ConvPoolStack) {
        let mut d = match self.pooling {
            Pooling::Global => global_avg_pool_backward(&tape.last, dy),
            Pooling::Rows => row_avg_pool_backward(&tape.last, dy),
        };
        for i in (0..self.blocks.len()).rev() {
            let mut da = max_pool2_backward(&tape.activations[i], &tape.argmax[i], &d);
            relu_backward_inplace(&tape.activations[i].data, &mut da.data);
            match self.blocks[i].backward(&tape.inputs[i], &da, Some(&mut grads.blocks[i]), i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }
}

impl Params for ConvPoolStack {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.blocks.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.blocks.visit_mut(prefix, f);
    }
}

/// `E_s`: conv/pool stack and two linear layers over an RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualEncoder {
    pub convs: ConvPoolStack,
    pub head: Mlp2,
}

#[derive(Clone, Debug)]
pub struct VisualTape {
    convs: ConvPoolTape,
    head: MlpTape,
    raw: Vec<f64>,
}

impl VisualEncoder {
    pub fn new(config: &SemanticConfig, rng: &mut ChaCha8Rng) -> Self {
        let convs = ConvPoolStack::new(rng, 3, &config.visual_channels, Pooling::Global);
        let head = Mlp2::new(rng, convs.output_dim(0), config.visual_hidden, config.embedding_dim);
        Self { convs, head }
    }

    pub fn embedding_dim(&self) -> usize {
        self.head.output_dim()
    }

    fn input_map(&self, img: &RgbImage) -> Result<FeatureMap> {
        let min = 1usize << self.convs.blocks.len();
        if img.height() < min || img.width() < min {
            return Err(Error::Shape(format!(
                "visual encoder needs at least {min}×{min} pixels, got {}×{}",
                img.height(),
                img.width()
            )));
        }
        let data = img.to_planar().into_iter().map(|v| v - 0.5).collect();
        FeatureMap::new(3, img.height(), img.width(), data)
    }

    pub fn forward_tape(&self, img: &RgbImage) -> Result<(VisualSemantic, VisualTape)> {
        let x = self.input_map(img)?;
        let (pooled, convs) = self.convs.forward_tape(&x);
        let (raw, head) = self.head.forward_tape(&pooled);
        let u = normalize(&raw)?;
        Ok((VisualSemantic(u), VisualTape { convs, head, raw }))
    }

    pub fn forward(&self, img: &RgbImage) -> Result<VisualSemantic> {
        let x = self.input_map(img)?;
        let raw = self.head.forward(&self.convs.forward(&x));
        Ok(VisualSemantic(normalize(&raw)?))
    }

    /// Backpropagate a gradient w.r.t. the normalized semantic.
    pub fn backward(&self, tape: &VisualTape, du: &[f64], grads: &mut VisualEncoder) {
        let draw = normalize_backward(&tape.raw, du);
        let dpooled = self.head.backward(&tape.head, &draw, Some(&mut grads.head));
        self.convs.backward(&tape.convs, &dpooled, &mut grads.convs);
    }
}

impl Params for VisualEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.convs.visit(&join(prefix, "convs"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.convs.visit_mut(&join(prefix, "convs"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

pub fn extract_visual_semantics(img: &RgbImage, encoder: &VisualEncoder) -> Result<VisualSemantic> {
    encoder.forward(img)
}

/// `E_a`: conv/pool stack over a standardized `1×T×M` spectrogram.
///
/// The final pooling averages over time only. Convolutions are shift
/// equivariant, so averaging over frequency as well would leave the pitch of
/// a tone visible only through border effects.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioEncoder {
    pub convs: ConvPoolStack,
    n_mels: usize,
}

impl AudioEncoder {
    pub fn new(config: &SemanticConfig, n_mels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            convs: ConvPoolStack::new(rng, 1, &config.audio_channels, Pooling::Rows),
            n_mels,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.convs.output_dim(self.n_mels)
    }

    /// Per-clip standardization; a constant spectrogram (silence) maps to zeros.
    fn input_map(&self, spec: &Spectrogram) -> Result<FeatureMap> {
        spec.validate()?;
        if spec.n_mels != self.n_mels {
            return Err(Error::Shape(format!(
                "audio encoder expects {} mel bins, got {}",
                self.n_mels, spec.n_mels
            )));
        }
        let n = spec.values.len() as f64;
        let mean = spec.values.iter().sum::<f64>() / n;
        let var = spec.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt().max(SPEC_STD_FLOOR);
        let data = spec.values.iter().map(|v| (v - mean) / std).collect();
        FeatureMap::new(1, spec.frames, spec.n_mels, data)
    }

    pub fn forward(&self, spec: &Spectrogram) -> Result<AudioFeature> {
        Ok(AudioFeature(self.convs.forward(&self.input_map(spec)?)))
    }

    pub fn forward_tape(&self, spec: &Spectrogram) -> Result<(AudioFeature, ConvPoolTape)> {
        let (f, t) = self.convs.forward_tape(&self.input_map(spec)?);
        Ok((AudioFeature(f), t))
    }

    pub fn backward(&self, tape: &ConvPoolTape, dy: &[f64], grads: &mut AudioEncoder) {
        self.convs.backward(tape, dy, &mut grads.convs);
    }
}

impl Params for AudioEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.convs.visit(&join(prefix, "convs"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.convs.visit_mut(&join(prefix, "convs"), f);
    }
}

pub fn extract_audio_features(spec: &Spectrogram, encoder: &AudioEncoder) -> Result<AudioFeature> {
    encoder.forward(spec)
}

/// A2V translator: `d_a → hidden → d`.
#[derive(Clone, Debug, PartialEq)]
pub struct A2v {
    pub mlp: Mlp2,
}

impl A2v {
    pub fn new(config: &SemanticConfig, n_mels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            mlp: Mlp2::new(rng, config.audio_dim(n_mels), config.a2v_hidden, config.embedding_dim),
        }
    }

    fn check(&self, f: &AudioFeature) -> Result<()> {
        if f.0.len() != self.mlp.input_dim() {
            return Err(Error::Shape(format!(
                "audio feature has length {}, A2V expects {}",
                f.0.len(),
                self.mlp.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, f: &AudioFeature) -> Result<AudioSemantic> {
        self.check(f)?;
        Ok(AudioSemantic(self.mlp.forward(&f.0)))
    }

    pub fn forward_tape(&self, f: &AudioFeature) -> Result<(AudioSemantic, MlpTape)> {
        self.check(f)?;
        let (y, t) = self.mlp.forward_tape(&f.0);
        Ok((AudioSemantic(y), t))
    }
}

impl Params for A2v {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.mlp.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.mlp.visit_mut(prefix, f);
    }
}

pub fn translate_audio_semantics(f: &AudioFeature, a2v: &A2v) -> Result<AudioSemantic> {
    a2v.forward(f)
}

/// Condition MLP mapping a semantic (`d`) to the guidance input (`d_c`).
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionMlp {
    pub mlp: Mlp2,
}

impl ConditionMlp {
    pub fn new(config: &SemanticConfig, cond_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            mlp: Mlp2::new(rng, config.embedding_dim, config.cond_hidden, cond_dim),
        }
    }

    pub fn forward_tape(&self, s: &[f64]) -> Result<(Vec<f64>, MlpTape)> {
        if s.len() != self.mlp.input_dim() {
            return Err(Error::Shape(format!(
                "semantic has length {}, condition MLP expects {}",
                s.len(),
                self.mlp.input_dim()
            )));
        }
        Ok(self.mlp.forward_tape(s))
    }

    pub fn forward(&self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_tape(s)?.0)
    }
}

impl Params for ConditionMlp {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.mlp.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.mlp.visit_mut(prefix, f);
    }
}

pub fn project_condition(s: &[f64], mlp: &ConditionMlp) -> Result<crate::backbone::ConditioningVector> {
    Ok(crate::backbone::ConditioningVector(mlp.forward(s)?))
}

/// Build all semantic modules from one seed.
pub fn init_semantic_modules(
    config: &SemanticConfig,
    cond_dim: usize,
    n_mels: usize,
    seed: u64,
) -> Result<(VisualEncoder, ConditionMlp, AudioEncoder, A2v)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let es = VisualEncoder::new(config, &mut rng);
    let cond = ConditionMlp::new(config, cond_dim, &mut rng);
    let ea = AudioEncoder::new(config, n_mels, &mut rng);
    let a2v = A2v::new(config, n_mels, &mut rng);
    Ok((es, cond, ea, a2v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{flatten, unflatten, uniform, zeros_like};
    use proptest::prelude::*;

    fn small() -> SemanticConfig {
        SemanticConfig {
            embedding_dim: 6,
            visual_channels: vec![3, 4],
            visual_hidden: 5,
            audio_channels: vec![2, 3],
            a2v_hidden: 4,
            cond_hidden: 4,
        }
    }

    fn random_rgb(seed: u64, h: usize, w: usize) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::new(h, w, (0..h * w * 3).map(|_| uniform(&mut rng, 0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let u = normalize(&[3.0, 4.0]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
        assert!(matches!(normalize(&[0.0, 0.0]), Err(Error::ZeroNorm)));
    }

    proptest! {
        #[test]
        fn normalized_has_unit_norm(v in proptest::collection::vec(-10.0f64..10.0, 1..32)) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
            let u = normalize(&v).unwrap();
            let n: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_backward_matches_fd() {
        let v = [0.3, -1.2, 0.7];
        let probe = [0.5, 0.1, -0.9];
        let f = |v: &[f64]| -> f64 { normalize(v).unwrap().iter().zip(&probe).map(|(a, b)| a * b).sum() };
        let g = normalize_backward(&v, &probe);
        for i in 0..3 {
            let mut p = v;
            p[i] += 1e-6;
            let mut m = v;
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn visual_semantic_is_unit_and_deterministic() {
        let (es, ..) = init_semantic_modules(&small(), 4, 8, 1).unwrap();
        let img = random_rgb(2, 8, 8);
        let a = es.forward(&img).unwrap();
        let b = es.forward(&img).unwrap();
        assert_eq!(a, b);
        let n: f64 = a.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        assert!(es.forward(&random_rgb(2, 2, 8)).is_err());
    }

    #[test]
    fn visual_backward_matches_fd() {
        let (mut es, ..) = init_semantic_modules(&small(), 4, 8, 3).unwrap();
        let img = random_rgb(4, 8, 8);
        let probe: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).sin()).collect();
        let (_, tape) = es.forward_tape(&img).unwrap();
        let mut g = zeros_like(&es);
        es.backward(&tape, &probe, &mut g);
        let analytic = flatten(&g);
        let mut flat = flatten(&es);
        let loss = |m: &VisualEncoder| -> f64 {
            m.forward(&img)
                .unwrap()
                .as_slice()
                .iter()
                .zip(&probe)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut checked = 0;
        for i in (0..flat.len()).step_by(7) {
            let orig = flat[i];
            flat[i] = orig + 1e-5;
            unflatten(&mut es, &flat);
            let lp = loss(&es);
            flat[i] = orig - 1e-5;
            unflatten(&mut es, &flat);
            let lm = loss(&es);
            flat[i] = orig;
            unflatten(&mut es, &flat);
            let fd = (lp - lm) / 2e-5;
            assert!(
                (fd - analytic[i]).abs() < 1e-5 * (1.0 + fd.abs()),
                "param {i}: {fd} vs {}",
                analytic[i]
            );
            checked += 1;
        }
        assert!(checked > 10);
    }

    fn random_spec(seed: u64, frames: usize) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Spectrogram {
            frames,
            n_mels: 8,
            sample_rate: 16_000,
            hop_length: 160,
            values: (0..frames * 8).map(|_| uniform(&mut rng, -5.0, 5.0)).collect(),
        }
    }

    #[test]
    fn audio_backward_matches_fd() {
        let (_, _, mut ea, _) = init_semantic_modules(&small(), 4, 8, 5).unwrap();
        let spec = random_spec(6, 8);
        let probe = [0.4, -0.7, 1.1, 0.2, -0.3, 0.9];
        let (f, tape) = ea.forward_tape(&spec).unwrap();
        assert_eq!(f.0.len(), 6);
        let mut g = zeros_like(&ea);
        ea.backward(&tape, &probe, &mut g);
        let analytic = flatten(&g);
        let mut flat = flatten(&ea);
        let loss =
            |m: &AudioEncoder| -> f64 { m.forward(&spec).unwrap().0.iter().zip(&probe).map(|(a, b)| a * b).sum() };
        for i in 0..flat.len() {
            let orig = flat[i];
            flat[i] = orig + 1e-5;
            unflatten(&mut ea, &flat);
            let lp = loss(&ea);
            flat[i] = orig - 1e-5;
            unflatten(&mut ea, &flat);
            let lm = loss(&ea);
            flat[i] = orig;
            unflatten(&mut ea, &flat);
            let fd = (lp - lm) / 2e-5;
            assert!((fd - analytic[i]).abs() < 1e-5 * (1.0 + fd.abs()), "param {i}");
        }
    }

    #[test]
    fn audio_feature_length_ignores_clip_length_and_checks_mels() {
        let (_, _, ea, _) = init_semantic_modules(&small(), 4, 8, 9).unwrap();
        assert_eq!(ea.output_dim(), small().audio_dim(8));
        for frames in [3, 8, 21] {
            assert_eq!(ea.forward(&random_spec(10, frames)).unwrap().0.len(), ea.output_dim());
        }
        let (_, _, ea16, _) = init_semantic_modules(&small(), 4, 16, 9).unwrap();
        assert!(ea16.forward(&random_spec(10, 8)).is_err());
    }

    #[test]
    fn silence_gives_finite_features_and_shapes_checked() {
        let (_, cond, ea, a2v) = init_semantic_modules(&small(), 4, 8, 7).unwrap();
        let silent = Spectrogram {
            frames: 4,
            n_mels: 8,
            sample_rate: 16_000,
            hop_length: 160,
            values: vec![1e-6f64.ln(); 32],
        };
        let f = ea.forward(&silent).unwrap();
        assert!(f.0.iter().all(|v| v.is_finite()));
        let s = a2v.forward(&f).unwrap();
        assert_eq!(s.0.len(), 6);
        assert_eq!(project_condition(&s.0, &cond).unwrap().len(), 4);
        assert!(a2v.forward(&AudioFeature(vec![0.0; 5])).is_err());
        assert!(project_condition(&[0.0; 3], &cond).is_err());
    }
}
