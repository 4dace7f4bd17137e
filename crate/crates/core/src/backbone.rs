//! U-Net style colorization backbone with one relevance-gated guidance site.
//!
//! The encoder maps `L/100` to a multi-scale feature stack; the color generator
//! decodes it back to `tanh`-bounded ab (scaled by [`AB_SCALE`]). Guidance is
//! injected through [`dsg_forward`] at exactly one configurable site.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::colorspace::{lab_to_rgb, merge_channels, AbImage, GrayImage, RgbConversion};
use crate::conditioning::{dsg_backward, dsg_forward, AffineHeads, DsgTape, RelevanceScore};
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, join, max_pool2, max_pool2_backward, param_count, relu_backward_inplace, relu_inplace, upsample2,
    upsample2_backward, Conv2d, Params,
};
use crate::tensor::{FeatureMap, Tensor};

/// Predicted ab = `AB_SCALE · tanh(logits)`; also the loss normalizer.
pub const AB_SCALE: f64 = 110.0;

/// Conditioning input of the guidance heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningVector(pub Vec<f64>);

impl ConditioningVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Where guidance is injected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DsgSite {
    /// On the deepest encoder feature, before decoding.
    Bottleneck,
    /// After decoder block `i` (0 = first block, coarsest resolution).
    Decoder(usize),
}

impl Default for DsgSite {
    fn default() -> Self {
        DsgSite::Decoder(0)
    }
}

impl fmt::Display for DsgSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DsgSite::Bottleneck => write!(f, "bottleneck"),
            DsgSite::Decoder(i) => write!(f, "decoder{i}"),
        }
    }
}

impl FromStr for DsgSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "bottleneck" {
            return Ok(DsgSite::Bottleneck);
        }
        s.strip_prefix("decoder")
            .and_then(|i| i.parse().ok())
            .map(DsgSite::Decoder)
            .ok_or_else(|| Error::Validation(format!("unknown guidance site `{s}`")))
    }
}

impl Serialize for DsgSite {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for DsgSite {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub dsg_site: DsgSite,
    /// Hidden width of the γ / β heads.
    pub head_hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 4,
            dsg_site: DsgSite::Decoder(0),
            head_hidden: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Validation(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.base_channels < 8 {
            return Err(Error::Validation(format!(
                "base_channels must be >= 8, got {}",
                self.base_channels
            )));
        }
        if let DsgSite::Decoder(i) = self.dsg_site {
            if i >= self.depth {
                return Err(Error::Validation(format!(
                    "guidance site decoder{i} does not exist (depth {})",
                    self.depth
                )));
            }
        }
        if self.head_hidden == 0 {
            return Err(Error::Validation("head_hidden must be positive".into()));
        }
        Ok(())
    }

    /// Channels of encoder level `i` (level 0 = full resolution).
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn site_channels(&self) -> usize {
        match self.dsg_site {
            DsgSite::Bottleneck => self.level_channels(self.depth),
            DsgSite::Decoder(i) => self.level_channels(self.depth - 1 - i),
        }
    }

    /// Length of the conditioning vector: twice the channels at the site.
    pub fn cond_dim(&self) -> usize {
        2 * self.site_channels()
    }

    /// Length of [`UNet::pooled_features`].
    pub fn pooled_dim(&self) -> usize {
        (0..=self.depth).map(|l| self.level_channels(l)).sum()
    }
}

/// Conv → ReLU → Conv → ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct DoubleConv {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

#[derive(Clone, Debug)]
pub struct DoubleConvTape {
    input: FeatureMap,
    hidden: FeatureMap,
    output: FeatureMap,
}

impl DoubleConv {
    fn new(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Self {
        Self {
            conv1: Conv2d::new(rng, input, output, 3),
            conv2: Conv2d::new(rng, output, output, 3),
        }
    }

    fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let mut h = self.conv1.forward(x);
        relu_inplace(&mut h.data);
        let mut o = self.conv2.forward(&h);
        relu_inplace(&mut o.data);
        o
    }

    fn forward_tape(&self, x: &FeatureMap) -> (FeatureMap, DoubleConvTape) {
        let mut hidden = self.conv1.forward(x);
        relu_inplace(&mut hidden.data);
        let mut output = self.conv2.forward(&hidden);
        relu_inplace(&mut output.data);
        (
            output.clone(),
            DoubleConvTape {
                input: x.clone(),
                hidden,
                output,
            },
        )
    }

    fn backward(
        &self,
        tape: &DoubleConvTape,
        dy: &FeatureMap,
        grads: Option<&mut DoubleConv>,
        want_dx: bool,
    ) -> Option<FeatureMap> {
        let (g1, g2) = match grads {
            Some(g) => (Some(&mut g.conv1), Some(&mut g.conv2)),
            None => (None, None),
        };
        let mut d = dy.clone();
        relu_backward_inplace(&tape.output.data, &mut d.data);
        let mut dh = self.conv2.backward(&tape.hidden, &d, g2, true).expect("requested");
        relu_backward_inplace(&tape.hidden.data, &mut dh.data);
        self.conv1.backward(&tape.input, &dh, g1, want_dx)
    }
}

impl Params for DoubleConv {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

/// Encoder outputs at every resolution; `levels[depth]` is the deepest.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub levels: Vec<FeatureMap>,
}

impl FeatureStack {
    pub fn deepest(&self) -> &FeatureMap {
        self.levels.last().expect("non-empty stack")
    }
}

#[derive(Clone, Debug)]
pub struct EncoderTape {
    blocks: Vec<DoubleConvTape>,
    pool_argmax: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct DecoderTape {
    blocks: Vec<DoubleConvTape>,
    skip_split: Vec<usize>,
    dsg: Option<DsgTape>,
    head_input: FeatureMap,
    output: FeatureMap,
}

impl DecoderTape {
    /// Normalized ab prediction (`2×H×W`, in `(-1, 1)`).
    pub fn output(&self) -> &FeatureMap {
        &self.output
    }
}

/// Interface a colorization network must offer to host the guidance module.
pub trait ColorizationBackbone {
    /// Length of the conditioning vector accepted at the guidance site.
    fn cond_dim(&self) -> usize;

    fn encode(&self, x: &GrayImage) -> Result<FeatureStack>;

    fn generate_colors(
        &self,
        features: &FeatureStack,
        c: Option<&ConditioningVector>,
        r: RelevanceScore,
    ) -> Result<AbImage>;

    /// Full inference: predict ab, attach the input luminance, convert to RGB.
    fn colorize(&self, x: &GrayImage, c: Option<&ConditioningVector>, r: RelevanceScore) -> Result<RgbConversion> {
        let features = self.encode(x)?;
        let ab = self.generate_colors(&features, c, r)?;
        lab_to_rgb(&merge_channels(x, &ab)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    config: BackboneConfig,
    pub encoder: Vec<DoubleConv>,
    pub decoder: Vec<DoubleConv>,
    pub head: Conv2d,
    pub affine: AffineHeads,
}

impl UNet {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = config.depth;
        let encoder = (0..=depth)
            .map(|l| {
                let cin = if l == 0 { 1 } else { config.level_channels(l - 1) };
                DoubleConv::new(&mut rng, cin, config.level_channels(l))
            })
            .collect();
        let decoder = (0..depth)
            .map(|j| {
                let level = depth - 1 - j;
                let cin = config.level_channels(level + 1) + config.level_channels(level);
                DoubleConv::new(&mut rng, cin, config.level_channels(level))
            })
            .collect();
        let head = Conv2d::new(&mut rng, config.level_channels(0), 2, 1);
        let affine = AffineHeads::new(&mut rng, config.cond_dim(), config.head_hidden, config.site_channels());
        Ok(Self {
            config,
            encoder,
            decoder,
            head,
            affine,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        param_count(self)
    }

    fn check_input(&self, x: &GrayImage) -> Result<()> {
        let m = 1usize << self.config.depth;
        if !x.height().is_multiple_of(m) || !x.width().is_multiple_of(m) || x.height() == 0 || x.width() == 0 {
            return Err(Error::Shape(format!(
                "image {}x{} must be a non-empty multiple of {m} per side (pad before encoding)",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    fn input_map(x: &GrayImage) -> FeatureMap {
        let data = x.luminance().iter().map(|l| l / 100.0).collect();
        FeatureMap::new(1, x.height(), x.width(), data).expect("non-empty")
    }

    pub fn encode_tape(&self, x: &GrayImage) -> Result<(FeatureStack, EncoderTape)> {
        self.check_input(x)?;
        let input = Self::input_map(x);
        let mut levels = Vec::with_capacity(self.config.depth + 1);
        let mut blocks = Vec::with_capacity(self.config.depth + 1);
        let mut pool_argmax = Vec::with_capacity(self.config.depth);
        let (h, t) = self.encoder[0].forward_tape(&input);
        levels.push(h);
        blocks.push(t);
        for l in 1..=self.config.depth {
            let (p, arg) = max_pool2(&levels[l - 1]);
            let (h, t) = self.encoder[l].forward_tape(&p);
            pool_argmax.push(arg);
            levels.push(h);
            blocks.push(t);
        }
        Ok((FeatureStack { levels }, EncoderTape { blocks, pool_argmax }))
    }

    /// Accumulate encoder gradients from per-level feature gradients.
    pub fn encode_backward(
        &self,
        tape: &EncoderTape,
        features: &FeatureStack,
        mut dfeat: Vec<FeatureMap>,
        grads: &mut UNet,
    ) {
        for l in (1..=self.config.depth).rev() {
            let dp = self.encoder[l]
                .backward(&tape.blocks[l], &dfeat[l], Some(&mut grads.encoder[l]), true)
                .expect("requested");
            let d = max_pool2_backward(&features.levels[l - 1], &tape.pool_argmax[l - 1], &dp);
            dfeat[l - 1].add_assign(&d);
        }
        self.encoder[0].backward(&tape.blocks[0], &dfeat[0], Some(&mut grads.encoder[0]), false);
    }

    fn check_condition(&self, c: Option<&[f64]>, r: RelevanceScore) -> Result<()> {
        match c {
            None if !r.is_zero() => Err(Error::Validation(
                "relevance must be 0 when no conditioning vector is given".into(),
            )),
            Some(c) if c.len() != self.config.cond_dim() => Err(Error::Shape(format!(
                "conditioning vector has length {}, backbone expects {}",
                c.len(),
                self.config.cond_dim()
            ))),
            _ => Ok(()),
        }
    }

    fn apply_site(
        &self,
        x: FeatureMap,
        cond: Option<&[f64]>,
        r: RelevanceScore,
    ) -> Result<(FeatureMap, Option<DsgTape>)> {
        match cond {
            Some(c) if !r.is_zero() => {
                let (y, t) = dsg_forward(&x, c, r, &self.affine)?;
                Ok((y, Some(t)))
            }
            _ => Ok((x, None)),
        }
    }

    pub fn decode_tape(&self, features: &FeatureStack, cond: Option<&[f64]>, r: RelevanceScore) -> Result<DecoderTape> {
        self.check_condition(cond, r)?;
        let depth = self.config.depth;
        let mut d = features.levels[depth].clone();
        let mut dsg = None;
        if self.config.dsg_site == DsgSite::Bottleneck {
            let (y, t) = self.apply_site(d, cond, r)?;
            d = y;
            dsg = t;
        }
        let mut blocks = Vec::with_capacity(depth);
        let mut skip_split = Vec::with_capacity(depth);
        for j in 0..depth {
            let level = depth - 1 - j;
            let up = upsample2(&d);
            skip_split.push(up.channels);
            let cat = up.concat(&features.levels[level]);
            let (y, t) = self.decoder[j].forward_tape(&cat);
            blocks.push(t);
            d = y;
            if self.config.dsg_site == DsgSite::Decoder(j) {
                let (y, t) = self.apply_site(d, cond, r)?;
                d = y;
                dsg = t;
            }
        }
        let mut output = self.head.forward(&d);
        output.data.iter_mut().for_each(|v| *v = v.tanh());
        Ok(DecoderTape {
            blocks,
            skip_split,
            dsg,
            head_input: d,
            output,
        })
    }

    /// Backpropagate `d_out` (gradient w.r.t. the normalized ab output).
    ///
    /// Returns per-level feature gradients (empty unless `want_features`) and
    /// the gradient w.r.t. the conditioning vector (zeros when guidance was
    /// off). With `grads = None` and `want_features = false` the pass stops
    /// at the guidance site.
    pub fn decode_backward(
        &self,
        tape: &DecoderTape,
        features: &FeatureStack,
        d_out: &FeatureMap,
        mut grads: Option<&mut UNet>,
        want_features: bool,
    ) -> (Vec<FeatureMap>, Vec<f64>) {
        let depth = self.config.depth;
        let mut dc = vec![0.0; self.config.cond_dim()];
        let mut dlogits = d_out.clone();
        for (g, y) in dlogits.data.iter_mut().zip(&tape.output.data) {
            *g *= 1.0 - y * y;
        }
        let mut dd = self
            .head
            .backward(
                &tape.head_input,
                &dlogits,
                grads.as_deref_mut().map(|g| &mut g.head),
                true,
            )
            .expect("requested");
        let mut dfeat: Vec<FeatureMap> = if want_features {
            features
                .levels
                .iter()
                .map(|f| FeatureMap::zeros(f.channels, f.height, f.width))
                .collect()
        } else {
            Vec::new()
        };
        let stop_at_site = grads.is_none() && !want_features;
        for j in (0..depth).rev() {
            if self.config.dsg_site == DsgSite::Decoder(j) {
                if let Some(t) = &tape.dsg {
                    let (dx, g) = dsg_backward(t, &dd, &self.affine, grads.as_deref_mut().map(|g| &mut g.affine));
                    dd = dx;
                    dc = g;
                }
                if stop_at_site {
                    return (dfeat, dc);
                }
            }
            let level = depth - 1 - j;
            let dcat = self.decoder[j]
                .backward(
                    &tape.blocks[j],
                    &dd,
                    grads.as_deref_mut().map(|g| &mut g.decoder[j]),
                    true,
                )
                .expect("requested");
            let (dup, dskip) = dcat.split_channels(tape.skip_split[j]);
            if want_features {
                dfeat[level].add_assign(&dskip);
            }
            dd = upsample2_backward(&dup);
        }
        if self.config.dsg_site == DsgSite::Bottleneck {
            if let Some(t) = &tape.dsg {
                let (dx, g) = dsg_backward(t, &dd, &self.affine, grads.map(|g| &mut g.affine));
                dd = dx;
                dc = g;
            }
        }
        if want_features {
            dfeat[depth].add_assign(&dd);
        }
        (dfeat, dc)
    }

    /// Global-average-pooled encoder features of every level, concatenated.
    pub fn pooled_features(&self, x: &GrayImage) -> Result<Vec<f64>> {
        let stack = self.encode(x)?;
        Ok(stack.levels.iter().flat_map(global_avg_pool).collect())
    }
}

/// Convert a normalized `2×H×W` prediction into an interleaved ab plane.
pub fn to_ab_image(norm: &FeatureMap) -> AbImage {
    let n = norm.plane_len();
    let mut data = Vec::with_capacity(2 * n);
    let (a, b) = (norm.plane(0), norm.plane(1));
    for i in 0..n {
        data.push(a[i] * AB_SCALE);
        data.push(b[i] * AB_SCALE);
    }
    AbImage::new(norm.height, norm.width, data).expect("finite prediction")
}

/// Normalized planar target (`ab / AB_SCALE`, `2×H×W`) from an ab plane.
pub fn normalized_target(ab: &AbImage) -> FeatureMap {
    let n = ab.height() * ab.width();
    let mut data = vec![0.0; 2 * n];
    for i in 0..n {
        data[i] = ab.data()[2 * i] / AB_SCALE;
        data[n + i] = ab.data()[2 * i + 1] / AB_SCALE;
    }
    FeatureMap::new(2, ab.height(), ab.width(), data).expect("non-empty")
}

impl ColorizationBackbone for UNet {
    fn cond_dim(&self) -> usize {
        self.config.cond_dim()
    }

    fn encode(&self, x: &GrayImage) -> Result<FeatureStack> {
        self.check_input(x)?;
        let input = Self::input_map(x);
        let mut levels = Vec::with_capacity(self.config.depth + 1);
        levels.push(self.encoder[0].forward(&input));
        for l in 1..=self.config.depth {
            let (p, _) = max_pool2(&levels[l - 1]);
            levels.push(self.encoder[l].forward(&p));
        }
        Ok(FeatureStack { levels })
    }

    fn generate_colors(
        &self,
        features: &FeatureStack,
        c: Option<&ConditioningVector>,
        r: RelevanceScore,
    ) -> Result<AbImage> {
        let tape = self.decode_tape(features, c.map(|c| c.as_slice()), r)?;
        Ok(to_ab_image(&tape.output))
    }
}

impl Params for UNet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.head.visit(&join(prefix, "head"), f);
        self.affine.visit(&join(prefix, "affine"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
        self.affine.visit_mut(&join(prefix, "affine"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::{lab_to_srgb_unclipped, rgb_to_lab};
    use crate::nn::{flatten, unflatten, uniform, zeros_like, Mlp2};

    fn small() -> BackboneConfig {
        BackboneConfig {
            base_channels: 8,
            depth: 2,
            dsg_site: DsgSite::Decoder(0),
            head_hidden: 8,
        }
    }

    fn random_gray(seed: u64, h: usize, w: usize) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::new(h, w, (0..h * w).map(|_| uniform(&mut rng, 0.0, 100.0)).collect()).unwrap()
    }

    fn randomize_heads(net: &mut UNet, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, c) = (net.config.cond_dim(), net.config.site_channels());
        net.affine.gamma = Mlp2::new(&mut rng, d, 8, c);
        net.affine.beta = Mlp2::new(&mut rng, d, 8, c);
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig { depth: 1, ..small() }.validate().is_err());
        assert!(BackboneConfig {
            base_channels: 4,
            ..small()
        }
        .validate()
        .is_err());
        assert!(BackboneConfig {
            dsg_site: DsgSite::Decoder(2),
            ..small()
        }
        .validate()
        .is_err());
        assert!(small().validate().is_ok());
        assert_eq!("decoder1".parse::<DsgSite>().unwrap(), DsgSite::Decoder(1));
        assert_eq!("bottleneck".parse::<DsgSite>().unwrap(), DsgSite::Bottleneck);
        assert!("middle".parse::<DsgSite>().is_err());
    }

    #[test]
    fn shape_contracts() {
        let net = UNet::new(small(), 1).unwrap();
        let x = random_gray(2, 16, 12);
        let f = net.encode(&x).unwrap();
        assert_eq!((f.deepest().height, f.deepest().width), (4, 3));
        let ab = net.generate_colors(&f, None, RelevanceScore::ZERO).unwrap();
        assert_eq!((ab.height(), ab.width(), ab.data().len()), (16, 12, 16 * 12 * 2));
        assert!(ab.data().iter().all(|v| v.abs() <= AB_SCALE));
        assert!(net.encode(&random_gray(3, 10, 12)).is_err());
    }

    #[test]
    fn encoding_is_deterministic_and_finite() {
        let a = UNet::new(small(), 7).unwrap();
        let b = UNet::new(small(), 7).unwrap();
        let x = random_gray(1, 8, 8);
        assert_eq!(a.encode(&x).unwrap(), b.encode(&x).unwrap());
        let zero = GrayImage::new(8, 8, vec![0.0; 64]).unwrap();
        assert!(a.encode(&zero).unwrap().levels.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn parameter_count_is_stable() {
        let net = UNet::new(small(), 0).unwrap();
        // encoder: (1*8*9+8 + 8*8*9+8) + (8*16*9+16 + 16*16*9+16) + (16*32*9+32 + 32*32*9+32)
        // decoder: ((32+16)*16*9+16 + 16*16*9+16) + ((16+8)*8*9+8 + 8*8*9+8)
        // head: 8*2+2; heads: 2 * (32*8+8 + 8*16+16)
        let enc = (72 + 8 + 576 + 8) + (1152 + 16 + 2304 + 16) + (4608 + 32 + 9216 + 32);
        let dec = (6912 + 16 + 2304 + 16) + (1728 + 8 + 576 + 8);
        let heads = 2 * (256 + 8 + 128 + 16);
        assert_eq!(net.param_count(), enc + dec + 18 + heads);
    }

    #[test]
    fn zero_relevance_ignores_condition() {
        let mut net = UNet::new(small(), 4).unwrap();
        randomize_heads(&mut net, 5);
        let x = random_gray(6, 8, 8);
        let f = net.encode(&x).unwrap();
        let c = ConditioningVector(vec![3.0; net.cond_dim()]);
        let a = net.generate_colors(&f, Some(&c), RelevanceScore::ZERO).unwrap();
        let b = net.generate_colors(&f, None, RelevanceScore::ZERO).unwrap();
        assert_eq!(a, b);
        assert!(net.generate_colors(&f, None, RelevanceScore::ONE).is_err());
        let short = ConditioningVector(vec![0.0; 3]);
        assert!(net.generate_colors(&f, Some(&short), RelevanceScore::ONE).is_err());
    }

    #[test]
    fn condition_changes_output_at_full_relevance() {
        let mut net = UNet::new(small(), 8).unwrap();
        randomize_heads(&mut net, 9);
        let x = random_gray(10, 8, 8);
        let f = net.encode(&x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut c = || ConditioningVector((0..net.cond_dim()).map(|_| uniform(&mut rng, -1.0, 1.0)).collect());
        let (c1, c2) = (c(), c());
        let a = net.generate_colors(&f, Some(&c1), RelevanceScore::ONE).unwrap();
        let b = net.generate_colors(&f, Some(&c2), RelevanceScore::ONE).unwrap();
        let diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn colorize_preserves_luminance() {
        let net = UNet::new(small(), 12).unwrap();
        for seed in 0..5 {
            let x = random_gray(seed, 8, 8);
            let f = net.encode(&x).unwrap();
            let ab = net.generate_colors(&f, None, RelevanceScore::ZERO).unwrap();
            let out = net.colorize(&x, None, RelevanceScore::ZERO).unwrap();
            assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let lab = rgb_to_lab(&out.image).unwrap();
            // clipping moves L, so only in-gamut pixels are held to the bound
            let mut checked = 0;
            for (i, (a, b)) in lab.luminance().iter().zip(x.luminance()).enumerate() {
                let raw = lab_to_srgb_unclipped([*b, ab.data()[2 * i], ab.data()[2 * i + 1]]);
                if raw.iter().all(|v| (0.0..=1.0).contains(v)) {
                    checked += 1;
                    assert!((a - b).abs() < 1e-6, "luminance drift at {i}");
                }
            }
            assert!(checked > 0);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for site in [DsgSite::Decoder(0), DsgSite::Decoder(1), DsgSite::Bottleneck] {
            let cfg = BackboneConfig {
                dsg_site: site,
                ..small()
            };
            let mut net = UNet::new(cfg, 13).unwrap();
            randomize_heads(&mut net, 14);
            let x = random_gray(15, 4, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(16);
            let c: Vec<f64> = (0..net.cond_dim()).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
            let probe: Vec<f64> = (0..32).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
            let probe = FeatureMap::new(2, 4, 4, probe).unwrap();
            let r = RelevanceScore::new(0.7).unwrap();
            let loss = |n: &UNet, c: &[f64]| -> f64 {
                let (f, _) = n.encode_tape(&x).unwrap();
                let t = n.decode_tape(&f, Some(c), r).unwrap();
                t.output.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
            };
            let (f, et) = net.encode_tape(&x).unwrap();
            let t = net.decode_tape(&f, Some(&c), r).unwrap();
            let mut g = zeros_like(&net);
            let (dfeat, dc) = net.decode_backward(&t, &f, &probe, Some(&mut g), true);
            net.encode_backward(&et, &f, dfeat, &mut g);

            // frozen pass stopping at the site yields the same dc
            let (_, dc_frozen) = net.decode_backward(&t, &f, &probe, None, false);
            assert_eq!(dc, dc_frozen);

            let h = 1e-6;
            for i in 0..c.len() {
                let (mut p, mut m) = (c.clone(), c.clone());
                p[i] += h;
                m[i] -= h;
                let fd = (loss(&net, &p) - loss(&net, &m)) / (2.0 * h);
                assert!(
                    (fd - dc[i]).abs() < 1e-5 * (1.0 + fd.abs()),
                    "{site}: dc[{i}] {fd} vs {}",
                    dc[i]
                );
            }
            let flat = flatten(&net);
            let gf = flatten(&g);
            let mut n2 = net.clone();
            // sample a subset of parameters to keep the test fast
            for i in (0..flat.len()).step_by(37) {
                let mut fl = flat.clone();
                fl[i] += h;
                unflatten(&mut n2, &fl);
                let lp = loss(&n2, &c);
                fl[i] -= 2.0 * h;
                unflatten(&mut n2, &fl);
                let lm = loss(&n2, &c);
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - gf[i]).abs() < 1e-5 * (1.0 + fd.abs()),
                    "{site}: param {i} {fd} vs {}",
                    gf[i]
                );
            }
        }
    }
}
