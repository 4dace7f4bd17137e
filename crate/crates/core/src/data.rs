//! Paired (image, audio) datasets: on-disk layout and manifests, batching,
//! stage-1 masking, and the synthetic luminance-ambiguous scene generator.
//!
//! Layout: `root/<split>/<video_id>/frame.png` + `audio.wav`, with an optional
//! `meta.json` carrying the scene label of synthetic samples. The manifest is
//! cached as `root/<split>/manifest.json`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{quantize_i16, read_wav, write_wav, AudioFrontend, Spectrogram, Waveform};
use crate::colorspace::{dequantize_u8, grayscale, quantize_u8, srgb_to_lab, GrayImage, RgbImage};
use crate::error::{Error, Result};
use crate::parallel::Execution;

pub const FRAME_FILE: &str = "frame.png";
pub const AUDIO_FILE: &str = "audio.wav";
pub const META_FILE: &str = "meta.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(dequantize_u8).collect();
    RgbImage::new(h as usize, w as usize, data)
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let bytes: Vec<u8> = img.data().iter().map(|v| quantize_u8(*v)).collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes).expect("sized buffer");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown split `{s}`")))
    }
}

/// Ground truth of a synthetic sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLabel {
    pub family: usize,
    /// 0 for hue A, 1 for hue B.
    pub hue: usize,
    /// ab of hue A and hue B, for hue-decision scoring.
    pub hue_ab: [[f64; 2]; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioImagePair {
    /// Paths are relative to the split directory.
    pub image: PathBuf,
    pub audio: PathBuf,
    pub source_video: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<SceneLabel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub seed: u64,
    pub pairs: Vec<AudioImagePair>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.pairs {
            if p.source_video.is_empty() {
                return Err(Error::Data("empty source_video id".into()));
            }
            if !seen.insert((&p.image, &p.audio)) {
                return Err(Error::Data(format!("duplicate pair {}", p.image.display())));
            }
        }
        Ok(())
    }
}

/// Fail if any source video appears in more than one manifest.
pub fn check_disjoint(manifests: &[&DatasetManifest]) -> Result<()> {
    let mut owner = std::collections::HashMap::new();
    for m in manifests {
        for p in &m.pairs {
            if let Some(prev) = owner.insert(p.source_video.as_str(), m.split) {
                if prev != m.split {
                    return Err(Error::Data(format!(
                        "video `{}` appears in both {prev} and {}",
                        p.source_video, m.split
                    )));
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub rejected: Vec<(PathBuf, String)>,
    pub warnings: Vec<String>,
}

fn validate_entry(dir: &Path) -> std::result::Result<Option<SceneLabel>, String> {
    let frame = dir.join(FRAME_FILE);
    let audio = dir.join(AUDIO_FILE);
    if !frame.is_file() {
        return Err(format!("missing {FRAME_FILE}"));
    }
    if !audio.is_file() {
        return Err(format!("missing {AUDIO_FILE}"));
    }
    read_png(&frame).map_err(|e| e.to_string())?;
    read_wav(&audio).map_err(|e| e.to_string())?;
    let meta = dir.join(META_FILE);
    if meta.is_file() {
        let text = std::fs::read_to_string(&meta).map_err(|e| format!("{META_FILE}: {e}"))?;
        let label = serde_json::from_str(&text).map_err(|e| format!("{META_FILE}: {e}"))?;
        return Ok(Some(label));
    }
    Ok(None)
}

/// Scan `root/<split>/` for video directories, validating each entry.
/// Entries are ordered by directory name; invalid ones are listed in the report.
pub fn load_manifest(root: &Path, split: Split) -> Result<(DatasetManifest, LoadReport)> {
    let dir = root.join(split.as_str());
    let mut report = LoadReport::default();
    let mut manifest = DatasetManifest {
        split,
        seed: 0,
        pairs: Vec::new(),
    };
    if let Ok(text) = std::fs::read_to_string(dir.join(MANIFEST_FILE)) {
        if let Ok(cached) = serde_json::from_str::<DatasetManifest>(&text) {
            manifest.seed = cached.seed;
        }
    }
    if !dir.is_dir() {
        report
            .warnings
            .push(format!("{} does not exist; manifest is empty", dir.display()));
        return Ok((manifest, report));
    }
    let mut videos: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    videos.sort();
    for v in videos {
        let id = v.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        match validate_entry(&v) {
            Ok(label) => manifest.pairs.push(AudioImagePair {
                image: PathBuf::from(&id).join(FRAME_FILE),
                audio: PathBuf::from(&id).join(AUDIO_FILE),
                source_video: id,
                label,
            }),
            Err(reason) => report.rejected.push((v, reason)),
        }
    }
    if manifest.is_empty() {
        report.warnings.push(format!("no valid pairs under {}", dir.display()));
    }
    manifest.validate()?;
    Ok((manifest, report))
}

pub fn save_manifest(root: &Path, manifest: &DatasetManifest) -> Result<PathBuf> {
    let dir = root.join(manifest.split.as_str());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// A decoded sample ready for training or evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub color: RgbImage,
    pub gray: GrayImage,
    pub audio: Option<Spectrogram>,
    pub label: Option<SceneLabel>,
}

impl Sample {
    pub fn new(
        id: String,
        color: RgbImage,
        audio: Option<&Waveform>,
        frontend: &AudioFrontend,
        label: Option<SceneLabel>,
    ) -> Self {
        Self {
            id,
            gray: grayscale(&color),
            color,
            audio: audio.map(|w| frontend.compute(w)),
            label,
        }
    }
}

/// Decode every pair of a manifest, in manifest order.
pub fn load_samples(
    root: &Path,
    manifest: &DatasetManifest,
    frontend: &AudioFrontend,
    exec: Execution,
) -> Result<Vec<Sample>> {
    let dir = root.join(manifest.split.as_str());
    exec.map(&manifest.pairs, |p| -> Result<Sample> {
        let color = read_png(&dir.join(&p.image))?;
        let wave = read_wav(&dir.join(&p.audio))?;
        Ok(Sample::new(
            p.source_video.clone(),
            color,
            Some(&wave),
            frontend,
            p.label.clone(),
        ))
    })
    .into_iter()
    .collect()
}

/// Epoch-wise index batches; the order depends only on `(seed, epoch)`.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    n: usize,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
}

impl BatchIterator {
    pub fn new(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Validation("batch size must be at least 1".into()));
        }
        Ok(Self {
            n,
            batch_size,
            seed,
            shuffle,
        })
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.n).collect();
        if self.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);
        }
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Per-sample Bernoulli masking flags (`true` = run without semantics).
pub fn mask_ground_truth(batch_len: usize, mask_prob: f64, seed: u64, step: u64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(Error::Validation(format!("mask_prob {mask_prob} outside [0,1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_736b);
    rng.set_stream(step);
    Ok((0..batch_len).map(|_| rng.gen::<f64>() < mask_prob).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Disk,
    Square,
    Ring,
    Cross,
    Triangle,
    Diamond,
    HStripes,
    VStripes,
    Checker,
    Frame,
    DiagStripes,
    Dots,
}

impl Layout {
    pub const ALL: [Layout; 12] = [
        Layout::Disk,
        Layout::Square,
        Layout::Ring,
        Layout::Cross,
        Layout::Triangle,
        Layout::Diamond,
        Layout::HStripes,
        Layout::VStripes,
        Layout::Checker,
        Layout::Frame,
        Layout::DiagStripes,
        Layout::Dots,
    ];

    /// Whether pixel `(y, x)` belongs to the shape centred at `(cy, cx)`.
    pub fn contains(self, size: usize, y: usize, x: usize, cy: f64, cx: f64) -> bool {
        let s = size as f64;
        let r = 0.3 * s;
        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        let dist = (dx * dx + dy * dy).sqrt();
        let period = (s / 4.0).max(2.0);
        let band = |v: f64| (v / period).rem_euclid(2.0) < 1.0;
        match self {
            Layout::Disk => dist < r,
            Layout::Square => dx.abs() < 0.85 * r && dy.abs() < 0.85 * r,
            Layout::Ring => dist < r && dist > 0.55 * r,
            Layout::Cross => (dx.abs() < 0.3 * r && dy.abs() < r) || (dy.abs() < 0.3 * r && dx.abs() < r),
            Layout::Triangle => dy > -r && dy < r && dx.abs() < (dy + r) / 2.0,
            Layout::Diamond => dx.abs() + dy.abs() < r,
            Layout::HStripes => band(dy),
            Layout::VStripes => band(dx),
            Layout::Checker => band(dx) ^ band(dy),
            Layout::Frame => {
                let m = dx.abs().max(dy.abs());
                m < r && m > 0.6 * r
            }
            Layout::DiagStripes => band((dx + dy) / std::f64::consts::SQRT_2),
            Layout::Dots => {
                let (qx, qy) = (dx.abs() - 0.5 * r, dy.abs() - 0.5 * r);
                (qx * qx + qy * qy).sqrt() < 0.35 * r
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFamily {
    pub name: String,
    pub layout: Layout,
    /// 8-bit sRGB of hue A and hue B.
    pub hue_a: [u8; 3],
    pub hue_b: [u8; 3],
    pub tone_a_hz: f64,
    pub tone_b_hz: f64,
}

impl SceneFamily {
    fn lab(rgb: [u8; 3]) -> [f64; 3] {
        srgb_to_lab(rgb.map(dequantize_u8))
    }

    pub fn hue_ab(&self) -> [[f64; 2]; 2] {
        let (a, b) = (Self::lab(self.hue_a), Self::lab(self.hue_b));
        [[a[1], a[2]], [b[1], b[2]]]
    }

    /// Identical luminance within 0.5 and on the same 8-bit grayscale level.
    pub fn check_iso_luminance(&self) -> Result<()> {
        let (la, lb) = (Self::lab(self.hue_a)[0], Self::lab(self.hue_b)[0]);
        if (la - lb).abs() >= 0.5 || quantize_u8(la / 100.0) != quantize_u8(lb / 100.0) {
            return Err(Error::IsoLuminance {
                family: self.name.clone(),
                hue_a: self.hue_a,
                hue_b: self.hue_b,
                l_a: la,
                l_b: lb,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneSpec {
    pub families: Vec<SceneFamily>,
    pub image_size: usize,
    pub background: [u8; 3],
    /// Maximum shape-centre offset in pixels.
    pub jitter: usize,
    pub clip_secs: f64,
    pub sample_rate: u32,
    /// Tone-to-white-noise power ratio; `None` disables noise.
    pub snr_db: Option<f64>,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            families: default_families(12, 64, 2, 16_000.0),
            image_size: 32,
            background: [128, 128, 128],
            jitter: 3,
            clip_secs: 0.5,
            sample_rate: 16_000,
            snr_db: Some(10.0),
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::Validation("at least one scene family is required".into()));
        }
        if self.image_size < 8 || self.clip_secs <= 0.0 || self.sample_rate == 0 {
            return Err(Error::Validation(
                "image size, clip length and sample rate must be positive".into(),
            ));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        let mut tones: Vec<f64> = Vec::new();
        for f in &self.families {
            f.check_iso_luminance()?;
            for t in [f.tone_a_hz, f.tone_b_hz] {
                if !(t > 0.0 && t < nyquist) {
                    return Err(Error::Validation(format!(
                        "tone {t} Hz of `{}` outside (0, {nyquist})",
                        f.name
                    )));
                }
                if tones.iter().any(|u| (u - t).abs() < 1e-9) {
                    return Err(Error::Validation(format!("tone {t} Hz is used by more than one hue")));
                }
                tones.push(t);
            }
        }
        Ok(())
    }
}

fn in_unit_cube(rgb: [f64; 3]) -> bool {
    rgb.iter().all(|v| (0.0..=1.0).contains(v))
}

/// Closest 8-bit color to `lab` whose luminance falls on grayscale level `level`.
fn snap_to_level(lab: [f64; 3], level: Option<u8>) -> Option<[u8; 3]> {
    let rgb = crate::colorspace::lab_to_srgb_unclipped(lab);
    let base = rgb.map(quantize_u8);
    let mut best: Option<([u8; 3], f64)> = None;
    for dr in -4i32..=4 {
        for dg in -4i32..=4 {
            for db in -4i32..=4 {
                let c = [base[0] as i32 + dr, base[1] as i32 + dg, base[2] as i32 + db];
                if c.iter().any(|v| !(0..=255).contains(v)) {
                    continue;
                }
                let c = c.map(|v| v as u8);
                let got = srgb_to_lab(c.map(dequantize_u8));
                if let Some(q) = level {
                    if quantize_u8(got[0] / 100.0) != q {
                        continue;
                    }
                }
                let d: f64 = got.iter().zip(&lab).map(|(a, b)| (a - b) * (a - b)).sum();
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((c, d));
                }
            }
        }
    }
    best.map(|(c, _)| c)
}

/// `k` families with distinct layouts, luminances and complementary iso-luminant
/// hue pairs; tones sit on mel-filter centres `spacing` bins apart.
pub fn default_families(k: usize, n_mels: usize, spacing: usize, sample_rate: f64) -> Vec<SceneFamily> {
    let cfg = crate::audio::SpectrogramConfig {
        n_mels,
        f_max: sample_rate / 2.0,
        ..Default::default()
    };
    let centers = cfg.mel_centers();
    (0..k)
        .map(|i| {
            let layout = Layout::ALL[i % Layout::ALL.len()];
            // spread luminances over [32, 78], stepping past the background level
            let mut l = 32.0 + 46.0 * i as f64 / (k.max(2) - 1) as f64;
            if (l - 53.6).abs() < 3.0 {
                l += 6.0;
            }
            let theta = (15.0 * i as f64 + 10.0).to_radians();
            let (ca, sa) = (theta.cos(), theta.sin());
            let chroma = (5..=60)
                .rev()
                .map(|c| c as f64)
                .find(|c| {
                    in_unit_cube(crate::colorspace::lab_to_srgb_unclipped([l, c * ca, c * sa]))
                        && in_unit_cube(crate::colorspace::lab_to_srgb_unclipped([l, -c * ca, -c * sa]))
                })
                .unwrap_or(5.0)
                * 0.9;
            let hue_a = snap_to_level([l, chroma * ca, chroma * sa], None).expect("unconstrained snap");
            let level = quantize_u8(SceneFamily::lab(hue_a)[0] / 100.0);
            let hue_b = snap_to_level([l, -chroma * ca, -chroma * sa], Some(level)).unwrap_or(hue_a);
            let base = 4 + 2 * i * spacing;
            SceneFamily {
                name: format!("{layout:?}").to_lowercase(),
                layout,
                hue_a,
                hue_b,
                tone_a_hz: centers[(base).min(n_mels - 1)],
                tone_b_hz: centers[(base + spacing).min(n_mels - 1)],
            }
        })
        .collect()
}

/// One generated sample before it is written to disk. Image and audio are
/// already on the 8-bit / 16-bit grids of their file formats.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub video_id: String,
    pub image: RgbImage,
    pub audio: Waveform,
    pub label: SceneLabel,
}

/// Render one scene; `hue` selects hue A (0) or hue B (1).
pub fn render_scene(spec: &SyntheticSceneSpec, family: usize, hue: usize, cy: f64, cx: f64) -> RgbImage {
    let fam = &spec.families[family];
    let color = if hue == 0 { fam.hue_a } else { fam.hue_b }.map(dequantize_u8);
    let bg = spec.background.map(dequantize_u8);
    let s = spec.image_size;
    let mut data = Vec::with_capacity(s * s * 3);
    for y in 0..s {
        for x in 0..s {
            let c = if fam.layout.contains(s, y, x, cy, cx) {
                color
            } else {
                bg
            };
            data.extend_from_slice(&c);
        }
    }
    RgbImage::new(s, s, data).expect("valid colors")
}

/// Tone at `freq` plus white noise, quantized to 16-bit PCM levels.
pub fn synth_tone(spec: &SyntheticSceneSpec, freq: f64, rng: &mut ChaCha8Rng) -> Waveform {
    let n = (spec.clip_secs * spec.sample_rate as f64).round() as usize;
    let amp = 0.2 + 0.3 * rng.gen::<f64>();
    let phase = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
    let noise_std = spec.snr_db.map(|snr| (amp * amp / 2.0 / 10f64.powf(snr / 10.0)).sqrt());
    let normal = Normal::new(0.0, noise_std.unwrap_or(0.0).max(f64::MIN_POSITIVE)).expect("finite std");
    let w = 2.0 * std::f64::consts::PI * freq / spec.sample_rate as f64;
    let samples = (0..n)
        .map(|i| {
            let mut v = amp * (w * i as f64 + phase).sin();
            if noise_std.is_some() {
                v += normal.sample(rng);
            }
            quantize_i16(v) as f64 / 32768.0
        })
        .collect();
    Waveform::new(spec.sample_rate, samples).expect("finite samples")
}

fn synth_sample(spec: &SyntheticSceneSpec, split: Split, seed: u64, index: usize) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let family = rng.gen_range(0..spec.families.len());
    let hue = rng.gen_range(0..2usize);
    let j = spec.jitter as i64;
    let c = spec.image_size as f64 / 2.0;
    let cy = c + rng.gen_range(-j..=j) as f64;
    let cx = c + rng.gen_range(-j..=j) as f64;
    let fam = &spec.families[family];
    let tone = if hue == 0 { fam.tone_a_hz } else { fam.tone_b_hz };
    SyntheticSample {
        video_id: format!("{split}_{index:06}"),
        image: render_scene(spec, family, hue, cy, cx),
        audio: synth_tone(spec, tone, &mut rng),
        label: SceneLabel {
            family,
            hue,
            hue_ab: fam.hue_ab(),
        },
    }
}

/// Generate `n` samples in memory; each index draws from its own RNG stream,
/// so the result does not depend on the execution mode.
pub fn generate_samples(
    spec: &SyntheticSceneSpec,
    split: Split,
    n: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    Ok(exec.map_range(n, |i| synth_sample(spec, split, seed, i)))
}

/// Generate and write a split under `root`, returning its manifest.
pub fn generate_synthetic_dataset(
    spec: &SyntheticSceneSpec,
    root: &Path,
    split: Split,
    n: usize,
    seed: u64,
    exec: Execution,
) -> Result<DatasetManifest> {
    let samples = generate_samples(spec, split, n, seed, exec)?;
    let dir = root.join(split.as_str());
    let written: Vec<Result<AudioImagePair>> = exec.map(&samples, |s| {
        let vdir = dir.join(&s.video_id);
        std::fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
        write_png(&vdir.join(FRAME_FILE), &s.image)?;
        write_wav(&vdir.join(AUDIO_FILE), &s.audio)?;
        let meta = vdir.join(META_FILE);
        std::fs::write(&meta, serde_json::to_string_pretty(&s.label)?).map_err(|e| Error::io(&meta, e))?;
        Ok(AudioImagePair {
            image: PathBuf::from(&s.video_id).join(FRAME_FILE),
            audio: PathBuf::from(&s.video_id).join(AUDIO_FILE),
            source_video: s.video_id.clone(),
            label: Some(s.label.clone()),
        })
    });
    let manifest = DatasetManifest {
        split,
        seed,
        pairs: written.into_iter().collect::<Result<_>>()?,
    };
    manifest.validate()?;
    save_manifest(root, &manifest)?;
    Ok(manifest)
}

/// Turn in-memory synthetic samples into decoded training samples.
pub fn to_samples(samples: &[SyntheticSample], frontend: &AudioFrontend, exec: Execution) -> Vec<Sample> {
    exec.map(samples, |s| {
        Sample::new(
            s.video_id.clone(),
            s.image.clone(),
            Some(&s.audio),
            frontend,
            Some(s.label.clone()),
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_families_are_iso_luminant_and_distinct() {
        let spec = SyntheticSceneSpec::default();
        spec.validate().unwrap();
        for f in &spec.families {
            let [a, b] = f.hue_ab();
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            assert!(d > 30.0, "{}: hues only {d} apart", f.name);
        }
    }

    #[test]
    fn grayscale_identical_across_hues() {
        let spec = SyntheticSceneSpec::default();
        for fam in 0..spec.families.len() {
            let a = render_scene(&spec, fam, 0, 15.0, 17.0);
            let b = render_scene(&spec, fam, 1, 15.0, 17.0);
            assert_ne!(a, b);
            assert_eq!(grayscale(&a), grayscale(&b));
        }
    }

    #[test]
    fn violated_iso_luminance_names_family() {
        let mut spec = SyntheticSceneSpec::default();
        spec.families[0].hue_b = [255, 0, 0];
        match spec.validate() {
            Err(Error::IsoLuminance { family, .. }) => assert_eq!(family, spec.families[0].name),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn batches_cover_epoch() {
        let it = BatchIterator::new(10, 4, 1, true).unwrap();
        let b = it.epoch(0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(it.epoch(0), b);
        assert_ne!(it.epoch(1), b);
        let plain = BatchIterator::new(10, 4, 1, false).unwrap();
        assert_eq!(plain.epoch(3).concat(), (0..10).collect::<Vec<_>>());
        assert!(BatchIterator::new(10, 0, 1, true).is_err());
    }

    #[test]
    fn mask_rates() {
        assert!(mask_ground_truth(100, 0.0, 1, 0).unwrap().iter().all(|m| !m));
        assert!(mask_ground_truth(100, 1.0, 1, 0).unwrap().iter().all(|m| *m));
        let m = mask_ground_truth(10_000, 0.3, 7, 0).unwrap();
        let frac = m.iter().filter(|m| **m).count() as f64 / 1e4;
        assert!((frac - 0.3).abs() < 0.02, "{frac}");
        assert!(mask_ground_truth(1, 1.5, 0, 0).is_err());
    }
}
