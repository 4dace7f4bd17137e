//! Audio ingest and the log-mel front end.
//!
//! Waveforms are resampled to 16 kHz (linear interpolation) and turned into a
//! `T×M` log-mel spectrogram: Hann window of 25 ms, hop of 10 ms, 512-point FFT,
//! 64 HTK-scale triangular filters over 0–8 kHz, `ln(mel_power + 1e-6)`.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TARGET_SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

impl Waveform {
    pub fn new(sample_rate: u32, samples: Vec<f64>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Validation("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Validation("non-finite audio sample".into()));
        }
        Ok(Self { sample_rate, samples })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Linear-interpolation resampling.
    pub fn resample(&self, rate: u32) -> Waveform {
        if rate == self.sample_rate || self.samples.is_empty() {
            return Waveform {
                sample_rate: rate,
                samples: self.samples.clone(),
            };
        }
        let ratio = self.sample_rate as f64 / rate as f64;
        let n_out = ((self.samples.len() as f64) / ratio).round().max(1.0) as usize;
        let last = self.samples.len() - 1;
        let samples = (0..n_out)
            .map(|i| {
                let t = i as f64 * ratio;
                let i0 = (t.floor() as usize).min(last);
                let i1 = (i0 + 1).min(last);
                let frac = t - i0 as f64;
                self.samples[i0] * (1.0 - frac) + self.samples[i1] * frac
            })
            .collect();
        Waveform {
            sample_rate: rate,
            samples,
        }
    }
}

/// Read a PCM WAV file (16-bit int or 32-bit float), downmixing to mono.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let wav_err = |e: hound::Error| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let raw: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, bits) if bits <= 16 => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Int, bits) => {
            let scale = (1i64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
        (hound::SampleFormat::Float, _) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
    };
    let mono = raw
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(spec.sample_rate, mono).map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Write mono 16-bit PCM.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let wav_err = |e: hound::Error| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for s in &wave.samples {
        w.write_sample(quantize_i16(*s)).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// Inverse of the `/32768` scaling used when reading, so a read/write cycle
/// of an already-quantized waveform is exact.
pub fn quantize_i16(v: f64) -> i16 {
    (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrogramConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            sample_rate: TARGET_SAMPLE_RATE,
            n_mels: 64,
            win_length: 400,
            hop_length: 160,
            n_fft: 512,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-6,
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl SpectrogramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.win_length == 0 || self.hop_length == 0 {
            return Err(Error::Validation("spectrogram sizes must be positive".into()));
        }
        if self.n_fft < self.win_length {
            return Err(Error::Validation("n_fft must be >= win_length".into()));
        }
        if !(self.f_min >= 0.0 && self.f_max > self.f_min) {
            return Err(Error::Validation("invalid mel frequency range".into()));
        }
        Ok(())
    }

    /// Centre frequency (Hz) of each mel filter.
    pub fn mel_centers(&self) -> Vec<f64> {
        let (lo, hi) = (hz_to_mel(self.f_min), hz_to_mel(self.f_max));
        let step = (hi - lo) / (self.n_mels + 1) as f64;
        (1..=self.n_mels).map(|i| mel_to_hz(lo + step * i as f64)).collect()
    }

    /// `n_mels × (n_fft/2 + 1)` triangular filterbank, peak weight 1.
    pub fn filterbank(&self) -> Vec<Vec<f64>> {
        let (lo, hi) = (hz_to_mel(self.f_min), hz_to_mel(self.f_max));
        let step = (hi - lo) / (self.n_mels + 1) as f64;
        let edges: Vec<f64> = (0..self.n_mels + 2).map(|i| mel_to_hz(lo + step * i as f64)).collect();
        let n_bins = self.n_fft / 2 + 1;
        (0..self.n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * self.sample_rate as f64 / self.n_fft as f64;
                        if f <= l || f >= r {
                            0.0
                        } else if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (r - f) / (r - c)
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Log-mel magnitudes, `frames × n_mels`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub hop_length: usize,
    pub values: Vec<f64>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Keep frames `[start, start+len)`.
    pub fn crop(&self, start: usize, len: usize) -> Result<Spectrogram> {
        if len == 0 || start + len > self.frames {
            return Err(Error::Validation(format!(
                "crop {start}+{len} outside {} frames",
                self.frames
            )));
        }
        Ok(Spectrogram {
            frames: len,
            values: self.values[start * self.n_mels..(start + len) * self.n_mels].to_vec(),
            ..self.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.values.len() != self.frames * self.n_mels {
            return Err(Error::Shape("malformed spectrogram".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite spectrogram".into()));
        }
        Ok(())
    }
}

/// Reusable front end holding the FFT plan and filterbank.
pub struct AudioFrontend {
    config: SpectrogramConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
}

impl std::fmt::Debug for AudioFrontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AudioFrontend").field("config", &self.config).finish()
    }
}

impl AudioFrontend {
    pub fn new(config: SpectrogramConfig) -> Result<Self> {
        config.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(config.n_fft);
        let n = config.win_length;
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let filters = config.filterbank();
        Ok(Self {
            config,
            fft,
            window,
            filters,
        })
    }

    pub fn config(&self) -> &SpectrogramConfig {
        &self.config
    }

    pub fn compute(&self, audio: &Waveform) -> Spectrogram {
        let cfg = &self.config;
        let wave = audio.resample(cfg.sample_rate);
        let mut samples = wave.samples;
        if samples.len() < cfg.win_length {
            samples.resize(cfg.win_length, 0.0);
        }
        let frames = 1 + (samples.len() - cfg.win_length) / cfg.hop_length;
        let n_bins = cfg.n_fft / 2 + 1;
        let mut values = Vec::with_capacity(frames * cfg.n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut power = vec![0.0; n_bins];
        for t in 0..frames {
            let start = t * cfg.hop_length;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, w) in self.window.iter().enumerate() {
                buf[i] = Complex::new(samples[start + i] * w, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for f in &self.filters {
                let e: f64 = f.iter().zip(&power).map(|(w, p)| w * p).sum();
                values.push((e + cfg.log_floor).ln());
            }
        }
        Spectrogram {
            frames,
            n_mels: cfg.n_mels,
            sample_rate: cfg.sample_rate,
            hop_length: cfg.hop_length,
            values,
        }
    }
}

pub fn compute_spectrogram(audio: &Waveform, config: &SpectrogramConfig) -> Result<Spectrogram> {
    Ok(AudioFrontend::new(config.clone())?.compute(audio))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64, rate: u32) -> Waveform {
        let n = (secs * rate as f64) as usize;
        let s = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect();
        Waveform::new(rate, s).unwrap()
    }

    #[test]
    fn silence_is_floor() {
        let cfg = SpectrogramConfig::default();
        let s = compute_spectrogram(&Waveform::new(16_000, vec![0.0; 16_000]).unwrap(), &cfg).unwrap();
        assert_eq!(s.frames, 98);
        let floor = 1e-6f64.ln();
        assert!(s.values.iter().all(|v| (v - floor).abs() < 1e-9));
        let empty = compute_spectrogram(&Waveform::new(16_000, vec![]).unwrap(), &cfg).unwrap();
        assert_eq!(empty.frames, 1);
        assert!(empty.validate().is_ok());
    }

    #[test]
    fn tone_peaks_in_expected_band() {
        let cfg = SpectrogramConfig::default();
        // Independent oracle: evaluate each triangle directly at 440 Hz from
        // the HTK mel formula, without going through FFT bins.
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let step = mel(8000.0) / 65.0;
        let m440 = mel(440.0);
        let expected = (0..64)
            .max_by(|&a, &b| {
                let w = |m: usize| (1.0 - ((m440 - step * (m + 1) as f64) / step).abs()).max(0.0);
                w(a).total_cmp(&w(b))
            })
            .unwrap();
        assert_eq!(expected, 12);
        let s = compute_spectrogram(&tone(440.0, 1.0, 16_000), &cfg).unwrap();
        for t in 0..s.frames {
            let f = s.frame(t);
            let arg = (0..64).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
            assert_eq!(arg, expected, "frame {t}");
        }
    }

    #[test]
    fn resampling_keeps_tone_position() {
        let cfg = SpectrogramConfig::default();
        let a = compute_spectrogram(&tone(1000.0, 0.5, 16_000), &cfg).unwrap();
        let b = compute_spectrogram(&tone(1000.0, 0.5, 44_100), &cfg).unwrap();
        let argmax = |s: &Spectrogram| {
            let f = s.frame(s.frames / 2);
            (0..64).max_by(|&x, &y| f[x].total_cmp(&f[y])).unwrap()
        };
        assert_eq!(argmax(&a), argmax(&b));
        assert!((a.frames as isize - b.frames as isize).abs() <= 1);
    }

    #[test]
    fn deterministic() {
        let cfg = SpectrogramConfig::default();
        let w = tone(700.0, 0.3, 16_000);
        let a = compute_spectrogram(&w, &cfg).unwrap();
        let b = compute_spectrogram(&w, &cfg).unwrap();
        assert_eq!(
            a.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn wav_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = tone(300.0, 0.1, 8_000);
        write_wav(&p, &w).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.sample_rate, 8_000);
        assert_eq!(back.samples.len(), w.samples.len());
        for (a, b) in back.samples.iter().zip(&w.samples) {
            assert!((a - b).abs() < 1.0 / 16_000.0);
        }
        let bad = dir.path().join("bad.wav");
        std::fs::write(&bad, b"RIFF0000WAVEjunk").unwrap();
        assert!(matches!(read_wav(&bad), Err(Error::Wav { .. })));
    }
}
