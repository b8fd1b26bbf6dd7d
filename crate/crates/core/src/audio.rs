//! Audio ingestion and log-mel featurisation.
//!
//! Clips are mono 16 kHz. The spectrogram uses an 800-sample Hann window
//! and FFT, hop 200 (80 mel frames per second), reflection centre padding,
//! 80 triangular mel filters over 55–7600 Hz on the power spectrum, and
//! `log10(max(x, 1e-5))`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_FFT: usize = 800;
pub const HOP: usize = 200;
pub const N_MELS: usize = 80;
pub const F_MIN: f64 = 55.0;
pub const F_MAX: f64 = 7600.0;
pub const LOG_FLOOR: f64 = 1e-5;
/// Mel frames per window handed to the audio encoder.
pub const WINDOW_FRAMES: usize = 16;
pub const MEL_FRAMES_PER_SECOND: f64 = SAMPLE_RATE as f64 / HOP as f64;

const MEL_MAGIC: &[u8; 7] = b"G4GMEL1";

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    /// Builds a clip at 16 kHz, resampling linearly when `sample_rate` differs.
    pub fn from_samples(samples: Vec<f64>, sample_rate: u32) -> Result<AudioClip> {
        if sample_rate == 0 {
            return Err(Error::Audio("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite { what: "audio samples".into(), index: i });
        }
        let samples = if sample_rate == SAMPLE_RATE {
            samples
        } else {
            resample_linear(&samples, sample_rate, SAMPLE_RATE)
        };
        Ok(AudioClip { samples, sample_rate: SAMPLE_RATE })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, gain: f64) -> AudioClip {
        AudioClip {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Linear-interpolation resampler. Output length is `round(n · to / from)`.
pub fn resample_linear(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if samples.is_empty() || from == to {
        return samples.to_vec();
    }
    let n = samples.len();
    let out_len = ((n as f64) * to as f64 / from as f64).round() as usize;
    let ratio = from as f64 / to as f64;
    (0..out_len)
        .map(|j| {
            let pos = j as f64 * ratio;
            let i0 = (pos.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let frac = pos - i0 as f64;
            samples[i0] * (1.0 - frac) + samples[i1] * frac
        })
        .collect()
}

/// Reads a 16-bit PCM WAV. Multi-channel input is averaged to mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Audio(format!(
            "{}: unsupported encoding ({:?}, {} bits); expected 16-bit PCM",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let channels = spec.channels.max(1) as usize;
    let raw = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    let mono: Vec<f64> = raw
        .chunks(channels)
        .map(|frame| frame.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / channels as f64)
        .collect();
    AudioClip::from_samples(mono, spec.sample_rate)
}

/// Writes a mono 16-bit PCM WAV, clipping to [-1, 1].
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let path = path.as_ref();
    let mut w = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| Error::Audio(e.to_string()))?;
    }
    w.finalize().map_err(|e| Error::Audio(e.to_string()))
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// The `N_MELS + 2` filter edge frequencies, equally spaced on the mel scale.
fn mel_edges() -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(F_MIN), hz_to_mel(F_MAX));
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

/// Peak frequency of each mel filter.
pub fn mel_center_frequencies() -> Vec<f64> {
    mel_edges()[1..=N_MELS].to_vec()
}

/// `N_MELS × (N_FFT/2 + 1)` triangular filters with unit peak.
pub fn mel_filterbank() -> Vec<Vec<f64>> {
    let edges = mel_edges();
    let n_bins = N_FFT / 2 + 1;
    (0..N_MELS)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
                    let up = (f - l) / (c - l);
                    let down = (r - f) / (r - c);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Row-major `frames × bins` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MelMatrix {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl MelMatrix {
    pub fn row(&self, frame: usize) -> &[f64] {
        &self.data[frame * self.bins..(frame + 1) * self.bins]
    }
}

/// Log-mel spectrogram with `ceil(len / HOP)` frames.
pub fn mel_spectrogram(clip: &AudioClip) -> Result<MelMatrix> {
    if clip.sample_rate != SAMPLE_RATE {
        return Err(Error::Audio(format!(
            "mel_spectrogram expects {SAMPLE_RATE} Hz, got {}",
            clip.sample_rate
        )));
    }
    let x = &clip.samples;
    let pad = N_FFT / 2;
    if x.len() <= pad {
        return Err(Error::Audio(format!(
            "clip of {} samples is shorter than one analysis window after padding (needs > {pad})",
            x.len()
        )));
    }
    let n = x.len();
    let padded: Vec<f64> = (0..n + 2 * pad)
        .map(|i| {
            let j = i as isize - pad as isize;
            let idx = if j < 0 {
                (-j) as usize
            } else if j as usize >= n {
                2 * (n - 1) - j as usize
            } else {
                j as usize
            };
            x[idx]
        })
        .collect();

    let frames = n.div_ceil(HOP);
    let window = hann(N_FFT);
    let fb = mel_filterbank();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let n_bins = N_FFT / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut power = vec![0.0; n_bins];
    let mut data = Vec::with_capacity(frames * N_MELS);
    for f in 0..frames {
        let seg = &padded[f * HOP..f * HOP + N_FFT];
        for (b, (&s, &w)) in buf.iter_mut().zip(seg.iter().zip(&window)) {
            *b = Complex::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for filt in &fb {
            let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
            data.push(e.max(LOG_FLOOR).log10());
        }
    }
    Ok(MelMatrix { frames, bins: N_MELS, data })
}

/// A 16 × 80 block of log-mel frames aligned to one video frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MelWindow {
    pub values: Vec<f64>,
    /// First mel frame of the window within the source matrix.
    pub start: usize,
}

impl MelWindow {
    pub fn new(values: Vec<f64>) -> Result<MelWindow> {
        if values.len() != WINDOW_FRAMES * N_MELS {
            return Err(Error::Contract(format!(
                "mel window must hold {}×{} values, got {}",
                WINDOW_FRAMES,
                N_MELS,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "mel window".into(), index: i });
        }
        Ok(MelWindow { values, start: 0 })
    }

    pub fn zeros() -> MelWindow {
        MelWindow { values: vec![0.0; WINDOW_FRAMES * N_MELS], start: 0 }
    }

    /// `[1, 16, 80]` tensor for the audio encoder.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.values.clone(), &[1, WINDOW_FRAMES, N_MELS]).expect("fixed window shape")
    }
}

/// Mel frame closest to the timestamp of `frame_index` at `fps`.
pub fn center_mel_frame(frame_index: usize, fps: f64) -> usize {
    (frame_index as f64 / fps * MEL_FRAMES_PER_SECOND).round() as usize
}

/// The 16 mel frames centred on video frame `frame_index`
/// (`[center − 8, center + 8)`), shifted inward at the clip edges.
pub fn window_for_frame(mel: &MelMatrix, frame_index: usize, fps: f64) -> Result<MelWindow> {
    if !(fps > 0.0) {
        return Err(Error::Contract(format!("fps must be positive, got {fps}")));
    }
    if mel.frames < WINDOW_FRAMES {
        return Err(Error::Contract(format!(
            "mel matrix has {} frames; at least {WINDOW_FRAMES} are needed for a window",
            mel.frames
        )));
    }
    let center = center_mel_frame(frame_index, fps);
    if center >= mel.frames {
        let last = ((mel.frames - 1) as f64 * fps / MEL_FRAMES_PER_SECOND + 0.5).floor() as usize;
        let last = (0..=last)
            .rev()
            .find(|&i| center_mel_frame(i, fps) < mel.frames)
            .unwrap_or(0);
        return Err(Error::Contract(format!(
            "video frame {frame_index} outside audio; valid frames are 0..={last}"
        )));
    }
    let half = WINDOW_FRAMES / 2;
    let start = center.saturating_sub(half).min(mel.frames - WINDOW_FRAMES);
    let values = mel.data[start * mel.bins..(start + WINDOW_FRAMES) * mel.bins].to_vec();
    Ok(MelWindow { values, start })
}

/// Number of whole video frames covered by `clip` at `fps`.
pub fn video_frames(clip: &AudioClip, fps: f64) -> usize {
    (clip.duration_secs() * fps).floor() as usize
}

/// Writes `G4GMEL1`, rows and cols as little-endian u32, then row-major f32.
pub fn write_mel(path: impl AsRef<Path>, mel: &MelMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MEL_MAGIC)?;
    w.write_all(&(mel.frames as u32).to_le_bytes())?;
    w.write_all(&(mel.bins as u32).to_le_bytes())?;
    for &v in &mel.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mel(path: impl AsRef<Path>) -> Result<MelMatrix> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != MEL_MAGIC {
        return Err(Error::Format("not a G4GMEL1 file".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let frames = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let bins = u32::from_le_bytes(word) as usize;
    let mut data = Vec::with_capacity(frames * bins);
    for _ in 0..frames * bins {
        r.read_exact(&mut word)?;
        data.push(f32::from_le_bytes(word) as f64);
    }
    Ok(MelMatrix { frames, bins, data })
}

/// Plain-text dump: one frame per line, space-separated.
pub fn write_mel_text(path: impl AsRef<Path>, mel: &MelMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for f in 0..mel.frames {
        let line: Vec<String> = mel.row(f).iter().map(|v| format!("{v:.6}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}
