//! Procedural talking-face scenes with lip motion driven by audio energy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{mel_spectrogram, window_for_frame, AudioClip, MelMatrix, SAMPLE_RATE};
use crate::encoders::{mask_lower_half, SceneSample};
use crate::error::{contract, Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

pub const VIDEO_FPS: f64 = 25.0;
/// Frames between consecutive sample centres.
pub const SAMPLE_SPACING: usize = 5;
/// Frames kept free at each end of the clip.
pub const EDGE_MARGIN: usize = 4;
pub const NUM_LANDMARKS: usize = 68;
/// Minimum temporal distance of unsynced audio and of reference frames.
pub const MIN_SHIFT: usize = 5;
pub const MAX_SHIFT: usize = 20;

/// Colours of one procedural identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceStyle {
    pub skin: [f64; 3],
    pub top: [f64; 3],
    pub bottom: [f64; 3],
    pub eyes: [f64; 3],
    pub mouth: [f64; 3],
}

impl FaceStyle {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_face);
        let mut jitter = |base: [f64; 3], amt: f64| base.map(|v: f64| (v + rng.gen_range(-amt..amt)).clamp(0.0, 1.0));
        FaceStyle {
            skin: jitter([0.86, 0.68, 0.55], 0.06),
            top: jitter([0.25, 0.35, 0.55], 0.08),
            bottom: jitter([0.45, 0.55, 0.75], 0.08),
            eyes: jitter([0.12, 0.10, 0.10], 0.03),
            mouth: jitter([0.45, 0.10, 0.14], 0.04),
        }
    }
}

/// Face geometry in units of the frame size.
mod geom {
    pub const HEAD: (f64, f64, f64, f64) = (0.5, 0.48, 0.36, 0.44);
    pub const EYE_L: (f64, f64) = (0.36, 0.38);
    pub const EYE_R: (f64, f64) = (0.64, 0.38);
    pub const EYE_R_XY: (f64, f64) = (0.055, 0.032);
    pub const NOSE: (f64, f64, f64, f64) = (0.5, 0.56, 0.035, 0.025);
    pub const MOUTH: (f64, f64) = (0.5, 0.72);
    pub const MOUTH_HALF_WIDTH: f64 = 0.12;
    pub const MOUTH_MIN_HALF_HEIGHT: f64 = 0.012;
    pub const MOUTH_MAX_EXTRA: f64 = 0.07;
    /// Region swapped between timesteps in source frames: rows, then cols.
    pub const MOUTH_BOX: (f64, f64, f64, f64) = (0.6, 0.86, 0.3, 0.7);
}

/// Fraction of a pixel covered by an axis-aligned ellipse (soft edge).
fn ellipse_cover(px: f64, py: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let q = ((px - cx) / rx).hypot((py - cy) / ry);
    (0.5 - (q - 1.0) * rx.min(ry)).clamp(0.0, 1.0)
}

fn paint(img: &mut Image, y: usize, x: usize, colour: [f64; 3], alpha: f64) {
    if alpha <= 0.0 {
        return;
    }
    for (c, col) in colour.iter().enumerate() {
        let v = img.at(c, y, x);
        img.set(c, y, x, v + alpha * (col - v));
    }
}

/// Mouth half-height in pixels for an opening in `[0, 1]`.
pub fn mouth_half_height(size: usize, opening: f64) -> f64 {
    size as f64 * (geom::MOUTH_MIN_HALF_HEIGHT + geom::MOUTH_MAX_EXTRA * opening.clamp(0.0, 1.0))
}

/// Renders one `3×size×size` frame.
pub fn render_frame(size: usize, opening: f64, style: &FaceStyle) -> Image {
    let s = size as f64;
    let mut img = Image::filled(3, size, size, 0.0);
    let (hx, hy, hrx, hry) = geom::HEAD;
    let (nx, ny, nrx, nry) = geom::NOSE;
    let nose = [style.skin[0] * 0.8, style.skin[1] * 0.75, style.skin[2] * 0.75];
    for y in 0..size {
        let t = y as f64 / (s - 1.0).max(1.0);
        let bg: [f64; 3] = std::array::from_fn(|c| style.top[c] + t * (style.bottom[c] - style.top[c]));
        for x in 0..size {
            for c in 0..3 {
                img.set(c, y, x, bg[c]);
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            paint(&mut img, y, x, style.skin, ellipse_cover(px, py, hx * s, hy * s, hrx * s, hry * s));
            for (ex, ey) in [geom::EYE_L, geom::EYE_R] {
                let a = ellipse_cover(px, py, ex * s, ey * s, geom::EYE_R_XY.0 * s, geom::EYE_R_XY.1 * s);
                paint(&mut img, y, x, style.eyes, a);
            }
            paint(&mut img, y, x, nose, ellipse_cover(px, py, nx * s, ny * s, nrx * s, nry * s));
            let (mx, my) = geom::MOUTH;
            let a = ellipse_cover(px, py, mx * s, my * s, geom::MOUTH_HALF_WIDTH * s, mouth_half_height(size, opening));
            paint(&mut img, y, x, style.mouth, a);
        }
    }
    img
}

fn ellipse_points(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64, n: usize, closed: bool) -> Vec<(f64, f64)> {
    let steps = if closed { n } else { n - 1 };
    (0..n)
        .map(|i| {
            let a = from + (to - from) * i as f64 / steps as f64;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

/// 68 `(x, y)` landmark positions in pixels: jaw, brows, nose, eyes, outer
/// and inner lips.
pub fn landmarks(size: usize, opening: f64) -> Vec<(f64, f64)> {
    use std::f64::consts::PI;
    let s = size as f64;
    let (hx, hy, hrx, hry) = geom::HEAD;
    let mut pts = ellipse_points(hx * s, hy * s, hrx * s, hry * s, 0.05 * PI, 0.95 * PI, 17, false);
    pts.reverse();
    for (ex, ey) in [geom::EYE_L, geom::EYE_R] {
        pts.extend(ellipse_points(ex * s, (ey - 0.06) * s, 0.08 * s, 0.02 * s, 1.1 * PI, 1.9 * PI, 5, false));
    }
    let (nx, ny, _, _) = geom::NOSE;
    pts.extend((0..4).map(|i| (nx * s, (0.42 + 0.04 * i as f64) * s)));
    pts.extend((0..5).map(|i| ((nx - 0.05 + 0.025 * i as f64) * s, (ny + 0.02) * s)));
    for (ex, ey) in [geom::EYE_L, geom::EYE_R] {
        pts.extend(ellipse_points(ex * s, ey * s, geom::EYE_R_XY.0 * s, geom::EYE_R_XY.1 * s, PI, 3.0 * PI, 6, true));
    }
    let (mx, my) = geom::MOUTH;
    let mh = mouth_half_height(size, opening);
    let mw = geom::MOUTH_HALF_WIDTH * s;
    pts.extend(ellipse_points(mx * s, my * s, mw, mh, PI, 3.0 * PI, 12, true));
    pts.extend(ellipse_points(mx * s, my * s, 0.7 * mw, 0.6 * mh, PI, 3.0 * PI, 8, true));
    debug_assert_eq!(pts.len(), NUM_LANDMARKS);
    pts
}

/// Sparse 0/1 `[1, size, size]` heatmap with one hot pixel per landmark.
pub fn landmark_map(size: usize, points: &[(f64, f64)]) -> Tensor {
    let mut data = vec![0.0; size * size];
    for &(x, y) in points {
        let xi = (x.floor().max(0.0) as usize).min(size - 1);
        let yi = (y.floor().max(0.0) as usize).min(size - 1);
        data[yi * size + xi] = 1.0;
    }
    Tensor::new(data, &[1, size, size]).expect("square map")
}

/// Tone bursts with random syllable lengths and loudness, separated by pauses.
pub fn synthesize_speech(frames: usize, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa0d1_0000);
    let per_frame = (SAMPLE_RATE as f64 / VIDEO_FPS) as usize;
    let n = frames * per_frame;
    let f0 = rng.gen_range(110.0..170.0);
    let mut envelope = vec![0.0; n];
    let mut pos = 0;
    while pos < n {
        let (len, amp) = if rng.gen_bool(0.8) {
            (rng.gen_range(3..=8) * per_frame, rng.gen_range(0.15..1.0))
        } else {
            (rng.gen_range(2..=4) * per_frame, 0.0)
        };
        for i in 0..len.min(n - pos) {
            let u = i as f64 / len as f64;
            envelope[pos + i] = amp * (std::f64::consts::PI * u).sin().powi(2);
        }
        pos += len;
    }
    let sr = SAMPLE_RATE as f64;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let tone: f64 = (1..=4).map(|k| (2.0 * std::f64::consts::PI * k as f64 * f0 * t).sin() / k as f64).sum();
            0.4 * envelope[i] * tone
        })
        .collect();
    AudioClip { samples, sample_rate: SAMPLE_RATE }
}

/// RMS of the audio under each video frame.
pub fn frame_rms(clip: &AudioClip, frames: usize) -> Vec<f64> {
    let per_frame = clip.sample_rate as f64 / VIDEO_FPS;
    (0..frames)
        .map(|f| {
            let a = (f as f64 * per_frame).round() as usize;
            let b = (((f + 1) as f64 * per_frame).round() as usize).min(clip.samples.len());
            let seg = &clip.samples[a.min(b)..b];
            if seg.is_empty() {
                0.0
            } else {
                (seg.iter().map(|v| v * v).sum::<f64>() / seg.len() as f64).sqrt()
            }
        })
        .collect()
}

/// Frames and audio of one synthetic talking-face clip.
#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub frames: Vec<Image>,
    /// Mouth opening per frame in `[0, 1]`.
    pub openings: Vec<f64>,
    pub clip: AudioClip,
    pub mel: MelMatrix,
    pub style: FaceStyle,
}

#[derive(Debug, Clone)]
pub enum AudioSource {
    Synthesized,
    Clip(AudioClip),
}

/// Frames needed to cut `n` samples.
pub fn required_frames(n: usize) -> usize {
    n * SAMPLE_SPACING + 2 * EDGE_MARGIN
}

/// Renders `frames` frames with openings proportional to per-frame RMS.
pub fn synthesize_video(size: usize, frames: usize, seed: u64, source: &AudioSource) -> Result<SyntheticVideo> {
    let clip = match source {
        AudioSource::Synthesized => synthesize_speech(frames, seed),
        AudioSource::Clip(c) => c.clone(),
    };
    let available = (clip.duration_secs() * VIDEO_FPS + 1e-9).floor() as usize;
    if available < frames {
        return Err(Error::Audio(format!(
            "audio covers {available} video frames at {VIDEO_FPS} fps; {frames} are needed"
        )));
    }
    let rms = frame_rms(&clip, frames);
    let peak = rms.iter().cloned().fold(0.0, f64::max);
    let openings: Vec<f64> = rms.iter().map(|r| if peak > 0.0 { r / peak } else { 0.0 }).collect();
    let style = FaceStyle::from_seed(seed);
    let frames_out = openings.iter().map(|&o| render_frame(size, o, &style)).collect();
    let mel = mel_spectrogram(&clip)?;
    Ok(SyntheticVideo { frames: frames_out, openings, clip, mel, style })
}

/// Training samples cut from one synthetic clip.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<SceneSample>,
    pub video: SyntheticVideo,
}

fn stack_frames(frames: &[&Image]) -> Result<Tensor> {
    let data: Vec<f64> = frames.iter().flat_map(|f| f.data.iter().copied()).collect();
    let [_, h, w] = frames[0].shape();
    Tensor::new(data, &[3 * frames.len(), h, w])
}

fn pick_far(rng: &mut ChaCha8Rng, t: usize, total: usize) -> Result<usize> {
    let far: Vec<usize> = (0..total).filter(|&u| u.abs_diff(t) >= MIN_SHIFT).collect();
    far.choose(rng).copied().ok_or_else(|| contract("clip too short for a distant frame"))
}

/// Cuts `n` samples spaced [`SAMPLE_SPACING`] frames apart.
pub fn generate_dataset(size: usize, n: usize, seed: u64, source: &AudioSource) -> Result<Dataset> {
    if n == 0 {
        return Err(contract("dataset needs at least one sample"));
    }
    let total = match source {
        AudioSource::Synthesized => required_frames(n),
        AudioSource::Clip(c) => {
            let avail = (c.duration_secs() * VIDEO_FPS + 1e-9).floor() as usize;
            if avail < required_frames(n) {
                return Err(Error::Audio(format!(
                    "audio covers {avail} video frames at {VIDEO_FPS} fps; {n} samples need {}",
                    required_frames(n)
                )));
            }
            avail
        }
    };
    let video = synthesize_video(size, total, seed, source)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xda7a_5e7);
    let (r0, r1, c0, c1) = geom::MOUTH_BOX;
    let s = size as f64;
    let (y0, y1, x0, x1) = ((r0 * s) as usize, (r1 * s) as usize, (c0 * s) as usize, (c1 * s) as usize);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = EDGE_MARGIN + i * SAMPLE_SPACING + SAMPLE_SPACING / 2;
        let truth = &video.frames[t];

        let donor = &video.frames[pick_far(&mut rng, t, total)?];
        let mut source_img = truth.clone();
        for c in 0..3 {
            for y in y0..y1 {
                for x in x0..x1 {
                    source_img.set(c, y, x, donor.at(c, y, x));
                }
            }
        }

        let mut refs = Vec::with_capacity(5);
        while refs.len() < 5 {
            let r = pick_far(&mut rng, t, total)?;
            if !refs.contains(&r) {
                refs.push(r);
            }
        }
        let ref_frames: Vec<&Image> = refs.iter().map(|&r| &video.frames[r]).collect();
        let window: Vec<&Image> = (t - 2..=t + 2).map(|u| &video.frames[u]).collect();

        let shifts: Vec<usize> = (MIN_SHIFT..=MAX_SHIFT)
            .flat_map(|k| [t.checked_sub(k), Some(t + k)])
            .flatten()
            .filter(|&u| u < total)
            .collect();
        let shifted = *shifts.choose(&mut rng).ok_or_else(|| contract("clip too short for an unsynced window"))?;

        let source_frame = source_img.to_tensor();
        samples.push(SceneSample {
            frame_index: t,
            masked_source: mask_lower_half(&source_frame)?,
            source_frame,
            truth_frame: truth.to_tensor(),
            references: stack_frames(&ref_frames)?,
            landmark_map: landmark_map(size, &landmarks(size, video.openings[refs[0]])),
            mel: window_for_frame(&video.mel, t, VIDEO_FPS)?,
            truth_window: stack_frames(&window)?,
            shifted_mel: window_for_frame(&video.mel, shifted, VIDEO_FPS)?,
        });
    }
    Ok(Dataset { samples, video })
}

/// Canonical byte encoding of every sample, for reproducibility checks.
pub fn dataset_bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    for s in &ds.samples {
        out.extend((s.frame_index as u64).to_le_bytes());
        for t in [&s.source_frame, &s.truth_frame, &s.masked_source, &s.references, &s.landmark_map, &s.truth_window] {
            t.data().iter().for_each(|v| out.extend(v.to_le_bytes()));
        }
        for m in [&s.mel, &s.shifted_mel] {
            out.extend((m.start as u64).to_le_bytes());
            m.values.iter().for_each(|v| out.extend(v.to_le_bytes()));
        }
    }
    out
}
