//! Frame quality and lip-sync metrics: MSE, PSNR, SSIM, LSE-D/LSE-C, plus
//! CSV/SVG report emission.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audio::{window_for_frame, MelMatrix, MelWindow};
use crate::deformation::FaceBox;
use crate::error::{contract, Error, Result};
use crate::image::Image;
use crate::losses::FeatureExtractor;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Temporal offsets searched by the sync metrics, in video frames.
pub const LSE_MAX_OFFSET: isize = 15;
/// Frames per visual sync window.
pub const LSE_VISUAL_FRAMES: usize = 5;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op: "image metric", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64)
}

/// `10·log10(L²/MSE)`, capped at 100 dB when MSE < 1e-10.
pub fn psnr_from_mse(mse: f64, range: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (range * range / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn psnr(a: &Image, b: &Image, range: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, range))
}

/// Normalised 1-D Gaussian taps of the SSIM window.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= z);
    k
}

/// Valid-mode separable filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|t| k[t] * plane[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|t| k[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM over valid 11×11 Gaussian windows, averaged over channels.
pub fn ssim(a: &Image, b: &Image, range: f64) -> Result<f64> {
    same_shape(a, b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(contract(format!("SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {}×{}", a.height, a.width)));
    }
    let k = ssim_taps();
    let (c1, c2) = ((SSIM_K1 * range).powi(2), (SSIM_K2 * range).powi(2));
    let (h, w) = (a.height, a.width);
    let mut total = 0.0;
    for c in 0..a.channels {
        let (x, y) = (a.channel(c), b.channel(c));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(x, h, w, &k);
        let my = filter_valid(y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cov = sxy[i] - mx[i] * my[i];
            let num = (2.0 * (mx[i] * my[i]) + c1) * (2.0 * cov + c2);
            let den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
            acc += num / den;
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / a.channels as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScores {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

pub fn psnr_ssim_mse(a: &Image, b: &Image, range: f64) -> Result<FrameScores> {
    let m = mse(a, b)?;
    Ok(FrameScores { psnr: psnr_from_mse(m, range), ssim: ssim(a, b, range)?, mse: m })
}

/// Maps 5-frame mouth windows and mel windows into a shared embedding space.
pub trait SyncEmbedder {
    fn embed_visual(&self, window: &[Image]) -> Result<Vec<f64>>;
    fn embed_audio(&self, mel: &MelWindow) -> Result<Vec<f64>>;
}

/// Fixed random projections of downsampled mouth crops and mel windows,
/// normalised to unit length. Stands in for a pretrained sync network.
#[derive(Debug, Clone)]
pub struct RandomProjectionEmbedder {
    dim: usize,
    visual: Vec<f64>,
    audio: Vec<f64>,
}

const EMBED_GRID: usize = 8;

impl RandomProjectionEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let vin = LSE_VISUAL_FRAMES * EMBED_GRID * EMBED_GRID;
        let ain = crate::audio::WINDOW_FRAMES * crate::audio::N_MELS;
        RandomProjectionEmbedder { dim, visual: draw(dim * vin), audio: draw(dim * ain) }
    }

    fn project(&self, weights: &[f64], x: &[f64]) -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let mut out: Vec<f64> = (0..self.dim)
            .map(|r| weights[r * x.len()..(r + 1) * x.len()].iter().zip(x).map(|(w, v)| w * (v - mean)).sum())
            .collect();
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        out.iter_mut().for_each(|v| *v /= norm);
        out
    }
}

/// Grey-level area average onto an `n×n` grid.
fn grey_grid(img: &Image, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    let mut count = vec![0usize; n * n];
    for y in 0..img.height {
        for x in 0..img.width {
            let cell = (y * n / img.height) * n + x * n / img.width;
            out[cell] += (0..img.channels).map(|c| img.at(c, y, x)).sum::<f64>() / img.channels as f64;
            count[cell] += 1;
        }
    }
    out.iter().zip(&count).map(|(s, &k)| if k == 0 { 0.0 } else { s / k as f64 }).collect()
}

impl SyncEmbedder for RandomProjectionEmbedder {
    fn embed_visual(&self, window: &[Image]) -> Result<Vec<f64>> {
        if window.len() != LSE_VISUAL_FRAMES {
            return Err(contract(format!("visual sync window needs {LSE_VISUAL_FRAMES} frames, got {}", window.len())));
        }
        let x: Vec<f64> = window.iter().flat_map(|f| grey_grid(f, EMBED_GRID)).collect();
        Ok(self.project(&self.visual, &x))
    }

    fn embed_audio(&self, mel: &MelWindow) -> Result<Vec<f64>> {
        Ok(self.project(&self.audio, &mel.values))
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `(LSE-D, LSE-C)` from aligned visual and audio embedding streams. Only
/// positions where every offset in `[-15, 15]` stays inside the stream count.
pub fn lse_from_embeddings(visual: &[Vec<f64>], audio: &[Vec<f64>]) -> Result<(f64, f64)> {
    if visual.len() != audio.len() {
        return Err(contract(format!("{} visual vs {} audio embeddings", visual.len(), audio.len())));
    }
    let n = visual.len() as isize;
    let span = 2 * LSE_MAX_OFFSET + 1;
    if n < span {
        return Err(contract(format!("sync metrics need at least {span} aligned windows, got {n}")));
    }
    let (mut lse_d, mut lse_c) = (0.0, 0.0);
    let mut count = 0.0;
    for t in LSE_MAX_OFFSET..n - LSE_MAX_OFFSET {
        let mut dists: Vec<f64> = (-LSE_MAX_OFFSET..=LSE_MAX_OFFSET)
            .map(|k| distance(&visual[t as usize], &audio[(t + k) as usize]))
            .collect();
        let at_zero = dists[LSE_MAX_OFFSET as usize];
        let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        lse_d += at_zero;
        lse_c += median(&mut dists) - min;
        count += 1.0;
    }
    Ok((lse_d / count, lse_c / count))
}

/// Frames needed before [`lse`] can produce a value.
pub fn lse_min_frames() -> usize {
    (2 * LSE_MAX_OFFSET as usize + 1) + LSE_VISUAL_FRAMES - 1
}

/// Sync metrics over mouth crops and per-frame mel windows. Visual window
/// `t` covers frames `t-2..=t+2` and pairs with `mels[t]`.
pub fn lse(frames: &[Image], mels: &[MelWindow], embedder: &dyn SyncEmbedder) -> Result<(f64, f64)> {
    if frames.len() != mels.len() {
        return Err(contract(format!("{} frames vs {} mel windows", frames.len(), mels.len())));
    }
    if frames.len() < lse_min_frames() {
        return Err(contract(format!("sync metrics need at least {} frames, got {}", lse_min_frames(), frames.len())));
    }
    let half = LSE_VISUAL_FRAMES / 2;
    let mut v = Vec::new();
    let mut a = Vec::new();
    for t in half..frames.len() - half {
        v.push(embedder.embed_visual(&frames[t - half..=t + half])?);
        a.push(embedder.embed_audio(&mels[t])?);
    }
    lse_from_embeddings(&v, &a)
}

/// Mean L1 distance between extractor stages. A plug-in point for learned
/// perceptual metrics; with the default random extractor it is only a proxy.
pub fn perceptual_distance(a: &Image, b: &Image, extractor: &dyn FeatureExtractor) -> Result<f64> {
    same_shape(a, b)?;
    let (sa, sb) = (extractor.stages(&a.to_tensor())?, extractor.stages(&b.to_tensor())?);
    let mut total = 0.0;
    for (x, y) in sa.iter().zip(&sb) {
        total += x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.numel() as f64;
    }
    Ok(total / sa.len().max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub per_frame: Vec<FrameScores>,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    /// `None` when the sequence is too short or no audio was given.
    pub lse_d: Option<f64>,
    pub lse_c: Option<f64>,
}

impl MetricReport {
    pub fn frames(&self) -> usize {
        self.per_frame.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,psnr,ssim,mse\n");
        for (i, f) in self.per_frame.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{},{}", f.psnr, f.ssim, f.mse);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Two stacked line plots: PSNR (dB) and SSIM per frame.
    pub fn to_svg(&self) -> String {
        let psnr: Vec<f64> = self.per_frame.iter().map(|f| f.psnr).collect();
        let ssim: Vec<f64> = self.per_frame.iter().map(|f| f.ssim).collect();
        let (w, h) = (640.0, 400.0);
        let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
        s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
        s.push_str(&line_panel(&psnr, "PSNR (dB)", 20.0, w, "steelblue"));
        s.push_str(&line_panel(&ssim, "SSIM", 210.0, w, "darkorange"));
        s.push_str("</svg>\n");
        s
    }

    pub fn write_svg(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_svg())?;
        Ok(())
    }
}

fn line_panel(values: &[f64], label: &str, top: f64, width: f64, colour: &str) -> String {
    let (left, ph, pw) = (50.0, 160.0, width - 70.0);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = values.len().max(2) - 1;
    let points: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let x = left + pw * i as f64 / n as f64;
            let y = top + ph - ph * (v - lo) / span;
            format!("{x:.2},{y:.2}")
        })
        .collect();
    format!(
        "<g font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect x=\"{left}\" y=\"{top}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#999\"/>\n\
         <text x=\"{left}\" y=\"{ty}\">{label}</text>\n\
         <text x=\"4\" y=\"{top_l}\">{hi:.3}</text>\n\
         <text x=\"4\" y=\"{bot}\">{lo:.3}</text>\n\
         <polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>\n</g>\n",
        points.join(" "),
        ty = top - 4.0,
        top_l = top + 12.0,
        bot = top + ph,
    )
}

/// Per-frame quality against the reference plus optional sync metrics on the
/// generated mouth region. Frames are paired by index.
pub fn report(
    generated: &[Image],
    reference: &[Image],
    audio: Option<(&MelMatrix, f64)>,
    embedder: &dyn SyncEmbedder,
) -> Result<MetricReport> {
    if generated.len() != reference.len() {
        return Err(contract(format!("{} generated frames vs {} reference frames", generated.len(), reference.len())));
    }
    if generated.is_empty() {
        return Err(contract("no frames to evaluate"));
    }
    let per_frame = generated
        .iter()
        .zip(reference)
        .map(|(g, r)| psnr_ssim_mse(g, r, 1.0))
        .collect::<Result<Vec<_>>>()?;
    let n = per_frame.len() as f64;
    let mean = |f: fn(&FrameScores) -> f64| per_frame.iter().map(f).sum::<f64>() / n;
    let (psnr, ssim, mse) = (mean(|f| f.psnr), mean(|f| f.ssim), mean(|f| f.mse));
    let (mut lse_d, mut lse_c) = (None, None);
    if let Some((mel, fps)) = audio {
        if generated.len() >= lse_min_frames() {
            let g0 = &generated[0];
            let bx = FaceBox::lower_face(g0.height, g0.width);
            let crops = generated
                .iter()
                .map(|f| f.crop(bx.y0, bx.x0, bx.y1 - bx.y0, bx.x1 - bx.x0))
                .collect::<Result<Vec<_>>>()?;
            let mels = (0..generated.len()).map(|i| window_for_frame(mel, i, fps)).collect::<Result<Vec<_>>>()?;
            let (d, c) = lse(&crops, &mels, embedder)?;
            lse_d = Some(d);
            lse_c = Some(c);
        }
    }
    Ok(MetricReport { per_frame, psnr, ssim, mse, lse_d, lse_c })
}
