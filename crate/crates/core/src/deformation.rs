//! Per-channel adaptive affine deformation of reference features, face
//! decoding, Gaussian-mask compositing and the residual blend stage.
//!
//! Coordinates live on the normalised grid `[-1, 1]²` with the origin at the
//! feature centre; pixel `j` of an extent-`W` axis sits at `-1 + 2j/(W-1)`.
//! For channel `c` the forward map is
//!
//! ```text
//! [x̂]   [s cosθ  −s sinθ] [x]   [t_x]
//! [ŷ] = [s sinθ   s cosθ] [y] + [t_y]
//! ```
//!
//! and the warp samples backwards: each output cell `(x̂, ŷ)` reads the input
//! at the closed-form inverse `(x, y) = R(−θ)·(x̂ − t_x, ŷ − t_y) / s` with
//! bilinear interpolation.

use rand_chacha::ChaCha8Rng;

use crate::encoders::ModelDims;
use crate::error::{contract, Error, Result};
use crate::nn::{act, Conv2d, Init, Linear, ParamSet};
use crate::tensor::Tensor;

/// Lower bound added to the softplus scale.
pub const SCALE_FLOOR: f64 = 0.1;
/// Maximum magnitude of the blend-net residual.
pub const BLEND_RESIDUAL_CAP: f64 = 0.1;

/// Per-channel rotation, translation and scale, each a `[C]` tensor.
#[derive(Debug, Clone)]
pub struct AffineCoeffSet {
    pub theta: Tensor,
    pub t_x: Tensor,
    pub t_y: Tensor,
    pub s: Tensor,
}

impl AffineCoeffSet {
    pub fn identity(channels: usize) -> Self {
        AffineCoeffSet {
            theta: Tensor::zeros(&[channels]),
            t_x: Tensor::zeros(&[channels]),
            t_y: Tensor::zeros(&[channels]),
            s: Tensor::full(&[channels], 1.0),
        }
    }

    /// Same coefficients for every channel.
    pub fn uniform(channels: usize, theta: f64, t_x: f64, t_y: f64, s: f64) -> Self {
        AffineCoeffSet {
            theta: Tensor::full(&[channels], theta),
            t_x: Tensor::full(&[channels], t_x),
            t_y: Tensor::full(&[channels], t_y),
            s: Tensor::full(&[channels], s),
        }
    }

    pub fn channels(&self) -> usize {
        self.theta.numel()
    }

    fn check(&self, channels: usize) -> Result<()> {
        for (name, t) in [("theta", &self.theta), ("t_x", &self.t_x), ("t_y", &self.t_y), ("s", &self.s)] {
            if t.shape() != [channels] {
                return Err(Error::ShapeMismatch { op: "affine_warp coefficients", lhs: vec![channels], rhs: t.shape().to_vec() });
            }
            if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: format!("affine coefficient {name}"), index: i });
            }
        }
        if let Some(i) = self.s.data().iter().position(|&v| v == 0.0) {
            return Err(contract(format!("affine scale is zero at channel {i}")));
        }
        Ok(())
    }
}

/// Forward coordinate map of one channel.
pub fn forward_map(theta: f64, t_x: f64, t_y: f64, s: f64, (x, y): (f64, f64)) -> (f64, f64) {
    let (sin, cos) = theta.sin_cos();
    (s * cos * x - s * sin * y + t_x, s * sin * x + s * cos * y + t_y)
}

/// Closed-form inverse of [`forward_map`].
pub fn inverse_map(theta: f64, t_x: f64, t_y: f64, s: f64, (xh, yh): (f64, f64)) -> (f64, f64) {
    let (sin, cos) = theta.sin_cos();
    let (dx, dy) = (xh - t_x, yh - t_y);
    ((cos * dx + sin * dy) / s, (-sin * dx + cos * dy) / s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Out-of-grid samples read the nearest border cell.
    #[default]
    Border,
    /// Out-of-grid taps read zero.
    Zeros,
}

fn grid_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Bilinear tap positions and weights for one sample, with the partial
/// derivatives of the sampled value w.r.t. the pixel coordinates.
struct Tap {
    idx: [Option<usize>; 4],
    w: [f64; 4],
    /// d(value)/d(u) and d(value)/d(v) factors: value = Σ w·p, and
    /// dvalue/du = Σ du_w·p.
    du_w: [f64; 4],
    dv_w: [f64; 4],
}

fn bilinear_tap(u: f64, v: f64, h: usize, w: usize, padding: Padding) -> Tap {
    let (wf, hf) = ((w - 1) as f64, (h - 1) as f64);
    let (mut u, mut v) = (u, v);
    let (mut du_live, mut dv_live) = (1.0, 1.0);
    if padding == Padding::Border {
        if u < 0.0 || u > wf {
            u = u.clamp(0.0, wf);
            du_live = 0.0;
        }
        if v < 0.0 || v > hf {
            v = v.clamp(0.0, hf);
            dv_live = 0.0;
        }
    }
    let (u0, v0) = (u.floor(), v.floor());
    let (fu, fv) = (u - u0, v - v0);
    let (u0, v0) = (u0 as isize, v0 as isize);
    let at = |yy: isize, xx: isize| -> Option<usize> {
        match padding {
            Padding::Border => {
                let yy = yy.clamp(0, h as isize - 1) as usize;
                let xx = xx.clamp(0, w as isize - 1) as usize;
                Some(yy * w + xx)
            }
            Padding::Zeros => {
                (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w).then(|| yy as usize * w + xx as usize)
            }
        }
    };
    Tap {
        idx: [at(v0, u0), at(v0, u0 + 1), at(v0 + 1, u0), at(v0 + 1, u0 + 1)],
        w: [(1.0 - fv) * (1.0 - fu), (1.0 - fv) * fu, fv * (1.0 - fu), fv * fu],
        du_w: [-(1.0 - fv) * du_live, (1.0 - fv) * du_live, -fv * du_live, fv * du_live],
        dv_w: [-(1.0 - fu) * dv_live, -fu * dv_live, (1.0 - fu) * dv_live, fu * dv_live],
    }
}

/// Warps each channel of a `[C, H, W]` feature by its own similarity
/// transform. Differentiable w.r.t. the feature and all four coefficient sets.
pub fn affine_warp(feature: &Tensor, coeffs: &AffineCoeffSet, padding: Padding) -> Result<Tensor> {
    let &[c, h, w] = feature.shape() else {
        return Err(contract(format!("affine_warp expects [C,H,W], got {:?}", feature.shape())));
    };
    coeffs.check(c)?;
    let plane = h * w;
    let sample = move |f: &[f64], th: &[f64], tx: &[f64], ty: &[f64], s: &[f64], ch: usize, i: usize, j: usize| {
        let (x, y) = inverse_map(th[ch], tx[ch], ty[ch], s[ch], (grid_coord(j, w), grid_coord(i, h)));
        let u = (x + 1.0) * (w - 1) as f64 / 2.0;
        let v = (y + 1.0) * (h - 1) as f64 / 2.0;
        let tap = bilinear_tap(u, v, h, w, padding);
        let base = &f[ch * plane..(ch + 1) * plane];
        let mut val = 0.0;
        for k in 0..4 {
            if let Some(ix) = tap.idx[k] {
                val += tap.w[k] * base[ix];
            }
        }
        (val, x, y, tap)
    };

    let (f, th, tx, ty, s) = (feature.data(), coeffs.theta.data(), coeffs.t_x.data(), coeffs.t_y.data(), coeffs.s.data());
    let mut out = vec![0.0; c * plane];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[ch * plane + i * w + j] = sample(f, th, tx, ty, s, ch, i, j).0;
            }
        }
    }

    let parents = vec![
        feature.clone(),
        coeffs.theta.clone(),
        coeffs.t_x.clone(),
        coeffs.t_y.clone(),
        coeffs.s.clone(),
    ];
    Ok(Tensor::from_op(
        out,
        vec![c, h, w],
        parents,
        Box::new(move |g, p, _| {
            let (f, th, tx, ty, s) = (p[0].data(), p[1].data(), p[2].data(), p[3].data(), p[4].data());
            let want_coeff = p[1..].iter().any(|t| t.requires_grad());
            let mut gf = vec![0.0; c * plane];
            let mut gth = vec![0.0; c];
            let mut gtx = vec![0.0; c];
            let mut gty = vec![0.0; c];
            let mut gs = vec![0.0; c];
            let (du_dx, dv_dy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
            for ch in 0..c {
                let (sin, cos) = th[ch].sin_cos();
                let sc = s[ch];
                let base = &f[ch * plane..(ch + 1) * plane];
                for i in 0..h {
                    for j in 0..w {
                        let go = g[ch * plane + i * w + j];
                        if go == 0.0 {
                            continue;
                        }
                        let (_, x, y, tap) = sample(f, th, tx, ty, s, ch, i, j);
                        let mut dval_du = 0.0;
                        let mut dval_dv = 0.0;
                        for k in 0..4 {
                            if let Some(ix) = tap.idx[k] {
                                gf[ch * plane + ix] += go * tap.w[k];
                                dval_du += tap.du_w[k] * base[ix];
                                dval_dv += tap.dv_w[k] * base[ix];
                            }
                        }
                        if !want_coeff {
                            continue;
                        }
                        let gx = go * dval_du * du_dx;
                        let gy = go * dval_dv * dv_dy;
                        // x = (cos·dx + sin·dy)/s, y = (−sin·dx + cos·dy)/s
                        gth[ch] += gx * y - gy * x;
                        gtx[ch] += (-gx * cos + gy * sin) / sc;
                        gty[ch] += (-gx * sin - gy * cos) / sc;
                        gs[ch] += -(gx * x + gy * y) / sc;
                    }
                }
            }
            vec![
                p[0].requires_grad().then_some(gf),
                p[1].requires_grad().then_some(gth),
                p[2].requires_grad().then_some(gtx),
                p[3].requires_grad().then_some(gty),
                p[4].requires_grad().then_some(gs),
            ]
        }),
    ))
}

/// Fully-connected heads mapping the concatenated aligned visual/audio
/// feature to per-channel coefficients.
#[derive(Debug, Clone)]
pub struct CoeffPredictor {
    pub theta: Linear,
    pub t_x: Linear,
    pub t_y: Linear,
    pub s_raw: Linear,
}

impl CoeffPredictor {
    pub fn new(input_dim: usize, channels: usize) -> Self {
        CoeffPredictor {
            theta: Linear::new("coeff.theta", input_dim, channels),
            t_x: Linear::new("coeff.t_x", input_dim, channels),
            t_y: Linear::new("coeff.t_y", input_dim, channels),
            s_raw: Linear::new("coeff.s", input_dim, channels),
        }
    }

    /// Zero weights and biases chosen so the initial transform is the
    /// identity: softplus(raw) + 0.1 = 1.
    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        let raw_one = (1.0 - SCALE_FLOOR).exp_m1().ln();
        self.theta.init(params, rng, Init::Zeros, Init::Zeros)?;
        self.t_x.init(params, rng, Init::Zeros, Init::Zeros)?;
        self.t_y.init(params, rng, Init::Zeros, Init::Zeros)?;
        self.s_raw.init(params, rng, Init::Zeros, Init::Constant(raw_one))
    }

    pub fn predict(&self, params: &ParamSet, fused_aligned: &Tensor) -> Result<AffineCoeffSet> {
        Ok(AffineCoeffSet {
            theta: self.theta.forward(params, fused_aligned)?,
            t_x: self.t_x.forward(params, fused_aligned)?,
            t_y: self.t_y.forward(params, fused_aligned)?,
            s: self.s_raw.forward(params, fused_aligned)?.softplus().add_scalar(SCALE_FLOOR),
        })
    }
}

/// Lower-half supervision masks at full, half and quarter resolution.
#[derive(Debug, Clone)]
pub struct MaskPyramid {
    /// `[1, H_k, W_k]` masks, finest first.
    pub masks: Vec<Tensor>,
}

impl MaskPyramid {
    pub fn levels(&self) -> usize {
        self.masks.len()
    }

    /// Only the first `n` scales.
    pub fn truncated(&self, n: usize) -> MaskPyramid {
        MaskPyramid { masks: self.masks[..n.clamp(1, self.masks.len())].to_vec() }
    }

    /// Single all-ones mask (unmasked, single scale).
    pub fn unmasked(h: usize, w: usize) -> MaskPyramid {
        MaskPyramid { masks: vec![Tensor::full(&[1, h, w], 1.0)] }
    }
}

/// Lower-half mask with a linear ramp from row `H/2 − 2` (0) to `H/2 + 1` (1),
/// plus 2× and 4× area-downsampled copies.
pub fn build_mask_pyramid(h: usize, w: usize) -> Result<MaskPyramid> {
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return Err(contract(format!("mask pyramid needs extents divisible by 4, got {h}×{w}")));
    }
    let start = h as f64 / 2.0 - 2.0;
    let mut full = Vec::with_capacity(h * w);
    for r in 0..h {
        let v = ((r as f64 - start) / 3.0).clamp(0.0, 1.0);
        full.extend(std::iter::repeat(v).take(w));
    }
    let m0 = Tensor::new(full, &[1, h, w])?;
    let m1 = m0.avg_pool2()?;
    let m2 = m1.avg_pool2()?;
    Ok(MaskPyramid { masks: vec![m0, m1, m2] })
}

/// Upsampling decoder from `concat(F_s, F_d)` to an RGB face in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct FaceDecoder {
    ups: Vec<Conv2d>,
    out: Conv2d,
}

impl FaceDecoder {
    pub fn new(dims: &ModelDims) -> Result<Self> {
        let stages = dims.down_stages()?;
        let mut width = 2 * dims.channels;
        let mut ups = Vec::with_capacity(stages);
        for i in 0..stages {
            let next = (width / 2).max(8);
            ups.push(Conv2d::k3(&format!("dec.up{i}"), width, next, 1));
            width = next;
        }
        Ok(FaceDecoder { ups, out: Conv2d::k3("dec.out", width, 3, 1) })
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        for l in &self.ups {
            l.init(params, rng, Init::Scaled(1.4), Init::Zeros)?;
        }
        self.out.init(params, rng, Init::Scaled(0.5), Init::Zeros)
    }

    pub fn decode(&self, params: &ParamSet, f_s: &Tensor, f_d: &Tensor) -> Result<Tensor> {
        if f_s.shape().len() != 3 || f_s.shape()[1..] != f_d.shape()[1..] {
            return Err(Error::ShapeMismatch { op: "decode_face", lhs: f_s.shape().to_vec(), rhs: f_d.shape().to_vec() });
        }
        let mut h = Tensor::concat(&[f_s.clone(), f_d.clone()], 0)?;
        for l in &self.ups {
            h = act(&l.forward(params, &h.upsample_nearest2()?)?);
        }
        Ok(self.out.forward(params, &h)?.sigmoid())
    }
}

/// Axis-aligned box `[y0, y1) × [x0, x1)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaceBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl FaceBox {
    /// Lower-face region used for compositing generated mouths.
    pub fn lower_face(h: usize, w: usize) -> FaceBox {
        FaceBox { y0: h / 2, x0: w / 4, y1: h * 7 / 8, x1: w * 3 / 4 }
    }
}

/// Normalised Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= z);
    k
}

/// Binary box mask blurred by a separable truncated Gaussian (zero outside
/// the frame). Returns `[1, H, W]` in `[0, 1]`.
pub fn gaussian_face_mask(h: usize, w: usize, bx: FaceBox, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(contract(format!("blur sigma must be > 0, got {sigma}")));
    }
    if bx.y0 >= bx.y1 || bx.x0 >= bx.x1 {
        return Err(contract(format!("empty face box {bx:?}")));
    }
    if bx.y1 > h || bx.x1 > w {
        return Err(contract(format!("face box {bx:?} outside {h}×{w} frame")));
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut mask = vec![0.0; h * w];
    for y in bx.y0..bx.y1 {
        mask[y * w + bx.x0..y * w + bx.x1].fill(1.0);
    }
    let blur = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let off = t as isize - r;
                    let (yy, xx) = if horizontal { (y as isize, x as isize + off) } else { (y as isize + off, x as isize) };
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        acc += kv * src[yy as usize * w + xx as usize];
                    }
                }
                dst[y * w + x] = acc.clamp(0.0, 1.0);
            }
        }
        dst
    };
    let mask = blur(&blur(&mask, true), false);
    Tensor::new(mask, &[1, h, w])
}

/// Generated face, source frame and compositing mask.
#[derive(Debug, Clone)]
pub struct BlendInputs {
    pub generated: Tensor,
    pub source: Tensor,
    pub mask: Tensor,
}

impl BlendInputs {
    pub fn new(generated: Tensor, source: Tensor, mask: Tensor) -> Result<Self> {
        if generated.shape() != source.shape() {
            return Err(Error::ShapeMismatch { op: "blend", lhs: generated.shape().to_vec(), rhs: source.shape().to_vec() });
        }
        if mask.shape().len() != 3 || mask.shape()[0] != 1 || mask.shape()[1..] != generated.shape()[1..] {
            return Err(Error::ShapeMismatch { op: "blend mask", lhs: generated.shape().to_vec(), rhs: mask.shape().to_vec() });
        }
        Ok(BlendInputs { generated, source, mask })
    }
}

/// Largest absolute difference between neighbouring mask pixels.
pub fn max_mask_step(mask: &Tensor) -> f64 {
    let &[_, h, w] = mask.shape() else { return f64::NAN };
    let m = mask.data();
    let mut worst = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                worst = worst.max((m[y * w + x + 1] - m[y * w + x]).abs());
            }
            if y + 1 < h {
                worst = worst.max((m[(y + 1) * w + x] - m[y * w + x]).abs());
            }
        }
    }
    worst
}

/// Residual correction network applied after compositing.
#[derive(Debug, Clone)]
pub struct BlendNet {
    conv1: Conv2d,
    conv2: Conv2d,
}

/// Composite and final frame of one blend.
#[derive(Debug, Clone)]
pub struct BlendOutput {
    pub composite: Tensor,
    pub final_frame: Tensor,
}

impl BlendNet {
    pub fn new(hidden: usize) -> Self {
        BlendNet {
            conv1: Conv2d::k3("blend.conv1", 3, hidden, 1),
            conv2: Conv2d::k3("blend.conv2", hidden, 3, 1),
        }
    }

    /// The output convolution starts at zero so the untrained net adds nothing.
    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        self.conv1.init(params, rng, Init::Scaled(1.4), Init::Zeros)?;
        self.conv2.init(params, rng, Init::Zeros, Init::Zeros)
    }

    /// `composite = m·I_o + (1 − m)·source`,
    /// `final = clamp(composite + 0.1·tanh(net(composite)), 0, 1)`.
    pub fn composite_and_blend(&self, params: &ParamSet, inputs: &BlendInputs) -> Result<BlendOutput> {
        let shape = inputs.generated.shape();
        let m = inputs.mask.broadcast_to(shape)?;
        let inv = m.neg().add_scalar(1.0);
        let composite = m.mul(&inputs.generated)?.add(&inv.mul(&inputs.source)?)?;
        let hidden = act(&self.conv1.forward(params, &composite)?);
        let residual = self.conv2.forward(params, &hidden)?.tanh().mul_scalar(BLEND_RESIDUAL_CAP);
        let final_frame = composite.add(&residual)?.clamp(0.0, 1.0);
        Ok(BlendOutput { composite, final_frame })
    }
}
