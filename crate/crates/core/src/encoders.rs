//! Feature encoders for audio windows, masked source frames, stacked
//! reference frames and landmark heatmaps, plus source/reference fusion.
//!
//! Every spatial encoder is a short stack of 3×3 convolutions, each
//! followed by a leaky ReLU. The number of stride-2 stages is chosen so the
//! output grid is always 16×16 (two stages at the default 64×64 input).

use rand_chacha::ChaCha8Rng;

use crate::audio::{MelWindow, N_MELS, WINDOW_FRAMES};
use crate::error::{contract, Error, Result};
use crate::nn::{act, Conv2d, Init, Linear, ParamSet};
use crate::tensor::Tensor;

/// Spatial extent of every encoded feature map.
pub const FEATURE_GRID: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub image_size: usize,
    pub channels: usize,
    pub feature_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { image_size: 64, channels: 32, feature_dim: 128 }
    }
}

impl ModelDims {
    /// Number of stride-2 stages from `image_size` down to the feature grid.
    pub fn down_stages(&self) -> Result<usize> {
        let h = self.image_size;
        if h < FEATURE_GRID || h % FEATURE_GRID != 0 || !(h / FEATURE_GRID).is_power_of_two() {
            return Err(Error::Config(format!(
                "image size must be 16·2^k (16, 32, 64, 128, ...), got {h}"
            )));
        }
        Ok((h / FEATURE_GRID).trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.down_stages()?;
        if self.channels < 2 || self.feature_dim == 0 {
            return Err(Error::Config(format!(
                "channels must be ≥ 2 and feature_dim ≥ 1, got {} and {}",
                self.channels, self.feature_dim
            )));
        }
        Ok(())
    }
}

/// One training example. Images are `[C, H, W]` constants in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct SceneSample {
    /// Video frame index the sample is taken from.
    pub frame_index: usize,
    /// Source frame: ground truth with the mouth region from another timestep.
    pub source_frame: Tensor,
    pub truth_frame: Tensor,
    /// Source frame with rows ≥ H/2 zeroed.
    pub masked_source: Tensor,
    /// Five reference frames stacked to 15 channels.
    pub references: Tensor,
    /// Sparse 0/1 heatmap of the reference landmarks, `[1, H, W]`.
    pub landmark_map: Tensor,
    pub mel: MelWindow,
    /// Five consecutive ground-truth frames centred on `frame_index`, 15 channels.
    pub truth_window: Tensor,
    /// Audio window taken at least five video frames away (unsynced).
    pub shifted_mel: MelWindow,
}

impl SceneSample {
    pub fn image_size(&self) -> usize {
        self.truth_frame.shape()[1]
    }

    /// Checks the channel counts, the half-mask and landmark contracts.
    pub fn validate(&self) -> Result<()> {
        let h = self.image_size();
        let expect = |t: &Tensor, c: usize, what: &str| -> Result<()> {
            if t.shape() != [c, h, h] {
                return Err(contract(format!("{what}: expected [{c},{h},{h}], got {:?}", t.shape())));
            }
            Ok(())
        };
        expect(&self.source_frame, 3, "source_frame")?;
        expect(&self.truth_frame, 3, "truth_frame")?;
        expect(&self.masked_source, 3, "masked_source")?;
        expect(&self.references, 15, "references")?;
        expect(&self.landmark_map, 1, "landmark_map")?;
        expect(&self.truth_window, 15, "truth_window")?;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..h {
                    let i = (c * h + y) * h + x;
                    let m = self.masked_source.data()[i];
                    let expect = if y >= h / 2 { 0.0 } else { self.source_frame.data()[i] };
                    if m != expect {
                        return Err(contract("masked_source must equal source with rows ≥ H/2 zeroed"));
                    }
                }
            }
        }
        if self.landmark_map.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(contract("landmark_map must be a 0/1 heatmap"));
        }
        Ok(())
    }
}

/// Zeroes rows `≥ H/2` of a `[C, H, W]` image.
pub fn mask_lower_half(img: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = img.shape() else {
        return Err(contract(format!("mask_lower_half expects [C,H,W], got {:?}", img.shape())));
    };
    let mut data = img.data().to_vec();
    for ch in 0..c {
        for y in h / 2..h {
            data[(ch * h + y) * w..(ch * h + y + 1) * w].fill(0.0);
        }
    }
    Tensor::new(data, &[c, h, w])
}

/// Convolution stack mapping `[cin, H, W]` to `[C, 16, 16]`.
#[derive(Debug, Clone)]
pub struct SpatialEncoder {
    pub cin: usize,
    layers: Vec<Conv2d>,
}

impl SpatialEncoder {
    pub fn new(name: &str, cin: usize, dims: &ModelDims) -> Result<Self> {
        let downs = dims.down_stages()?;
        let depth = downs.max(2);
        let c = dims.channels;
        let layers = (0..depth)
            .map(|i| {
                let inp = if i == 0 { cin } else { (c / 2).max(1) };
                let out = if i + 1 == depth { c } else { (c / 2).max(1) };
                let stride = if i < downs { 2 } else { 1 };
                Conv2d::k3(&format!("{name}.conv{}", i + 1), inp, out, stride)
            })
            .collect();
        Ok(SpatialEncoder { cin, layers })
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        for l in &self.layers {
            l.init(params, rng, Init::Scaled(1.4), Init::Zeros)?;
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 3 || x.shape()[0] != self.cin {
            return Err(contract(format!(
                "encoder expects {} input channels, got shape {:?}",
                self.cin,
                x.shape()
            )));
        }
        let mut h = x.clone();
        for l in &self.layers {
            h = act(&l.forward(params, &h)?);
        }
        Ok(h)
    }
}

/// Encoder for `[1, 16, 80]` mel windows producing a `d`-vector.
#[derive(Debug, Clone)]
pub struct AudioEncoder {
    conv1: Conv2d,
    conv2: Conv2d,
    fc: Linear,
}

impl AudioEncoder {
    pub fn new(name: &str, dims: &ModelDims) -> Self {
        let c = dims.channels;
        let flat = c * (WINDOW_FRAMES / 4) * (N_MELS / 4);
        AudioEncoder {
            conv1: Conv2d::k3(&format!("{name}.conv1"), 1, (c / 2).max(1), 2),
            conv2: Conv2d::k3(&format!("{name}.conv2"), (c / 2).max(1), c, 2),
            fc: Linear::new(&format!("{name}.fc"), flat, dims.feature_dim),
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        self.conv1.init(params, rng, Init::Scaled(1.4), Init::Zeros)?;
        self.conv2.init(params, rng, Init::Scaled(1.4), Init::Zeros)?;
        self.fc.init(params, rng, Init::Scaled(1.0), Init::Zeros)
    }

    pub fn forward(&self, params: &ParamSet, mel: &MelWindow) -> Result<Tensor> {
        self.forward_tensor(params, &mel.to_tensor())
    }

    pub fn forward_tensor(&self, params: &ParamSet, mel: &Tensor) -> Result<Tensor> {
        if mel.shape() != [1, WINDOW_FRAMES, N_MELS] {
            return Err(Error::ShapeMismatch {
                op: "encode_audio",
                lhs: mel.shape().to_vec(),
                rhs: vec![1, WINDOW_FRAMES, N_MELS],
            });
        }
        let h = act(&self.conv1.forward(params, mel)?);
        let h = act(&self.conv2.forward(params, &h)?);
        let flat = h.reshape(&[h.numel()])?;
        self.fc.forward(params, &flat)
    }
}

/// Landmark branch: spatial encoder plus a pooled `d`-vector head.
#[derive(Debug, Clone)]
pub struct LandmarkEncoder {
    pub spatial: SpatialEncoder,
    head: Linear,
}

impl LandmarkEncoder {
    pub fn new(name: &str, dims: &ModelDims) -> Result<Self> {
        Ok(LandmarkEncoder {
            spatial: SpatialEncoder::new(name, 1, dims)?,
            head: Linear::new(&format!("{name}.head"), dims.channels, dims.feature_dim),
        })
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        self.spatial.init(params, rng)?;
        self.head.init(params, rng, Init::Scaled(1.0), Init::Zeros)
    }

    /// Returns the spatial map and the pooled `l_r` vector.
    pub fn forward(&self, params: &ParamSet, landmarks: &Tensor) -> Result<(Tensor, Tensor)> {
        let spatial = self.spatial.forward(params, landmarks)?;
        let pooled = self.head.forward(params, &spatial.global_avg_pool()?)?;
        Ok((spatial, pooled))
    }
}

/// Channel concat of `i_s` and `i_r` followed by a 1×1 convolution to C.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub conv: Conv2d,
    /// Pooled projection of the fused feature to `d`, compared against `l_r`.
    pub pooled_head: Linear,
}

impl Fusion {
    pub fn new(name: &str, dims: &ModelDims) -> Self {
        let c = dims.channels;
        Fusion {
            conv: Conv2d::new(&format!("{name}.conv"), 2 * c, c, 1, 1, 0),
            pooled_head: Linear::new(&format!("{name}.pooled"), c, dims.feature_dim),
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        self.conv.init(params, rng, Init::Scaled(1.0), Init::Zeros)?;
        self.pooled_head.init(params, rng, Init::Scaled(1.0), Init::Zeros)
    }

    pub fn forward(&self, params: &ParamSet, i_s: &Tensor, i_r: &Tensor) -> Result<Tensor> {
        fuse_source_reference(i_s, i_r, params.get(&format!("{}.w", self.conv.name))?, params.get(&format!("{}.b", self.conv.name))?)
    }

    pub fn pooled(&self, params: &ParamSet, fused: &Tensor) -> Result<Tensor> {
        self.pooled_head.forward(params, &fused.global_avg_pool()?)
    }
}

/// `conv1x1(concat(i_s, i_r))` with an explicit `[C, 2C, 1, 1]` kernel.
pub fn fuse_source_reference(i_s: &Tensor, i_r: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if i_s.shape().len() != 3 || i_r.shape().len() != 3 || i_s.shape()[1..] != i_r.shape()[1..] {
        return Err(Error::ShapeMismatch {
            op: "fuse_source_reference",
            lhs: i_s.shape().to_vec(),
            rhs: i_r.shape().to_vec(),
        });
    }
    let cat = Tensor::concat(&[i_s.clone(), i_r.clone()], 0)?;
    cat.conv2d(kernel, Some(bias), Default::default())
}

/// All encoder branches of the generator.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub dims: ModelDims,
    pub audio: AudioEncoder,
    pub source: SpatialEncoder,
    pub reference: SpatialEncoder,
    pub landmark: LandmarkEncoder,
    pub fusion: Fusion,
}

/// Encoder outputs for one sample.
#[derive(Debug, Clone)]
pub struct EncodedSample {
    pub a: Tensor,
    pub i_s: Tensor,
    pub i_r: Tensor,
    pub l_r: Tensor,
    /// Fused source/reference feature `ī_s`.
    pub fused: Tensor,
    /// `d`-dimensional pooled projection of `ī_s`.
    pub fused_pooled: Tensor,
}

impl Encoders {
    pub fn new(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        Ok(Encoders {
            dims,
            audio: AudioEncoder::new("enc_audio", &dims),
            source: SpatialEncoder::new("enc_src", 3, &dims)?,
            reference: SpatialEncoder::new("enc_ref", 15, &dims)?,
            landmark: LandmarkEncoder::new("enc_lmk", &dims)?,
            fusion: Fusion::new("fuse", &dims),
        })
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        self.audio.init(params, rng)?;
        self.source.init(params, rng)?;
        self.reference.init(params, rng)?;
        self.landmark.init(params, rng)?;
        self.fusion.init(params, rng)
    }

    pub fn encode(&self, params: &ParamSet, sample: &SceneSample) -> Result<EncodedSample> {
        let a = self.audio.forward(params, &sample.mel)?;
        let i_s = self.source.forward(params, &sample.masked_source)?;
        let i_r = self.reference.forward(params, &sample.references)?;
        let (_, l_r) = self.landmark.forward(params, &sample.landmark_map)?;
        let fused = self.fusion.forward(params, &i_s, &i_r)?;
        let fused_pooled = self.fusion.pooled(params, &fused)?;
        Ok(EncodedSample { a, i_s, i_r, l_r, fused, fused_pooled })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;

    fn setup(h: usize) -> (Encoders, ParamSet) {
        let dims = ModelDims { image_size: h, channels: 8, feature_dim: 12 };
        let enc = Encoders::new(dims).unwrap();
        let mut p = ParamSet::new();
        enc.init(&mut p, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (enc, p)
    }

    #[test]
    fn zero_mel_gives_bias_pathway() {
        let (enc, mut p) = setup(64);
        // With zero conv biases the convolutions map zeros to zeros.
        let fc_b: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        p.set_values("enc_audio.fc.b", fc_b.clone()).unwrap();
        let a = enc.audio.forward(&p, &MelWindow::zeros()).unwrap();
        assert_eq!(a.data(), fc_b.as_slice());
    }

    #[test]
    fn audio_encoding_is_deterministic() {
        let (enc, p) = setup(64);
        let (enc2, p2) = setup(64);
        let mel = MelWindow::new((0..1280).map(|i| ((i * 7) % 13) as f64 * -0.3).collect()).unwrap();
        assert_eq!(enc.audio.forward(&p, &mel).unwrap().data(), enc2.audio.forward(&p2, &mel).unwrap().data());
    }

    #[test]
    fn spatial_extent_is_quartered_at_64() {
        let (enc, p) = setup(64);
        let out = enc.source.forward(&p, &Tensor::full(&[3, 64, 64], 0.5)).unwrap();
        assert_eq!(out.shape(), &[8, 16, 16]);
    }

    #[test]
    fn shape_pipeline_for_supported_sizes() {
        for h in [32, 64, 128] {
            let (enc, p) = setup(h);
            let i_s = enc.source.forward(&p, &Tensor::full(&[3, h, h], 0.3)).unwrap();
            let i_r = enc.reference.forward(&p, &Tensor::full(&[15, h, h], 0.6)).unwrap();
            let (_, l_r) = enc.landmark.forward(&p, &Tensor::zeros(&[1, h, h])).unwrap();
            let fused = enc.fusion.forward(&p, &i_s, &i_r).unwrap();
            assert_eq!(fused.shape(), &[8, 16, 16]);
            assert_eq!(l_r.shape(), &[12]);
            assert!(fused.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let (enc, p) = setup(64);
        assert!(enc.source.forward(&p, &Tensor::zeros(&[1, 64, 64])).is_err());
        assert!(enc.reference.forward(&p, &Tensor::zeros(&[3, 64, 64])).is_err());
    }

    #[test]
    fn zero_landmarks_give_head_bias() {
        let (enc, mut p) = setup(64);
        let bias: Vec<f64> = (0..12).map(|i| 1.0 - i as f64 * 0.05).collect();
        p.set_values("enc_lmk.head.b", bias.clone()).unwrap();
        let (_, l_r) = enc.landmark.forward(&p, &Tensor::zeros(&[1, 64, 64])).unwrap();
        for (a, b) in l_r.data().iter().zip(&bias) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn reference_order_matters() {
        let (enc, p) = setup(64);
        let frames: Vec<Tensor> = (0..5).map(|i| Tensor::full(&[3, 64, 64], 0.1 + 0.2 * i as f64)).collect();
        let stacked = Tensor::concat(&frames, 0).unwrap();
        let mut rev = frames.clone();
        rev.reverse();
        let reversed = Tensor::concat(&rev, 0).unwrap();
        let a = enc.reference.forward(&p, &stacked).unwrap();
        let b = enc.reference.forward(&p, &reversed).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn identity_fusion_kernel() {
        let c = 3;
        let mut k = vec![0.0; c * 2 * c];
        for i in 0..c {
            k[i * 2 * c + i] = 1.0;
        }
        let kernel = Tensor::new(k, &[c, 2 * c, 1, 1]).unwrap();
        let bias = Tensor::zeros(&[c]);
        let i_s = Tensor::new((0..c * 16).map(|v| v as f64 * 0.1).collect(), &[c, 4, 4]).unwrap();
        let i_r = Tensor::zeros(&[c, 4, 4]);
        let out = fuse_source_reference(&i_s, &i_r, &kernel, &bias).unwrap();
        assert_eq!(out.data(), i_s.data());
        assert!(fuse_source_reference(&i_s, &Tensor::zeros(&[c, 2, 2]), &kernel, &bias).is_err());
    }

    #[test]
    fn fusion_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let i_r = Tensor::new(crate::nn::uniform(&mut rng, 2 * 16, -1.0, 1.0), &[2, 4, 4]).unwrap();
        let kernel = Tensor::new(crate::nn::uniform(&mut rng, 2 * 4, -1.0, 1.0), &[2, 4, 1, 1]).unwrap();
        let bias = Tensor::new(vec![0.1, -0.3], &[2]).unwrap();
        let x0 = crate::nn::uniform(&mut rng, 32, -1.0, 1.0);
        let r = grad_check(|x| Ok(fuse_source_reference(x, &i_r, &kernel, &bias)?.square().sum()), &x0, &[2, 4, 4], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn lower_half_mask() {
        let img = Tensor::full(&[3, 8, 8], 0.7);
        let m = mask_lower_half(&img).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                let v = m.data()[(c * 8 + y) * 8];
                assert_eq!(v, if y >= 4 { 0.0 } else { 0.7 });
            }
        }
    }
}
