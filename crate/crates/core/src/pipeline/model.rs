//! Generator and discriminators wired from the component modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{ContrastiveHeads, IntraAlignment, ScorePair};
use crate::deformation::{
    affine_warp, gaussian_face_mask, AffineCoeffSet, BlendInputs, BlendNet, CoeffPredictor, FaceBox, FaceDecoder,
};
use crate::encoders::{EncodedSample, Encoders, SceneSample};
use crate::error::{contract, Result};
use crate::nn::{act, Conv2d, Init, ParamSet};
use crate::pipeline::config::PipelineConfig;
use crate::tensor::Tensor;

/// Width of the contrastive embeddings.
pub const EMBED_DIM: usize = 32;
/// Hidden width of the blend net.
pub const BLEND_HIDDEN: usize = 8;
/// Gaussian blur of the compositing mask, in pixels at H = 64.
pub const MASK_SIGMA_AT_64: f64 = 1.5;

#[derive(Debug, Clone)]
pub struct Generator {
    pub config: PipelineConfig,
    pub encoders: Encoders,
    pub align: IntraAlignment,
    pub heads: ContrastiveHeads,
    pub coeff: CoeffPredictor,
    pub decoder: FaceDecoder,
    pub blend: BlendNet,
    /// `[1, H, W]` compositing mask.
    pub face_mask: Tensor,
}

/// Per-sample intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub encoded: EncodedSample,
    /// `ī_align`.
    pub aligned: Tensor,
    /// Pooled `ī_align`, the visual input of the contrastive heads.
    pub visual: Tensor,
    pub coeffs: AffineCoeffSet,
    /// Warped reference feature `F_d`.
    pub warped: Tensor,
    /// Decoder output `I_o`.
    pub generated: Tensor,
    /// `None` under `no_fusion`.
    pub composite: Option<Tensor>,
    /// Frame handed to the losses and written out.
    pub final_frame: Tensor,
}

#[derive(Debug, Clone)]
pub struct BatchForward {
    pub samples: Vec<SampleForward>,
    pub scores: ScorePair,
}

impl Generator {
    pub fn new(config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        let dims = config.dims();
        let (c, d) = (dims.channels, dims.feature_dim);
        let align = if config.no_alignment {
            IntraAlignment::plain(c)
        } else {
            IntraAlignment::residual(config.residual_blocks, d, c)
        };
        let h = dims.image_size;
        let sigma = MASK_SIGMA_AT_64 * h as f64 / 64.0;
        Ok(Generator {
            config: config.clone(),
            encoders: Encoders::new(dims)?,
            align,
            heads: ContrastiveHeads::new(c, d, EMBED_DIM),
            coeff: CoeffPredictor::new(c + d, c),
            decoder: FaceDecoder::new(&dims)?,
            blend: BlendNet::new(BLEND_HIDDEN),
            face_mask: gaussian_face_mask(h, h, FaceBox::lower_face(h, h), sigma)?,
        })
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        self.encoders.init(params, rng)?;
        self.align.init(params, rng)?;
        self.heads.init(params, rng)?;
        self.coeff.init(params, rng)?;
        self.decoder.init(params, rng)?;
        self.blend.init(params, rng)
    }

    /// Fresh parameters from `config.seed`.
    pub fn init_params(&self) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        self.init(&mut p, &mut ChaCha8Rng::seed_from_u64(self.config.seed))?;
        Ok(p)
    }

    pub fn forward_sample(&self, params: &ParamSet, sample: &SceneSample) -> Result<SampleForward> {
        let encoded = self.encoders.encode(params, sample)?;
        let aligned = self.align.forward(params, &encoded.fused, &encoded.l_r)?;
        let visual = aligned.global_avg_pool()?;
        let coeffs = self.coeff.predict(params, &Tensor::concat(&[visual.clone(), encoded.a.clone()], 0)?)?;
        let warped = affine_warp(&encoded.i_r, &coeffs, self.config.padding)?;
        let generated = self.decoder.decode(params, &aligned, &warped)?;
        let (composite, final_frame) = if self.config.no_fusion {
            (None, generated.clone())
        } else {
            let inputs = BlendInputs::new(generated.clone(), sample.source_frame.clone(), self.face_mask.clone())?;
            let out = self.blend.composite_and_blend(params, &inputs)?;
            (Some(out.composite), out.final_frame)
        };
        Ok(SampleForward { encoded, aligned, visual, coeffs, warped, generated, composite, final_frame })
    }

    pub fn forward(&self, params: &ParamSet, batch: &[&SceneSample]) -> Result<BatchForward> {
        if batch.len() < 2 {
            return Err(contract(format!("contrastive scoring needs a batch of at least 2, got {}", batch.len())));
        }
        let samples = batch.iter().map(|s| self.forward_sample(params, s)).collect::<Result<Vec<_>>>()?;
        let scores = self.score(params, &samples)?;
        Ok(BatchForward { samples, scores })
    }

    pub fn score(&self, params: &ParamSet, samples: &[SampleForward]) -> Result<ScorePair> {
        let visual = Tensor::stack(&samples.iter().map(|s| s.visual.clone()).collect::<Vec<_>>())?;
        let audio = Tensor::stack(&samples.iter().map(|s| s.encoded.a.clone()).collect::<Vec<_>>())?;
        self.heads.score_matrices(params, &visual, &audio, self.config.tau)
    }
}

/// Three strided convolutions producing a patch map of realness scores.
#[derive(Debug, Clone)]
pub struct Discriminator {
    layers: [Conv2d; 3],
}

impl Discriminator {
    pub fn new(name: &str, cin: usize) -> Self {
        Discriminator {
            layers: [
                Conv2d::k3(&format!("{name}.c0"), cin, 16, 2),
                Conv2d::k3(&format!("{name}.c1"), 16, 32, 2),
                Conv2d::k3(&format!("{name}.c2"), 32, 1, 2),
            ],
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        self.layers[0].init(params, rng, Init::Scaled(1.4), Init::Zeros)?;
        self.layers[1].init(params, rng, Init::Scaled(1.4), Init::Zeros)?;
        self.layers[2].init(params, rng, Init::Scaled(0.5), Init::Zeros)
    }

    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let h = act(&self.layers[0].forward(params, x)?);
        let h = act(&self.layers[1].forward(params, &h)?);
        self.layers[2].forward(params, &h)
    }
}

/// Single-frame and five-frame discriminators.
#[derive(Debug, Clone)]
pub struct Discriminators {
    pub single: Discriminator,
    pub multi: Discriminator,
}

impl Discriminators {
    pub fn new() -> Self {
        Discriminators { single: Discriminator::new("d1", 3), multi: Discriminator::new("d5", 15) }
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd15c);
        self.single.init(&mut p, &mut rng)?;
        self.multi.init(&mut p, &mut rng)?;
        Ok(p)
    }
}

impl Default for Discriminators {
    fn default() -> Self {
        Self::new()
    }
}

/// The ground-truth five-frame window with its centre frame replaced.
pub fn window_with_center(truth_window: &Tensor, center: &Tensor) -> Result<Tensor> {
    let before = truth_window.narrow(0, 0, 6)?;
    let after = truth_window.narrow(0, 9, 6)?;
    Tensor::concat(&[before, center.clone(), after], 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synth::{generate_dataset, AudioSource};

    fn small() -> PipelineConfig {
        PipelineConfig { image_size: 32, channels: 8, feature_dim: 16, samples: 4, batch_size: 2, ..PipelineConfig::default() }
    }

    #[test]
    fn forward_smoke_and_identity_warp() {
        let cfg = small();
        let ds = generate_dataset(32, 2, 0, &AudioSource::Synthesized).unwrap();
        let g = Generator::new(&cfg).unwrap();
        let p = g.init_params().unwrap();
        let out = g.forward(&p, &[&ds.samples[0], &ds.samples[1]]).unwrap();
        assert_eq!(out.scores.s_va.shape(), &[2, 2]);
        for s in &out.samples {
            assert_eq!(s.final_frame.shape(), &[3, 32, 32]);
            // Identity-initialised warp leaves the reference feature unchanged.
            for (a, b) in s.warped.data().iter().zip(s.encoded.i_r.data()) {
                assert!((a - b).abs() < 1e-9);
            }
            // Zero-initialised blend output: final equals the composite.
            assert_eq!(s.final_frame.data(), s.composite.as_ref().unwrap().data());
        }
    }

    #[test]
    fn no_fusion_returns_decoder_output() {
        let cfg = PipelineConfig { no_fusion: true, ..small() };
        let ds = generate_dataset(32, 2, 0, &AudioSource::Synthesized).unwrap();
        let g = Generator::new(&cfg).unwrap();
        let p = g.init_params().unwrap();
        let s = g.forward_sample(&p, &ds.samples[0]).unwrap();
        assert!(s.composite.is_none());
        assert_eq!(s.final_frame.data(), s.generated.data());
    }

    #[test]
    fn discriminator_maps() {
        let d = Discriminators::new();
        let p = d.init_params(0).unwrap();
        assert_eq!(d.single.forward(&p, &Tensor::zeros(&[3, 64, 64])).unwrap().shape(), &[1, 8, 8]);
        assert_eq!(d.multi.forward(&p, &Tensor::zeros(&[15, 64, 64])).unwrap().shape(), &[1, 8, 8]);
        let win = Tensor::new((0..15 * 4).map(|i| i as f64).collect(), &[15, 2, 2]).unwrap();
        let c = Tensor::full(&[3, 2, 2], -1.0);
        let w = window_with_center(&win, &c).unwrap();
        assert_eq!(&w.data()[24..36], c.data());
        assert_eq!(&w.data()[..24], &win.data()[..24]);
    }
}
