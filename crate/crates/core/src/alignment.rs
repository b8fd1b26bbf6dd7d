//! Intra-modality alignment (residual block with adaptive instance
//! normalisation conditioned on landmark features) and inter-modality
//! alignment (B×B audio/visual score matrices with diagonal positives).

use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::nn::{act, Conv2d, Init, Linear, ParamSet};
use crate::tensor::{channel_stats, Tensor};

/// Default contrastive temperature.
pub const DEFAULT_TAU: f64 = 0.07;

/// `σ̇ · (x − μ(x)) / σ(x) + μ̇` per channel of a `[C, H, W]` feature.
pub fn adain(feature: &Tensor, sigma_dot: &Tensor, mu_dot: &Tensor) -> Result<Tensor> {
    let c = feature.shape().first().copied().unwrap_or(0);
    for t in [sigma_dot, mu_dot] {
        if t.shape() != [c] {
            return Err(Error::ShapeMismatch { op: "adain", lhs: feature.shape().to_vec(), rhs: t.shape().to_vec() });
        }
    }
    let (mean, std) = channel_stats(feature)?;
    let normalized = feature.sub(&mean.reshape(&[c, 1, 1])?.broadcast_to(feature.shape())?)?;
    let scale = sigma_dot.div(&std)?;
    normalized.mul_channels(&scale)?.add_channels(mu_dot)
}

/// Fully-connected maps from `l_r` to the per-channel `σ̇` and `μ̇`.
#[derive(Debug, Clone)]
pub struct AdaInParams {
    pub sigma: Linear,
    pub mu: Linear,
}

impl AdaInParams {
    pub fn new(name: &str, feature_dim: usize, channels: usize) -> Self {
        AdaInParams {
            sigma: Linear::new(&format!("{name}.sigma"), feature_dim, channels),
            mu: Linear::new(&format!("{name}.mu"), feature_dim, channels),
        }
    }

    /// Starts near `σ̇ = 1`, `μ̇ = 0`.
    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        self.sigma.init(params, rng, Init::Scaled(0.1), Init::Constant(1.0))?;
        self.mu.init(params, rng, Init::Scaled(0.1), Init::Zeros)
    }

    pub fn forward(&self, params: &ParamSet, feature: &Tensor, l_r: &Tensor) -> Result<Tensor> {
        let sigma_dot = self.sigma.forward(params, l_r)?;
        let mu_dot = self.mu.forward(params, l_r)?;
        adain(feature, &sigma_dot, &mu_dot)
    }
}

/// `x + conv3x3(act(adain(x, l_r)))`.
#[derive(Debug, Clone)]
pub struct ResidualAdainBlock {
    pub adain: AdaInParams,
    pub conv: Conv2d,
}

impl ResidualAdainBlock {
    pub fn new(name: &str, feature_dim: usize, channels: usize) -> Self {
        ResidualAdainBlock {
            adain: AdaInParams::new(&format!("{name}.adain"), feature_dim, channels),
            conv: Conv2d::k3(&format!("{name}.conv"), channels, channels, 1),
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        self.adain.init(params, rng)?;
        self.conv.init(params, rng, Init::Scaled(0.5), Init::Zeros)
    }

    pub fn forward(&self, params: &ParamSet, feature: &Tensor, l_r: &Tensor) -> Result<Tensor> {
        let h = act(&self.adain.forward(params, feature, l_r)?);
        feature.add(&self.conv.forward(params, &h)?)
    }
}

/// Intra-modality alignment: a stack of residual AdaIN blocks, or a single
/// plain convolution when alignment is disabled.
#[derive(Debug, Clone)]
pub enum IntraAlignment {
    Residual(Vec<ResidualAdainBlock>),
    Plain(Conv2d),
}

impl IntraAlignment {
    pub fn residual(depth: usize, feature_dim: usize, channels: usize) -> Self {
        IntraAlignment::Residual(
            (0..depth.max(1))
                .map(|i| ResidualAdainBlock::new(&format!("align.block{i}"), feature_dim, channels))
                .collect(),
        )
    }

    pub fn plain(channels: usize) -> Self {
        IntraAlignment::Plain(Conv2d::k3("align.plain", channels, channels, 1))
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        match self {
            IntraAlignment::Residual(blocks) => blocks.iter().try_for_each(|b| b.init(params, rng)),
            IntraAlignment::Plain(conv) => conv.init(params, rng, Init::Scaled(1.0), Init::Zeros),
        }
    }

    pub fn forward(&self, params: &ParamSet, feature: &Tensor, l_r: &Tensor) -> Result<Tensor> {
        match self {
            IntraAlignment::Residual(blocks) => {
                let mut h = feature.clone();
                for b in blocks {
                    h = b.forward(params, &h, l_r)?;
                }
                Ok(h)
            }
            IntraAlignment::Plain(conv) => conv.forward(params, feature),
        }
    }
}

/// Visual-to-audio and audio-to-visual score matrices.
#[derive(Debug, Clone)]
pub struct ScorePair {
    /// Row i: visual sample i against every audio sample.
    pub s_va: Tensor,
    /// Row i: audio sample i against every visual sample.
    pub s_av: Tensor,
    pub tau: f64,
}

/// `x · yᵀ` for two `[B, e]` embedding batches.
pub fn score_matrix(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    match (x.shape(), y.shape()) {
        ([bx, ex], [by, ey]) if bx == by && ex == ey => x.matmul(&y.transpose()?),
        _ => Err(Error::ShapeMismatch { op: "score_matrix", lhs: x.shape().to_vec(), rhs: y.shape().to_vec() }),
    }
}

/// The four projection heads `g_v`, `g_a`, `g′_v`, `g′_a`; each output is
/// L2-normalised so scores are cosine similarities.
#[derive(Debug, Clone)]
pub struct ContrastiveHeads {
    pub g_v: Linear,
    pub g_a: Linear,
    pub g_v_prime: Linear,
    pub g_a_prime: Linear,
    visual_dim: usize,
    audio_dim: usize,
}

pub const HEAD_PREFIX: &str = "heads.";
/// Projection weights, the part of the heads fitted by gradient descent.
pub const HEAD_WEIGHT_PREFIX: &str = "heads.g_";
/// Frozen per-dimension input standardisation of the heads.
pub const HEAD_NORM_PREFIX: &str = "heads.norm.";

impl ContrastiveHeads {
    pub fn new(visual_dim: usize, audio_dim: usize, embed_dim: usize) -> Self {
        ContrastiveHeads {
            g_v: Linear::new("heads.g_v", visual_dim, embed_dim),
            g_a: Linear::new("heads.g_a", audio_dim, embed_dim),
            g_v_prime: Linear::new("heads.g_v_prime", visual_dim, embed_dim),
            g_a_prime: Linear::new("heads.g_a_prime", audio_dim, embed_dim),
            visual_dim,
            audio_dim,
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        for h in [&self.g_v, &self.g_a, &self.g_v_prime, &self.g_a_prime] {
            h.init(params, rng, Init::Scaled(1.0), Init::Zeros)?;
        }
        for (m, d) in [("v", self.visual_dim), ("a", self.audio_dim)] {
            params.insert(&format!("{HEAD_NORM_PREFIX}{m}_shift"), vec![0.0; d], &[d])?;
            params.insert(&format!("{HEAD_NORM_PREFIX}{m}_scale"), vec![1.0; d], &[d])?;
        }
        params.set_trainable(HEAD_NORM_PREFIX, false);
        Ok(())
    }

    /// Sets the input standardisation from sample rows `[N, C]` and `[N, d]`:
    /// each dimension is shifted by its mean and scaled by the reciprocal of
    /// the largest standard deviation of its modality, `floor` at least.
    pub fn fit_normalization(&self, params: &mut ParamSet, visual: &Tensor, audio: &Tensor, floor: f64) -> Result<()> {
        for (m, x, d) in [("v", visual, self.visual_dim), ("a", audio, self.audio_dim)] {
            if x.shape().len() != 2 || x.shape()[1] != d || x.shape()[0] == 0 {
                return Err(Error::ShapeMismatch { op: "fit_normalization", lhs: vec![0, d], rhs: x.shape().to_vec() });
            }
            let n = x.shape()[0] as f64;
            let mean: Vec<f64> = (0..d).map(|j| x.data().iter().skip(j).step_by(d).sum::<f64>() / n).collect();
            let sd = (0..d)
                .map(|j| (x.data().iter().skip(j).step_by(d).map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
                .fold(floor, f64::max);
            params.set_values(&format!("{HEAD_NORM_PREFIX}{m}_shift"), mean.iter().map(|v| -v).collect())?;
            params.set_values(&format!("{HEAD_NORM_PREFIX}{m}_scale"), vec![1.0 / sd; d])?;
        }
        Ok(())
    }

    fn standardize(&self, params: &ParamSet, m: &str, x: &Tensor) -> Result<Tensor> {
        let shift = params.get(&format!("{HEAD_NORM_PREFIX}{m}_shift"))?.broadcast_to(x.shape())?;
        let scale = params.get(&format!("{HEAD_NORM_PREFIX}{m}_scale"))?.broadcast_to(x.shape())?;
        x.add(&shift)?.mul(&scale)
    }

    fn embed(&self, params: &ParamSet, head: &Linear, batch: &Tensor) -> Result<Tensor> {
        head.forward(params, batch)?.l2_normalize_rows(1e-12)
    }

    /// Scores for a visual batch `[B, C]` and an audio batch `[B, d]`.
    pub fn score_matrices(&self, params: &ParamSet, visual: &Tensor, audio: &Tensor, tau: f64) -> Result<ScorePair> {
        if visual.shape().len() != 2 || audio.shape().len() != 2 || visual.shape()[0] != audio.shape()[0] {
            return Err(Error::ShapeMismatch { op: "score_matrices", lhs: visual.shape().to_vec(), rhs: audio.shape().to_vec() });
        }
        let visual = self.standardize(params, "v", visual)?;
        let audio = self.standardize(params, "a", audio)?;
        let s_va = score_matrix(
            &self.embed(params, &self.g_v, &visual)?,
            &self.embed(params, &self.g_a_prime, &audio)?,
        )?;
        let s_av = score_matrix(
            &self.embed(params, &self.g_a, &audio)?,
            &self.embed(params, &self.g_v_prime, &visual)?,
        )?;
        Ok(ScorePair { s_va, s_av, tau })
    }
}

/// Row-wise softmax of `s_va / τ` and `s_av / τ`.
pub fn similarity_distributions(scores: &ScorePair) -> Result<(Tensor, Tensor)> {
    if !(scores.tau > 0.0) {
        return Err(contract(format!("temperature must be > 0, got {}", scores.tau)));
    }
    Ok((scores.s_va.softmax(1, scores.tau)?, scores.s_av.softmax(1, scores.tau)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, grad_check};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_normalisation() {
        // Zero mean and unit guarded std: population variance 1 − ε.
        let k = (1.0 - crate::tensor::STD_EPS).sqrt();
        let raw = [1., -1., 1., -1., 2f64.sqrt(), 0., -(2f64.sqrt()), 0.];
        let x = Tensor::new(raw.iter().map(|v| v * k).collect(), &[2, 2, 2]).unwrap();
        let out = adain(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2])).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_channel_maps_to_mu_dot() {
        let x = Tensor::full(&[1, 3, 3], 4.2);
        let out = adain(&x, &Tensor::full(&[1], 2.0), &Tensor::full(&[1], -0.7)).unwrap();
        assert!(out.data().iter().all(|v| (v + 0.7).abs() < 1e-6));
    }

    #[test]
    fn direct_formula_and_gradients() {
        let x0 = [0.3, -1.1, 0.8, 2.0, -0.4, 0.9, 1.7, -2.2];
        let sd = Tensor::new(vec![2.0, 3.0], &[2]).unwrap();
        let md = Tensor::new(vec![-1.0, 4.0], &[2]).unwrap();
        let out = adain(&Tensor::new(x0.to_vec(), &[2, 2, 2]).unwrap(), &sd, &md).unwrap();
        for c in 0..2 {
            let ch = &x0[c * 4..(c + 1) * 4];
            let m = ch.iter().sum::<f64>() / 4.0;
            let v = ch.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0;
            let s = (v + 1e-5).sqrt();
            for i in 0..4 {
                let expect = sd.data()[c] * (ch[i] - m) / s + md.data()[c];
                assert!((out.data()[c * 4 + i] - expect).abs() < 1e-12);
            }
        }
        let xc = Tensor::new(x0.to_vec(), &[2, 2, 2]).unwrap();
        let w = Tensor::new(vec![0.5, -1.0, 2.0, 0.1, 0.7, -0.3, 1.1, 0.4], &[2, 2, 2]).unwrap();
        let obj = |o: Tensor| -> Result<Tensor> { Ok(o.mul(&w)?.sum()) };
        let r = grad_check(|x| obj(adain(x, &sd, &md)?), &x0, &[2, 2, 2], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
        let r = grad_check(|s| obj(adain(&xc, s, &md)?), &[2.0, 3.0], &[2], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
        let r = grad_check(|m| obj(adain(&xc, &sd, m)?), &[-1.0, 4.0], &[2], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn zero_kernel_block_is_skip() {
        let block = ResidualAdainBlock::new("b", 4, 3);
        let mut p = ParamSet::new();
        block.init(&mut p, &mut rng(2)).unwrap();
        p.set_values("b.conv.w", vec![0.0; 3 * 3 * 9]).unwrap();
        let x = Tensor::new(crate::nn::uniform(&mut rng(3), 3 * 16, -1.0, 1.0), &[3, 4, 4]).unwrap();
        let l = Tensor::new(vec![0.1, 0.2, 0.3, 0.4], &[4]).unwrap();
        assert_eq!(block.forward(&p, &x, &l).unwrap().data(), x.data());
    }

    #[test]
    fn stacked_blocks_preserve_shape_and_pass_gradient_to_landmarks() {
        for k in 1..=3 {
            let align = IntraAlignment::residual(k, 4, 3);
            let mut p = ParamSet::new();
            align.init(&mut p, &mut rng(k as u64)).unwrap();
            let x = Tensor::new(crate::nn::uniform(&mut rng(10), 3 * 16, -1.0, 1.0), &[3, 4, 4]).unwrap();
            let l = Tensor::param(vec![0.5, -0.2, 0.9, 0.1], &[4]).unwrap();
            let y = align.forward(&p, &x, &l).unwrap();
            assert_eq!(y.shape(), x.shape());
            let g = backward(&y.square().sum()).unwrap();
            let norm: f64 = g.get(&l).unwrap().iter().map(|v| v * v).sum();
            assert!(norm > 0.0);
        }
    }

    #[test]
    fn score_matrix_matches_double_loop() {
        let mut r = rng(4);
        let x = crate::nn::uniform(&mut r, 3 * 5, -1.0, 1.0);
        let y = crate::nn::uniform(&mut r, 3 * 5, -1.0, 1.0);
        let s = score_matrix(&Tensor::new(x.clone(), &[3, 5]).unwrap(), &Tensor::new(y.clone(), &[3, 5]).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..5).map(|k| x[i * 5 + k] * y[j * 5 + k]).sum();
                assert!((s.data()[i * 3 + j] - dot).abs() < 1e-12);
            }
        }
        assert!(score_matrix(&Tensor::zeros(&[3, 5]), &Tensor::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn equal_and_orthogonal_embeddings() {
        let e = Tensor::new(vec![0.6, 0.8, 0.0, 0.0, 0.0, 1.0], &[2, 3]).unwrap();
        let s = score_matrix(&e, &e).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && (s.data()[3] - 1.0).abs() < 1e-12);
        assert!(s.data()[1].abs() < 1e-12 && s.data()[2].abs() < 1e-12);
    }

    #[test]
    fn heads_produce_cosine_scores() {
        let heads = ContrastiveHeads::new(6, 5, 4);
        let mut p = ParamSet::new();
        heads.init(&mut p, &mut rng(6)).unwrap();
        let v = Tensor::new(crate::nn::uniform(&mut rng(7), 3 * 6, -1.0, 1.0), &[3, 6]).unwrap();
        let a = Tensor::new(crate::nn::uniform(&mut rng(8), 3 * 5, -1.0, 1.0), &[3, 5]).unwrap();
        let sp = heads.score_matrices(&p, &v, &a, DEFAULT_TAU).unwrap();
        assert_eq!(sp.s_va.shape(), &[3, 3]);
        assert!(sp.s_va.data().iter().chain(sp.s_av.data()).all(|s| s.abs() <= 1.0 + 1e-12));
        assert!(heads.score_matrices(&p, &v, &Tensor::zeros(&[2, 5]), DEFAULT_TAU).is_err());
    }

    #[test]
    fn normalization_removes_common_offset() {
        let heads = ContrastiveHeads::new(6, 5, 4);
        let mut p = ParamSet::new();
        heads.init(&mut p, &mut rng(6)).unwrap();
        assert!(p.names().filter(|n| n.starts_with(HEAD_NORM_PREFIX)).all(|n| !p.is_trainable(n)));
        let v = Tensor::new(crate::nn::uniform(&mut rng(7), 3 * 6, -1.0, 1.0), &[3, 6]).unwrap();
        let a = Tensor::new(crate::nn::uniform(&mut rng(8), 3 * 5, -1.0, 1.0), &[3, 5]).unwrap();
        heads.fit_normalization(&mut p, &v, &a, 1e-6).unwrap();
        let base = heads.score_matrices(&p, &v, &a, DEFAULT_TAU).unwrap();
        // A shared offset and a common rescale of the inputs leave the scores unchanged.
        let v2 = v.add_scalar(40.0).mul_scalar(1e-3);
        heads.fit_normalization(&mut p, &v2, &a, 1e-6).unwrap();
        let moved = heads.score_matrices(&p, &v2, &a, DEFAULT_TAU).unwrap();
        for (x, y) in base.s_va.data().iter().zip(moved.s_va.data()) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(heads.fit_normalization(&mut p, &a, &a, 1e-6).is_err());
    }

    #[test]
    fn distributions() {
        let mk = |d: Vec<f64>, tau| ScorePair {
            s_va: Tensor::new(d.clone(), &[2, 2]).unwrap(),
            s_av: Tensor::new(d, &[2, 2]).unwrap(),
            tau,
        };
        let (p, q) = similarity_distributions(&mk(vec![1., 0., 0., 1.], 1.0)).unwrap();
        let e = 1f64.exp();
        for m in [&p, &q] {
            assert!((m.data()[0] - e / (e + 1.0)).abs() < 1e-12);
            assert!((m.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        }
        assert!((e / (e + 1.0) - 0.7311).abs() < 1e-4);
        let (p, _) = similarity_distributions(&mk(vec![0.3; 4], 0.07)).unwrap();
        assert!(p.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
        assert!(similarity_distributions(&mk(vec![0.0; 4], 0.0)).is_err());
    }
}
