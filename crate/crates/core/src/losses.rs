//! Training objectives: facial attribute, two-scale perception, LS-GAN,
//! masked multi-scale L1 reconstruction, diagonal contrastive cross-entropy
//! and their weighted sum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{similarity_distributions, ScorePair};
use crate::deformation::MaskPyramid;
use crate::error::{contract, Error, Result};
use crate::nn::{act, Conv2d, Init, ParamSet};
use crate::tensor::Tensor;

/// Floor applied to vector norms in the cosine distance.
pub const COSINE_EPS: f64 = 1e-8;
/// Guard inside the contrastive logarithm.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub v: f64,
    pub p: f64,
    pub gan: f64,
    pub r: f64,
    pub con: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { v: 1.0, p: 2.0, gan: 3.0, r: 4.0, con: 5.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be a finite value ≥ 0, got {w}")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 5] {
        [("L_v", self.v), ("L_p", self.p), ("L_GAN", self.gan), ("L_r", self.r), ("L_con", self.con)]
    }
}

/// `1 − cos(x, y)` with both norms floored at `ε`.
pub fn facial_attribute_loss(pooled: &Tensor, l_r: &Tensor) -> Result<Tensor> {
    if pooled.shape() != l_r.shape() || pooled.shape().len() != 1 {
        return Err(Error::ShapeMismatch { op: "facial_attribute_loss", lhs: pooled.shape().to_vec(), rhs: l_r.shape().to_vec() });
    }
    let dot = pooled.mul(l_r)?.sum();
    let norms = pooled.l2_norm().clamp(COSINE_EPS, f64::INFINITY).mul(&l_r.l2_norm().clamp(COSINE_EPS, f64::INFINITY))?;
    Ok(dot.div(&norms)?.neg().add_scalar(1.0))
}

/// A deterministic multi-stage feature pyramid used by the perception loss.
pub trait FeatureExtractor {
    /// Stage outputs `[C_i, H_i, W_i]` for a `[3, H, W]` image.
    fn stages(&self, image: &Tensor) -> Result<Vec<Tensor>>;
}

/// Frozen random three-stage convolution pyramid.
#[derive(Debug, Clone)]
pub struct RandomConvExtractor {
    params: ParamSet,
    convs: Vec<Conv2d>,
}

impl RandomConvExtractor {
    pub fn new(seed: u64) -> Result<Self> {
        let convs = vec![
            Conv2d::k3("vgg.s0", 3, 8, 1),
            Conv2d::k3("vgg.s1", 8, 16, 2),
            Conv2d::k3("vgg.s2", 16, 16, 2),
        ];
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in &convs {
            c.init(&mut params, &mut rng, Init::Scaled(1.4), Init::Zeros)?;
        }
        params.set_trainable("", false);
        Ok(RandomConvExtractor { params, convs })
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn stages(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = image.clone();
        let mut out = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            h = act(&c.forward(&self.params, &h)?);
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// `Σ_i [‖V_i(I_o) − V_i(I_r)‖₁ + ‖V_i(Î_o) − V_i(Î_r)‖₁] / (2N·W_i·H_i·C_i)`
/// where `Î` is the 2× area-downsampled image and `W_i, H_i, C_i` are the
/// full-resolution stage extents.
pub fn perception_loss(generated: &Tensor, real: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Tensor> {
    if generated.shape() != real.shape() {
        return Err(Error::ShapeMismatch { op: "perception_loss", lhs: generated.shape().to_vec(), rhs: real.shape().to_vec() });
    }
    let full_o = extractor.stages(generated)?;
    let full_r = extractor.stages(real)?;
    let half_o = extractor.stages(&generated.avg_pool2()?)?;
    let half_r = extractor.stages(&real.avg_pool2()?)?;
    let n = full_o.len();
    if n < 2 || [full_r.len(), half_o.len(), half_r.len()].iter().any(|&k| k != n) {
        return Err(contract(format!("feature extractor stage mismatch: {n} stages, need ≥ 2 on every input")));
    }
    let mut total = Tensor::scalar(0.0);
    for i in 0..n {
        if full_o[i].shape() != full_r[i].shape() || half_o[i].shape() != half_r[i].shape() {
            return Err(Error::ShapeMismatch { op: "perception_loss stage", lhs: full_o[i].shape().to_vec(), rhs: full_r[i].shape().to_vec() });
        }
        let extent = full_o[i].numel() as f64;
        let term = full_o[i].sub(&full_r[i])?.l1_norm().add(&half_o[i].sub(&half_r[i])?.l1_norm())?;
        total = total.add(&term.mul_scalar(1.0 / (2.0 * n as f64 * extent)))?;
    }
    Ok(total)
}

/// `(L_D, L_G)` for discriminator outputs on real and generated inputs.
pub fn lsgan_losses(d_real: &Tensor, d_fake: &Tensor) -> (Tensor, Tensor) {
    let l_d = d_real.add_scalar(-1.0).square().mean().mul_scalar(0.5).add(&d_fake.square().mean().mul_scalar(0.5));
    let l_g = d_fake.add_scalar(-1.0).square().mean();
    (l_d.expect("scalars"), l_g)
}

/// Mean over pyramid scales of `mean(m_k ∘ |g_k − t_k|) / mean(m_k)`, with
/// `g_k, t_k` area-downsampled to scale `k`.
pub fn l1_reconstruction(generated: &Tensor, target: &Tensor, pyramid: &MaskPyramid) -> Result<Tensor> {
    if generated.shape() != target.shape() || generated.shape().len() != 3 {
        return Err(Error::ShapeMismatch { op: "l1_reconstruction", lhs: generated.shape().to_vec(), rhs: target.shape().to_vec() });
    }
    if pyramid.masks.is_empty() {
        return Err(contract("empty mask pyramid"));
    }
    let (mut g, mut t) = (generated.clone(), target.clone());
    let mut total = Tensor::scalar(0.0);
    for (k, mask) in pyramid.masks.iter().enumerate() {
        if k > 0 {
            g = g.avg_pool2()?;
            t = t.avg_pool2()?;
        }
        let diff = g.sub(&t)?.abs();
        if mask.shape().len() != 3 || mask.shape()[0] != 1 || mask.shape()[1..] != diff.shape()[1..] {
            return Err(Error::ShapeMismatch { op: "l1_reconstruction mask", lhs: diff.shape().to_vec(), rhs: mask.shape().to_vec() });
        }
        let coverage = mask.data().iter().sum::<f64>() / mask.numel() as f64;
        if coverage <= 0.0 {
            return Err(contract(format!("mask at scale {k} is all zero")));
        }
        let masked = diff.mul(&mask.broadcast_to(diff.shape())?)?.mean();
        total = total.add(&masked.mul_scalar(1.0 / coverage))?;
    }
    Ok(total.mul_scalar(1.0 / pyramid.masks.len() as f64))
}

fn diagonal_cross_entropy(p: &Tensor) -> Result<Tensor> {
    let &[b, b2] = p.shape() else {
        return Err(contract(format!("expected a square [B,B] distribution, got {:?}", p.shape())));
    };
    if b != b2 || b == 0 {
        return Err(contract(format!("expected a square [B,B] distribution, got {:?}", p.shape())));
    }
    let mut eye = vec![0.0; b * b];
    (0..b).for_each(|i| eye[i * b + i] = 1.0);
    let diag = p.mul(&Tensor::new(eye, &[b, b])?)?.sum_axis(1)?;
    Ok(diag.add_scalar(LOG_EPS).log().mean().neg())
}

/// `½·[H(I, p_v2a) + H(I, p_a2v)]` with the identity as target.
pub fn contrastive_loss(p_v2a: &Tensor, p_a2v: &Tensor) -> Result<Tensor> {
    if p_v2a.shape() != p_a2v.shape() {
        return Err(Error::ShapeMismatch { op: "contrastive_loss", lhs: p_v2a.shape().to_vec(), rhs: p_a2v.shape().to_vec() });
    }
    Ok(diagonal_cross_entropy(p_v2a)?.add(&diagonal_cross_entropy(p_a2v)?)?.mul_scalar(0.5))
}

/// Contrastive loss straight from a pair of score matrices.
pub fn contrastive_from_scores(scores: &ScorePair) -> Result<Tensor> {
    let (p_va, p_av) = similarity_distributions(scores)?;
    contrastive_loss(&p_va, &p_av)
}

/// The five scalar terms of the total objective.
#[derive(Debug, Clone)]
pub struct LossComponents {
    pub l_v: Tensor,
    pub l_p: Tensor,
    /// `L_G + L_D`.
    pub l_gan: Tensor,
    pub l_r: Tensor,
    pub l_con: Tensor,
}

impl LossComponents {
    pub fn from_values(v: [f64; 5]) -> Self {
        LossComponents {
            l_v: Tensor::scalar(v[0]),
            l_p: Tensor::scalar(v[1]),
            l_gan: Tensor::scalar(v[2]),
            l_r: Tensor::scalar(v[3]),
            l_con: Tensor::scalar(v[4]),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor); 5] {
        [("L_v", &self.l_v), ("L_p", &self.l_p), ("L_GAN", &self.l_gan), ("L_r", &self.l_r), ("L_con", &self.l_con)]
    }
}

/// `λ_v L_v + λ_p L_p + λ_GAN L_GAN + λ_r L_r + λ_con L_con`.
pub fn total_loss(components: &LossComponents, weights: &LossWeights) -> Result<Tensor> {
    weights.validate()?;
    let mut total = Tensor::scalar(0.0);
    for ((name, t), (_, w)) in components.named().into_iter().zip(weights.named()) {
        if t.numel() != 1 {
            return Err(contract(format!("loss component {name} is not a scalar: {:?}", t.shape())));
        }
        if !t.item().is_finite() {
            return Err(Error::NonFinite { what: format!("loss component {name}"), index: 0 });
        }
        if w != 0.0 {
            total = total.add(&t.mul_scalar(w))?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformation::build_mask_pyramid;
    use crate::nn::uniform;
    use crate::tensor::grad_check;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::new(v.to_vec(), &[v.len()]).unwrap()
    }

    #[test]
    fn attribute_loss_values() {
        let x = vec_t(&[0.3, -1.2, 2.0]);
        assert!(facial_attribute_loss(&x, &x).unwrap().item().abs() < 1e-9);
        assert!((facial_attribute_loss(&x, &x.neg()).unwrap().item() - 2.0).abs() < 1e-9);
        let v = facial_attribute_loss(&vec_t(&[1.0, 0.0]), &vec_t(&[1.0, 1.0])).unwrap().item();
        assert!((v - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-8);
        let y = vec_t(&[1.0, 0.5, -0.2]);
        let a = facial_attribute_loss(&x, &y).unwrap().item();
        let b = facial_attribute_loss(&x.mul_scalar(7.5), &y.mul_scalar(0.3)).unwrap().item();
        assert!((a - b).abs() < 1e-9);
        assert!(facial_attribute_loss(&x, &vec_t(&[1.0])).is_err());
        let zero = facial_attribute_loss(&Tensor::zeros(&[3]), &x).unwrap().item();
        assert_eq!(zero, 1.0);
    }

    #[test]
    fn attribute_loss_gradient() {
        let y = vec_t(&[0.4, -0.1, 0.9, 0.2]);
        let r = grad_check(|x| facial_attribute_loss(x, &y), &[0.5, 0.3, -0.7, 1.1], &[4], 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    fn image(seed: u64, h: usize) -> Tensor {
        Tensor::new(uniform(&mut rng(seed), 3 * h * h, 0.0, 1.0), &[3, h, h]).unwrap()
    }

    /// Two stages: the raw image and its 2× block mean.
    struct PixelPyramid;

    impl FeatureExtractor for PixelPyramid {
        fn stages(&self, image: &Tensor) -> Result<Vec<Tensor>> {
            Ok(vec![image.clone(), image.avg_pool2()?])
        }
    }

    fn block_mean(img: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; c * (h / 2) * (w / 2)];
        for ch in 0..c {
            for y in 0..h / 2 {
                for x in 0..w / 2 {
                    let at = |yy: usize, xx: usize| img[(ch * h + yy) * w + xx];
                    out[(ch * (h / 2) + y) * (w / 2) + x] =
                        (at(2 * y, 2 * x) + at(2 * y + 1, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x + 1)) / 4.0;
                }
            }
        }
        out
    }

    #[test]
    fn perception_matches_loop_oracle() {
        let (a, b) = (image(1, 8), image(2, 8));
        let got = perception_loss(&a, &b, &PixelPyramid).unwrap().item();
        let (da, db) = (a.data(), b.data());
        let l1 = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>();
        let (a1, b1) = (block_mean(da, 3, 8, 8), block_mean(db, 3, 8, 8));
        let (a2, b2) = (block_mean(&a1, 3, 4, 4), block_mean(&b1, 3, 4, 4));
        let stage0 = (l1(da, db) + l1(&a1, &b1)) / (2.0 * 2.0 * 192.0);
        let stage1 = (l1(&a1, &b1) + l1(&a2, &b2)) / (2.0 * 2.0 * 48.0);
        assert!((got - (stage0 + stage1)).abs() < 1e-9);
    }

    #[test]
    fn perception_with_random_extractor() {
        let ex = RandomConvExtractor::new(3).unwrap();
        let (a, b) = (image(4, 8), image(5, 8));
        assert_eq!(perception_loss(&a, &a, &ex).unwrap().item(), 0.0);
        let ab = perception_loss(&a, &b, &ex).unwrap().item();
        let ba = perception_loss(&b, &a, &ex).unwrap().item();
        assert!(ab > 0.0 && (ab - ba).abs() < 1e-12);
        // Loop oracle over the extractor's own stage outputs.
        let n = 3.0;
        let mut expect = 0.0;
        let (sa, sb) = (ex.stages(&a).unwrap(), ex.stages(&b).unwrap());
        let (ha, hb) = (ex.stages(&a.avg_pool2().unwrap()).unwrap(), ex.stages(&b.avg_pool2().unwrap()).unwrap());
        for i in 0..3 {
            let mut acc = 0.0;
            for (x, y) in sa[i].data().iter().zip(sb[i].data()) {
                acc += (x - y).abs();
            }
            for (x, y) in ha[i].data().iter().zip(hb[i].data()) {
                acc += (x - y).abs();
            }
            expect += acc / (2.0 * n * sa[i].numel() as f64);
        }
        assert!((ab - expect).abs() < 1e-6);
        assert!(perception_loss(&a, &image(6, 4), &ex).is_err());
    }

    struct OneStage;

    impl FeatureExtractor for OneStage {
        fn stages(&self, image: &Tensor) -> Result<Vec<Tensor>> {
            Ok(vec![image.clone()])
        }
    }

    #[test]
    fn perception_rejects_single_stage() {
        assert!(perception_loss(&image(1, 4), &image(2, 4), &OneStage).is_err());
    }

    #[test]
    fn perception_gradient() {
        let ex = RandomConvExtractor::new(9).unwrap();
        let b = image(7, 4);
        let x0 = uniform(&mut rng(8), 48, 0.0, 1.0);
        let r = grad_check(|x| perception_loss(x, &b, &ex), &x0, &[3, 4, 4], 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn lsgan_values() {
        let (d, g) = lsgan_losses(&Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]));
        assert_eq!((d.item(), g.item()), (0.0, 1.0));
        let (d, g) = lsgan_losses(&Tensor::full(&[2, 3], 0.5), &Tensor::full(&[2, 3], 0.5));
        assert!((d.item() - 0.25).abs() < 1e-15 && (g.item() - 0.25).abs() < 1e-15);
        let real = uniform(&mut rng(1), 12, -1.0, 2.0);
        let fake = uniform(&mut rng(2), 12, -1.0, 2.0);
        let (d, g) = lsgan_losses(&vec_t(&real), &vec_t(&fake));
        let mut ed = 0.0;
        let mut eg = 0.0;
        for i in 0..12 {
            ed += 0.5 * (real[i] - 1.0).powi(2) / 12.0 + 0.5 * fake[i].powi(2) / 12.0;
            eg += (fake[i] - 1.0).powi(2) / 12.0;
        }
        assert!((d.item() - ed).abs() < 1e-7 && (g.item() - eg).abs() < 1e-7);
        assert!(d.item() >= 0.0 && g.item() >= 0.0);
    }

    #[test]
    fn lsgan_gradients() {
        let real = vec_t(&uniform(&mut rng(3), 6, -1.0, 2.0));
        let x0 = uniform(&mut rng(4), 6, -1.0, 2.0);
        let r = grad_check(|f| Ok(lsgan_losses(&real, f).0), &x0, &[6], 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-5);
        let r = grad_check(|f| Ok(lsgan_losses(&real, f).1), &x0, &[6], 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-5);
    }

    #[test]
    fn reconstruction_values() {
        let p = build_mask_pyramid(8, 8).unwrap();
        let a = image(1, 8);
        assert_eq!(l1_reconstruction(&a, &a, &p).unwrap().item(), 0.0);
        let shifted = a.add_scalar(0.2);
        for pyr in [p.clone(), p.truncated(1), MaskPyramid::unmasked(8, 8)] {
            assert!((l1_reconstruction(&shifted, &a, &pyr).unwrap().item() - 0.2).abs() < 1e-12);
        }
        let empty = MaskPyramid { masks: vec![Tensor::zeros(&[1, 8, 8])] };
        assert!(l1_reconstruction(&shifted, &a, &empty).is_err());
    }

    #[test]
    fn reconstruction_matches_two_scale_oracle() {
        let p = build_mask_pyramid(8, 8).unwrap().truncated(2);
        let (a, b) = (image(2, 8), image(3, 8));
        let got = l1_reconstruction(&a, &b, &p).unwrap().item();
        let (a1, b1) = (block_mean(a.data(), 3, 8, 8), block_mean(b.data(), 3, 8, 8));
        let scale = |x: &[f64], y: &[f64], m: &[f64], hw: usize| {
            let mut num = 0.0;
            for c in 0..3 {
                for i in 0..hw {
                    num += m[i] * (x[c * hw + i] - y[c * hw + i]).abs();
                }
            }
            (num / (3 * hw) as f64) / (m.iter().sum::<f64>() / hw as f64)
        };
        let expect = 0.5 * (scale(a.data(), b.data(), p.masks[0].data(), 64) + scale(&a1, &b1, p.masks[1].data(), 16));
        assert!((got - expect).abs() < 1e-6);
    }

    #[test]
    fn reconstruction_gradient() {
        let p = build_mask_pyramid(8, 8).unwrap();
        let t = image(4, 8);
        let x0 = uniform(&mut rng(5), 192, 0.0, 1.0);
        let r = grad_check(|x| l1_reconstruction(x, &t, &p), &x0, &[3, 8, 8], 1e-7).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    fn probs(b: usize, diag: f64) -> Tensor {
        let off = (1.0 - diag) / (b - 1) as f64;
        let data = (0..b * b).map(|i| if i / b == i % b { diag } else { off }).collect();
        Tensor::new(data, &[b, b]).unwrap()
    }

    #[test]
    fn contrastive_values() {
        let eye = probs(3, 1.0);
        assert!(contrastive_loss(&eye, &eye).unwrap().item() < 1e-11);
        let u = Tensor::full(&[4, 4], 0.25);
        assert!((contrastive_loss(&u, &u).unwrap().item() - 4f64.ln()).abs() < 1e-9);
        let p = probs(2, 0.9);
        assert!((contrastive_loss(&p, &p).unwrap().item() + 0.9f64.ln()).abs() < 1e-9);
        assert!(contrastive_loss(&p, &u).is_err());
    }

    fn score_pair(b: usize, diag: f64, off: f64) -> ScorePair {
        let s: Vec<f64> = (0..b * b).map(|i| if i / b == i % b { diag } else { off }).collect();
        let t = Tensor::new(s, &[b, b]).unwrap();
        ScorePair { s_va: t.clone(), s_av: t, tau: 0.07 }
    }

    #[test]
    fn contrastive_from_scores_contract() {
        for b in 2..=8 {
            assert!(contrastive_from_scores(&score_pair(b, 1.0, 0.0)).unwrap().item() < 1e-3);
            let uniform = contrastive_from_scores(&score_pair(b, 0.3, 0.3)).unwrap().item();
            assert!((uniform - (b as f64).ln()).abs() < 1e-6);
        }
        let mut last = f64::INFINITY;
        for k in 0..=40 {
            let v = contrastive_from_scores(&score_pair(4, -1.0 + 0.05 * k as f64, 0.0)).unwrap().item();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn contrastive_gradient_through_scores() {
        let x0 = uniform(&mut rng(6), 9, -1.0, 1.0);
        let other = Tensor::new(uniform(&mut rng(7), 9, -1.0, 1.0), &[3, 3]).unwrap();
        let r = grad_check(
            |s| contrastive_from_scores(&ScorePair { s_va: s.clone(), s_av: other.clone(), tau: 0.07 }),
            &x0,
            &[3, 3],
            1e-7,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossComponents::from_values([1.0; 5]), &w).unwrap().item(), 15.0);
        assert_eq!(total_loss(&LossComponents::from_values([0.0; 5]), &w).unwrap().item(), 0.0);
        let v = total_loss(&LossComponents::from_values([0.5, 0.1, 0.2, 0.3, 0.4]), &w).unwrap().item();
        assert!((v - 4.5).abs() < 1e-12);
        let no_con = LossWeights { con: 0.0, ..w };
        assert_eq!(total_loss(&LossComponents::from_values([1.0; 5]), &no_con).unwrap().item(), 10.0);
    }

    #[test]
    fn total_loss_names_bad_component() {
        let err = total_loss(&LossComponents::from_values([0.0, 0.0, f64::NAN, 0.0, 0.0]), &LossWeights::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("L_GAN"), "{err}");
        let neg = LossWeights { r: -1.0, ..LossWeights::default() };
        assert!(total_loss(&LossComponents::from_values([0.0; 5]), &neg).is_err());
    }
}
