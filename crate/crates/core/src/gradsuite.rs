//! Finite-difference sweep over every differentiable operator of the model,
//! shared by the `gradcheck` command and the test suites.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{adain, ContrastiveHeads, ResidualAdainBlock, ScorePair};
use crate::deformation::{affine_warp, build_mask_pyramid, AffineCoeffSet, BlendInputs, BlendNet, FaceDecoder, Padding};
use crate::encoders::ModelDims;
use crate::error::Result;
use crate::losses::{
    contrastive_from_scores, facial_attribute_loss, l1_reconstruction, lsgan_losses, perception_loss, RandomConvExtractor,
};
use crate::nn::{uniform, ParamSet};
use crate::tensor::{grad_check, Tensor};

/// Relative error bound every operator must meet.
pub const SUITE_TOLERANCE: f64 = 1e-4;
/// Seeds used when none are given.
pub const DEFAULT_SEEDS: [u64; 5] = [11, 23, 37, 41, 59];
const STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    /// Operator and the input being differentiated, e.g. `affine_warp/theta`.
    pub operator: String,
    /// Worst relative error over all seeds.
    pub max_rel_error: f64,
    pub seeds: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < SUITE_TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(SuiteEntry::passed)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

type Check = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(uniform(rng, n, lo, hi), shape).expect("shape from caller")
}

fn weights(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    rand_tensor(rng, shape, -1.0, 1.0)
}

/// Random weighted sum so every output coordinate matters.
fn probe(out: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(out.mul(w)?.sum())
}

fn check<F: Fn(&Tensor) -> Result<Tensor>>(f: F, x0: &[f64], shape: &[usize]) -> Result<f64> {
    Ok(grad_check(f, x0, shape, STEP)?.max_rel_error)
}

fn seeded_params(init: impl Fn(&mut ParamSet, &mut ChaCha8Rng) -> Result<()>, rng: &mut ChaCha8Rng) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    init(&mut p, rng)?;
    // Randomise everything so zero-initialised heads are exercised too.
    let names: Vec<(String, usize)> = p.iter().map(|(n, t)| (n.to_string(), t.numel())).collect();
    for (name, n) in names {
        p.set_values(&name, uniform(rng, n, -0.5, 0.5))?;
    }
    Ok(p)
}

fn checks() -> Vec<(&'static str, Check)> {
    let (c, h, w) = (3usize, 5usize, 5usize);
    let mut v: Vec<(&'static str, Check)> = Vec::new();

    for which in 0..3 {
        let name = ["adain/x", "adain/sigma_dot", "adain/mu_dot"][which];
        v.push((
            name,
            Box::new(move |rng| {
                let x = rand_tensor(rng, &[c, h, w], -1.0, 1.0);
                let s = rand_tensor(rng, &[c], 0.5, 1.5);
                let m = rand_tensor(rng, &[c], -0.5, 0.5);
                let wt = weights(rng, &[c, h, w]);
                let inputs = [x, s, m];
                let f = |t: &Tensor| {
                    let mut a = inputs.clone();
                    a[which] = t.clone();
                    probe(&adain(&a[0], &a[1], &a[2])?, &wt)
                };
                check(f, inputs[which].data(), inputs[which].shape())
            }),
        ));
    }

    for which in 0..2 {
        let name = ["residual_block/x", "residual_block/l_r"][which];
        v.push((
            name,
            Box::new(move |rng| {
                let d = 6;
                let block = ResidualAdainBlock::new("blk", d, c);
                let p = seeded_params(|p, r| block.init(p, r), rng)?;
                let x = rand_tensor(rng, &[c, h, w], -1.0, 1.0);
                let l = rand_tensor(rng, &[d], -1.0, 1.0);
                let wt = weights(rng, &[c, h, w]);
                if which == 0 {
                    check(|t| probe(&block.forward(&p, t, &l)?, &wt), x.data(), x.shape())
                } else {
                    check(|t| probe(&block.forward(&p, &x, t)?, &wt), l.data(), l.shape())
                }
            }),
        ));
    }

    for which in 0..2 {
        let name = ["score_softmax/visual", "score_softmax/audio"][which];
        v.push((
            name,
            Box::new(move |rng| {
                let (b, cv, da) = (4, 5, 6);
                let heads = ContrastiveHeads::new(cv, da, 4);
                let p = seeded_params(|p, r| heads.init(p, r), rng)?;
                let vis = rand_tensor(rng, &[b, cv], -1.0, 1.0);
                let aud = rand_tensor(rng, &[b, da], -1.0, 1.0);
                // Lower temperature sharpens curvature; keep the probe well-conditioned.
                let tau = 0.5;
                let f = |vis: &Tensor, aud: &Tensor| contrastive_from_scores(&heads.score_matrices(&p, vis, aud, tau)?);
                if which == 0 {
                    check(|t| f(t, &aud), vis.data(), vis.shape())
                } else {
                    check(|t| f(&vis, t), aud.data(), aud.shape())
                }
            }),
        ));
    }

    v.push((
        "affine_warp/feature",
        Box::new(move |rng| {
            let coeffs = random_coeffs(rng, c);
            let f0 = rand_tensor(rng, &[c, 7, 7], -1.0, 1.0);
            let wt = weights(rng, &[c, 7, 7]);
            check(|t| probe(&affine_warp(t, &coeffs, Padding::Border)?, &wt), f0.data(), f0.shape())
        }),
    ));
    for which in 0..4 {
        let name = ["affine_warp/theta", "affine_warp/t_x", "affine_warp/t_y", "affine_warp/s"][which];
        v.push((
            name,
            Box::new(move |rng| {
                let coeffs = random_coeffs(rng, c);
                let feat = rand_tensor(rng, &[c, 7, 7], -1.0, 1.0);
                let wt = weights(rng, &[c, 7, 7]);
                let sets = [&coeffs.theta, &coeffs.t_x, &coeffs.t_y, &coeffs.s];
                let x0 = sets[which].data().to_vec();
                check(
                    |t| {
                        let mut cs = coeffs.clone();
                        *[&mut cs.theta, &mut cs.t_x, &mut cs.t_y, &mut cs.s][which] = t.clone();
                        probe(&affine_warp(&feat, &cs, Padding::Border)?, &wt)
                    },
                    &x0,
                    &[c],
                )
            }),
        ));
    }

    v.push((
        "loss/attribute",
        Box::new(|rng| {
            let y = rand_tensor(rng, &[8], -1.0, 1.0);
            let x = rand_tensor(rng, &[8], -1.0, 1.0);
            check(|t| facial_attribute_loss(t, &y), x.data(), x.shape())
        }),
    ));
    v.push((
        "loss/perception",
        Box::new(|rng| {
            let ex = RandomConvExtractor::new(rng.gen())?;
            let real = rand_tensor(rng, &[3, 8, 8], 0.0, 1.0);
            let gen = rand_tensor(rng, &[3, 8, 8], 0.0, 1.0);
            check(|t| perception_loss(t, &real, &ex), gen.data(), gen.shape())
        }),
    ));
    v.push((
        "loss/lsgan",
        Box::new(|rng| {
            let real = rand_tensor(rng, &[2, 4, 4], -1.0, 2.0);
            let fake = rand_tensor(rng, &[2, 4, 4], -1.0, 2.0);
            let e_real = check(|t| Ok(lsgan_losses(t, &fake).0), real.data(), real.shape())?;
            let e_fake = check(|t| { let (d, g) = lsgan_losses(&real, t); d.add(&g) }, fake.data(), fake.shape())?;
            Ok(e_real.max(e_fake))
        }),
    ));
    v.push((
        "loss/reconstruction",
        Box::new(|rng| {
            let pyr = build_mask_pyramid(8, 8)?;
            let truth = rand_tensor(rng, &[3, 8, 8], 0.0, 1.0);
            let gen = rand_tensor(rng, &[3, 8, 8], 0.0, 1.0);
            check(|t| l1_reconstruction(t, &truth, &pyr), gen.data(), gen.shape())
        }),
    ));
    v.push((
        "loss/contrastive",
        Box::new(|rng| {
            let s_av = rand_tensor(rng, &[4, 4], -1.0, 1.0);
            let s_va = rand_tensor(rng, &[4, 4], -1.0, 1.0);
            check(
                |t| contrastive_from_scores(&ScorePair { s_va: t.clone(), s_av: s_av.clone(), tau: 0.07 }),
                s_va.data(),
                s_va.shape(),
            )
        }),
    ));

    for which in 0..2 {
        let name = ["decoder/F_s", "decoder/F_d"][which];
        v.push((
            name,
            Box::new(move |rng| {
                let dims = ModelDims { image_size: 32, channels: 2, feature_dim: 4 };
                let dec = FaceDecoder::new(&dims)?;
                let p = seeded_params(|p, r| dec.init(p, r), rng)?;
                let fs = rand_tensor(rng, &[2, 16, 16], -1.0, 1.0);
                let fd = rand_tensor(rng, &[2, 16, 16], -1.0, 1.0);
                let wt = weights(rng, &[3, 32, 32]);
                if which == 0 {
                    check(|t| probe(&dec.decode(&p, t, &fd)?, &wt), fs.data(), fs.shape())
                } else {
                    check(|t| probe(&dec.decode(&p, &fs, t)?, &wt), fd.data(), fd.shape())
                }
            }),
        ));
    }

    v.push((
        "blend/generated",
        Box::new(|rng| {
            let net = BlendNet::new(4);
            let mut p = seeded_params(|p, r| net.init(p, r), rng)?;
            // Small output kernel keeps the clamp inactive.
            p.set_values("blend.conv2.w", uniform(rng, 3 * 4 * 9, -0.05, 0.05))?;
            let src = rand_tensor(rng, &[3, 6, 6], 0.2, 0.8);
            let mask = rand_tensor(rng, &[1, 6, 6], 0.0, 1.0);
            let gen = rand_tensor(rng, &[3, 6, 6], 0.2, 0.8);
            let wt = weights(rng, &[3, 6, 6]);
            check(
                |t| {
                    let inputs = BlendInputs::new(t.clone(), src.clone(), mask.clone())?;
                    probe(&net.composite_and_blend(&p, &inputs)?.final_frame, &wt)
                },
                gen.data(),
                gen.shape(),
            )
        }),
    ));
    v
}

fn random_coeffs(rng: &mut ChaCha8Rng, c: usize) -> AffineCoeffSet {
    AffineCoeffSet {
        theta: rand_tensor(rng, &[c], -0.4, 0.4),
        t_x: rand_tensor(rng, &[c], -0.2, 0.2),
        t_y: rand_tensor(rng, &[c], -0.2, 0.2),
        s: rand_tensor(rng, &[c], 0.8, 1.25),
    }
}

/// Runs every check once per seed and keeps the worst error per operator.
pub fn run_suite(seeds: &[u64]) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut entries = Vec::new();
    for (name, f) in checks() {
        let mut worst = 0.0f64;
        for &seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fxhash(name));
            worst = worst.max(f(&mut rng)?);
        }
        entries.push(SuiteEntry { operator: name.to_string(), max_rel_error: worst, seeds: seeds.len() });
    }
    Ok(SuiteReport { entries, seconds: start.elapsed().as_secs_f64() })
}

/// Stable per-operator seed salt.
fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}
