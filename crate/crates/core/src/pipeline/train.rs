//! Two-phase training: fit the sync-expert heads on frozen features, then
//! alternate discriminator and generator updates on the weighted objective.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{HEAD_PREFIX, HEAD_WEIGHT_PREFIX};
use crate::deformation::{build_mask_pyramid, MaskPyramid};
use crate::encoders::SceneSample;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{
    contrastive_from_scores, contrastive_loss, facial_attribute_loss, l1_reconstruction, lsgan_losses, perception_loss, total_loss,
    LossComponents, LossWeights, RandomConvExtractor,
};
use crate::metrics::ssim;
use crate::nn::ParamSet;
use crate::pipeline::config::{OptimizerKind, PipelineConfig};
use crate::pipeline::model::{window_with_center, Discriminators, Generator};
use crate::pipeline::optim::Optimizer;
use crate::tensor::{backward, Tensor};

/// Seed of the frozen perceptual feature extractor.
pub const EXTRACTOR_SEED: u64 = 0x766767;
/// Phase one stops once the contrastive loss falls below this multiple of `log B`.
pub const EXPERT_TARGET: f64 = 0.3;
/// Divergence guard: factor over the first total and the patience in steps.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_PATIENCE: usize = 50;
/// Lower bound on the standard deviation used to scale the head inputs.
pub const NORM_FLOOR: f64 = 1e-6;

/// One line of the loss CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub l_v: f64,
    pub l_p: f64,
    pub l_d: f64,
    pub l_g: f64,
    pub l_r: f64,
    pub l_con: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,L_v,L_p,L_D,L_G,L_r,L_con,total";

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{},{},{}", r.step, r.l_v, r.l_p, r.l_d, r.l_g, r.l_r, r.l_con, r.total);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertFit {
    pub steps: usize,
    pub final_loss: f64,
    pub target: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub rows: Vec<LossRow>,
    pub generator: Generator,
    pub gen_params: ParamSet,
    pub disc_params: ParamSet,
    pub expert: ExpertFit,
}

impl TrainResult {
    pub fn first_total(&self) -> f64 {
        self.rows.first().map_or(f64::NAN, |r| r.total)
    }

    pub fn last_total(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.total)
    }
}

/// Fits the contrastive heads on features of the freshly initialised
/// encoders, then freezes them. Unsynced pairs are the other samples of the
/// batch plus each sample's own shifted audio window.
///
/// Training minimises the contrastive loss with the shifted windows appended
/// as extra visual-to-audio candidates; the stopping rule uses the plain
/// in-batch loss.
pub fn fit_sync_expert(gen: &Generator, params: &mut ParamSet, samples: &[SceneSample]) -> Result<ExpertFit> {
    let cfg = &gen.config;
    let b = cfg.batch_size;
    let target = EXPERT_TARGET * (b as f64).ln();
    let mut visual = Vec::with_capacity(samples.len());
    let mut audio = Vec::with_capacity(samples.len());
    let mut shifted = Vec::with_capacity(samples.len());
    for s in samples {
        // The expert looks at the real frame, mouth included.
        let seen = SceneSample { masked_source: s.truth_frame.clone(), ..s.clone() };
        let enc = gen.encoders.encode(params, &seen)?;
        let aligned = gen.align.forward(params, &enc.fused, &enc.l_r)?;
        visual.push(aligned.global_avg_pool()?.detach());
        audio.push(enc.a.detach());
        shifted.push(gen.encoders.audio.forward(params, &s.shifted_mel)?.detach());
    }
    let all_v = Tensor::stack(&visual)?;
    let all_a = Tensor::stack(&[audio.clone(), shifted.clone()].concat())?;
    gen.heads.fit_normalization(params, &all_v, &all_a, NORM_FLOOR)?;
    params.set_trainable("", false);
    params.set_trainable(HEAD_WEIGHT_PREFIX, true);
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.expert_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe8e7);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut fit = ExpertFit { steps: 0, final_loss: f64::INFINITY, target };
    while fit.steps < cfg.expert_steps {
        if cursor + b > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + b];
        cursor += b;
        let v = Tensor::stack(&idx.iter().map(|&i| visual[i].clone()).collect::<Vec<_>>())?;
        let a = Tensor::stack(&idx.iter().map(|&i| audio[i].clone()).collect::<Vec<_>>())?;
        let a_off = Tensor::stack(&idx.iter().map(|&i| shifted[i].clone()).collect::<Vec<_>>())?;
        let synced = gen.heads.score_matrices(params, &v, &a, cfg.tau)?;
        fit.final_loss = contrastive_from_scores(&synced)?.item();
        if fit.final_loss < target {
            break;
        }
        let unsynced = gen.heads.score_matrices(params, &v, &a_off, cfg.tau)?;
        let p_va = Tensor::concat(&[synced.s_va.clone(), unsynced.s_va], 1)?.softmax(1, cfg.tau)?.narrow(1, 0, b)?;
        let p_av = synced.s_av.softmax(1, cfg.tau)?;
        let loss = contrastive_loss(&p_va, &p_av)?;
        opt.step(params, &backward(&loss)?)?;
        fit.steps += 1;
    }
    params.set_trainable("", true);
    params.set_trainable(HEAD_PREFIX, false);
    Ok(fit)
}

fn supervision(cfg: &PipelineConfig) -> Result<MaskPyramid> {
    if cfg.no_supervision {
        Ok(MaskPyramid::unmasked(cfg.image_size, cfg.image_size))
    } else {
        build_mask_pyramid(cfg.image_size, cfg.image_size)
    }
}

/// Weights actually applied: without alignment the contrastive term drops out.
pub fn effective_weights(cfg: &PipelineConfig) -> LossWeights {
    if cfg.no_alignment {
        LossWeights { con: 0.0, ..cfg.weights }
    } else {
        cfg.weights
    }
}

pub fn train(config: &PipelineConfig, samples: &[SceneSample]) -> Result<TrainResult> {
    train_with(config, samples, |_| {})
}

/// Like [`train`], calling `on_step` after every logged step.
pub fn train_with(config: &PipelineConfig, samples: &[SceneSample], mut on_step: impl FnMut(&LossRow)) -> Result<TrainResult> {
    config.validate()?;
    if samples.len() < config.batch_size {
        return Err(Error::Config(format!("{} samples cannot fill a batch of {}", samples.len(), config.batch_size)));
    }
    for s in samples {
        s.validate()?;
        if s.image_size() != config.image_size {
            return Err(Error::Config(format!("sample size {} vs configured {}", s.image_size(), config.image_size)));
        }
    }
    let gen = Generator::new(config)?;
    let mut gp = gen.init_params()?;
    let expert = fit_sync_expert(&gen, &mut gp, samples)?;

    let discs = Discriminators::new();
    let mut dp = discs.init_params(config.seed)?;
    let mut g_opt = Optimizer::new(config.optimizer, config.lr);
    let mut d_opt = Optimizer::new(config.optimizer, config.lr);
    let extractor = RandomConvExtractor::new(EXTRACTOR_SEED)?;
    let pyramid = supervision(config)?;
    let weights = effective_weights(config);
    let b = config.batch_size;
    let bf = b as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut rows = Vec::with_capacity(config.steps);
    let mut over = 0usize;

    for step in 1..=config.steps {
        if cursor + b > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<&SceneSample> = order[cursor..cursor + b].iter().map(|&i| &samples[i]).collect();
        cursor += b;

        let fwd = gen.forward(&gp, &batch)?;

        // Discriminator step on detached generations.
        let mut l_d = Tensor::scalar(0.0);
        for (s, f) in batch.iter().zip(&fwd.samples) {
            let fake = f.final_frame.detach();
            let (d1, _) = lsgan_losses(&discs.single.forward(&dp, &s.truth_frame)?, &discs.single.forward(&dp, &fake)?);
            let fake5 = window_with_center(&s.truth_window, &fake)?;
            let (d5, _) = lsgan_losses(&discs.multi.forward(&dp, &s.truth_window)?, &discs.multi.forward(&dp, &fake5)?);
            l_d = l_d.add(&d1.add(&d5)?)?;
        }
        let l_d = l_d.mul_scalar(1.0 / bf);
        d_opt.step(&mut dp, &backward(&l_d)?)?;

        // Generator step against the updated, frozen discriminators.
        let mut frozen = dp.clone();
        frozen.set_trainable("", false);
        let (mut l_v, mut l_p, mut l_g, mut l_r) =
            (Tensor::scalar(0.0), Tensor::scalar(0.0), Tensor::scalar(0.0), Tensor::scalar(0.0));
        for (s, f) in batch.iter().zip(&fwd.samples) {
            l_v = l_v.add(&facial_attribute_loss(&f.encoded.fused_pooled, &f.encoded.l_r)?)?;
            l_p = l_p.add(&perception_loss(&f.final_frame, &s.truth_frame, &extractor)?)?;
            l_r = l_r.add(&l1_reconstruction(&f.final_frame, &s.truth_frame, &pyramid)?)?;
            let (_, g1) = lsgan_losses(&s.truth_frame, &discs.single.forward(&frozen, &f.final_frame)?);
            let fake5 = window_with_center(&s.truth_window, &f.final_frame)?;
            let (_, g5) = lsgan_losses(&s.truth_window, &discs.multi.forward(&frozen, &fake5)?);
            l_g = l_g.add(&g1.add(&g5)?)?;
        }
        let (l_v, l_p, l_g, l_r) = (l_v.mul_scalar(1.0 / bf), l_p.mul_scalar(1.0 / bf), l_g.mul_scalar(1.0 / bf), l_r.mul_scalar(1.0 / bf));
        let l_con = contrastive_from_scores(&fwd.scores)?;
        let components = LossComponents {
            l_v: l_v.clone(),
            l_p: l_p.clone(),
            l_gan: l_g.add(&Tensor::scalar(l_d.item()))?,
            l_r: l_r.clone(),
            l_con: l_con.clone(),
        };
        let total = total_loss(&components, &weights)?;
        g_opt.step(&mut gp, &backward(&total)?)?;

        let row = LossRow {
            step,
            l_v: l_v.item(),
            l_p: l_p.item(),
            l_d: l_d.item(),
            l_g: l_g.item(),
            l_r: l_r.item(),
            l_con: l_con.item(),
            total: total.item(),
        };
        on_step(&row);
        rows.push(row);

        let initial = rows[0].total;
        over = if row.total > DIVERGENCE_FACTOR * initial { over + 1 } else { 0 };
        if over >= DIVERGENCE_PATIENCE {
            return Err(Error::Diverged { step, total: row.total, initial });
        }
    }
    Ok(TrainResult { rows, generator: gen, gen_params: gp, disc_params: dp, expert })
}

/// Reconstruction quality of the trained generator on a sample set.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    /// Mean multi-scale masked L1 between final and ground-truth frames.
    pub masked_l1: f64,
    pub ssim: f64,
    pub generated: Vec<Image>,
    pub truth: Vec<Image>,
}

pub fn masked_l1(final_frame: &Tensor, truth: &Tensor) -> Result<f64> {
    let [_, h, w] = truth.shape() else {
        return Err(crate::error::Error::Contract("masked_l1 expects [C,H,W]".into()));
    };
    Ok(l1_reconstruction(final_frame, truth, &build_mask_pyramid(*h, *w)?)?.item())
}

pub fn evaluate(gen: &Generator, params: &ParamSet, samples: &[SceneSample]) -> Result<EvalSummary> {
    let mut generated = Vec::with_capacity(samples.len());
    let mut truth = Vec::with_capacity(samples.len());
    let (mut l1, mut ss) = (0.0, 0.0);
    for s in samples {
        let f = gen.forward_sample(params, s)?.final_frame.detach();
        l1 += masked_l1(&f, &s.truth_frame)?;
        let (gi, ti) = (Image::from_tensor(&f)?, Image::from_tensor(&s.truth_frame)?);
        ss += ssim(&gi, &ti, 1.0)?;
        generated.push(gi);
        truth.push(ti);
    }
    let n = samples.len() as f64;
    Ok(EvalSummary { masked_l1: l1 / n, ssim: ss / n, generated, truth })
}

pub fn write_loss_csv(path: impl AsRef<Path>, rows: &[LossRow]) -> Result<()> {
    fs::write(path, loss_csv(rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synth::{generate_dataset, AudioSource};

    fn tiny(steps: usize) -> PipelineConfig {
        PipelineConfig {
            image_size: 32,
            channels: 4,
            feature_dim: 8,
            samples: 4,
            batch_size: 2,
            steps,
            residual_blocks: 1,
            expert_steps: 20,
            ..PipelineConfig::overfit()
        }
    }

    #[test]
    fn every_trainable_parameter_gets_finite_nonzero_gradient() {
        let cfg = tiny(1);
        let ds = generate_dataset(32, 4, 0, &AudioSource::Synthesized).unwrap();
        let res = train(&cfg, &ds.samples).unwrap();
        // After one step the zero-initialised blend output no longer blocks
        // the gradient of the layer before it.
        let gen = &res.generator;
        let gp = &res.gen_params;
        let batch: Vec<&SceneSample> = ds.samples[..2].iter().collect();
        let fwd = gen.forward(gp, &batch).unwrap();
        let ex = RandomConvExtractor::new(EXTRACTOR_SEED).unwrap();
        let pyr = build_mask_pyramid(32, 32).unwrap();
        let mut loss = contrastive_from_scores(&fwd.scores).unwrap();
        for (s, f) in batch.iter().zip(&fwd.samples) {
            loss = loss
                .add(&facial_attribute_loss(&f.encoded.fused_pooled, &f.encoded.l_r).unwrap())
                .unwrap()
                .add(&perception_loss(&f.final_frame, &s.truth_frame, &ex).unwrap())
                .unwrap()
                .add(&l1_reconstruction(&f.final_frame, &s.truth_frame, &pyr).unwrap())
                .unwrap();
        }
        let g = backward(&loss).unwrap();
        let grads = gp.trainable_grads(&g);
        assert!(!grads.is_empty());
        for (name, v) in grads {
            assert!(v.iter().all(|x| x.is_finite()), "{name}");
            assert!(v.iter().any(|&x| x != 0.0), "{name} has an all-zero gradient");
        }
        assert!(gp.names().filter(|n| n.starts_with(HEAD_PREFIX)).all(|n| !gp.is_trainable(n)));
    }

    #[test]
    fn rows_are_logged_and_weights_respected() {
        let ds = generate_dataset(32, 4, 1, &AudioSource::Synthesized).unwrap();
        let cfg = PipelineConfig { weights: LossWeights { con: 0.0, ..LossWeights::default() }, ..tiny(3) };
        let res = train(&cfg, &ds.samples).unwrap();
        assert_eq!(res.rows.len(), 3);
        for r in &res.rows {
            assert!(r.l_con > 0.0);
            let expect = r.l_v + 2.0 * r.l_p + 3.0 * (r.l_g + r.l_d) + 4.0 * r.l_r;
            assert!((r.total - expect).abs() < 1e-9 * expect.max(1.0));
        }
        let csv = loss_csv(&res.rows);
        assert_eq!(csv.lines().next().unwrap(), LOSS_CSV_HEADER);
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = generate_dataset(32, 4, 2, &AudioSource::Synthesized).unwrap();
        let a = train(&tiny(2), &ds.samples).unwrap();
        let b = train(&tiny(2), &ds.samples).unwrap();
        assert_eq!(loss_csv(&a.rows), loss_csv(&b.rows));
        let ca = crate::pipeline::checkpoint::encode(&[&a.gen_params, &a.disc_params]);
        let cb = crate::pipeline::checkpoint::encode(&[&b.gen_params, &b.disc_params]);
        assert_eq!(ca, cb);
    }

    #[test]
    fn divergence_guard_trips() {
        let ds = generate_dataset(32, 4, 3, &AudioSource::Synthesized).unwrap();
        let cfg = PipelineConfig { lr: 1e6, optimizer: OptimizerKind::Sgd, steps: 80, ..tiny(80) };
        match train(&cfg, &ds.samples) {
            Err(Error::Diverged { .. }) | Err(Error::NonFinite { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|r| r.last_total())),
        }
    }

    #[test]
    fn expert_phase_reaches_target_or_budget() {
        let cfg = PipelineConfig { expert_steps: 300, ..tiny(1) };
        let ds = generate_dataset(32, 4, 4, &AudioSource::Synthesized).unwrap();
        let gen = Generator::new(&cfg).unwrap();
        let mut p = gen.init_params().unwrap();
        let fit = fit_sync_expert(&gen, &mut p, &ds.samples).unwrap();
        assert!(fit.final_loss < fit.target || fit.steps == 300);
        assert!(p.names().filter(|n| n.starts_with(HEAD_PREFIX)).all(|n| !p.is_trainable(n)));
        assert!(p.names().filter(|n| !n.starts_with(HEAD_PREFIX)).all(|n| p.is_trainable(n)));
    }
}
