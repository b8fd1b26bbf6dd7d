use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use g4g::audio::{load_wav, mel_spectrogram, write_mel, write_mel_text, write_wav};
use g4g::deformation::{affine_warp, AffineCoeffSet, Padding};
use g4g::gradsuite::{run_suite, DEFAULT_SEEDS, SUITE_TOLERANCE};
use g4g::image::{read_frame_dir, write_frame_dir, Image};
use g4g::metrics::{report, RandomProjectionEmbedder};
use g4g::pipeline::checkpoint;
use g4g::pipeline::synth::{generate_dataset, render_frame, synthesize_video, AudioSource, FaceStyle, VIDEO_FPS};
use g4g::pipeline::train::{evaluate, train_with, write_loss_csv};
use g4g::pipeline::PipelineConfig;
use g4g::Result;

#[derive(Parser)]
#[command(name = "g4g", version, about = "Talking-face alignment and deformation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every differentiable operator.
    Gradcheck {
        /// Number of random seeds per operator.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Log-mel spectrogram of a 16-bit PCM WAV file.
    Melspec {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write whitespace-separated text instead of the binary format.
        #[arg(long)]
        text: bool,
    },
    /// Render a synthetic talking-face clip with its audio.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        /// Frames to render; defaults to what the configured sample count needs.
        #[arg(long)]
        frames: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on a synthetic dataset and write losses, checkpoint and frames.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Drive the scene with this WAV instead of synthesized speech.
        #[arg(long)]
        audio: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare generated frames against references.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        audio: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Apply one affine transform to every channel of an image.
    WarpDemo {
        /// PPM/PGM input; a synthetic face when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        theta: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        tx: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        ty: f64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value = "border")]
        padding: String,
    },
}

/// `--config FILE` plus one override flag per configuration key.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    image_size: Option<String>,
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    feature_dim: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    lambda_v: Option<String>,
    #[arg(long)]
    lambda_p: Option<String>,
    #[arg(long)]
    lambda_gan: Option<String>,
    #[arg(long)]
    lambda_r: Option<String>,
    #[arg(long)]
    lambda_con: Option<String>,
    #[arg(long)]
    no_alignment: Option<String>,
    #[arg(long)]
    no_supervision: Option<String>,
    #[arg(long)]
    no_fusion: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    samples: Option<String>,
    #[arg(long)]
    residual_blocks: Option<String>,
    #[arg(long)]
    padding: Option<String>,
    #[arg(long)]
    expert_steps: Option<String>,
    #[arg(long)]
    expert_lr: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_text(&fs::read_to_string(path)?)?;
        }
        let overrides = [
            ("image_size", &self.image_size),
            ("channels", &self.channels),
            ("feature_dim", &self.feature_dim),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("optimizer", &self.optimizer),
            ("tau", &self.tau),
            ("lambda_v", &self.lambda_v),
            ("lambda_p", &self.lambda_p),
            ("lambda_gan", &self.lambda_gan),
            ("lambda_r", &self.lambda_r),
            ("lambda_con", &self.lambda_con),
            ("no_alignment", &self.no_alignment),
            ("no_supervision", &self.no_supervision),
            ("no_fusion", &self.no_fusion),
            ("seed", &self.seed),
            ("steps", &self.steps),
            ("samples", &self.samples),
            ("residual_blocks", &self.residual_blocks),
            ("padding", &self.padding),
            ("expert_steps", &self.expert_steps),
            ("expert_lr", &self.expert_lr),
        ];
        for (k, v) in overrides {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn gradcheck(seeds: usize) -> Result<bool> {
    let seeds: Vec<u64> = (0..seeds as u64).map(|i| DEFAULT_SEEDS.get(i as usize).copied().unwrap_or(100 + i)).collect();
    let rep = run_suite(&seeds)?;
    for e in &rep.entries {
        let mark = if e.passed() { "ok  " } else { "FAIL" };
        println!("{mark} {:<24} max rel error {:.3e}", e.operator, e.max_rel_error);
    }
    println!(
        "{} operators, {} seeds, worst {:.3e} (tolerance {SUITE_TOLERANCE:.0e}), {:.1}s",
        rep.entries.len(),
        seeds.len(),
        rep.worst(),
        rep.seconds
    );
    Ok(rep.passed())
}

fn synth_data(out: PathBuf, frames: Option<usize>, cfg: &PipelineConfig) -> Result<()> {
    let frames = frames.unwrap_or_else(|| g4g::pipeline::synth::required_frames(cfg.samples));
    let video = synthesize_video(cfg.image_size, frames, cfg.seed, &AudioSource::Synthesized)?;
    fs::create_dir_all(&out)?;
    write_frame_dir(out.join("frames"), &video.frames)?;
    write_wav(out.join("audio.wav"), &video.clip)?;
    write_mel(out.join("audio.mel"), &video.mel)?;
    let mut csv = String::from("frame,opening\n");
    for (i, o) in video.openings.iter().enumerate() {
        csv.push_str(&format!("{i},{o}\n"));
    }
    fs::write(out.join("openings.csv"), csv)?;
    println!("wrote {frames} frames, audio and mel to {}", out.display());
    Ok(())
}

fn run_train(out: PathBuf, audio: Option<PathBuf>, cfg: &PipelineConfig) -> Result<()> {
    let source = match audio {
        Some(p) => AudioSource::Clip(load_wav(p)?),
        None => AudioSource::Synthesized,
    };
    let ds = generate_dataset(cfg.image_size, cfg.samples, cfg.seed, &source)?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let start = Instant::now();
    let res = train_with(cfg, &ds.samples, |r| {
        if r.step == 1 || r.step % 20 == 0 {
            println!("step {:>5}  total {:.5}  L_r {:.5}  L_con {:.4}", r.step, r.total, r.l_r, r.l_con);
        }
    })?;
    write_loss_csv(out.join("losses.csv"), &res.rows)?;
    checkpoint::save(out.join("model.ckpt"), &[&res.gen_params, &res.disc_params])?;
    let eval = evaluate(&res.generator, &res.gen_params, &ds.samples)?;
    write_frame_dir(out.join("generated"), &eval.generated)?;
    write_frame_dir(out.join("truth"), &eval.truth)?;
    write_wav(out.join("audio.wav"), &ds.video.clip)?;
    println!(
        "sync expert: {} steps, L_con {:.4} (target {:.4})",
        res.expert.steps, res.expert.final_loss, res.expert.target
    );
    println!(
        "total {:.5} -> {:.5}; masked L1 {:.5}; SSIM {:.5}; {:.1}s",
        res.first_total(),
        res.last_total(),
        eval.masked_l1,
        eval.ssim,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn run_eval(generated: PathBuf, reference: PathBuf, audio: Option<PathBuf>, out: PathBuf, plot: Option<PathBuf>) -> Result<()> {
    let gen = read_frame_dir(generated)?;
    let refs = read_frame_dir(reference)?;
    let mel = match audio {
        Some(p) => Some(mel_spectrogram(&load_wav(p)?)?),
        None => None,
    };
    let emb = RandomProjectionEmbedder::new(0, 32);
    let rep = report(&gen, &refs, mel.as_ref().map(|m| (m, VIDEO_FPS)), &emb)?;
    rep.write_csv(&out)?;
    if let Some(p) = plot {
        rep.write_svg(p)?;
    }
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "frames {}  PSNR {:.4} dB  SSIM {:.5}  MSE {:.6}  LSE-D {}  LSE-C {}",
        rep.frames(),
        rep.psnr,
        rep.ssim,
        rep.mse,
        opt(rep.lse_d),
        opt(rep.lse_c)
    );
    Ok(())
}

fn warp_demo(input: Option<PathBuf>, out: PathBuf, theta: f64, tx: f64, ty: f64, scale: f64, padding: &str) -> Result<()> {
    let img = match input {
        Some(p) => Image::read_pnm(p)?,
        None => render_frame(64, 0.5, &FaceStyle::from_seed(0)),
    };
    let padding = match padding {
        "border" => Padding::Border,
        "zeros" => Padding::Zeros,
        other => return Err(g4g::Error::Config(format!("padding must be border or zeros, got {other:?}"))),
    };
    let coeffs = AffineCoeffSet::uniform(img.channels, theta, tx, ty, scale);
    let warped = affine_warp(&img.to_tensor(), &coeffs, padding)?;
    Image::from_tensor(&warped)?.write_pnm(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gradcheck { seeds } => return gradcheck(seeds),
        Command::Melspec { audio, out, text } => {
            let mel = mel_spectrogram(&load_wav(audio)?)?;
            if text {
                write_mel_text(&out, &mel)?;
            } else {
                write_mel(&out, &mel)?;
            }
            println!("{} frames × {} bins -> {}", mel.frames, mel.bins, out.display());
        }
        Command::SynthData { out, frames, cfg } => synth_data(out, frames, &cfg.resolve()?)?,
        Command::Train { out, audio, cfg } => run_train(out, audio, &cfg.resolve()?)?,
        Command::Eval { generated, reference, audio, out, plot } => run_eval(generated, reference, audio, out, plot)?,
        Command::WarpDemo { input, out, theta, tx, ty, scale, padding } => {
            warp_demo(input, out, theta, tx, ty, scale, &padding)?
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
