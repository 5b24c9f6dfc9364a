use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use lic_cli::models::{checkpoint_path, load_quality, TrainFile};
use lic_cli::report::{complexity_summary, dump_attention, evaluate_image, report, EvalOptions};
use lic_core::checkpoint::{load_model, save_checkpoint};
use lic_core::coding::bitstream::Bitstream;
use lic_core::coding::codec::{analyse, decode_bytes, encode_latents, EncodeOptions};
use lic_core::config::CodecConfig;
use lic_core::data::{ingest_dataset, synthetic_image, IngestFilters, PatchSource, SyntheticPatches};
use lic_core::image_io::{load_image, pad_reflect, save_image};
use lic_core::model::{Model, SPATIAL_MULTIPLE};
use lic_core::refine::{refine, RefineConfig, RefineLogEntry};
use lic_core::train::{train_skip, train_stage1, train_stage2, StepStats};
use rand::SeedableRng;

#[derive(Parser)]
#[command(name = "lic", version, about = "Learned image codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Skip,
    All,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one operating point.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: Stage,
        /// Checkpoint to continue from (stage-1 weights for stage 2, a full
        /// model for the skip stage).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value = "models")]
        out: PathBuf,
    },
    /// Encode an image to a `.mlv2` bitstream.
    Encode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        quality: usize,
        #[arg(long, default_value = "models")]
        models: PathBuf,
        /// Refinement steps.
        #[arg(long)]
        refine: Option<usize>,
        #[arg(long, default_value_t = 1e-3)]
        refine_lr: f64,
        /// Refinement log as CSV.
        #[arg(long)]
        log_csv: Option<PathBuf>,
        #[arg(long)]
        no_skip: bool,
        #[arg(long)]
        bucketed: bool,
        /// Decode the result and fail with exit code 3 on any mismatch.
        #[arg(long)]
        verify: bool,
    },
    /// Decode a `.mlv2` bitstream.
    Decode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value = "models")]
        models: PathBuf,
    },
    /// Evaluate checkpoints on an image directory and write the report files.
    Eval {
        #[arg(long, default_value = "models")]
        models: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "report")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5")]
        qualities: Vec<usize>,
        #[arg(long)]
        no_skip: bool,
        #[arg(long, default_value_t = 0)]
        refine: usize,
    },
    /// Parameter/MAC summary and coding speed of a preset.
    Bench {
        #[arg(long, default_value = "desk")]
        preset: String,
        /// Use trained weights instead of a freshly initialised model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Refine the latents of one image and write the per-step trace.
    Refine {
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        quality: usize,
        #[arg(long, default_value = "models")]
        models: PathBuf,
        #[arg(long, default_value_t = 3000)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Per-step trace as CSV; printed to stdout when absent.
        #[arg(long)]
        log_csv: Option<PathBuf>,
        /// Also write the refined bitstream.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Write channel-attention maps and mean attention weights for one image.
    DumpAttn {
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        quality: usize,
        #[arg(long, default_value = "models")]
        models: PathBuf,
        #[arg(long, default_value = "attn")]
        out: PathBuf,
    },
}

#[derive(Debug)]
struct ConformanceFailure(String);

impl std::fmt::Display for ConformanceFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "conformance failure: {}", self.0)
    }
}

impl std::error::Error for ConformanceFailure {}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<ConformanceFailure>().is_some() {
            return 3;
        }
        if let Some(lic_core::Error::Format(_) | lic_core::Error::Parse(_)) = cause.downcast_ref::<lic_core::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write_log(path: &std::path::Path, log: &[StepStats]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in log {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

fn write_trace<W: std::io::Write>(mut wr: csv::Writer<W>, log: &[RefineLogEntry]) -> anyhow::Result<()> {
    wr.write_record(["step", "tau", "loss", "hard_loss", "bpp", "psnr"])?;
    for e in log {
        let hard = e.hard_loss.map(|v| v.to_string()).unwrap_or_default();
        wr.write_record([e.step.to_string(), e.tau.to_string(), e.loss.to_string(), hard, e.bpp.to_string(), e.psnr.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Train { config, stage, resume, out } => {
            let file = TrainFile::load(&config)?;
            let cfg = file.codec_config()?;
            let mut tc = file.train.clone();
            tc.checkpoint_dir.get_or_insert(out.join("stages"));
            std::fs::create_dir_all(&out)?;
            let dataset = match &file.data {
                Some(dir) => Some(ingest_dataset(dir, tc.patch_large, &IngestFilters { seed: tc.seed, ..Default::default() })?),
                None => None,
            };
            let mut synthetic = SyntheticPatches::new(tc.seed);
            let mut crops = dataset.as_ref().map(|d| d.patches(tc.seed));
            let data: &mut dyn PatchSource = match crops.as_mut() {
                Some(c) => c,
                None => &mut synthetic,
            };
            let mut log = Vec::new();
            let resumed = |p: &Option<PathBuf>| -> anyhow::Result<Model> {
                let p = p.as_ref().context("--resume is required for this stage")?;
                Ok(load_model(p)?.0)
            };
            let model = match stage {
                Stage::One => {
                    let (m, l) = train_stage1(&cfg, &tc, data)?;
                    log.extend(l);
                    m
                }
                Stage::Two => {
                    let s1 = resumed(&resume)?;
                    let (m, l) = train_stage2(&s1, &cfg, &tc, data)?;
                    log.extend(l);
                    m
                }
                Stage::Skip => {
                    let mut m = resumed(&resume)?;
                    log.extend(train_skip(&mut m, &tc, data)?);
                    m
                }
                Stage::All => {
                    let s1 = match &resume {
                        Some(p) => load_model(p)?.0,
                        None => {
                            let (m, l) = train_stage1(&cfg, &tc, data)?;
                            log.extend(l);
                            m
                        }
                    };
                    let (mut m, l) = train_stage2(&s1, &cfg, &tc, data)?;
                    log.extend(l);
                    log.extend(train_skip(&mut m, &tc, data)?);
                    m
                }
            };
            let dest = if stage == Stage::One { out.join(format!("q{}.stage1.ckpt", cfg.lambda_index)) } else { checkpoint_path(&out, cfg.lambda_index) };
            save_checkpoint(&dest, &model, if stage == Stage::One { 1 } else { 2 }, log.len())?;
            write_log(&out.join(format!("q{}.{}.log.csv", cfg.lambda_index, stage_name(stage))), &log)?;
            println!("saved {}", dest.display());
        }
        Cmd::Encode { input, output, quality, models, refine: steps, refine_lr, log_csv, no_skip, bucketed, verify } => {
            let model = load_quality(&models, quality)?;
            let x = load_image(&input)?;
            let (_, _, h, w) = x.dims4()?;
            let t = Instant::now();
            let padded = pad_reflect(&x, SPATIAL_MULTIPLE)?;
            let mut lat = analyse(&model, &padded)?;
            let refined = steps.is_some_and(|s| s > 0);
            if let Some(steps) = steps.filter(|&s| s > 0) {
                let rc = RefineConfig { steps, lr: refine_lr, ..RefineConfig::default() };
                let res = refine(&model, &padded, &lat, (h, w), &rc)?;
                log::info!("refinement: loss {:.5} -> {:.5} (best step {})", res.initial_loss, res.final_loss, res.best_step);
                if let Some(path) = &log_csv {
                    write_trace(csv::Writer::from_path(path)?, &res.log)?;
                }
                lat = res.latents;
            }
            let enc = encode_latents(&model, &lat, h, w, EncodeOptions { selective: !no_skip, bucketed }, refined)?;
            std::fs::write(&output, &enc.bytes)?;
            println!(
                "{} bytes, {:.4} bpp, {:.2} dB, {:.2}s",
                enc.bytes.len(),
                enc.bytes.len() as f64 * 8.0 / (h * w) as f64,
                lic_core::metrics::psnr(&x, &enc.x_hat)?,
                t.elapsed().as_secs_f64()
            );
            if verify {
                let dec = decode_bytes(&model, &enc.bytes)?;
                if dec.yhat != enc.yhat || dec.x_hat != enc.x_hat || dec.skip != enc.skip {
                    return Err(ConformanceFailure(format!("decoding {} does not reproduce the encoder", output.display())).into());
                }
            }
        }
        Cmd::Decode { input, output, models } => {
            let bytes = std::fs::read(&input)?;
            let bs = Bitstream::from_bytes(&bytes)?;
            let model = load_quality(&models, bs.header.lambda_index as usize)?;
            let dec = lic_core::coding::codec::decode_image(&model, &bs)?;
            save_image(&output, &dec.x_hat)?;
            println!("{}x{} -> {}", bs.header.orig_w, bs.header.orig_h, output.display());
        }
        Cmd::Eval { models, data, out, qualities, no_skip, refine } => {
            let cks: Vec<PathBuf> = qualities.iter().map(|&q| checkpoint_path(&models, q)).collect();
            let opts = EvalOptions { selective: !no_skip, bucketed: false, refine_steps: refine, refine_lr: 1e-3 };
            let summary = report(&cks, &data, &out, opts)?;
            for p in &summary.absent {
                println!("absent: {}", p.display());
            }
            for f in &summary.files {
                println!("wrote {}", f.display());
            }
            let bad = summary.conformance_failures();
            if bad > 0 {
                return Err(ConformanceFailure(format!("{bad} images did not decode identically")).into());
            }
        }
        Cmd::Bench { preset, checkpoint, size } => {
            let model = match checkpoint {
                Some(p) => load_model(&p)?.0,
                None => Model::new(CodecConfig::preset(&preset)?)?,
            };
            print!("{}", complexity_summary(&model.cfg)?);
            if size % SPATIAL_MULTIPLE != 0 || size == 0 {
                bail!("--size must be a positive multiple of {SPATIAL_MULTIPLE}");
            }
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
            let x = synthetic_image(&mut rng, size, size);
            let opts = EvalOptions { selective: true, ..Default::default() };
            let (row, _) = evaluate_image(&model, &x, "synthetic", opts)?;
            println!(
                "\n{size}x{size}: encode {:.3}s, decode {:.3}s, {:.4} bpp, {:.2} dB",
                row.encode_s, row.decode_s, row.bpp, row.psnr_db
            );
            if !row.conformant {
                return Err(ConformanceFailure("bench image did not decode identically".into()).into());
            }
        }
        Cmd::Refine { input, quality, models, steps, lr, log_csv, output } => {
            let model = load_quality(&models, quality)?;
            let x = load_image(&input)?;
            let (_, _, h, w) = x.dims4()?;
            let padded = pad_reflect(&x, SPATIAL_MULTIPLE)?;
            let lat = analyse(&model, &padded)?;
            let res = refine(&model, &padded, &lat, (h, w), &RefineConfig { steps, lr, ..RefineConfig::default() })?;
            match &log_csv {
                Some(path) => write_trace(csv::Writer::from_path(path)?, &res.log)?,
                None => write_trace(csv::Writer::from_writer(std::io::stdout()), &res.log)?,
            }
            eprintln!(
                "RD loss {:.5} -> {:.5} ({:+.2}%), best step {}",
                res.initial_loss,
                res.final_loss,
                100.0 * (res.final_loss / res.initial_loss - 1.0),
                res.best_step
            );
            if let Some(out) = output {
                let enc = encode_latents(&model, &res.latents, h, w, EncodeOptions { selective: true, bucketed: false }, true)?;
                std::fs::write(&out, &enc.bytes)?;
                eprintln!("{} bytes -> {}", enc.bytes.len(), out.display());
            }
        }
        Cmd::DumpAttn { input, quality, models, out } => {
            let model = load_quality(&models, quality)?;
            let x = load_image(&input)?;
            for f in dump_attention(&model, &x, &out)? {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::One => "stage1",
        Stage::Two => "stage2",
        Stage::Skip => "skip",
        Stage::All => "all",
    }
}
