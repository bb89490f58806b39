//! Batch CLI for training, evaluating, and running the rain+haze removal
//! network, plus the synthetic data generator and parameter census.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::Array3;

use adunet::checkpoint::load_checkpoint;
use adunet::config::load_config;
use adunet::data::{load_paired, split, write_synth_dataset, SynthParams};
use adunet::image::Image;
use adunet::network::{count_parameters, forward};
use adunet::trainer::{evaluate, input_metrics, train, Monitor, TrainConfig};

#[derive(Parser)]
#[command(name = "adunet", version, about = "Joint rain and haze removal")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a network and write checkpoints plus a training report.
    Train {
        /// Network config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Dataset root containing input/ and gt/.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints and the report.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Master seed (falls back to ADUNET_SEED, then 0). Overrides the
        /// config's init_seed so a run is fully determined by one value.
        #[arg(long)]
        seed: Option<u64>,
        /// Fraction of pairs held out for validation.
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        /// Resize target as HEIGHTxWIDTH (both divisible by 16).
        #[arg(long, default_value = "64x64")]
        size: String,
    },
    /// Evaluate a checkpoint on a paired dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics JSON output path.
        #[arg(long, default_value = "metrics.json")]
        out: PathBuf,
        #[arg(long, default_value = "64x64")]
        size: String,
    },
    /// Restore every PNG in a directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write display-normalized residual PNGs, their raw f32 dumps,
        /// and a sidecar JSON with the raw value ranges.
        #[arg(long)]
        dump_residuals: bool,
    },
    /// Generate a synthetic rain+haze dataset.
    Synth {
        /// Number of pairs.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "64x64")]
        size: String,
        #[arg(long, default_value_t = 0.3)]
        beta_min: f32,
        #[arg(long, default_value_t = 1.0)]
        beta_max: f32,
        #[arg(long, default_value_t = 15)]
        streaks_min: usize,
        #[arg(long, default_value_t = 45)]
        streaks_max: usize,
    },
    /// Print the learnable-parameter breakdown for a config.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
}

enum CliError {
    Usage(String),
    Runtime(adunet::Error),
}

impl From<adunet::Error> for CliError {
    fn from(e: adunet::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            std::process::exit(1);
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), CliError> {
    let parts: Vec<&str> = s.split('x').collect();
    let err = || CliError::Usage(format!("--size must be HEIGHTxWIDTH, got {s:?}"));
    if parts.len() != 2 {
        return Err(err());
    }
    let h: usize = parts[0].parse().map_err(|_| err())?;
    let w: usize = parts[1].parse().map_err(|_| err())?;
    if h == 0 || w == 0 {
        return Err(err());
    }
    Ok((h, w))
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("ADUNET_SEED")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(0)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Train {
            config,
            data,
            out,
            epochs,
            batch_size,
            lr,
            seed,
            val_fraction,
            size,
        } => {
            let size = parse_size(&size)?;
            if !(val_fraction > 0.0 && val_fraction < 1.0) {
                return Err(CliError::Usage(format!(
                    "--val-fraction {val_fraction} outside (0, 1)"
                )));
            }
            let seed = resolve_seed(seed);
            let mut net_cfg = load_config(&config)?;
            net_cfg.init_seed = seed;
            let ds = load_paired(&data, size)?;
            let (train_ds, val_ds) = split(&ds, 1.0 - val_fraction, seed)?;
            println!(
                "training on {} pairs, validating on {} ({}x{})",
                train_ds.len(),
                val_ds.len(),
                size.0,
                size.1
            );
            let tcfg = TrainConfig {
                epochs,
                batch_size,
                lr,
                plateau_factor: 0.1,
                plateau_patience: 5,
                monitor: Monitor::ValPsnr,
                seed,
                checkpoint_dir: Some(out.clone()),
                eval_every: 1,
            };
            let (_, report) = train(&net_cfg, &tcfg, &train_ds, &val_ds)?;
            for e in &report.epochs {
                println!(
                    "epoch {:>3}  loss {:>9.5}  lr {:>8.1e}  val psnr {:>6.2} dB  ssim {:.4}  ({:.1}s)",
                    e.epoch,
                    e.train_loss,
                    e.lr,
                    e.val_psnr.unwrap_or(f64::NAN),
                    e.val_ssim.unwrap_or(f64::NAN),
                    e.seconds
                );
            }
            println!(
                "best epoch {} (val psnr {:.2} dB); checkpoints in {}",
                report.best_epoch,
                report.best_val_psnr,
                out.display()
            );
            Ok(())
        }
        Cmd::Eval { ckpt, data, out, size } => {
            let size = parse_size(&size)?;
            let ck = load_checkpoint(&ckpt)?;
            let ds = load_paired(&data, size)?;
            let raw = input_metrics(&ds)?;
            let m = evaluate(&ck.store, &ck.config, &ds)?;
            println!(
                "input:    PSNR {:.4} dB  SSIM {:.6}  ({} pairs)",
                raw.psnr, raw.ssim, raw.count
            );
            println!(
                "restored: PSNR {:.4} dB  SSIM {:.6}  ({} pairs)",
                m.psnr, m.ssim, m.count
            );
            let json = serde_json::json!({
                "input": {"psnr": raw.psnr, "ssim": raw.ssim},
                "restored": {"psnr": m.psnr, "ssim": m.ssim},
                "count": m.count,
            });
            std::fs::write(&out, serde_json::to_string_pretty(&json).unwrap())
                .map_err(|e| adunet::Error::io(out.clone(), e))?;
            println!("metrics written to {}", out.display());
            Ok(())
        }
        Cmd::Infer {
            ckpt,
            input,
            out,
            dump_residuals,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            std::fs::create_dir_all(&out).map_err(|e| adunet::Error::io(out.clone(), e))?;
            let mut files: Vec<PathBuf> = std::fs::read_dir(&input)
                .map_err(|e| adunet::Error::io(input.clone(), e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(CliError::Runtime(adunet::Error::Data(format!(
                    "no PNG files in {}",
                    input.display()
                ))));
            }
            for path in &files {
                infer_one(path, &out, &ck.store, &ck.config, dump_residuals)?;
            }
            println!("restored {} images into {}", files.len(), out.display());
            Ok(())
        }
        Cmd::Synth {
            n,
            seed,
            out,
            size,
            beta_min,
            beta_max,
            streaks_min,
            streaks_max,
        } => {
            let (h, w) = parse_size(&size)?;
            let params = SynthParams {
                height: h,
                width: w,
                beta_range: (beta_min, beta_max),
                streak_count: (streaks_min, streaks_max),
                seed: resolve_seed(seed),
                ..Default::default()
            };
            params.validate()?;
            write_synth_dataset(&params, n, &out)?;
            println!("wrote {n} synthetic pairs under {}", out.display());
            Ok(())
        }
        Cmd::Params { config } => {
            let cfg = load_config(&config)?;
            let breakdown = count_parameters(&cfg);
            print!("{}", breakdown.table());
            println!("total parameters: {:.3}M", breakdown.total as f64 / 1e6);
            Ok(())
        }
    }
}

/// Mirror-pad (no edge repeat) on the bottom/right so dims divide by 16.
fn reflect_pad(data: &Array3<f32>, ph: usize, pw: usize) -> Result<Array3<f32>, adunet::Error> {
    let (c, h, w) = (data.shape()[0], data.shape()[1], data.shape()[2]);
    if ph >= h || pw >= w {
        return Err(adunet::Error::Shape(format!(
            "image {h}x{w} too small to reflect-pad by {ph}x{pw}"
        )));
    }
    let mut out = Array3::zeros((c, h + ph, w + pw));
    for ci in 0..c {
        for y in 0..h + ph {
            let sy = if y < h { y } else { 2 * h - 2 - y };
            for x in 0..w + pw {
                let sx = if x < w { x } else { 2 * w - 2 - x };
                out[[ci, y, x]] = data[[ci, sy, sx]];
            }
        }
    }
    Ok(out)
}

fn crop(data: &Array3<f32>, h: usize, w: usize) -> Array3<f32> {
    data.slice(ndarray::s![.., ..h, ..w]).to_owned()
}

fn write_raw_f32(path: &Path, data: &Array3<f32>) -> Result<(), adunet::Error> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| adunet::Error::io(path, e))
}

/// Affine-normalize a signed map into [0,1] for display.
fn normalize_for_display(data: &Array3<f32>) -> (Array3<f32>, f32, f32) {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in data.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let norm = if hi > lo {
        data.mapv(|v| (v - lo) / (hi - lo))
    } else {
        Array3::from_elem(data.raw_dim(), 0.5)
    };
    (norm, lo, hi)
}

fn infer_one(
    path: &Path,
    out_dir: &Path,
    store: &adunet::ParameterStore,
    cfg: &adunet::NetworkConfig,
    dump_residuals: bool,
) -> Result<(), CliError> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| adunet::Error::Data(format!("bad file name {}", path.display())))?
        .to_string();
    let img = Image::load_png(path)?;
    let (h, w) = (img.height(), img.width());
    let ph = (16 - h % 16) % 16;
    let pw = (16 - w % 16) % 16;
    let padded = if ph > 0 || pw > 0 {
        Image::from_unclamped(reflect_pad(img.data(), ph, pw)?)?
    } else {
        img.clone()
    };
    let result = forward(&padded, store, cfg)?;
    let restored_raw = crop(&result.pre_clamp, h, w);
    let cres = crop(&result.contamination_residual, h, w);
    let sres = crop(&result.scene_residual, h, w);
    let restored = Image::from_unclamped(restored_raw.clone())?;
    restored.save_png(out_dir.join(format!("{stem}.png")))?;

    if dump_residuals {
        let (cn, c_lo, c_hi) = normalize_for_display(&cres);
        let (sn, s_lo, s_hi) = normalize_for_display(&sres);
        Image::from_unclamped(cn)?.save_png(out_dir.join(format!("{stem}_cres.png")))?;
        Image::from_unclamped(sn)?.save_png(out_dir.join(format!("{stem}_sres.png")))?;
        write_raw_f32(&out_dir.join(format!("{stem}_cres.f32")), &cres)?;
        write_raw_f32(&out_dir.join(format!("{stem}_sres.f32")), &sres)?;
        write_raw_f32(&out_dir.join(format!("{stem}_restored_raw.f32")), &restored_raw)?;
        let sidecar = serde_json::json!({
            "stem": stem,
            "height": h,
            "width": w,
            "cres": {"min": c_lo, "max": c_hi, "raw": format!("{stem}_cres.f32")},
            "sres": {"min": s_lo, "max": s_hi, "raw": format!("{stem}_sres.f32")},
            "restored_raw": format!("{stem}_restored_raw.f32"),
        });
        let sp = out_dir.join(format!("{stem}_residuals.json"));
        std::fs::write(&sp, serde_json::to_string_pretty(&sidecar).unwrap())
            .map_err(|e| adunet::Error::io(sp, e))?;
    }
    Ok(())
}
