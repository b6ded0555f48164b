use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use dcst::data::{generate_dataset, load_dataset, load_image, save_dataset, save_pgm, SceneSample};
use dcst::error::Error;
use dcst::instance::{format_predictions, localize, Connectivity};
use dcst::tensor::{BatchNormMode, NoGradGuard, Tensor};
use dcst::train::{evaluate, prepare_data, threshold_sweep, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "dcst", version, about = "Crowd instance localization with a dilated-conv Swin transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; checkpoints go to the config's `train.checkpoint`.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config entry, e.g. `--set train.iters=500`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Localization and counting metrics on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        threshold: f32,
    },
    /// Writes `<out>.txt` with instance centroids and `<out>.pgm` with the overlay.
    Localize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        threshold: f32,
    },
    /// Evaluates every threshold of the grid and prints CSV.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated thresholds; defaults to the checkpoint's grid.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f32>>,
        /// Also write the CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Writes the config's synthetic scenes as a dataset directory.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

const USAGE: u8 = 1;
const DATA: u8 = 2;
const NUMERIC: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => NUMERIC,
        Error::Config(_) | Error::InvalidArgument { .. } => USAGE,
        _ => DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> dcst::error::Result<()> {
    match cmd {
        Command::Train { config, overrides } => train(&config, &overrides),
        Command::Eval { ckpt, data, threshold } => {
            let trainer = Trainer::load(&ckpt)?;
            let samples = load_dataset(&data)?;
            let r = evaluate(&trainer.model, &samples, threshold)?;
            let (l, c) = (&r.localization, &r.counting);
            println!("images {} threshold {threshold}", r.images);
            println!("tp {} fp {} fn {}", r.tp, r.fp, r.fn_count);
            println!("precision {:.4} recall {:.4} f1 {:.4}", l.precision, l.recall, l.f1);
            println!("mae {:.4} mse {:.4} nae {:.4}", c.mae, c.mse, c.nae);
            Ok(())
        }
        Command::Localize { ckpt, image, out, threshold } => localize_image(&ckpt, &image, &out, threshold),
        Command::Sweep { ckpt, data, grid, csv } => {
            let trainer = Trainer::load(&ckpt)?;
            let samples = load_dataset(&data)?;
            let grid = grid.unwrap_or_else(|| trainer.config.thresholds.clone());
            let sweep = threshold_sweep(&trainer.model, &samples, &grid)?;
            let text = sweep.to_csv();
            print!("{text}");
            if let Some(path) = csv {
                fs::write(path, &text)?;
            }
            eprintln!("best f1 at {:.2}, best mae at {:.2}", sweep.best_f1, sweep.best_mae);
            Ok(())
        }
        Command::GenData { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let samples = generate_dataset(&cfg.synthetic, cfg.scenes)?;
            save_dataset(&out, &samples)?;
            println!("wrote {} scenes to {}", samples.len(), out.display());
            Ok(())
        }
    }
}

fn train(path: &Path, overrides: &[String]) -> dcst::error::Result<()> {
    let mut config = TrainConfig::load(path)?;
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got {o:?}")))?;
        config.set(k.trim(), v.trim())?;
    }
    config.validate()?;
    if let Some(dir) = config.checkpoint.as_ref().and_then(|p| p.parent()) {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let (train, val) = prepare_data(&config)?;
    println!("{} train / {} val scenes", train.len(), val.len());
    let every = config.log_every.max(1);
    let mut trainer = Trainer::new(config)?;
    let start = Instant::now();
    let mut window = Vec::new();
    trainer.run(&train, |iter, loss| {
        window.push(loss as f64);
        if iter % every == 0 {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            println!("iter {iter} loss {mean:.5} ({:.0}s)", start.elapsed().as_secs_f64());
            window.clear();
        }
    })?;
    if !val.is_empty() {
        let sweep = threshold_sweep(&trainer.model, &val, &trainer.config.thresholds)?;
        let f = sweep.best_f1_row();
        let m = sweep.best_mae_row();
        println!("val best f1 {:.4} at {:.2}", f.report.localization.f1, f.threshold);
        println!("val best mae {:.4} at {:.2}", m.report.counting.mae, m.threshold);
    }
    Ok(())
}

fn localize_image(ckpt: &Path, image: &Path, out: &Path, threshold: f32) -> dcst::error::Result<()> {
    let trainer = Trainer::load(ckpt)?;
    let (pixels, h, w) = load_image(image)?;
    let sample = SceneSample { id: String::new(), height: h, width: w, image: pixels, heads: Vec::new() };
    let score = {
        let _g = NoGradGuard::new();
        let x: Tensor = sample.image_tensor()?;
        trainer.model.forward(&x, BatchNormMode::Eval)?.to_vec()
    };
    let instances = localize(&score, h, w, threshold, Connectivity::Eight)?;
    // dimmed grayscale image, brightened by the score, centroids in white
    let mut overlay: Vec<f32> = (0..h * w)
        .map(|i| {
            let lum = 0.299 * sample.image[i] + 0.587 * sample.image[h * w + i] + 0.114 * sample.image[2 * h * w + i];
            0.4 * lum + 0.6 * score[i]
        })
        .collect();
    for inst in &instances {
        let (x, y) = (inst.centroid.0.round() as usize, inst.centroid.1.round() as usize);
        overlay[y.min(h - 1) * w + x.min(w - 1)] = 1.0;
    }
    fs::write(out.with_extension("txt"), format_predictions(&instances, threshold))?;
    save_pgm(out.with_extension("pgm"), &overlay, h, w)?;
    println!("{} instances", instances.len());
    Ok(())
}
