use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use segmatte::checkpoint::Checkpoint;
use segmatte::heads::Task;
use segmatte::train::{TrainConfig, Trainer};
use segmatte::{io, Error, Result};

#[derive(Parser)]
#[command(name = "segmatte", version, about = "Prompted segmentation and matting on a toy backbone")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on synthetic composites from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `checkpoint_path` from the config.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Overrides `log_path` from the config.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Predict seg.png and matte.png for one image in a single forward pass.
    Infer {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Plain decoder without the multi-view adapter path.
        #[arg(long)]
        no_adapter: bool,
    },
    /// Score prediction PNGs against same-named ground-truth PNGs.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// mIoU on synthetic samples as a function of the number of point prompts.
    SweepPoints {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
        ks: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write synthetic image/alpha/mask PNGs, e.g. for trying `infer` and `eval`.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Prompt(_) => 2,
        Error::Shape(_) => 3,
        Error::EmptyEvaluation => 4,
        _ => 1,
    }
}

fn train(config: PathBuf, ckpt: Option<PathBuf>, log: Option<PathBuf>) -> Result<()> {
    let mut cfg = TrainConfig::from_json(&std::fs::read_to_string(config)?)?;
    if let Some(p) = ckpt {
        cfg.checkpoint_path = Some(p.display().to_string());
    }
    if let Some(p) = log {
        cfg.log_path = Some(p.display().to_string());
    }
    let mut trainer: Trainer = Trainer::new(cfg.clone())?;
    let sink = cfg.log_path.as_ref().map(File::create).transpose()?.map(BufWriter::new);
    let logs = trainer.run(sink)?;
    if let (Some(first), Some(last)) = (logs.first(), logs.last()) {
        info!("trained {} steps, loss {:.4} -> {:.4}", logs.len(), first.loss.total, last.loss.total);
    }
    if let Some(p) = &cfg.checkpoint_path {
        trainer.checkpoint().save(p)?;
        info!("checkpoint written to {p}");
    }
    Ok(())
}

fn infer(image: PathBuf, prompts: PathBuf, ckpt: PathBuf, out_dir: PathBuf, no_adapter: bool) -> Result<()> {
    let img = io::read_rgb::<f64>(&image)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Shape(format!("image is {w}x{h}; both sides must be divisible by 32")));
    }
    let prompts = io::read_prompts(&prompts, h, w)?;
    let model = Checkpoint::<f64>::load(&ckpt)?.model;
    let (seg, matte) = model.predict(&img.reshape(&[1, 3, h, w])?, &[prompts], !no_adapter)?;
    std::fs::create_dir_all(&out_dir)?;
    io::write_gray(out_dir.join("seg.png"), &seg)?;
    io::write_gray(out_dir.join("matte.png"), &matte)?;
    Ok(())
}

fn eval(pred: PathBuf, gt: PathBuf, task: Task, json: Option<PathBuf>, csv: Option<PathBuf>) -> Result<()> {
    let report = io::evaluate_dirs(&pred, &gt, task)?;
    let text = report.to_json()?;
    match json {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    if let Some(p) = csv {
        report.write_csv(File::create(p)?)?;
    }
    Ok(())
}

fn sweep(ckpt: PathBuf, ks: Vec<usize>, images: usize, seed: u64) -> Result<()> {
    let model = Checkpoint::<f64>::load(&ckpt)?.model;
    let rows = io::sweep_points(&model, &ks, images, seed)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "k,miou")?;
    for (k, m) in rows {
        writeln!(out, "{k},{m:.6}")?;
    }
    Ok(())
}

fn synth(out_dir: PathBuf, count: u64, size: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(&out_dir)?;
    for i in 0..count {
        let s = segmatte::synth::generate_sample::<f64>(seed + i, size)?;
        io::write_rgb(out_dir.join(format!("{i:04}_image.png")), &s.image)?;
        io::write_gray(out_dir.join(format!("{i:04}_alpha.png")), &s.alpha)?;
        io::write_gray(out_dir.join(format!("{i:04}_mask.png")), &s.mask)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Train { config, ckpt, log } => train(config, ckpt, log),
        Cmd::Infer { image, prompts, ckpt, out_dir, no_adapter } => infer(image, prompts, ckpt, out_dir, no_adapter),
        Cmd::Eval { pred, gt, task, json, csv } => eval(pred, gt, task, json, csv),
        Cmd::SweepPoints { ckpt, ks, images, seed } => sweep(ckpt, ks, images, seed),
        Cmd::Synth { out_dir, count, size, seed } => synth(out_dir, count, size, seed),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
