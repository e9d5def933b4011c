use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use wscd::data::{self, load_pair_dataset, write_split, Split, SynthSpec};
use wscd::harness::config::{parse_list, parse_override};
use wscd::harness::sweep::{sweep_alpha, to_csv};
use wscd::harness::train::{load_split, model_from_checkpoint};
use wscd::harness::{evaluate, Checkpoint, LogLine, RunConfig, Trainer, Which};
use wscd::metrics::Metrics;

const CHECKPOINT_FILE: &str = "checkpoint.wscd";
const CONFIG_FILE: &str = "config.ini";
const LOG_FILE: &str = "log.jsonl";

#[derive(Parser)]
#[command(name = "wscd", version, about = "Weakly-supervised change detection from image-level labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/val/test dataset in the A/B/label layout.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        /// Training pairs; val and test get a quarter of this each.
        #[arg(long, default_value_t = 128)]
        num: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        changed_ratio: f64,
    },
    /// Train a model; writes the resolved config, a JSON-lines log and a checkpoint to output.dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config value, e.g. `--set train.max_iterations=200`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `final` when the model has a decoder.
        #[arg(long)]
        which: Option<Which>,
    },
    /// Predict the change mask and CAM of one image pair.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        post: PathBuf,
        #[arg(long)]
        out_mask: PathBuf,
        #[arg(long)]
        out_cam: PathBuf,
        #[arg(long)]
        which: Option<Which>,
    },
    /// Train once per penalty weight and tabulate the evaluation metrics.
    SweepAlpha {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated list, e.g. `0,0.2,0.5,1.0`.
        #[arg(long)]
        alphas: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenSynth {
            out,
            num,
            size,
            seed,
            changed_ratio,
        } => gen_synth(&out, num, size, seed, changed_ratio),
        Command::Train { config, set, resume } => train(&config, &set, resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            which,
        } => eval(&checkpoint, &data, split, &out, which),
        Command::Predict {
            checkpoint,
            pre,
            post,
            out_mask,
            out_cam,
            which,
        } => predict(&checkpoint, &pre, &post, &out_mask, &out_cam, which),
        Command::SweepAlpha { config, alphas, out, set } => sweep(&config, &alphas, &out, &set),
    }
}

fn gen_synth(out: &Path, num: usize, size: usize, seed: u64, changed_ratio: f64) -> Result<()> {
    let spec = SynthSpec {
        num_pairs: num,
        size,
        changed_ratio,
        seed,
        ..SynthSpec::default()
    };
    for split in [Split::Train, Split::Val, Split::Test] {
        let pairs = data::generate_split(&spec, split)?;
        let dir = write_split(out, split, &pairs)?;
        println!("{split}: {} pairs in {}", pairs.len(), dir.display());
    }
    Ok(())
}

fn load_config(path: &Path, set: &[String]) -> Result<RunConfig> {
    let overrides = set.iter().map(|s| parse_override(s)).collect::<wscd::Result<Vec<_>>>()?;
    RunConfig::load(path, &overrides).with_context(|| format!("loading {}", path.display()))
}

fn which_for(model: &wscd::model::Model, which: Option<Which>) -> Which {
    which.unwrap_or(if model.has_decoder() { Which::Final } else { Which::Initial })
}

fn train(config: &Path, set: &[String], resume: Option<&Path>) -> Result<()> {
    let run = load_config(config, set)?;
    let out = &run.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(CONFIG_FILE), run.to_ini())?;

    let train_data = load_split(&run, run.data.train_split).context("loading the training split")?;
    let eval_data = match load_split(&run, run.data.eval_split) {
        Ok(d) if !d.is_empty() && d.iter().all(|p| p.gt.is_some()) => Some(d),
        Ok(_) => {
            eprintln!("{} split has no pixel labels; periodic evaluation disabled", run.data.eval_split);
            None
        }
        Err(e) => {
            eprintln!("{} split unavailable ({e}); periodic evaluation disabled", run.data.eval_split);
            None
        }
    };
    let mut trainer = match resume {
        Some(path) => Trainer::resume(&run, Checkpoint::load(path)?, &train_data)?,
        None => Trainer::new(&run, &train_data)?,
    };

    let mut log = BufWriter::new(File::create(out.join(LOG_FILE))?);
    let mut io_error = None;
    trainer.run(eval_data.as_deref(), &mut |line: &LogLine| {
        let text = serde_json::to_string(line).expect("log lines serialise");
        println!("{text}");
        if let Err(e) = writeln!(log, "{text}") {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e).context("writing the training log");
    }
    log.flush()?;
    let path = out.join(CHECKPOINT_FILE);
    trainer.checkpoint().save(&path)?;
    println!("checkpoint written to {}", path.display());
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, split: Split, out: &Path, which: Option<Which>) -> Result<()> {
    let (_, model) = model_from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let pairs = load_pair_dataset(data, split)?;
    let which = which_for(&model, which);
    let report = evaluate(&model, &pairs, which)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, serde_json::to_string_pretty(&report)?)?;
    println!("{}", Metrics::CSV_HEADER);
    println!("{}", report.metrics.csv_row(split.as_str()));
    println!("image accuracy {:.4} ({which}, {} pairs)", report.image_accuracy, report.num_pairs);
    Ok(())
}

fn predict(
    checkpoint: &Path,
    pre: &Path,
    post: &Path,
    out_mask: &Path,
    out_cam: &Path,
    which: Option<Which>,
) -> Result<()> {
    let (_, model) = model_from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let a = data::load_rgb(pre)?;
    let b = data::load_rgb(post)?;
    if a.shape() != b.shape() {
        bail!("pre image is {:?} but post image is {:?}", a.shape(), b.shape());
    }
    let shape = [1, 3, a.shape()[1], a.shape()[2]];
    let p = model.predict(&a.reshape(&shape), &b.reshape(&shape))?;
    let mask = match which_for(&model, which) {
        Which::Initial => &p.pred_init[0],
        Which::Final => match &p.pred_final {
            Some(m) => &m[0],
            None => bail!("mode {} has no decoder output", model.config.mode),
        },
    };
    data::save_mask(mask, out_mask)?;
    data::save_gray(&p.cam.sample(0), out_cam)?;
    let verdict = if p.p_cls[0] >= 0.0 { "changed" } else { "unchanged" };
    println!("{verdict} (logit {:.4}), {} changed pixels", p.p_cls[0], mask.count_ones());
    Ok(())
}

fn sweep(config: &Path, alphas: &str, out: &Path, set: &[String]) -> Result<()> {
    let run = load_config(config, set)?;
    let alphas: Vec<f64> = parse_list(alphas).map_err(|_| anyhow::anyhow!("cannot parse alpha list `{alphas}`"))?;
    let train_data = load_split(&run, run.data.train_split)?;
    let eval_data = load_split(&run, run.data.eval_split)?;
    let rows = sweep_alpha(&run, &alphas, &train_data, &eval_data)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let csv = to_csv(&rows);
    fs::write(out, &csv)?;
    print!("{csv}");
    Ok(())
}
