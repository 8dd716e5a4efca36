use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use sutrack::checkpoint;
use sutrack::config::RunConfig;
use sutrack::data::container::{read_dataset, write_dataset};
use sutrack::data::gen::{make_dataset, DatasetSpec};
use sutrack::data::metrics::evaluate;
use sutrack::geom::PixelBox;
use sutrack::model::Model;
use sutrack::tracker::{parse_result_line, result_line};
use sutrack::train::{run_tracker, task_eval, tracking_eval, train, TrainRow};

#[derive(Parser)]
#[command(
    name = "sutrack",
    version,
    about = "Multi-modal single-object tracking on synthetic benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        /// JSON config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Config override `key=value`; repeatable, last wins.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train a model; writes a checkpoint and a loss-curve CSV beside it.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory from `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Track every sequence in a dataset; one result file per sequence.
    Track {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for per-sequence result files.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Score predicted tracks against a dataset's ground truth.
    Eval {
        /// Directory of result files from `track`.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and evaluate one variant per value of a config axis.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Axis to sweep, e.g. `token_type_mode=none,hard,soft`.
        #[arg(long, value_name = "KEY=V1,V2,...")]
        axis: String,
        /// Comparison table output path.
        #[arg(long, default_value = "ablate.csv")]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn main() -> Result<()> {
    if let Ok(threads) = std::env::var("SUTRACK_THREADS") {
        let n: usize = threads
            .parse()
            .with_context(|| format!("SUTRACK_THREADS=`{threads}` is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool already initialized")?;
    }
    match Cli::parse().command {
        Command::Gen { config, out, set } => cmd_gen(config.as_deref(), &out, &set),
        Command::Train {
            config,
            data,
            out,
            set,
        } => cmd_train(config.as_deref(), &data, &out, &set),
        Command::Track {
            ckpt,
            data,
            out,
            config,
            set,
        } => cmd_track(&ckpt, &data, &out, config.as_deref(), &set),
        Command::Eval { pred, data } => cmd_eval(&pred, &data),
        Command::Ablate {
            config,
            axis,
            out,
            set,
        } => cmd_ablate(config.as_deref(), &axis, &out, &set),
    }
}

fn load_config(path: Option<&Path>, set: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in set {
        cfg.apply_set(kv)?;
    }
    Ok(cfg)
}

fn dataset_spec(cfg: &RunConfig) -> Result<DatasetSpec> {
    Ok(DatasetSpec {
        sequences: cfg.gen_sequences,
        length: cfg.gen_frames,
        frame_size: cfg.gen_frame_size,
        target_size: cfg.gen_target_size,
        distractors: cfg.gen_distractors,
        camouflage: cfg.gen_camouflage,
        tasks: cfg.gen_tasks()?,
        seed: cfg.seed,
    })
}

fn cmd_gen(config: Option<&Path>, out: &Path, set: &[String]) -> Result<()> {
    let cfg = load_config(config, set)?;
    let seqs = make_dataset(&dataset_spec(&cfg)?);
    write_dataset(out, &seqs)?;
    println!(
        "wrote {} sequences of {} frames to {}",
        seqs.len(),
        cfg.gen_frames,
        out.display()
    );
    Ok(())
}

fn cmd_train(config: Option<&Path>, data: &Path, out: &Path, set: &[String]) -> Result<()> {
    let cfg = load_config(config, set)?;
    let pool = read_dataset(data)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let csv_path = out.with_extension("losses.csv");
    let mut csv = std::io::BufWriter::new(
        fs::File::create(&csv_path)
            .with_context(|| format!("cannot create {}", csv_path.display()))?,
    );
    writeln!(csv, "{}", TrainRow::CSV_HEADER)?;

    let report_every = (cfg.steps / 20).max(1);
    let mut write_err = None;
    let model = train(&pool, &cfg, |row| {
        if let Err(e) = writeln!(csv, "{}", row.to_csv()) {
            write_err.get_or_insert(e);
        }
        if row.step % report_every == 0 || row.step + 1 == cfg.steps {
            println!(
                "step {}/{} class {:.4} iou {:.4} l1 {:.4} task {:.4} total {:.4}",
                row.step, cfg.steps, row.class, row.iou, row.l1, row.task, row.total
            );
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("while writing {}", csv_path.display()));
    }
    csv.flush()?;
    checkpoint::save(out, &model.params)?;
    println!(
        "wrote checkpoint {} and curve {}",
        out.display(),
        csv_path.display()
    );
    Ok(())
}

fn load_model(ckpt: &Path, cfg: &RunConfig) -> Result<Model> {
    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    checkpoint::load_into(ckpt, &mut model.params)
        .with_context(|| format!("checkpoint {} does not fit this config", ckpt.display()))?;
    Ok(model)
}

fn cmd_track(
    ckpt: &Path,
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    set: &[String],
) -> Result<()> {
    let cfg = load_config(config, set)?;
    let model = load_model(ckpt, &cfg)?;
    let pool = read_dataset(data)?;
    fs::create_dir_all(out)?;
    let results: Vec<Result<PathBuf>> = pool
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let track = run_tracker(&model, seq, &cfg)?;
            let mut text = String::new();
            for (idx, (bx, conf)) in track.iter().enumerate() {
                text.push_str(&result_line(idx, bx, *conf));
                text.push('\n');
            }
            let path = out.join(format!("seq_{i:04}.txt"));
            fs::write(&path, text)?;
            Ok(path)
        })
        .collect();
    for r in &results {
        if let Err(e) = r {
            bail!("tracking failed: {e:#}");
        }
    }
    println!("wrote {} result files to {}", results.len(), out.display());
    Ok(())
}

fn cmd_eval(pred: &Path, data: &Path) -> Result<()> {
    let pool = read_dataset(data)?;
    let mut pred_boxes = Vec::new();
    let mut gt_boxes = Vec::new();
    for (i, seq) in pool.iter().enumerate() {
        let path = pred.join(format!("seq_{i:04}.txt"));
        let text = fs::read_to_string(&path)
            .with_context(|| format!("missing prediction file {}", path.display()))?;
        let mut by_frame: Vec<Option<PixelBox>> = vec![None; seq.len()];
        for (ln, line) in text.lines().enumerate() {
            let (idx, bx, _conf) = parse_result_line(line).with_context(|| {
                format!("{}:{}: malformed result line", path.display(), ln + 1)
            })?;
            if idx >= seq.len() {
                bail!(
                    "{}: frame index {idx} out of range for a {}-frame sequence",
                    path.display(),
                    seq.len()
                );
            }
            by_frame[idx] = Some(bx);
        }
        for (idx, slot) in by_frame.iter().enumerate() {
            let bx = slot
                .with_context(|| format!("{}: no line for frame {idx}", path.display()))?;
            pred_boxes.push(bx);
            gt_boxes.push(seq.boxes[idx]);
        }
    }
    let metrics = evaluate(&pred_boxes, &gt_boxes)?;
    let json = serde_json::to_string_pretty(&metrics)?;
    fs::write(pred.join("metrics.json"), &json)?;
    println!("{json}");
    Ok(())
}

fn cmd_ablate(config: Option<&Path>, axis: &str, out: &Path, set: &[String]) -> Result<()> {
    let base = load_config(config, set)?;
    let (key, values) = axis
        .split_once('=')
        .with_context(|| format!("axis `{axis}` is not of the form key=v1,v2,..."))?;
    let values: Vec<&str> = values.split(',').filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        bail!("axis `{axis}` lists no values");
    }

    let mut table = String::from("variant,task_accuracy,task_ce,mean_iou,success_auc,precision\n");
    for value in &values {
        let mut cfg = base.clone();
        cfg.apply_set(&format!("{key}={value}"))?;
        let pool = make_dataset(&dataset_spec(&cfg)?);
        println!("variant {key}={value}: training {} steps", cfg.steps);
        let model = train(&pool, &cfg, |_| {})?;
        let te = task_eval(&model, &pool, 200, cfg.seed.wrapping_add(1), &cfg)?;
        let tm = tracking_eval(&model, &pool, &cfg)?;
        table.push_str(&format!(
            "{key}={value},{},{},{},{},{}\n",
            te.accuracy, te.mean_ce, tm.mean_iou, tm.success_auc, tm.precision
        ));
    }
    fs::write(out, &table)?;
    print!("{table}");
    println!("wrote {}", out.display());
    Ok(())
}
