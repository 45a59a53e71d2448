use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use dualteach::checkpoint::{load_any, load_checkpoint, save_checkpoint, save_seg_model, Saved};
use dualteach::eval::{format_metrics, format_table, IouReport};
use dualteach::pipeline::{
    ablation_run, evaluate_branches, evaluate_seg_model, export_psms, retrain_on_psms, sweep, train, AblationMode,
    BranchReport, StepReport, SweepParam, TrainState,
};
use dualteach::synthdata::{generate_splits, load_manifest, write_dataset, DatasetManifest};
use dualteach::{Error, ImageSample, RunConfig};

/// Environment variable that replaces `out.dir`.
const OUT_DIR_ENV: &str = "DUALTEACH_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "dualteach", version, about = "Dual-teacher weakly supervised segmentation")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// More logging; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Renders the synthetic shapes dataset into `data.root`.
    GenData,
    /// Stage one: joint training of both teachers and the student.
    Train {
        /// Continue from a stage-one checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Writes pseudo masks for the training split.
    ExportPsm {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Stage two: trains a fresh network on exported pseudo masks.
    Retrain {
        /// Pseudo-mask manifest; defaults to the one in the output directory.
        #[arg(long)]
        psm: Option<PathBuf>,
    },
    /// Evaluates a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Trains and evaluates one distillation strategy.
    Ablate {
        #[arg(long, value_parser = parse_mode)]
        mode: AblationMode,
    },
    /// Trains the alternating strategy once per schedule value.
    Sweep {
        #[arg(long, value_parser = parse_param)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        values: Vec<f64>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<AblationMode, String> {
    s.parse()
}

fn parse_param(s: &str) -> std::result::Result<SweepParam, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if matches!(e.downcast_ref::<Error>(), Some(Error::Config { .. })) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        cfg.set("out.dir", &dir)?;
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(kv.as_str(), "expected KEY=VALUE"))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    match cli.command {
        Command::GenData => gen_data(&cfg),
        Command::Train { resume } => cmd_train(&cfg, resume.as_deref()),
        Command::ExportPsm { checkpoint } => cmd_export(&cfg, checkpoint.as_deref()),
        Command::Retrain { psm } => cmd_retrain(&cfg, psm.as_deref()),
        Command::Eval { checkpoint } => cmd_eval(&cfg, checkpoint.as_deref()),
        Command::Ablate { mode } => cmd_ablate(&cfg, mode),
        Command::Sweep { param, values } => cmd_sweep(&cfg, param, &values),
    }
}

fn data_root(cfg: &RunConfig) -> Result<&Path> {
    Ok(cfg
        .data_root
        .as_deref()
        .ok_or_else(|| Error::config("data.root", "no dataset directory given (use --set data.root=DIR)"))?)
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<(DatasetManifest, Vec<ImageSample>)> {
    let root = data_root(cfg)?;
    let path = root.join(split).join("manifest.tsv");
    if !path.is_file() {
        return Err(Error::config(
            "data.root",
            format!("{} not found (run gen-data or point data.root at a dataset)", path.display()),
        )
        .into());
    }
    let manifest = load_manifest(&path)?;
    check_classes(cfg, &manifest)?;
    let samples = manifest.load_all()?;
    Ok((manifest, samples))
}

fn check_classes(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<()> {
    if manifest.class_names.len() != cfg.data_classes {
        return Err(Error::config(
            "data.classes",
            format!(
                "dataset has {} classes, configuration says {}",
                manifest.class_names.len(),
                cfg.data_classes
            ),
        )
        .into());
    }
    Ok(())
}

/// Creates the output directory and records the configuration and seed.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    fs::write(dir.join("seed.txt"), format!("{}\n", cfg.seed))?;
    Ok(dir)
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let root = data_root(cfg)?;
    let (train_set, val_set) = generate_splits(
        cfg.data_n_train,
        cfg.data_n_val,
        cfg.data_classes,
        cfg.data_image_size,
        cfg.seed,
    )?;
    write_dataset(&root.join("train"), &train_set.class_names, &train_set.samples)?;
    write_dataset(&root.join("val"), &val_set.class_names, &val_set.samples)?;
    fs::write(root.join("config.txt"), cfg.to_text())?;
    println!(
        "wrote {} training and {} validation images to {}",
        train_set.samples.len(),
        val_set.samples.len(),
        root.display()
    );
    Ok(())
}

fn loss_line(r: &StepReport) -> String {
    let teacher = match r.teacher {
        Some(t) => format!("{t:?}"),
        None => "-".into(),
    };
    format!(
        "{}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\t{teacher}\n",
        r.iter, r.total, r.classification, r.ct_to_st, r.student
    )
}

fn train_and_save(state: &mut TrainState, samples: &[ImageSample], out: &Path) -> Result<()> {
    let mut log = String::from("iter\ttotal\tclassification\tct_to_st\tstudent\tteacher\n");
    train(state, samples, |r| {
        if r.iter % 50 == 0 {
            log::info!("iter {} loss {:.4}", r.iter, r.total);
        }
        log.push_str(&loss_line(r));
    })?;
    fs::write(out.join("losses.tsv"), log)?;
    save_checkpoint(state, &out.join("checkpoint.bin"))?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let (_, samples) = load_split(cfg, "train")?;
    let mut state = match resume {
        Some(p) => {
            // the stored snapshot governs everything but the step budget and
            // where outputs go
            let mut s = load_checkpoint(p)?;
            s.config.out_dir = cfg.out_dir.clone();
            s.config.train_iters = cfg.train_iters;
            s.config.train_epochs = cfg.train_epochs;
            s
        }
        None => TrainState::new(cfg)?,
    };
    let out = prepare_out(&state.config)?;
    train_and_save(&mut state, &samples, &out)?;
    println!("trained to iteration {}; checkpoint in {}", state.iter, out.join("checkpoint.bin").display());
    Ok(())
}

fn default_checkpoint(cfg: &RunConfig, given: Option<&Path>) -> PathBuf {
    given.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join("checkpoint.bin"))
}

fn cmd_export(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let state = load_checkpoint(&default_checkpoint(cfg, checkpoint))?;
    let (manifest, samples) = load_split(cfg, "train")?;
    let out = prepare_out(cfg)?;
    let psm = export_psms(&state, &samples, &manifest, &out)?;
    println!("wrote {} pseudo masks; manifest {}", psm.len(), out.join("manifest.tsv").display());
    Ok(())
}

fn cmd_retrain(cfg: &RunConfig, psm: Option<&Path>) -> Result<()> {
    let path = psm.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join("manifest.tsv"));
    let manifest = load_manifest(&path)?;
    check_classes(cfg, &manifest)?;
    let samples = manifest.load_all()?;
    let out = prepare_out(cfg)?;
    let model = retrain_on_psms(cfg, &samples, |it, loss| {
        if it % 50 == 0 {
            log::info!("iter {it} loss {loss:.4}");
        }
    })?;
    save_seg_model(&model, cfg, &out.join("seg_model.bin"))?;
    if let Ok((_, val)) = load_split(cfg, "val") {
        let report = evaluate_seg_model(&model, cfg, &val, false)?;
        emit_single(&out, "retrained", &report, &manifest.class_names)?;
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let (manifest, val) = load_split(cfg, "val")?;
    let out = prepare_out(cfg)?;
    match load_any(&default_checkpoint(cfg, checkpoint))? {
        Saved::Stage1(state) => {
            let report = evaluate_branches(&state, &val)?;
            emit_branches(&out, &report, &manifest.class_names)?;
        }
        Saved::Stage2(model, model_cfg) => {
            let report = evaluate_seg_model(&model, &model_cfg, &val, false)?;
            emit_single(&out, "retrained", &report, &manifest.class_names)?;
        }
    }
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, mode: AblationMode) -> Result<()> {
    let (manifest, train_set) = load_split(cfg, "train")?;
    let (_, val) = load_split(cfg, "val")?;
    let mut cfg = cfg.clone();
    cfg.train_mode = mode;
    let out = prepare_out(&cfg)?;
    let result = ablation_run(mode, &cfg, &train_set, &val)?;
    let mut log = String::from("iter\ttotal\n");
    for (i, l) in result.losses.iter().enumerate() {
        log.push_str(&format!("{i}\t{l:.8}\n"));
    }
    fs::write(out.join("losses.tsv"), log)?;
    save_checkpoint(&result.state, &out.join("checkpoint.bin"))?;
    println!("mode {mode}");
    emit_branches(&out, &result.report, &manifest.class_names)
}

fn cmd_sweep(cfg: &RunConfig, param: SweepParam, values: &[f64]) -> Result<()> {
    let (_, train_set) = load_split(cfg, "train")?;
    let (_, val) = load_split(cfg, "val")?;
    let out = prepare_out(cfg)?;
    let results = sweep(param, values, cfg, &train_set, &val, |v, r| {
        log::info!("{param}={v}: fused mIoU {:.4}", r.report.fused.miou);
    })?;
    let rows: Vec<(String, Vec<Option<f64>>)> = results
        .iter()
        .map(|(v, r)| (format!("{v}"), vec![Some(r.fused.miou)]))
        .collect();
    let table = format_table(&[&param.to_string(), "mIoU"], &rows);
    print!("{table}");
    fs::write(out.join("sweep.txt"), &table)?;
    let mut tsv = format!("{param}\tseg_teacher\tstudent\tfused\n");
    for (v, r) in &results {
        tsv.push_str(&format!("{v}\t{:.6}\t{:.6}\t{:.6}\n", r.seg_teacher.miou, r.student.miou, r.fused.miou));
    }
    fs::write(out.join("sweep.tsv"), tsv)?;
    Ok(())
}

fn header(class_names: &[String]) -> Vec<&str> {
    let mut h = vec!["", "mIoU", "background"];
    h.extend(class_names.iter().map(String::as_str));
    h
}

fn row(name: &str, r: &IouReport) -> (String, Vec<Option<f64>>) {
    let mut v = vec![Some(r.miou)];
    v.extend(r.per_class.iter().copied());
    (name.to_string(), v)
}

fn emit_branches(out: &Path, report: &BranchReport, class_names: &[String]) -> Result<()> {
    let rows = vec![
        row("P^st", &report.seg_teacher),
        row("P^s", &report.student),
        row("P-bar", &report.fused),
    ];
    let table = format_table(&header(class_names), &rows);
    print!("{table}");
    fs::write(out.join("metrics_table.txt"), &table)?;
    let metrics = [
        format_metrics("seg_teacher", &report.seg_teacher, class_names),
        format_metrics("student", &report.student, class_names),
        format_metrics("fused", &report.fused, class_names),
    ]
    .concat();
    fs::write(out.join("metrics.txt"), metrics)?;
    Ok(())
}

fn emit_single(out: &Path, name: &str, report: &IouReport, class_names: &[String]) -> Result<()> {
    let table = format_table(&header(class_names), &[row(name, report)]);
    print!("{table}");
    fs::write(out.join("metrics_table.txt"), &table)?;
    fs::write(out.join("metrics.txt"), format_metrics(name, report, class_names))?;
    Ok(())
}
