use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use log::info;

use noisemask::config::{key_table, RunConfig};
use noisemask::data::{assign_splits, import_raw, synth_generate, Dataset, Split};
use noisemask::evaluation::{evaluate_split, extract_features, lowshot_eval, mlp_probe};
use noisemask::gradsuite::{run_suite, suite_csv};
use noisemask::networks::Checkpoint;
use noisemask::training::{
    finetune, history_csv, init_pretrain_state, mask_histograms, run_pretraining, train_baseline, RunOutcome,
};
use noisemask::{Error, Result};

#[derive(Parser)]
#[command(name = "noisemask", version, about = "Noise-mask pretraining and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// key=value config file; later flags override it
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed (sets train.seed)
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output file (gen-synth, import-raw) or directory (everything else)
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Checkpoint to start from or evaluate
    #[arg(long, value_name = "PATH")]
    init: Option<PathBuf>,
    /// Worker threads; 1 guarantees bitwise reproduction, 0 uses every core
    #[arg(long, value_name = "N", default_value_t = 1)]
    threads: usize,
    /// Policy loss reduction (sets train.reduction)
    #[arg(long, value_parser = ["logsumexp", "sum"])]
    reduction: Option<String>,
    /// Mask source (sets mask.source)
    #[arg(long, value_parser = ["policy", "gaussian", "uniform", "pure", "none"])]
    mask: Option<String>,
    /// Override one config key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic heterogeneous dataset bundle
    GenSynth(Common),
    /// Convert a flat u8 image file plus label CSV into a bundle
    ImportRaw(Common),
    /// Masked pretraining; writes the heated checkpoint
    Pretrain(Common),
    /// Supervised fine-tuning from --init
    Finetune(Common),
    /// Supervised training from random initialisation
    TrainBaseline(Common),
    /// Metrics of --init on eval.split
    Evaluate(Common),
    /// MLP probe on frozen features of --init
    Probe(Common),
    /// Low-shot logistic regression curve on frozen features of --init
    Lowshot(Common),
    /// Intensity histograms of validation images under masks
    Histograms(Common),
    /// Finite-difference gradient suite
    Gradcheck(Common),
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::GenSynth(c) => ("gen-synth", c),
            Command::ImportRaw(c) => ("import-raw", c),
            Command::Pretrain(c) => ("pretrain", c),
            Command::Finetune(c) => ("finetune", c),
            Command::TrainBaseline(c) => ("train-baseline", c),
            Command::Evaluate(c) => ("evaluate", c),
            Command::Probe(c) => ("probe", c),
            Command::Lowshot(c) => ("lowshot", c),
            Command::Histograms(c) => ("histograms", c),
            Command::Gradcheck(c) => ("gradcheck", c),
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        _ => 1,
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for pair in &common.set {
        cfg.set_pair(pair)?;
    }
    if let Some(s) = common.seed {
        cfg.set("train.seed", &s.to_string())?;
    }
    if let Some(r) = &common.reduction {
        cfg.set("train.reduction", r)?;
    }
    if let Some(m) = &common.mask {
        cfg.set("mask.source", m)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = PathBuf::from(cfg.get("data.bundle")?);
    let mut ds = Dataset::load(&path)?;
    assign_splits(&mut ds, cfg.split_fractions()?, cfg.split_seed()?)?;
    Ok(ds)
}

fn load_init(common: &Common) -> Result<Checkpoint> {
    let path = common
        .init
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --init PATH".into()))?;
    Checkpoint::load(path)
}

fn save_run(dir: &Path, final_name: &str, run: &RunOutcome) -> Result<()> {
    run.state.to_checkpoint().save(&dir.join(final_name))?;
    run.best.save(&dir.join("best.nmck"))?;
    write(&dir.join("history.csv"), history_csv(&run.history))?;
    write(&dir.join("validation.csv"), history_csv(&run.validation))?;
    let last = run.validation.last();
    let summary = format!(
        "epochs={}\nfinal_val_macro_f1={}\nfinal_val_accuracy={}\nbest_val_macro_f1={}\n",
        run.validation.len(),
        last.map_or(f64::NAN, |r| r.macro_f1),
        last.map_or(f64::NAN, |r| r.accuracy),
        run.best_val_macro_f1
    );
    write(&dir.join("summary.txt"), summary)
}

fn run(command: &Command) -> Result<()> {
    let (name, common) = command.parts();
    let mut cfg = resolve(common)?;
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(name));
    let file_out = matches!(command, Command::GenSynth(_) | Command::ImportRaw(_));
    if let (true, Some(out)) = (file_out, &common.out) {
        cfg.set("data.bundle", &out.display().to_string())?;
    }
    let target = if file_out {
        PathBuf::from(cfg.get("data.bundle")?)
    } else {
        dir.clone()
    };
    let manifest_path = if file_out {
        with_suffix(&target, ".manifest")
    } else {
        dir.join("manifest.txt")
    };
    let mut header = vec![("command", name.to_string()), ("threads", common.threads.to_string())];
    if let Some(p) = &common.init {
        header.push(("init", p.display().to_string()));
    }
    write(&manifest_path, cfg.manifest(&header))?;
    info!("{name}: manifest written to {}", manifest_path.display());

    match command {
        Command::GenSynth(_) => {
            let mut ds = synth_generate(&cfg.synth_spec()?)?;
            assign_splits(&mut ds, cfg.split_fractions()?, cfg.split_seed()?)?;
            ds.save(&target)?;
            println!("{} samples -> {} (sha256 {})", ds.len(), target.display(), ds.content_hash());
        }
        Command::ImportRaw(_) => {
            let (extents, classes) = cfg.raw_extents()?;
            let images = PathBuf::from(cfg.get("data.raw_images")?);
            let labels = PathBuf::from(cfg.get("data.raw_labels")?);
            let mut ds = import_raw(&images, &labels, extents, classes)?;
            assign_splits(&mut ds, cfg.split_fractions()?, cfg.split_seed()?)?;
            ds.save(&target)?;
            println!("{} samples -> {}", ds.len(), target.display());
        }
        Command::Pretrain(_) => {
            let ds = load_dataset(&cfg)?;
            let (c, h, w) = (ds.channels(), ds.height(), ds.width());
            let (tau_i, tau_d) = cfg.ema_taus()?;
            let state = init_pretrain_state(
                cfg.classifier_spec(c, h, w, ds.num_classes())?,
                cfg.policy_spec(c, h, w)?,
                tau_i,
                tau_d,
                cfg.seed()?,
            )?;
            let out = run_pretraining(&ds, state, &cfg.pretrain_config()?, &cfg.mask_config()?)?;
            save_run(&dir, "heated.nmck", &out)?;
            println!("heated model -> {}", dir.join("heated.nmck").display());
        }
        Command::Finetune(_) => {
            let ds = load_dataset(&cfg)?;
            let out = finetune(&load_init(common)?, &ds, &cfg.finetune_config()?)?;
            save_run(&dir, "finetuned.nmck", &out)?;
            println!("fine-tuned model -> {}", dir.join("finetuned.nmck").display());
        }
        Command::TrainBaseline(_) => {
            let ds = load_dataset(&cfg)?;
            let spec = cfg.classifier_spec(ds.channels(), ds.height(), ds.width(), ds.num_classes())?;
            let out = train_baseline(spec, &ds, &cfg.finetune_config()?)?;
            save_run(&dir, "baseline.nmck", &out)?;
            println!("baseline model -> {}", dir.join("baseline.nmck").display());
        }
        Command::Evaluate(_) => {
            let ds = load_dataset(&cfg)?;
            let ck = load_init(common)?;
            let split: Split = cfg.value("eval.split")?;
            let report = evaluate_split(&ck.classifier, &ds, &ds.indices(split))?;
            write(&dir.join("metrics.csv"), report.to_csv())?;
            write(&dir.join("summary.txt"), report.summary())?;
            println!("{}", report.summary());
        }
        Command::Probe(_) | Command::Lowshot(_) => {
            let ds = load_dataset(&cfg)?;
            let ck = load_init(common)?;
            let all: Vec<usize> = (0..ds.len()).collect();
            let features = extract_features(&ck.classifier, &ds, &all)?;
            let labels: Vec<usize> = all.iter().map(|&i| ds.label(i)).collect();
            if let Command::Probe(_) = command {
                let report = mlp_probe(
                    &features,
                    &labels,
                    ds.splits(),
                    ds.num_classes(),
                    &cfg.probe_config()?,
                    cfg.trials_seed()?,
                )?;
                write(&dir.join("probe.csv"), report.to_csv())?;
                let (m, hw) = report.aggregate(|r| r.macro_f1);
                println!("probe test macro-F1 {m:.4} ± {}", hw.map_or("undefined".into(), |v| format!("{v:.4}")));
            } else {
                let curve = lowshot_eval(
                    &features,
                    &labels,
                    ds.splits(),
                    ds.num_classes(),
                    &cfg.lowshot_config()?,
                    cfg.trials_seed()?,
                )?;
                write(&dir.join("lowshot.csv"), curve.to_csv())?;
                print!("{}", curve.to_csv());
            }
        }
        Command::Histograms(_) => {
            let ds = load_dataset(&cfg)?;
            let ck = load_init(common)?;
            let mut idx = ds.indices(Split::Val);
            let limit: usize = cfg.value("eval.histogram_images")?;
            if limit > 0 {
                idx.truncate(limit);
            }
            let report = mask_histograms(&ck, &ds, &idx, &cfg.mask_config()?, cfg.mask_source()?, cfg.seed()?)?;
            write(&dir.join("histograms.csv"), report.to_csv())?;
            write(&dir.join("histogram_summary.txt"), report.summary())?;
            print!("{}", report.summary());
        }
        Command::Gradcheck(_) => {
            let results = run_suite(cfg.value("eval.gradcheck_seeds")?)?;
            let csv = suite_csv(&results);
            write(&dir.join("gradcheck.csv"), &csv)?;
            print!("{csv}");
            if let Some(bad) = results.iter().find(|r| !r.passed()) {
                return Err(Error::Divergence(format!(
                    "gradient check `{}` failed: max relative error {:e}",
                    bad.case, bad.max_relative_error
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let keys = format!("Config keys (key=default):\n{}", key_table());
    let cmd = Cli::command()
        .after_help(keys.clone())
        .mut_subcommands(|s| s.after_help(keys.clone()));
    let matches = match cmd.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let threads = cli.command.parts().1.threads;
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: --threads {threads}: {e}");
        return ExitCode::from(1);
    }
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
