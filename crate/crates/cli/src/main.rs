//! `lfda`: dataset generation, training, evaluation, translation dumps,
//! ablation sweeps and complexity reports.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lfda_autograd::Array;
use lfda_core::checkpoint;
use lfda_core::datagen::{gen_split, read_split, write_dataset, write_png, DatasetManifest, Domain, Split, TrainSet};
use lfda_core::evaluation::{complexity, evaluate, Evaluation, MetricReport};
use lfda_core::model::{InferenceRoute, LfdaModel};
use lfda_core::training::{translate, RunOptions, Trainer, Variant};
use lfda_core::{Config, LfdaError};
use serde::Serialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "lfda", version, about = "Domain-adaptive monocular depth estimation on synthetic stereo scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a dual-domain dataset to disk.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one variant, then evaluate it on the target validation split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset written by `gen-data`; its data settings replace the
        /// config's. Without it the data is rendered in memory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint written under the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Depth cap; ground-truth pixels beyond it are ignored.
        #[arg(long, default_value_t = 80.0)]
        cap: f64,
    },
    /// Depth metrics of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset written by `gen-data`. Without it the data is rendered in memory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, value_enum, default_value_t = DomainArg::Target)]
        domain: DomainArg,
        /// Inference route; defaults to the variant's route for target data
        /// and the source route for source data.
        #[arg(long, value_enum)]
        route: Option<DomainArg>,
        /// Depth cap; ground-truth pixels beyond it are ignored.
        #[arg(long, default_value_t = 80.0)]
        cap: f64,
    },
    /// Dump reconstructions and translations as PNG grids.
    Translate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to use; an untrained model is built from the config
        /// when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset written by `gen-data`. Without it the data is rendered in memory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of image pairs to dump.
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
    },
    /// Train and evaluate all five ablation variants on shared data.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Dataset written by `gen-data`. Without it the data is rendered in memory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Depth cap; ground-truth pixels beyond it are ignored.
        #[arg(long, default_value_t = 80.0)]
        cap: f64,
    },
    /// Parameter and MAC counts of the inference path.
    Complexity {
        #[command(flatten)]
        common: Common,
        /// Input height; defaults to `data.height`.
        #[arg(long)]
        height: Option<usize>,
        /// Input width; defaults to `data.width`.
        #[arg(long)]
        width: Option<usize>,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; defaults apply to every missing field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set train.total_steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed (`train.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation variant (`train.variant`).
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        }
    }
}

/// Exit status 2 for configuration problems, 3 for everything else.
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<LfdaError> for Failure {
    fn from(e: LfdaError) -> Self {
        match e {
            LfdaError::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenData { common } => gen_data(&common),
        Command::Train {
            common,
            data,
            resume,
            cap,
        } => train(&common, data.as_deref(), resume.as_deref(), cap),
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            domain,
            route,
            cap,
        } => eval(&common, &checkpoint, data.as_deref(), split.into(), domain.into(), route, cap),
        Command::Translate {
            common,
            checkpoint,
            data,
            samples,
            split,
        } => translate_cmd(&common, checkpoint.as_deref(), data.as_deref(), samples, split.into()),
        Command::Ablate {
            common,
            data,
            split,
            cap,
        } => ablate(&common, data.as_deref(), split.into(), cap),
        Command::Complexity { common, height, width } => complexity_cmd(&common, height, width),
    }
}

impl Common {
    fn resolve(&self) -> CliResult<Config> {
        let mut config = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        for assignment in &self.set {
            config.apply_override(assignment)?;
        }
        if let Some(seed) = self.seed {
            config.train.seed = seed;
        }
        if let Some(v) = &self.variant {
            config.train.variant = v.parse()?;
        }
        config.validate()?;
        Ok(config)
    }

    fn out_dir(&self) -> CliResult<PathBuf> {
        let out = self
            .out
            .clone()
            .ok_or_else(|| Failure::Config("--out is required for this command".into()))?;
        fs::create_dir_all(&out).map_err(|e| LfdaError::io(&out, e))?;
        Ok(out)
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| LfdaError::io(path, e).into())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    write_text(path, &text)
}

/// Record what produced an output directory. Rerunning the command with
/// the saved `config.toml` reproduces it.
fn write_manifest(out: &Path, command: &str, config: &Config, data_hash: &str) -> CliResult<()> {
    let toml = config.to_toml()?;
    write_text(&out.join("config.toml"), &toml)?;
    let manifest = json!({
        "command": command,
        "config_hash": config.hash(),
        "data_hash": data_hash,
        "seeds": {
            "data": config.data.seed,
            "train": config.train.seed,
            "perceptual": config.perceptual.seed,
        },
        "variant": config.train.variant.key(),
        "versions": {
            "lfda": env!("CARGO_PKG_VERSION"),
            "checkpoint_format": checkpoint::VERSION,
        },
    });
    write_json(&out.join("run_manifest.json"), &manifest)
}

/// Use the dataset's own data settings when one is given.
fn attach_dataset(config: &mut Config, data: Option<&Path>) -> CliResult<()> {
    if let Some(root) = data {
        config.data = DatasetManifest::read(root)?.config;
        config.validate()?;
    }
    Ok(())
}

fn load_split(config: &Config, data: Option<&Path>, domain: Domain, split: Split) -> CliResult<Vec<lfda_core::datagen::SceneSample>> {
    Ok(match data {
        Some(root) => read_split(root, domain, split)?,
        None => gen_split(&config.data, domain, split)?,
    })
}

fn load_train_set(config: &Config, data: Option<&Path>) -> CliResult<TrainSet> {
    Ok(match data {
        Some(root) => TrainSet::load(root)?,
        None => TrainSet::generate(&config.data)?,
    })
}

fn gen_data(common: &Common) -> CliResult<()> {
    let config = common.resolve()?;
    let out = common.out_dir()?;
    let manifest = write_dataset(&out, &config.data)?;
    write_manifest(&out, "gen-data", &config, &manifest.config_hash)?;
    for (domain, split, n) in &manifest.counts {
        println!("{:<7} {:<5} {n}", domain.name(), split.name());
    }
    Ok(())
}

/// Train, checkpoint and evaluate into `out`; returns the final trainer.
fn train_into(config: &Config, data: &TrainSet, resume: Option<&Path>, out: &Path) -> CliResult<Trainer> {
    let mut trainer = match resume {
        Some(path) => checkpoint::resume(path, config, &data.data_hash)?,
        None => Trainer::new(config.clone())?,
    };
    let log_path = out.join("train_log.jsonl");
    let file = File::create(&log_path).map_err(|e| LfdaError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let checkpoint_dir = (config.train.checkpoint_every > 0).then(|| out.join("checkpoints"));
    if let Some(dir) = &checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| LfdaError::io(dir, e))?;
    }
    let reports = trainer.run(
        data,
        &mut RunOptions {
            stop_at: None,
            checkpoint_dir,
            log: Some(&mut log),
        },
    )?;
    drop(log);
    checkpoint::save(&trainer, &out.join("final.ckpt"))?;
    if let Some(last) = reports.last() {
        eprintln!("{}: {} steps, final total loss {:.4}", config.train.variant, trainer.step, last.total);
    }
    Ok(trainer)
}

fn write_evaluation(out: &Path, stem: &str, eval: &Evaluation, meta: serde_json::Value) -> CliResult<()> {
    write_json(&out.join(format!("{stem}.json")), &json!({ "meta": meta, "summary": eval.summary }))?;
    write_text(&out.join(format!("{stem}.txt")), &eval.summary.table())?;
    eval.write_csv(&out.join(format!("{stem}_per_image.csv")))?;
    Ok(())
}

fn train(common: &Common, data: Option<&Path>, resume: Option<&Path>, cap: f64) -> CliResult<()> {
    let mut config = common.resolve()?;
    attach_dataset(&mut config, data)?;
    let out = common.out_dir()?;
    let train_set = load_train_set(&config, data)?;
    write_manifest(&out, "train", &config, &train_set.data_hash)?;
    let trainer = train_into(&config, &train_set, resume, &out)?;
    let val = load_split(&config, data, Domain::Target, Split::Val)?;
    let route = config.train.variant.inference_route();
    let eval = evaluate(&trainer.model, &val, route, cap)?;
    write_evaluation(&out, "val_metrics", &eval, json!({ "split": "val", "domain": "target", "cap": cap }))?;
    print!("{}", eval.summary.table());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    common: &Common,
    ckpt: &Path,
    data: Option<&Path>,
    split: Split,
    domain: Domain,
    route: Option<DomainArg>,
    cap: f64,
) -> CliResult<()> {
    let trainer = checkpoint::load(ckpt)?;
    let mut config = trainer.config.clone();
    attach_dataset(&mut config, data)?;
    let out = common.out_dir()?;
    let route_domain = route.map(Domain::from).unwrap_or(domain);
    let route = match route_domain {
        Domain::Target => config.train.variant.inference_route(),
        Domain::Source => InferenceRoute::SOURCE,
    };
    let samples = load_split(&config, data, domain, split)?;
    let eval = evaluate(&trainer.model, &samples, route, cap)?;
    write_manifest(&out, "eval", &config, &config.data.hash())?;
    let meta = json!({
        "checkpoint_step": trainer.step,
        "split": split.name(),
        "domain": domain.name(),
        "route": route_domain.name(),
        "cap": cap,
    });
    write_evaluation(&out, "metrics", &eval, meta)?;
    print!("{}", eval.summary.table());
    Ok(())
}

/// Lay [3,H,W] images out row by row.
fn grid(rows: &[Vec<&Array>]) -> CliResult<Array> {
    let shape = rows[0][0].shape().to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let cols = rows[0].len();
    let (gh, gw) = (rows.len() * h, cols * w);
    let mut data = vec![0.0; 3 * gh * gw];
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let d = img.data();
            if d.len() != 3 * h * w {
                return Err(Failure::Runtime("grid images differ in size".into()));
            }
            for ch in 0..3 {
                for y in 0..h {
                    let src = &d[(ch * h + y) * w..(ch * h + y + 1) * w];
                    let start = (ch * gh + r * h + y) * gw + c * w;
                    data[start..start + w].copy_from_slice(src);
                }
            }
        }
    }
    Array::from_vec(&[3, gh, gw], data).map_err(runtime)
}

fn translate_cmd(
    common: &Common,
    ckpt: Option<&Path>,
    data: Option<&Path>,
    samples: usize,
    split: Split,
) -> CliResult<()> {
    let (mut config, model) = match ckpt {
        Some(path) => {
            let t = checkpoint::load(path)?;
            (t.config, t.model)
        }
        None => {
            let config = common.resolve()?;
            let model = LfdaModel::new(&config.net, config.data.d_min, config.data.d_max, config.train.seed)?;
            (config, model)
        }
    };
    attach_dataset(&mut config, data)?;
    let out = common.out_dir()?;
    let source = load_split(&config, data, Domain::Source, split)?;
    let target = load_split(&config, data, Domain::Target, split)?;
    let n = samples.min(source.len()).min(target.len());
    if n == 0 {
        return Err(Failure::Config("no samples to translate".into()));
    }
    write_manifest(&out, "translate", &config, &config.data.hash())?;
    let variant = config.train.variant;
    for i in 0..n {
        let to_batch = |a: &Array| a.clone().reshape(&[1, 3, a.shape()[1], a.shape()[2]]);
        let t = translate(
            &model,
            variant,
            &to_batch(&source[i].left).map_err(runtime)?,
            &to_batch(&target[i].left).map_err(runtime)?,
        )?;
        let named = [
            ("source", &t.source),
            ("target", &t.target),
            ("recon_s", &t.recon_s),
            ("recon_t", &t.recon_t),
            ("s2t", &t.s2t),
            ("t2s", &t.t2s),
        ];
        for (name, img) in named {
            write_png(&out.join(format!("{i:03}_{name}.png")), img)?;
        }
        let g = grid(&[vec![&t.source, &t.recon_s, &t.s2t], vec![&t.target, &t.recon_t, &t.t2s]])?;
        write_png(&out.join(format!("{i:03}_grid.png")), &g)?;
    }
    println!("wrote {n} translation grids to {}", out.display());
    Ok(())
}

fn metric_row(label: &str, m: &MetricReport) -> String {
    format!(
        "| {label} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
        m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3
    )
}

fn ablate(common: &Common, data: Option<&Path>, split: Split, cap: f64) -> CliResult<()> {
    let mut config = common.resolve()?;
    attach_dataset(&mut config, data)?;
    let out = common.out_dir()?;
    let train_set = load_train_set(&config, data)?;
    let test = load_split(&config, data, Domain::Target, split)?;
    write_manifest(&out, "ablate", &config, &train_set.data_hash)?;
    let mut table = String::from(
        "| Variant | abs_rel | sq_rel | rmse | rmse_log | d<1.25 | d<1.25^2 | d<1.25^3 |\n|---|---|---|---|---|---|---|---|\n",
    );
    let mut csv = String::from("variant,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3\n");
    for variant in Variant::ALL {
        let mut c = config.clone();
        c.train.variant = variant;
        let dir = out.join(variant.key());
        fs::create_dir_all(&dir).map_err(|e| LfdaError::io(&dir, e))?;
        write_manifest(&dir, "train", &c, &train_set.data_hash)?;
        let trainer = train_into(&c, &train_set, None, &dir)?;
        let eval = evaluate(&trainer.model, &test, variant.inference_route(), cap)?;
        write_evaluation(&dir, "metrics", &eval, json!({ "split": split.name(), "cap": cap }))?;
        let m = &eval.summary;
        let _ = writeln!(table, "{}", metric_row(variant.label(), m));
        let _ = writeln!(
            csv,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            variant.key(),
            m.abs_rel,
            m.sq_rel,
            m.rmse,
            m.rmse_log,
            m.delta1,
            m.delta2,
            m.delta3
        );
    }
    write_text(&out.join("ablation.md"), &table)?;
    write_text(&out.join("ablation.csv"), &csv)?;
    print!("{table}");
    Ok(())
}

fn complexity_cmd(common: &Common, height: Option<usize>, width: Option<usize>) -> CliResult<()> {
    let config = common.resolve()?;
    let model = LfdaModel::new(&config.net, config.data.d_min, config.data.d_max, config.train.seed)?;
    let h = height.unwrap_or(config.data.height);
    let w = width.unwrap_or(config.data.width);
    let report = complexity(&model, h, w).map_err(|e| match e {
        LfdaError::Shape(m) => Failure::Config(m),
        other => other.into(),
    })?;
    print!("{}", report.table());
    if common.out.is_some() {
        let out = common.out_dir()?;
        write_json(&out.join("complexity.json"), &report)?;
        write_manifest(&out, "complexity", &config, &config.data.hash())?;
    }
    Ok(())
}
