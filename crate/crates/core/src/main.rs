use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fieldmatch::config::ExperimentConfig;
use fieldmatch::data::{load_dataset_checked, store_dataset, Dataset, FieldSchema, Split};
use fieldmatch::eval::{metric_names, MetricsReport};
use fieldmatch::experiment::{
    ablate, build_model, curve_text, prepare_splits, report_meta, run_pretrain, sweep, ExperimentData, Model,
};
use fieldmatch::gradsuite::{run_suite, SUITE_TOLERANCE};
use fieldmatch::model::Ablation;
use fieldmatch::tensor::{encode_checkpoint, read_checkpoint};
use fieldmatch::text::{build_vocab, Vocab};
use fieldmatch::train::{evaluate, random_baseline_map, rank_companies, train, TrainReport};

#[derive(Parser)]
#[command(name = "fieldmatch", version, about = "Multi-field solution/company matching")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (overrides the `seed` key).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding data, vocabulary, checkpoints and reports.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its train/validation/test splits.
    GenData,
    /// Build the vocabulary from the generated records.
    BuildVocab,
    /// Contrastive pretraining of the token-level encoders.
    Pretrain,
    /// Supervised fine-tuning with the joint loss.
    Train,
    /// Evaluate the trained model on the test split.
    Eval,
    /// Rank every company for one solution.
    Rank {
        #[arg(long)]
        solution_id: String,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Run the base configuration plus one run per ablation flag.
    Ablate {
        /// Comma-separated flags (default: every flag).
        #[arg(long, value_delimiter = ',')]
        flags: Vec<String>,
    },
    /// Vary one hyper-parameter over a grid and record test MAP.
    Sweep {
        #[arg(long)]
        param: String,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
    },
    /// Finite-difference check of every primitive and loss.
    GradCheck,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.apply_overrides(&common.overrides)?;
    Ok(cfg)
}

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn split(&self, split: Split) -> PathBuf {
        self.root.join("data").join(format!("{split}.jsonl"))
    }

    fn vocab(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }

    fn stage(&self, stage: &str, cfg: &ExperimentConfig, ext: &str) -> PathBuf {
        self.root.join(format!("{stage}-{}.{ext}", cfg.short_fingerprint()))
    }
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing {} (run `{hint}` first)", path.display());
    }
    Ok(())
}

/// Writes `bytes` unless the file already exists; an existing file must be
/// byte-identical, since outputs are content-addressed by configuration.
fn write_immutable(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Ok(existing) = fs::read(path) {
        if existing == bytes {
            log::info!("{} already up to date", path.display());
            return Ok(());
        }
        bail!(
            "{} exists with different contents; refusing to overwrite a content-addressed output",
            path.display()
        );
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_data(layout: &Layout, cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let schema = FieldSchema::standard();
    let mut parts = Vec::new();
    for split in [Split::Train, Split::Validation, Split::Test] {
        let path = layout.split(split);
        require(&path, "gen-data")?;
        parts.push(load_dataset_checked(&path, &schema)?);
    }
    require(&layout.vocab(), "build-vocab")?;
    let vocab = Vocab::load(&layout.vocab())?;
    let test = parts.pop().expect("three splits");
    let val = parts.pop().expect("three splits");
    let train = parts.pop().expect("three splits");
    if train.examples.is_empty() || val.examples.is_empty() || test.examples.is_empty() {
        bail!("every split must contain examples");
    }
    log::debug!("loaded data for config {}", cfg.short_fingerprint());
    Ok(ExperimentData {
        schema,
        solutions: train.solutions,
        companies: train.companies,
        vocab,
        train: train.examples,
        val: val.examples,
        test: test.examples,
    })
}

fn checkpoint_meta(cfg: &ExperimentConfig, stage: &str) -> String {
    format!("stage={stage}\n{}", cfg.canonical())
}

fn load_stage(layout: &Layout, cfg: &ExperimentConfig, data: &ExperimentData, stage: &str, hint: &str) -> Result<Model> {
    let path = layout.stage(stage, cfg, "ckpt");
    require(&path, hint)?;
    let (store, meta) = read_checkpoint(&path)?;
    if meta != checkpoint_meta(cfg, stage) {
        bail!("{} was written under a different configuration", path.display());
    }
    let mut model = build_model(cfg, data)?;
    model.store.load_values_from(&store)?;
    Ok(model)
}

fn train_log(report: &TrainReport) -> String {
    let mut out = String::from("epoch\tloss\tval_map\n");
    for (i, (l, m)) in report.epoch_losses.iter().zip(&report.val_map).enumerate() {
        out.push_str(&format!("{}\t{l}\t{m}\n", i + 1));
    }
    if let Some(b) = report.best_epoch {
        out.push_str(&format!("# kept epoch {b}\n"));
    }
    out
}

fn print_report(report: &MetricsReport) {
    for name in metric_names() {
        if let Some(v) = report.get(&name) {
            println!("{name}\t{v:.6}");
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Command::GradCheck = cli.command {
        let mut failed = 0;
        for e in run_suite()? {
            let status = if e.passed() { "ok" } else { "FAIL" };
            println!(
                "{status}\t{}\t{:.3e}\t{} scalars",
                e.name, e.report.max_relative_error, e.report.checked
            );
            failed += usize::from(!e.passed());
        }
        if failed > 0 {
            bail!("{failed} component(s) exceed relative error {SUITE_TOLERANCE:e}");
        }
        return Ok(());
    }

    let cfg = load_config(&cli.common)?;
    let layout = Layout {
        root: cli.common.out_dir.clone(),
    };
    fs::create_dir_all(layout.root.join("data"))
        .with_context(|| format!("creating {}", layout.root.display()))?;

    match cli.command {
        Command::GradCheck => unreachable!("handled above"),
        Command::GenData => {
            let data = ExperimentData::generate(&cfg)?;
            for (split, examples) in [
                (Split::Train, &data.train),
                (Split::Validation, &data.val),
                (Split::Test, &data.test),
            ] {
                let ds = Dataset {
                    solutions: data.solutions.clone(),
                    companies: data.companies.clone(),
                    examples: examples.clone(),
                    split,
                };
                store_dataset(&ds, &layout.split(split))?;
                println!("{split}\t{} examples\t{}", examples.len(), layout.split(split).display());
            }
        }
        Command::BuildVocab => {
            let path = layout.split(Split::Train);
            require(&path, "gen-data")?;
            let ds = load_dataset_checked(&path, &FieldSchema::standard())?;
            let vocab = build_vocab(&ds.solutions, &ds.companies, cfg.vocab_min_count);
            vocab.store(&layout.vocab())?;
            println!("{} tokens\t{}", vocab.len(), layout.vocab().display());
        }
        Command::Pretrain => {
            let data = load_data(&layout, &cfg)?;
            let mut model = build_model(&cfg, &data)?;
            let reports = run_pretrain(&cfg, &data, &mut model)?;
            if reports.is_empty() {
                log::warn!("pretraining disabled by configuration; writing the initial parameters");
            }
            for r in &reports {
                let curve = layout.stage(&format!("pretrain-{}", r.encoder), &cfg, "tsv");
                r.store_curve(&curve)?;
                println!("{}\tfinal epoch loss {:?}\t{}", r.encoder, r.epoch_means.last(), curve.display());
            }
            let path = layout.stage("pretrain", &cfg, "ckpt");
            write_immutable(&path, &encode_checkpoint(&model.store, &checkpoint_meta(&cfg, "pretrain")))?;
            println!("checkpoint\t{}", path.display());
        }
        Command::Train => {
            let data = load_data(&layout, &cfg)?;
            let mut model = if cfg.pretraining_enabled() {
                load_stage(&layout, &cfg, &data, "pretrain", "pretrain")?
            } else {
                build_model(&cfg, &data)?
            };
            let splits = prepare_splits(&data, &model.matcher)?;
            let report = train(&mut model.store, &model.matcher, &splits.train, &splits.val, &cfg.train)?;
            write_immutable(&layout.stage("train", &cfg, "tsv"), train_log(&report).as_bytes())?;
            let path = layout.stage("train", &cfg, "ckpt");
            write_immutable(&path, &encode_checkpoint(&model.store, &checkpoint_meta(&cfg, "train")))?;
            println!("best epoch\t{:?}\ncheckpoint\t{}", report.best_epoch, path.display());
        }
        Command::Eval => {
            let data = load_data(&layout, &cfg)?;
            let model = load_stage(&layout, &cfg, &data, "train", "train")?;
            let splits = prepare_splits(&data, &model.matcher)?;
            let report = evaluate(&model.matcher, &model.store, &splits.test, report_meta(&cfg, "full"))?;
            let path = layout.stage("report", &cfg, "jsonl");
            write_immutable(&path, &report.to_bytes())?;
            print_report(&report);
            println!("random baseline MAP\t{:.6}", random_baseline_map(&splits.test)?);
            println!("report\t{}", path.display());
        }
        Command::Rank { solution_id, top } => {
            let data = load_data(&layout, &cfg)?;
            let model = load_stage(&layout, &cfg, &data, "train", "train")?;
            let solution = data.records().solution(&solution_id)?;
            let companies: Vec<_> = data.companies.iter().collect();
            let ranked = rank_companies(&model.matcher, &model.store, solution, &companies, &data.vocab)?;
            for (id, score) in ranked.into_iter().take(top) {
                println!("{id}\t{score:.6}");
            }
        }
        Command::Ablate { flags } => {
            let flags: Vec<Ablation> = if flags.is_empty() {
                Ablation::ALL.iter().copied().filter(|f| !cfg.ablations.contains(f)).collect()
            } else {
                flags.iter().map(|f| f.parse()).collect::<fieldmatch::Result<_>>()?
            };
            let data = load_data(&layout, &cfg)?;
            let reports = ablate(&cfg, &data, &flags)?;
            let mut table = String::from("run");
            for name in metric_names() {
                table.push('\t');
                table.push_str(&name);
            }
            table.push('\n');
            for r in &reports {
                let path = layout.stage(&format!("report-{}", r.meta.run), &cfg, "jsonl");
                write_immutable(&path, &r.to_bytes())?;
                table.push_str(&r.meta.run);
                for name in metric_names() {
                    table.push_str(&format!("\t{:.6}", r.get(&name).unwrap_or(f64::NAN)));
                }
                table.push('\n');
            }
            write_immutable(&layout.stage("ablate", &cfg, "tsv"), table.as_bytes())?;
            print!("{table}");
        }
        Command::Sweep { param, grid } => {
            let data = load_data(&layout, &cfg)?;
            let curve = sweep(&cfg, &data, &param, &grid)?;
            let text = curve_text(&param, &curve);
            write_immutable(&layout.stage(&format!("sweep-{param}"), &cfg, "tsv"), text.as_bytes())?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
