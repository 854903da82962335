use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use set2seq::datagen::{load_dataset, save_dataset};
use set2seq::harness::{
    evaluate, generate_data, model_grad_check, run_recipe, thread_count, train, Checkpoint, EvalOptions, Recipe, RunConfig,
    Splits, Table, TrainOptions, Trainer,
};
use set2seq::metrics::{aggregate_runs, EvalReport};
use set2seq::numerics::GradCheckConfig;
use set2seq::{Error, Result};

#[derive(Parser)]
#[command(name = "set2seq", version, about = "Set-to-sequence ordering: data generation, training, evaluation and recipes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config (desk profile when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Dotted `key=value` config override; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write generated train/test datasets as JSONL.
    Generate,
    /// Train a model; writes metrics.jsonl, best.ckpt, last.ckpt and a test report.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Per-epoch progress on stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Greedy-decode a dataset with a checkpoint and report metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; the checkpoint config's test set when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated metric names.
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
        /// Add rows per set cardinality.
        #[arg(long)]
        by_cardinality: bool,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        /// Set size of the checked instance.
        #[arg(long, default_value_t = 4)]
        n: usize,
        /// Input feature width (the configured task's width when omitted).
        #[arg(long)]
        d_input: Option<usize>,
        #[arg(long, default_value_t = 8)]
        coords: usize,
    },
    /// Run an experiment recipe and write its table.
    Recipe {
        /// tsp_generalization, grammar_suite, ruleset_ladder or ablation.
        name: String,
        #[arg(long)]
        verbose: bool,
    },
    /// Aggregate report CSVs of repeated runs (mean and std of run means).
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::desk(),
    };
    cfg = cfg.with_overrides(&c.overrides)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report_table(report: &EvalReport) -> Table {
    Table {
        row_header: "task".into(),
        columns: vec!["metric".into(), "mean".into(), "std".into(), "count".into()],
        rows: report
            .rows
            .iter()
            .map(|r| (r.task.clone(), vec![r.metric.clone(), format!("{:.4}", r.mean), format!("{:.4}", r.std), r.count.to_string()]))
            .collect(),
    }
}

fn d_input_of(cfg: &RunConfig) -> Result<usize> {
    use set2seq::harness::DataTask;
    Ok(match cfg.data.task {
        DataTask::Tsp => 2,
        DataTask::Grammar => cfg.data.grammar.kind.d_raw(),
        DataTask::Ruleset => cfg.data.ruleset.d_raw(),
        DataTask::File => load_dataset(Path::new(&cfg.data.train_path))?
            .first()
            .map(|i| i.d_raw())
            .ok_or_else(|| Error::InvalidArgument("empty training file".into()))?,
    })
}

fn run(cli: Cli) -> Result<i32> {
    let out = &cli.common.out;
    match cli.command {
        Command::Generate => {
            let cfg = load_config(&cli.common)?;
            let (train_set, test_set) = generate_data(&cfg)?;
            std::fs::create_dir_all(out)?;
            save_dataset(&train_set, &out.join("train.jsonl"))?;
            save_dataset(&test_set, &out.join("test.jsonl"))?;
            std::fs::write(out.join("config.toml"), cfg.to_toml_string())?;
            println!("wrote {} train and {} test instances to {}", train_set.len(), test_set.len(), out.display());
        }
        Command::Train { resume, verbose } => {
            let cfg = load_config(&cli.common)?;
            let splits = set2seq::harness::build_data(&cfg)?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml_string())?;
            let outcome = train(&cfg, &splits, TrainOptions { out_dir: Some(out), resume, verbose })?;
            println!(
                "trained {} epochs ({} steps), best epoch {}, config {}",
                outcome.trainer.epoch, outcome.trainer.step, outcome.trainer.best_epoch, outcome.config_hash
            );
            report_test(&cfg, &splits, &outcome, out)?;
        }
        Command::Eval { checkpoint, data, metrics, by_cardinality } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let trainer = Trainer::from_checkpoint(&ckpt)?;
            let dataset = match data {
                Some(p) => load_dataset(&p)?,
                None => generate_data(&ckpt.config)?.1,
            };
            let opts = EvalOptions { by_cardinality, metrics, label: None };
            let report = evaluate(&trainer.model, &trainer.store, &ckpt.config.loss(), &dataset, &ckpt.config.hash(), &opts)?;
            std::fs::create_dir_all(out)?;
            report.write_csv(&out.join("eval_report.csv"))?;
            print!("{}", report_table(&report));
        }
        Command::Gradcheck { n, d_input, coords } => {
            let cfg = load_config(&cli.common)?;
            let d = match d_input {
                Some(d) => d,
                None => d_input_of(&cfg)?,
            };
            let check = GradCheckConfig { coords_per_param: coords, seed: cfg.seed, ..Default::default() };
            let report = model_grad_check(&cfg, d, n, &check)?;
            for p in &report.params {
                let flag = if p.max_rel_error < report.tol { "ok" } else { "FAIL" };
                println!("{flag:>4}  {:<40} {:.3e}", p.name, p.max_rel_error);
            }
            println!("max relative error {:.3e} (tolerance {:.0e})", report.max_rel_error(), report.tol);
            if !report.passed() {
                eprintln!("error: gradient check failed");
                return Ok(1);
            }
        }
        Command::Recipe { name, verbose } => {
            let cfg = load_config(&cli.common)?;
            let recipe: Recipe = name.parse()?;
            let output = run_recipe(recipe, &cfg, Some(out), verbose)?;
            print!("{}", output.table);
        }
        Command::Report { reports } => {
            let runs = reports.iter().map(|p| EvalReport::read_csv(p)).collect::<Result<Vec<_>>>()?;
            let agg = aggregate_runs(&runs)?;
            std::fs::create_dir_all(out)?;
            agg.write_csv(&out.join("aggregate_report.csv"))?;
            print!("{}", report_table(&agg));
        }
    }
    Ok(0)
}

fn report_test(cfg: &RunConfig, splits: &Splits, outcome: &set2seq::harness::TrainOutcome, out: &Path) -> Result<()> {
    if splits.test.is_empty() {
        return Ok(());
    }
    let store = outcome.best_store()?;
    let report = evaluate(&outcome.trainer.model, &store, &cfg.loss(), &splits.test, &outcome.config_hash, &EvalOptions::default())?;
    report.write_csv(&out.join("test_report.csv"))?;
    print!("{}", report_table(&report));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = thread_count();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    match run(cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
