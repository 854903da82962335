//! Experiment recipes that train over several seeds and emit result tables.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use super::config::{DataTask, RunConfig};
use super::train::{build_data, evaluate, train, EvalOptions, TrainOptions};
use crate::datagen::{self, GrammarConfig, GrammarKind, TspConfig, HELD_KARP_MAX_N};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_runs, mean_std, EvalReport};
use crate::numerics::SeededRng;

const RANDOM_TOUR_STREAM: u64 = 0x7a4d;
const TSP_TEST_SEED: u64 = 0x7e57_7590;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recipe {
    TspGeneralization,
    GrammarSuite,
    RulesetLadder,
    Ablation,
}

impl Recipe {
    pub const ALL: [Recipe; 4] = [Self::TspGeneralization, Self::GrammarSuite, Self::RulesetLadder, Self::Ablation];
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TspGeneralization => "tsp_generalization",
            Self::GrammarSuite => "grammar_suite",
            Self::RulesetLadder => "ruleset_ladder",
            Self::Ablation => "ablation",
        })
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|r| r.to_string() == s).ok_or_else(|| {
            let names: Vec<String> = Self::ALL.iter().map(Recipe::to_string).collect();
            Error::InvalidArgument(format!("unknown recipe `{s}` ({})", names.join(", ")))
        })
    }
}

/// A results table: one labelled row per method, one cell per column.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub row_header: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<String>)>,
}

impl Table {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
        let io = |e: csv::Error| Error::Io(e.into());
        w.write_record(std::iter::once(&self.row_header).chain(&self.columns)).map_err(io)?;
        for (label, cells) in &self.rows {
            w.write_record(std::iter::once(label).chain(cells)).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut widths: Vec<usize> = std::iter::once(&self.row_header).chain(&self.columns).map(|s| s.chars().count()).collect();
        for (label, cells) in &self.rows {
            for (w, s) in widths.iter_mut().zip(std::iter::once(label).chain(cells)) {
                *w = (*w).max(s.chars().count());
            }
        }
        let line = |f: &mut fmt::Formatter<'_>, items: Vec<&String>| -> fmt::Result {
            let cells: Vec<String> = items.iter().zip(&widths).map(|(s, &w)| format!("{s:<w$}")).collect();
            writeln!(f, "| {} |", cells.join(" | "))
        };
        line(f, std::iter::once(&self.row_header).chain(&self.columns).collect())?;
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        writeln!(f, "|-{}-|", rule.join("-|-"))?;
        for (label, cells) in &self.rows {
            line(f, std::iter::once(label).chain(cells).collect())?;
        }
        Ok(())
    }
}

pub struct RecipeOutput {
    pub recipe: Recipe,
    pub table: Table,
    /// Aggregate over seeds: per `(task, metric)` mean and std of run means.
    pub report: EvalReport,
}

fn cell(mean: f64, std: f64) -> String {
    format!("{mean:.2} ± {std:.2}")
}

fn lookup(report: &EvalReport, task: &str, metric: &str) -> String {
    report.get(task, metric).map_or("n/a".into(), |r| cell(r.mean, r.std))
}

/// Grammar generator ranges bounded by the longest word `max_len`
/// (0 keeps the full ranges).
fn grammar_config(base: &GrammarConfig, kind: GrammarKind, max_len: usize) -> GrammarConfig {
    let mut g = GrammarConfig { kind, count: base.count, seed: base.seed, ..GrammarConfig::new(kind) };
    if max_len > 0 {
        match kind {
            GrammarKind::Anbncn => g.n_range = [1, (max_len / 3).max(1)],
            GrammarKind::Anbkcnk => {
                // n + k + n k <= max_len with n = k = m
                let m = (1..).take_while(|m| 2 * m + m * m <= max_len).last().unwrap_or(1);
                g.n_range = [1, m];
                g.k_range = [1, m];
            }
            GrammarKind::Dyck => g.n_range = [g.n_range[0], (max_len / 2).max(g.n_range[0])],
        }
    }
    g
}

/// Trains `cfg.recipe.seeds` runs (seeds `cfg.seed + s`) and evaluates each
/// on every `(label, test set)` pair. Returns the per-run reports.
fn train_seeds(
    cfg: &RunConfig,
    tests: &dyn Fn(&RunConfig, &datagen::Dataset) -> Result<Vec<(String, datagen::Dataset)>>,
    out: Option<&Path>,
    tag: &str,
    verbose: bool,
) -> Result<Vec<EvalReport>> {
    let mut runs = Vec::new();
    for s in 0..cfg.recipe.seeds.max(1) {
        let mut c = cfg.clone();
        c.seed = cfg.seed.wrapping_add(s as u64);
        let splits = build_data(&c)?;
        let dir = out.map(|o| o.join(format!("{tag}seed{}", c.seed)));
        if verbose {
            eprintln!("== {tag}seed {}", c.seed);
        }
        let outcome = train(&c, &splits, TrainOptions { out_dir: dir.as_deref(), resume: None, verbose })?;
        let store = outcome.best_store()?;
        let mut report = EvalReport::default();
        for (label, data) in tests(&c, &splits.test)? {
            let opts = EvalOptions { label: Some(label), ..Default::default() };
            let r = evaluate(&outcome.trainer.model, &store, &c.loss(), &data, &outcome.config_hash, &opts)?;
            report.rows.extend(r.rows);
        }
        runs.push(report);
    }
    Ok(runs)
}

/// Attaches the Held–Karp length (no target) to eval-only instances.
fn with_optimal_lengths(mut data: datagen::Dataset, closed: bool) -> Result<datagen::Dataset> {
    if data.first().is_some_and(|i| i.len() > HELD_KARP_MAX_N) {
        return Ok(data);
    }
    let lengths: Vec<f64> = data
        .par_iter()
        .map(|inst| datagen::held_karp(&inst.elements, closed).map(|(_, len)| len))
        .collect::<Result<_>>()?;
    for (inst, len) in data.iter_mut().zip(lengths) {
        inst.meta.insert("optimal_length".into(), serde_json::json!(len));
    }
    Ok(data)
}

fn tsp_generalization(cfg: &RunConfig, out: Option<&Path>, verbose: bool) -> Result<(Table, EvalReport)> {
    let mut base = cfg.clone();
    base.data.task = DataTask::Tsp;
    let train_max = base.data.tsp.n_range[1];
    let mut test_sets = Vec::new();
    for &n in &cfg.recipe.tsp_eval_n {
        let tc = TspConfig {
            n_range: [n, n],
            count: cfg.recipe.eval_count,
            targets: false,
            seed: TSP_TEST_SEED.wrapping_add(n as u64),
            ..base.data.tsp.clone()
        };
        test_sets.push((n, with_optimal_lengths(datagen::gen_tsp(&tc)?, tc.closed_tour)?));
    }
    let runs = train_seeds(
        &base,
        &|_, _| Ok(test_sets.iter().map(|(n, d)| (format!("tsp/n={n}"), d.clone())).collect()),
        out,
        "",
        verbose,
    )?;
    let mut report = aggregate_runs(&runs)?;

    let columns: Vec<String> =
        test_sets.iter().map(|(n, _)| if *n > train_max { format!("n={n}*") } else { format!("n={n}") }).collect();
    let (mut hk, mut random, mut sit) = (Vec::new(), Vec::new(), Vec::new());
    for (n, data) in &test_sets {
        let task = format!("tsp/n={n}");
        let closed = base.data.tsp.closed_tour;
        let mut rng = SeededRng::derive(cfg.seed, RANDOM_TOUR_STREAM + *n as u64);
        let rand_lengths: Vec<f64> = data
            .iter()
            .map(|inst| {
                let p = crate::Permutation::new(rng.permutation(inst.len()))?;
                datagen::tour_length(&inst.elements, &p, closed)
            })
            .collect::<Result<_>>()?;
        report.push(&task, "random_length", &rand_lengths, "baseline");
        let (rm, _) = mean_std(&rand_lengths);
        random.push(format!("{rm:.2}"));
        hk.push(report.get(&task, "optimal_length").map_or("n/a".into(), |r| format!("{:.2}", r.mean)));
        sit.push(lookup(&report, &task, "tour_length"));
    }
    let table = Table {
        row_header: "method".into(),
        columns,
        rows: vec![("Held-Karp".into(), hk), ("Random".into(), random), ("SIT".into(), sit)],
    };
    Ok((table, report))
}

fn grammar_suite(cfg: &RunConfig, out: Option<&Path>, verbose: bool) -> Result<(Table, EvalReport)> {
    let mut rows = Vec::new();
    let mut all = EvalReport::default();
    let mut cells = Vec::new();
    for kind in GrammarKind::ALL {
        let mut c = cfg.clone();
        c.data.task = DataTask::Grammar;
        c.data.grammar = grammar_config(&cfg.data.grammar, kind, cfg.recipe.grammar_max_len);
        let label = format!("grammar:{kind}");
        let runs = train_seeds(&c, &|_, test| Ok(vec![(label.clone(), test.clone())]), out, &format!("{kind}_"), verbose)?;
        let agg = aggregate_runs(&runs)?;
        cells.push(lookup(&agg, &label, "validity"));
        all.rows.extend(agg.rows);
    }
    rows.push(("SIT".into(), cells));
    let columns = GrammarKind::ALL.iter().map(GrammarKind::to_string).collect();
    Ok((Table { row_header: "method".into(), columns, rows }, all))
}

fn ruleset_ladder(cfg: &RunConfig, out: Option<&Path>, verbose: bool) -> Result<(Table, EvalReport)> {
    let mut rows = Vec::new();
    let mut all = EvalReport::default();
    for &layers in &cfg.recipe.ruleset_layers {
        let mut cells = Vec::new();
        for &order in &cfg.recipe.ruleset_orders {
            let mut c = cfg.clone();
            c.data.task = DataTask::Ruleset;
            c.data.ruleset.n_rel = order;
            c.model.n_sit_layers = layers;
            let label = format!("ruleset/order={order}/layers={layers}");
            let tag = format!("order{order}_layers{layers}_");
            let runs = train_seeds(&c, &|_, test| Ok(vec![(label.clone(), test.clone())]), out, &tag, verbose)?;
            let agg = aggregate_runs(&runs)?;
            cells.push(lookup(&agg, &label, "validity"));
            all.rows.extend(agg.rows);
        }
        rows.push((format!("SIT ({layers} layers)"), cells));
    }
    let columns = cfg.recipe.ruleset_orders.iter().map(|o| format!("n={o}")).collect();
    Ok((Table { row_header: "method".into(), columns, rows }, all))
}

fn ablation(cfg: &RunConfig, out: Option<&Path>, verbose: bool) -> Result<(Table, EvalReport)> {
    let mut all = EvalReport::default();
    let mut rows = Vec::new();
    let mut columns: Vec<String> = Vec::new();
    for (augment, name) in [(true, "SIT"), (false, "SIT without set augmentation")] {
        let mut c = cfg.clone();
        c.model.augment_set = augment;
        let label = format!("augment_set={augment}");
        let tag = format!("augment_{augment}_");
        let runs = train_seeds(&c, &|_, test| Ok(vec![(label.clone(), test.clone())]), out, &tag, verbose)?;
        let agg = aggregate_runs(&runs)?;
        if columns.is_empty() {
            columns = agg.rows.iter().filter(|r| r.metric != "optimal_length").map(|r| r.metric.clone()).collect();
        }
        rows.push((name.to_string(), columns.iter().map(|m| lookup(&agg, &label, m)).collect()));
        all.rows.extend(agg.rows);
    }
    Ok((Table { row_header: "method".into(), columns, rows }, all))
}

/// Runs `recipe`. With `out`, writes `<recipe>.csv` (the table),
/// `<recipe>_report.csv` / `.jsonl` (flat metric rows) and per-seed
/// training directories.
pub fn run_recipe(recipe: Recipe, cfg: &RunConfig, out: Option<&Path>, verbose: bool) -> Result<RecipeOutput> {
    cfg.validate()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let (table, report) = match recipe {
        Recipe::TspGeneralization => tsp_generalization(cfg, out, verbose)?,
        Recipe::GrammarSuite => grammar_suite(cfg, out, verbose)?,
        Recipe::RulesetLadder => ruleset_ladder(cfg, out, verbose)?,
        Recipe::Ablation => ablation(cfg, out, verbose)?,
    };
    if let Some(dir) = out {
        table.write_csv(&dir.join(format!("{recipe}.csv")))?;
        report.write_csv(&dir.join(format!("{recipe}_report.csv")))?;
        report.write_jsonl(&dir.join(format!("{recipe}_report.jsonl")))?;
    }
    Ok(RecipeOutput { recipe, table, report })
}
