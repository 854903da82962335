//! Ordering metrics and run aggregation.
//!
//! Kendall's tau and PMR are reported on a 0..100 scale (tau on -100..100).
//! Tau is averaged per instance.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{self, Instance, RulesetConfig, TaskTag};
use crate::error::{Error, Result};
use crate::permutation::Permutation;

fn count_inversions(a: &mut [usize], buf: &mut Vec<usize>) -> u64 {
    let n = a.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = count_inversions(&mut a[..mid], buf) + count_inversions(&mut a[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if a[i] <= a[j] {
            buf.push(a[i]);
            i += 1;
        } else {
            buf.push(a[j]);
            inv += (mid - i) as u64;
            j += 1;
        }
    }
    buf.extend_from_slice(&a[i..mid]);
    buf.extend_from_slice(&a[j..]);
    a.copy_from_slice(buf);
    inv
}

/// `100 * (1 - 2 D / C(n, 2))` with `D` the number of element pairs the two
/// orderings put in opposite order.
pub fn kendall_tau(pred: &Permutation, truth: &Permutation) -> Result<f64> {
    let n = pred.len();
    if n != truth.len() {
        return Err(Error::InvalidPermutation(format!("lengths differ: {n} vs {}", truth.len())));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("kendall tau needs at least two elements".into()));
    }
    let pos = truth.positions();
    let mut ranks: Vec<usize> = pred.indices().iter().map(|&i| pos[i]).collect();
    let discordant = count_inversions(&mut ranks, &mut Vec::with_capacity(n));
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(100.0 * (1.0 - 2.0 * discordant as f64 / pairs))
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!("{a} predictions for {b} references")));
    }
    if a == 0 {
        return Err(Error::InvalidArgument("no predictions to score".into()));
    }
    Ok(())
}

/// Percentage of exactly matching orderings.
pub fn pmr(preds: &[Permutation], truths: &[Permutation]) -> Result<f64> {
    check_lengths(preds.len(), truths.len())?;
    for (p, t) in preds.iter().zip(truths) {
        if p.len() != t.len() {
            return Err(Error::InvalidPermutation(format!("lengths differ: {} vs {}", p.len(), t.len())));
        }
    }
    let hits = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

/// Per-instance tau values; sets with fewer than two elements are skipped.
pub fn kendall_taus(preds: &[Permutation], truths: &[Permutation]) -> Result<Vec<f64>> {
    check_lengths(preds.len(), truths.len())?;
    preds
        .iter()
        .zip(truths)
        .filter(|(p, _)| p.len() >= 2)
        .map(|(p, t)| kendall_tau(p, t))
        .collect()
}

/// Percentage of instances whose elements, reordered by the prediction, pass
/// `checker`.
pub fn validity_rate<F>(checker: F, instances: &[Instance], preds: &[Permutation]) -> Result<f64>
where
    F: Fn(&Instance, &Permutation) -> Result<bool>,
{
    check_lengths(preds.len(), instances.len())?;
    let mut ok = 0usize;
    for (inst, p) in instances.iter().zip(preds) {
        if checker(inst, p)? {
            ok += 1;
        }
    }
    Ok(100.0 * ok as f64 / instances.len() as f64)
}

/// Validity for generated grammar and ruleset instances.
pub fn task_checker(inst: &Instance, perm: &Permutation) -> Result<bool> {
    match inst.task {
        TaskTag::Grammar(kind) => {
            let symbols = datagen::grammar_symbols(inst)?;
            if symbols.len() != perm.len() {
                return Err(Error::InvalidPermutation("prediction length differs from the set size".into()));
            }
            datagen::check_grammar(kind, &perm.apply(&symbols))
        }
        TaskTag::Ruleset => datagen::check_ruleset(inst, perm, &RulesetConfig::default()),
        other => Err(Error::InvalidArgument(format!("no validity checker for {other} instances"))),
    }
}

/// Grammar predictions with equal tokens put in canonical order; other tasks
/// pass through unchanged.
pub fn canonical_prediction(inst: &Instance, perm: &Permutation) -> Result<Permutation> {
    match inst.task {
        TaskTag::Grammar(_) => datagen::canonicalize_duplicates(&datagen::grammar_symbols(inst)?, perm),
        _ => Ok(perm.clone()),
    }
}

/// Mean tour length of the predictions.
pub fn avg_tour_length(instances: &[Instance], preds: &[Permutation], closed: bool) -> Result<f64> {
    check_lengths(preds.len(), instances.len())?;
    let mut total = 0.0;
    for (inst, p) in instances.iter().zip(preds) {
        total += datagen::tour_length(&inst.elements, p, closed)?;
    }
    Ok(total / instances.len() as f64)
}

/// Mean and sample (n - 1) standard deviation; one value has std 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Task label, optionally with a cardinality bucket (`tsp/n=15`).
    pub task: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub config_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
}

impl EvalReport {
    /// Adds a row summarizing per-instance (or per-run) values.
    pub fn push(&mut self, task: &str, metric: &str, values: &[f64], config_hash: &str) {
        let (mean, std) = mean_std(values);
        self.rows.push(MetricRow {
            task: task.into(),
            metric: metric.into(),
            mean,
            std,
            count: values.len(),
            config_hash: config_hash.into(),
        });
    }

    pub fn get(&self, task: &str, metric: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.task == task && r.metric == metric)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for row in &self.rows {
            serde_json::to_writer(&mut out, row)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io(e.into()))?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<MetricRow>, _>>()
            .map_err(|e| Error::Parse { line: e.position().map_or(0, |p| p.line() as usize), msg: e.to_string() })?;
        Ok(Self { rows })
    }
}

/// Combines reports of repeated runs: for each `(task, metric)` the mean and
/// sample std are taken over the run-level means. The aggregate's config hash
/// digests the sorted run hashes.
pub fn aggregate_runs(reports: &[EvalReport]) -> Result<EvalReport> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no runs to aggregate".into()));
    }
    let mut groups: BTreeMap<(String, String), (Vec<f64>, Vec<String>)> = BTreeMap::new();
    let mut order = Vec::new();
    for report in reports {
        for row in &report.rows {
            let key = (row.task.clone(), row.metric.clone());
            let entry = groups.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                Default::default()
            });
            entry.0.push(row.mean);
            entry.1.push(row.config_hash.clone());
        }
    }
    let mut out = EvalReport::default();
    for key in order {
        let (values, mut hashes) = groups.remove(&key).expect("grouped");
        hashes.sort();
        let digest = Sha256::digest(hashes.join(",").as_bytes());
        let hash: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        out.push(&key.0, &key.1, &values, &hash);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_grammar, gen_ruleset, GrammarConfig, GrammarKind};
    use crate::numerics::{Matrix, SeededRng};
    use proptest::prelude::*;
    use serde_json::Map;

    fn perm(v: &[usize]) -> Permutation {
        Permutation::new(v.to_vec()).unwrap()
    }

    fn brute_tau(p: &Permutation, t: &Permutation) -> f64 {
        let (pp, tp) = (p.positions(), t.positions());
        let n = p.len();
        let mut d = 0;
        for i in 0..n {
            for j in i + 1..n {
                if (pp[i] < pp[j]) != (tp[i] < tp[j]) {
                    d += 1;
                }
            }
        }
        100.0 * (1.0 - 2.0 * d as f64 / (n * (n - 1) / 2) as f64)
    }

    #[test]
    fn tau_examples() {
        let t = perm(&[0, 1, 2, 3]);
        assert_eq!(kendall_tau(&t, &t).unwrap(), 100.0);
        assert_eq!(kendall_tau(&t.reversed(), &t).unwrap(), -100.0);
        let tau = kendall_tau(&perm(&[0, 2, 1]), &perm(&[0, 1, 2])).unwrap();
        assert!((tau - 100.0 / 3.0).abs() < 1e-12);
        assert!(kendall_tau(&perm(&[0]), &perm(&[0])).is_err());
        assert!(kendall_tau(&perm(&[0, 1]), &perm(&[0, 1, 2])).is_err());
    }

    #[test]
    fn tau_matches_pair_enumeration() {
        let mut rng = SeededRng::new(4);
        for _ in 0..1000 {
            let n = rng.int_inclusive(2, 50);
            let p = perm(&rng.permutation(n));
            let t = perm(&rng.permutation(n));
            assert_eq!(kendall_tau(&p, &t).unwrap(), brute_tau(&p, &t));
        }
    }

    proptest! {
        #[test]
        fn tau_is_symmetric_and_reflexive(seed in any::<u64>(), n in 2usize..40) {
            let mut rng = SeededRng::new(seed);
            let p = perm(&rng.permutation(n));
            let t = perm(&rng.permutation(n));
            prop_assert_eq!(kendall_tau(&p, &p).unwrap(), 100.0);
            prop_assert_eq!(kendall_tau(&p, &t).unwrap(), kendall_tau(&t, &p).unwrap());
        }
    }

    #[test]
    fn pmr_examples() {
        let a = vec![perm(&[0, 1]), perm(&[1, 0]), perm(&[0, 1, 2]), perm(&[2, 1, 0])];
        assert_eq!(pmr(&a, &a).unwrap(), 100.0);
        let b: Vec<_> = a.iter().map(|p| p.reversed()).collect();
        assert_eq!(pmr(&a, &b).unwrap(), 0.0);
        let c = vec![a[0].clone(), b[1].clone(), b[2].clone(), b[3].clone()];
        assert_eq!(pmr(&c, &a).unwrap(), 25.0);
        let taus = kendall_taus(&a, &a).unwrap();
        assert_eq!(mean_std(&taus).0, 100.0);
        assert!(pmr(&a[..2], &a).is_err());
    }

    #[test]
    fn validity_of_generated_targets() {
        for kind in GrammarKind::ALL {
            let mut cfg = GrammarConfig { count: 200, ..GrammarConfig::new(kind) };
            cfg.n_range = [1.max(cfg.n_range[0]), 8];
            cfg.k_range = [1, 4.min(cfg.k_range[1])];
            let data = gen_grammar(&cfg).unwrap();
            let targets: Vec<_> = data.iter().map(|i| i.target.clone().unwrap()).collect();
            assert_eq!(validity_rate(task_checker, &data, &targets).unwrap(), 100.0);
        }
        for n_rel in [2, 3, 4, 5] {
            let data = gen_ruleset(&RulesetConfig { n_rel, count: 50, ..Default::default() }).unwrap();
            let targets: Vec<_> = data.iter().map(|i| i.target.clone().unwrap()).collect();
            assert_eq!(validity_rate(task_checker, &data, &targets).unwrap(), 100.0);
        }
    }

    #[test]
    fn validity_hand_count() {
        // ten aabbcc-style instances; predictions valid on exactly 6
        let cfg = GrammarConfig { n_range: [2, 2], count: 10, ..GrammarConfig::new(GrammarKind::Anbncn) };
        let data = gen_grammar(&cfg).unwrap();
        let mut preds = Vec::new();
        for (i, inst) in data.iter().enumerate() {
            let t = inst.target.clone().unwrap().into_inner();
            preds.push(if i < 6 {
                perm(&t)
            } else {
                // a b c a b c
                perm(&[t[0], t[2], t[4], t[1], t[3], t[5]])
            });
        }
        assert_eq!(validity_rate(task_checker, &data, &preds).unwrap(), 60.0);
    }

    #[test]
    fn tour_lengths() {
        let square = Matrix::from_rows(&[[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]).unwrap();
        let inst = Instance::new(square, None, TaskTag::Tsp, Map::new()).unwrap();
        let id = Permutation::identity(4);
        assert!((avg_tour_length(std::slice::from_ref(&inst), std::slice::from_ref(&id), true).unwrap() - 4.0).abs() < 1e-12);

        let mut rng = SeededRng::new(1);
        let insts: Vec<Instance> = (0..5)
            .map(|_| Instance::new(Matrix::from_vec(6, 2, (0..12).map(|_| rng.uniform()).collect()).unwrap(), None, TaskTag::Tsp, Map::new()).unwrap())
            .collect();
        let preds: Vec<Permutation> = (0..5).map(|_| perm(&rng.permutation(6))).collect();
        let manual: f64 = insts.iter().zip(&preds).map(|(i, p)| datagen::tour_length(&i.elements, p, false).unwrap()).sum::<f64>() / 5.0;
        assert!((avg_tour_length(&insts, &preds, false).unwrap() - manual).abs() < 1e-12);
    }

    #[test]
    fn aggregation() {
        let run = |v: f64, hash: &str| {
            let mut r = EvalReport::default();
            r.push("t", "pmr", &[v], hash);
            r
        };
        let agg = aggregate_runs(&[run(10.0, "a"), run(20.0, "b"), run(30.0, "c")]).unwrap();
        let row = agg.get("t", "pmr").unwrap();
        assert_eq!((row.mean, row.std, row.count), (20.0, 10.0, 3));
        let rev = aggregate_runs(&[run(30.0, "c"), run(10.0, "a"), run(20.0, "b")]).unwrap();
        assert_eq!(rev, agg);
        let single = aggregate_runs(&[run(7.0, "a")]).unwrap();
        assert_eq!(single.rows[0].std, 0.0);
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = EvalReport::default();
        r.push("grammar:dyck", "validity", &[90.0, 100.0], "abc");
        r.push("tsp/n=15", "tour_length", &[3.25], "abc");
        let path = dir.path().join("r.csv");
        r.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("task,metric,mean,std,count,config_hash\n"));
        assert_eq!(EvalReport::read_csv(&path).unwrap(), r);
    }
}
