//! Helpers and independent oracles shared by the integration test targets.
#![allow(dead_code)]

use std::path::Path;

use itertools::Itertools;
use set2seq::datagen::{self, save_dataset, load_dataset, GrammarConfig, GrammarKind, RulesetConfig, TspConfig};
use set2seq::decoder;
use set2seq::encoder::Dropout;
use set2seq::harness::{train, DataTask, RunConfig, Splits, TrainBatch, TrainOptions};
use set2seq::model::Set2Seq;
use set2seq::numerics::{Graph, ParameterStore};
use set2seq::{Matrix, Permutation, SeededRng};

pub fn random_matrix(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut SeededRng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform_range(lo, hi)).collect()).unwrap()
}

pub fn log_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Small grammar run that trains in well under a second per epoch.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::desk();
    c.model.d_model = 8;
    c.model.n_heads = 2;
    c.model.d_att = 8;
    c.model.pair_hidden = 4;
    c.model.zero_init_pointer = false;
    c.optim.batch_size = 4;
    c.optim.epochs = 2;
    c.data.task = DataTask::Grammar;
    c.data.grammar.n_range = [1, 3];
    c.data.grammar.count = 24;
    c.data.test_count = 8;
    c
}

pub fn model_with(cfg: &RunConfig, d_input: usize, seed: u64) -> (Set2Seq, ParameterStore) {
    let mut store = ParameterStore::new();
    let model = Set2Seq::new(&mut store, cfg.model_config(d_input), &mut SeededRng::new(seed)).unwrap();
    (model, store)
}

/// Exhaustive shortest tour or path. Closed tours fix node 0 as the start.
pub fn brute_force_tsp(points: &Matrix, closed: bool) -> f64 {
    let n = points.rows();
    let dist = |a: usize, b: usize| {
        let (p, q) = (points.row(a), points.row(b));
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    };
    let length = |order: &[usize]| {
        let mut total: f64 = order.windows(2).map(|w| dist(w[0], w[1])).sum();
        if closed && order.len() > 1 {
            total += dist(order[order.len() - 1], order[0]);
        }
        total
    };
    if closed {
        (1..n)
            .permutations(n - 1)
            .map(|rest| {
                let mut order = vec![0];
                order.extend(rest);
                length(&order)
            })
            .fold(f64::INFINITY, f64::min)
    } else {
        (0..n).permutations(n).map(|o| length(&o)).fold(f64::INFINITY, f64::min)
    }
}

/// Kendall's tau (×100) by enumerating every element pair.
pub fn pairwise_tau(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len();
    let pos = |order: &[usize], x: usize| order.iter().position(|&v| v == x).unwrap();
    let mut discordant = 0usize;
    for a in 0..n {
        for b in a + 1..n {
            let p = pos(pred, a) < pos(pred, b);
            let t = pos(truth, a) < pos(truth, b);
            if p != t {
                discordant += 1;
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    100.0 * (1.0 - 2.0 * discordant as f64 / pairs)
}

/// Largest deviation of the set vector from invariance and of the element
/// matrix from equivariance over `sets` random sets, each encoded in
/// `orders` random orders.
pub fn invariance_max_diff(cfg: &RunConfig, sets: usize, orders: usize, seed: u64) -> f64 {
    let d = 3;
    let (model, store) = model_with(cfg, d, seed);
    let mut rng = SeededRng::new(seed ^ 0xabcd);
    let mut worst: f64 = 0.0;
    for _ in 0..sets {
        let n = rng.int_inclusive(2, 12);
        let x = random_matrix(n, d, -2.0, 2.0, &mut rng);
        let mask = vec![true; n];
        let base = model.encode(&store, &x, &mask).unwrap();
        for _ in 0..orders {
            let perm = rng.permutation(n);
            let xp = x.gather_rows(&perm);
            let enc = model.encode(&store, &xp, &mask).unwrap();
            worst = worst.max(enc.set.max_abs_diff(&base.set));
            worst = worst.max(enc.elements.max_abs_diff(&base.elements.gather_rows(&perm)));
        }
    }
    worst
}

/// Instances where greedy decoding of a random model fails to return a
/// bijection on `0..n`, over `cases` random models and sets.
pub fn greedy_non_bijective(cases: usize, seed: u64) -> usize {
    let mut rng = SeededRng::new(seed);
    let mut failures = 0;
    for case in 0..cases {
        let mut cfg = tiny_config();
        cfg.model.d_model = 2 * rng.int_inclusive(1, 4);
        cfg.model.n_sit_layers = rng.int_inclusive(0, 2);
        cfg.model.augment_set = rng.bernoulli(0.5);
        cfg.model.zero_init_pointer = rng.bernoulli(0.2);
        let d = rng.int_inclusive(1, 4);
        let (model, store) = model_with(&cfg, d, seed.wrapping_add(case as u64));
        let n = rng.int_inclusive(1, 10);
        let x = random_matrix(n, d, -5.0, 5.0, &mut rng);
        let ok = match model.predict(&store, &x, &vec![true; n]) {
            Ok(p) => {
                let mut seen = p.indices().to_vec();
                seen.sort_unstable();
                seen == (0..n).collect::<Vec<_>>()
            }
            Err(_) => false,
        };
        if !ok {
            failures += 1;
        }
    }
    failures
}

/// Largest difference in loss terms and gradients between each instance on
/// its own and the same instance inside a padded batch. Predictions must
/// also agree (a mismatch returns infinity).
pub fn padding_max_diff(seed: u64) -> f64 {
    let mut cfg = tiny_config();
    cfg.optim.dropout = 0.0;
    let data = datagen::gen_grammar(&GrammarConfig { kind: GrammarKind::Dyck, n_range: [1, 5], count: 6, seed, ..GrammarConfig::new(GrammarKind::Dyck) }).unwrap();
    let d = data[0].d_raw();
    let (model, store) = model_with(&cfg, d, seed);
    let loss = cfg.loss();
    let items: Vec<_> = data.iter().collect();
    let batch = TrainBatch::new(&items).unwrap();
    let run = |x: &Matrix, mask: &[bool], y: &Permutation| {
        let mut g = Graph::new(&store);
        let (l, _) = model.instance_graph(&mut g, x, mask, y, &loss, &mut Dropout::off()).unwrap();
        let total = decoder::instance_loss(&mut g, &l, &loss).unwrap();
        let grads = g.backward(total).unwrap();
        (g.scalar(l.nll), g.scalar(l.l_s), grads)
    };
    let mut worst: f64 = 0.0;
    for (i, inst) in data.iter().enumerate() {
        let y = inst.target.as_ref().unwrap();
        let mask = vec![true; inst.len()];
        let (nll, ls, grads) = run(&inst.elements, &mask, y);
        let (pnll, pls, pgrads) = run(&batch.elements[i], &batch.pad_mask[i], &batch.targets[i]);
        worst = worst.max((nll - pnll).abs()).max((ls - pls).abs());
        for (a, b) in grads.iter().zip(&pgrads) {
            worst = worst.max(a.max_abs_diff(b));
        }
        let single = model.predict(&store, &inst.elements, &mask).unwrap();
        let padded = model.predict(&store, &batch.elements[i], &batch.pad_mask[i]).unwrap();
        if single != padded {
            return f64::INFINITY;
        }
    }
    worst
}

/// Save/load of generated TSP, grammar and ruleset data is value-exact.
pub fn round_trip_exact(dir: &Path) -> bool {
    let sets = [
        datagen::gen_tsp(&TspConfig { n_range: [3, 8], count: 30, seed: 4, ..Default::default() }).unwrap(),
        datagen::gen_tsp(&TspConfig { n_range: [14, 16], count: 5, targets: false, seed: 5, ..Default::default() }).unwrap(),
        datagen::gen_grammar(&GrammarConfig { count: 30, seed: 6, ..GrammarConfig::new(GrammarKind::Anbkcnk) }).unwrap(),
        datagen::gen_ruleset(&RulesetConfig { count: 30, seed: 7, ..Default::default() }).unwrap(),
    ];
    sets.iter().enumerate().all(|(i, data)| {
        let path = dir.join(format!("rt{i}.jsonl"));
        save_dataset(data, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        back == *data
            && back
                .iter()
                .zip(data)
                .all(|(a, b)| a.elements.data().iter().zip(b.elements.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
    })
}

/// Two same-seed runs write byte-identical `metrics.jsonl` files.
pub fn same_seed_logs_identical(dir: &Path) -> bool {
    let cfg = tiny_config();
    let splits = set2seq::harness::build_data(&cfg).unwrap();
    let run = |name: &str| {
        let out = dir.join(name);
        train(&cfg, &splits, TrainOptions { out_dir: Some(&out), ..Default::default() }).unwrap();
        std::fs::read(out.join("metrics.jsonl")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    !a.is_empty() && a == b
}

pub fn splits_of(cfg: &RunConfig) -> Splits {
    set2seq::harness::build_data(cfg).unwrap()
}
