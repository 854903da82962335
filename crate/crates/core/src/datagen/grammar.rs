//! Formal-grammar ordering tasks: `a^n b^n c^n`, `a^n b^k c^(nk)` and
//! two-bracket Dyck words.
//!
//! Each token is a one-hot symbol plus one tiebreak value. Among equal
//! symbols the tiebreak values increase with input index, and targets put
//! equal symbols in input-index order, so the canonical target is visible to
//! a model that cannot see positions.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map};

use super::{Dataset, Instance, TaskTag};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};
use crate::permutation::Permutation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrammarKind {
    Anbncn,
    Anbkcnk,
    Dyck,
}

impl GrammarKind {
    pub const ALL: [GrammarKind; 3] = [Self::Anbncn, Self::Anbkcnk, Self::Dyck];

    pub fn alphabet(self) -> &'static [char] {
        match self {
            Self::Anbncn | Self::Anbkcnk => &['a', 'b', 'c'],
            Self::Dyck => &['{', '}', '(', ')'],
        }
    }

    /// Width of a token feature row.
    pub fn d_raw(self) -> usize {
        self.alphabet().len() + 1
    }
}

impl fmt::Display for GrammarKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Anbncn => "anbncn",
            Self::Anbkcnk => "anbkcnk",
            Self::Dyck => "dyck",
        })
    }
}

impl FromStr for GrammarKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "anbncn" => Ok(Self::Anbncn),
            "anbkcnk" => Ok(Self::Anbkcnk),
            "dyck" => Ok(Self::Dyck),
            _ => Err(Error::InvalidArgument(format!("unknown grammar `{s}` (anbncn, anbkcnk, dyck)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarConfig {
    pub kind: GrammarKind,
    /// Inclusive range of `n` (pairs for Dyck words).
    pub n_range: [usize; 2],
    /// Inclusive range of `k`; only used by `anbkcnk`.
    pub k_range: [usize; 2],
    pub count: usize,
    pub seed: u64,
}

impl GrammarConfig {
    /// Full-size parameter ranges for `kind`.
    pub fn new(kind: GrammarKind) -> Self {
        let (n_range, k_range) = match kind {
            GrammarKind::Anbncn => ([1, 100], [1, 1]),
            GrammarKind::Anbkcnk => ([1, 25], [1, 25]),
            GrammarKind::Dyck => ([2, 100], [1, 1]),
        };
        Self {
            kind,
            n_range,
            k_range,
            count: 1000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [("n_range", self.n_range), ("k_range", self.k_range)] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("grammar {name} [{lo}, {hi}] must satisfy 1 <= min <= max")));
            }
        }
        Ok(())
    }
}

fn symbol_index(kind: GrammarKind, c: char) -> Result<usize> {
    kind.alphabet()
        .iter()
        .position(|&a| a == c)
        .ok_or_else(|| Error::InvalidArgument(format!("symbol `{c}` is not in the {kind} alphabet")))
}

/// Whether `symbols` is a word of the grammar.
pub fn check_grammar(kind: GrammarKind, symbols: &[char]) -> Result<bool> {
    for &c in symbols {
        symbol_index(kind, c)?;
    }
    match kind {
        GrammarKind::Anbncn | GrammarKind::Anbkcnk => {
            let run = |start: usize, c: char| symbols[start..].iter().take_while(|&&s| s == c).count();
            let a = run(0, 'a');
            let b = run(a, 'b');
            let c = run(a + b, 'c');
            if a == 0 || b == 0 || c == 0 || a + b + c != symbols.len() {
                return Ok(false);
            }
            Ok(match kind {
                GrammarKind::Anbncn => a == b && b == c,
                _ => c == a * b,
            })
        }
        GrammarKind::Dyck => {
            let mut stack = Vec::new();
            for &c in symbols {
                match c {
                    '{' | '(' => stack.push(c),
                    '}' if stack.pop() != Some('{') => return Ok(false),
                    ')' if stack.pop() != Some('(') => return Ok(false),
                    _ => {}
                }
            }
            Ok(stack.is_empty())
        }
    }
}

/// Uniformly random balanced word with `pairs` matched pairs, each pair's
/// bracket kind drawn uniformly. Shapes come from the cycle lemma: rotate a
/// shuffled sequence of `pairs` up-steps and `pairs + 1` down-steps to start
/// after its first minimum, then drop the final down-step.
pub(crate) fn sample_dyck(pairs: usize, rng: &mut SeededRng) -> Vec<char> {
    let len = 2 * pairs + 1;
    let mut steps: Vec<i32> = (0..len).map(|i| if i < pairs { 1 } else { -1 }).collect();
    rng.shuffle(&mut steps);
    let mut sum = 0;
    let mut min = i32::MAX;
    let mut cut = 0;
    for (i, &s) in steps.iter().enumerate() {
        sum += s;
        if sum < min {
            min = sum;
            cut = i + 1;
        }
    }
    steps.rotate_left(cut % len);
    steps.pop();

    let mut out = Vec::with_capacity(2 * pairs);
    let mut open = Vec::new();
    for s in steps {
        if s > 0 {
            let (o, c) = if rng.bernoulli(0.5) { ('{', '}') } else { ('(', ')') };
            open.push(c);
            out.push(o);
        } else {
            out.push(open.pop().expect("balanced shape"));
        }
    }
    out
}

fn canonical_word(cfg: &GrammarConfig, rng: &mut SeededRng) -> (Vec<char>, Map<String, serde_json::Value>) {
    let n = rng.int_inclusive(cfg.n_range[0], cfg.n_range[1]);
    let mut meta = Map::new();
    meta.insert("n".into(), json!(n));
    let word = match cfg.kind {
        GrammarKind::Anbncn => [vec!['a'; n], vec!['b'; n], vec!['c'; n]].concat(),
        GrammarKind::Anbkcnk => {
            let k = rng.int_inclusive(cfg.k_range[0], cfg.k_range[1]);
            meta.insert("k".into(), json!(k));
            [vec!['a'; n], vec!['b'; k], vec!['c'; n * k]].concat()
        }
        GrammarKind::Dyck => sample_dyck(n, rng),
    };
    (word, meta)
}

/// Builds a shuffled token set for a canonical word.
pub(crate) fn shuffle_word(kind: GrammarKind, word: &[char], rng: &mut SeededRng) -> Result<(Matrix, Vec<char>, Permutation)> {
    let m = word.len();
    let order = rng.permutation(m);
    let symbols: Vec<char> = order.iter().map(|&slot| word[slot]).collect();

    let alpha = kind.alphabet().len();
    let mut features = Matrix::zeros(m, alpha + 1);
    let mut target = vec![0; m];
    for &sym in kind.alphabet() {
        let inputs: Vec<usize> = (0..m).filter(|&i| symbols[i] == sym).collect();
        let slots: Vec<usize> = (0..m).filter(|&t| word[t] == sym).collect();
        let mut ties: Vec<f64> = (0..inputs.len()).map(|_| rng.uniform()).collect();
        ties.sort_by(f64::total_cmp);
        let col = symbol_index(kind, sym)?;
        for ((&i, &t), tie) in inputs.iter().zip(&slots).zip(ties) {
            features.set(i, col, 1.0);
            features.set(i, alpha, tie);
            target[t] = i;
        }
    }
    Ok((features, symbols, Permutation::new(target)?))
}

/// One instance per draw: the canonical word's tokens in random order, with
/// the target restoring the word.
pub fn gen_grammar(cfg: &GrammarConfig) -> Result<Dataset> {
    cfg.validate()?;
    (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = SeededRng::derive(cfg.seed, i as u64);
            let (word, mut meta) = canonical_word(cfg, &mut rng);
            let (features, symbols, target) = shuffle_word(cfg.kind, &word, &mut rng)?;
            meta.insert("symbols".into(), json!(symbols.iter().collect::<String>()));
            Instance::new(features, Some(target), TaskTag::Grammar(cfg.kind), meta)
        })
        .collect()
}

/// Reassigns equal symbols within `perm` so that they appear in input-index
/// order, keeping the symbol sequence unchanged.
pub fn canonicalize_duplicates(symbols: &[char], perm: &Permutation) -> Result<Permutation> {
    if symbols.len() != perm.len() {
        return Err(Error::InvalidPermutation(format!(
            "ordering of {} over {} symbols",
            perm.len(),
            symbols.len()
        )));
    }
    let mut out = perm.indices().to_vec();
    let mut seen: Vec<char> = Vec::new();
    for &sym in symbols {
        if seen.contains(&sym) {
            continue;
        }
        seen.push(sym);
        let slots: Vec<usize> = (0..out.len()).filter(|&t| symbols[perm.indices()[t]] == sym).collect();
        let inputs: Vec<usize> = (0..symbols.len()).filter(|&i| symbols[i] == sym).collect();
        for (t, i) in slots.into_iter().zip(inputs) {
            out[t] = i;
        }
    }
    Permutation::new(out)
}

/// Symbols of a grammar instance in input order.
pub fn grammar_symbols(inst: &Instance) -> Result<Vec<char>> {
    let s: String = inst.meta_field("symbols")?;
    Ok(s.chars().collect())
}
