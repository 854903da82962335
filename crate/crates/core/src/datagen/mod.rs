//! Benchmark generators, exact oracles, validity checkers and the dataset
//! file format.
//!
//! A dataset file holds one JSON record per line:
//!
//! ```text
//! {"elements": [[0.1, 0.7], ...], "target": [2, 0, 1] | null, "task": "tsp", "meta": {...}}
//! ```
//!
//! Reals are written at full precision and read back exactly.

mod grammar;
mod ruleset;
mod tsp;

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::permutation::Permutation;

pub use grammar::{canonicalize_duplicates, check_grammar, grammar_symbols, gen_grammar, GrammarConfig, GrammarKind};
pub use ruleset::{check_ruleset, gen_ruleset, ruleset_order, ruleset_score, RulesetConfig};
pub use tsp::{canonical_tour, gen_tsp, held_karp, tour_length, TspConfig, TspStart, HELD_KARP_MAX_N, TSP_TARGET_MAX_N};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskTag {
    Tsp,
    Grammar(GrammarKind),
    Ruleset,
    Embedded,
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Tsp => f.write_str("tsp"),
            Self::Grammar(kind) => write!(f, "grammar:{kind}"),
            Self::Ruleset => f.write_str("ruleset"),
            Self::Embedded => f.write_str("embedded"),
        }
    }
}

impl FromStr for TaskTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsp" => Ok(Self::Tsp),
            "ruleset" => Ok(Self::Ruleset),
            "embedded" => Ok(Self::Embedded),
            _ => match s.strip_prefix("grammar:") {
                Some(kind) => Ok(Self::Grammar(kind.parse()?)),
                None => Err(Error::InvalidArgument(format!("unknown task `{s}`"))),
            },
        }
    }
}

impl Serialize for TaskTag {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TaskTag {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One set with its (optional) reference ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    /// `n x d_raw`, one row per set element.
    pub elements: Matrix,
    pub target: Option<Permutation>,
    pub task: TaskTag,
    pub meta: Map<String, Value>,
}

impl Instance {
    pub fn new(elements: Matrix, target: Option<Permutation>, task: TaskTag, meta: Map<String, Value>) -> Result<Self> {
        if elements.rows() == 0 {
            return Err(Error::EmptySet("instance without elements".into()));
        }
        if let Some(t) = &target {
            if t.len() != elements.rows() {
                return Err(Error::InvalidPermutation(format!(
                    "target of length {} for {} elements",
                    t.len(),
                    elements.rows()
                )));
            }
        }
        Ok(Self { elements, target, task, meta })
    }

    pub fn len(&self) -> usize {
        self.elements.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.rows() == 0
    }

    pub fn d_raw(&self) -> usize {
        self.elements.cols()
    }

    /// Deserializes one metadata entry.
    pub fn meta_field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::InvalidArgument(format!("{} instance lacks meta field `{key}`", self.task)))?;
        serde_json::from_value(v.clone()).map_err(Error::from)
    }
}

pub type Dataset = Vec<Instance>;

#[derive(Serialize, Deserialize)]
struct Record {
    elements: Vec<Vec<f64>>,
    target: Option<Vec<usize>>,
    task: TaskTag,
    #[serde(default)]
    meta: Map<String, Value>,
}

impl From<&Instance> for Record {
    fn from(inst: &Instance) -> Self {
        Self {
            elements: (0..inst.elements.rows()).map(|r| inst.elements.row(r).to_vec()).collect(),
            target: inst.target.as_ref().map(|t| t.indices().to_vec()),
            task: inst.task,
            meta: inst.meta.clone(),
        }
    }
}

fn parse_record(line: &str) -> std::result::Result<Instance, String> {
    let rec: Record = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let elements = Matrix::from_rows(&rec.elements).map_err(|e| e.to_string())?;
    let target = rec
        .target
        .map(Permutation::new)
        .transpose()
        .map_err(|e| e.to_string())?;
    Instance::new(elements, target, rec.task, rec.meta).map_err(|e| e.to_string())
}

/// Writes one record per line.
pub fn save_dataset(dataset: &[Instance], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for inst in dataset {
        serde_json::to_writer(&mut out, &Record::from(inst))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset; blank lines are skipped. Every element row in the file
/// must have the same width.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut d_raw: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let inst = parse_record(&line).map_err(|msg| Error::Parse { line: lineno, msg })?;
        match d_raw {
            None => d_raw = Some(inst.d_raw()),
            Some(d) if d != inst.d_raw() => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("element width {} differs from {d} on earlier lines", inst.d_raw()),
                })
            }
            Some(_) => {}
        }
        out.push(inst);
    }
    Ok(out)
}

/// Loads precomputed-embedding sets (e.g. sentence embeddings); every record
/// needs a target.
pub fn load_embedded(path: &Path) -> Result<Dataset> {
    let data = load_dataset(path)?;
    if let Some(i) = data.iter().position(|inst| inst.target.is_none()) {
        return Err(Error::Parse {
            line: i + 1,
            msg: "embedded record without a target".into(),
        });
    }
    Ok(data)
}
