//! Dataset ingestion and unification into a fixed number of options.
//!
//! Every raw record is turned into an [`Example`] with exactly `k` options:
//!
//! 1. more than `k` options: keep the gold option, randomly discard wrong ones;
//! 2. fewer than `k` options: append `"N/A"` placeholders;
//! 3. a list of gold answers: pick one at random and draw `k - 1` negatives
//!    from the task's held-out pool, never from the remaining gold answers;
//! 4. an empty gold list (where allowed): use the task's templated truth
//!    option and draw negatives as in rule 3.
//!
//! After rules 1, 3 and 4 the options are shuffled so the gold position is
//! uniform. Rule 2 leaves the label where it was.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const NA_OPTION: &str = "N/A";
pub const DEFAULT_EMPTY_GOLD_TEXT: &str = "there is no violation";
pub const DEFAULT_K: usize = 4;
const MANIFEST_FORMAT: &str = "prefixmtl.manifest.v1";

/// Gold answer of a raw record: an option index or a list of correct option texts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gold {
    Index(usize),
    List(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub context: String,
    #[serde(default)]
    pub question: Option<String>,
    #[serde(default)]
    pub options: Vec<String>,
    pub gold: Gold,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub allows_empty_gold: bool,
}

/// A unified multiple-choice example with exactly `k` options.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub context: String,
    pub question: String,
    pub options: Vec<String>,
    #[serde(rename = "gold")]
    pub label: usize,
}

impl Example {
    pub fn gold_text(&self) -> &str {
        &self.options[self.label]
    }
}

impl From<Example> for RawExample {
    fn from(ex: Example) -> Self {
        RawExample {
            context: ex.context,
            question: Some(ex.question),
            options: ex.options,
            gold: Gold::Index(ex.label),
            allows_empty_gold: false,
        }
    }
}

/// Candidate option texts drawn from every gold list of a dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HeldOutPool {
    items: BTreeMap<String, usize>,
}

impl HeldOutPool {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a RawExample>) -> Self {
        let mut items = BTreeMap::new();
        for ex in examples {
            if let Gold::List(golds) = &ex.gold {
                for g in golds {
                    *items.entry(g.clone()).or_default() += 1;
                }
            }
        }
        Self { items }
    }

    pub fn contains(&self, item: &str) -> bool {
        self.items.contains_key(item)
    }

    pub fn count(&self, item: &str) -> usize {
        self.items.get(item).copied().unwrap_or(0)
    }

    /// Distinct candidates not in `exclude`, in sorted order.
    fn candidates(&self, exclude: &HashSet<&str>) -> Vec<&str> {
        self.items
            .keys()
            .map(String::as_str)
            .filter(|item| !exclude.contains(item))
            .collect()
    }
}

/// Which unification rule changed an example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    Unchanged,
    Discarded(usize),
    Padded(usize),
    SampledFromGoldList,
    TemplatedTruth,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionStats {
    pub examples: usize,
    pub unchanged: usize,
    pub rule1_examples: usize,
    pub rule1_options_discarded: usize,
    pub rule2_examples: usize,
    pub rule2_placeholders_added: usize,
    pub rule3_examples: usize,
    pub rule4_examples: usize,
}

impl ConversionStats {
    pub fn record(&mut self, rule: Rule) {
        self.examples += 1;
        match rule {
            Rule::Unchanged => self.unchanged += 1,
            Rule::Discarded(n) => {
                self.rule1_examples += 1;
                self.rule1_options_discarded += n;
            }
            Rule::Padded(n) => {
                self.rule2_examples += 1;
                self.rule2_placeholders_added += n;
            }
            Rule::SampledFromGoldList => self.rule3_examples += 1,
            Rule::TemplatedTruth => self.rule4_examples += 1,
        }
    }

    pub fn merge(&mut self, other: &ConversionStats) {
        self.examples += other.examples;
        self.unchanged += other.unchanged;
        self.rule1_examples += other.rule1_examples;
        self.rule1_options_discarded += other.rule1_options_discarded;
        self.rule2_examples += other.rule2_examples;
        self.rule2_placeholders_added += other.rule2_placeholders_added;
        self.rule3_examples += other.rule3_examples;
        self.rule4_examples += other.rule4_examples;
    }
}

/// Normalizes one record to exactly `k` options.
///
/// `empty_gold_text` is the truth option used for rule 4.
pub fn normalize_example<R: Rng + ?Sized>(
    raw: &RawExample,
    k: usize,
    pool: &HeldOutPool,
    empty_gold_text: &str,
    rng: &mut R,
) -> Result<(Example, Rule)> {
    if k < 2 {
        return Err(Error::Config(format!("option count k={k} must be at least 2")));
    }
    let question = raw.question.clone().unwrap_or_default();
    let context = raw.context.clone();
    match &raw.gold {
        Gold::Index(gold) => {
            let gold = *gold;
            if gold >= raw.options.len() {
                return Err(Error::InvalidGold(format!(
                    "index {gold} with {} options",
                    raw.options.len()
                )));
            }
            let n = raw.options.len();
            if n == k {
                let ex = Example {
                    context,
                    question,
                    options: raw.options.clone(),
                    label: gold,
                };
                return Ok((ex, Rule::Unchanged));
            }
            if n < k {
                let mut options = raw.options.clone();
                options.resize(k, NA_OPTION.to_string());
                let ex = Example {
                    context,
                    question,
                    options,
                    label: gold,
                };
                return Ok((ex, Rule::Padded(k - n)));
            }
            let wrong: Vec<usize> = (0..n).filter(|&i| i != gold).collect();
            let mut keep: Vec<usize> = index::sample(rng, wrong.len(), k - 1)
                .into_iter()
                .map(|i| wrong[i])
                .collect();
            keep.sort_unstable();
            let mut options: Vec<String> = std::iter::once(raw.options[gold].clone())
                .chain(keep.iter().map(|&i| raw.options[i].clone()))
                .collect();
            let label = shuffle_gold_first(&mut options, rng);
            let ex = Example {
                context,
                question,
                options,
                label,
            };
            Ok((ex, Rule::Discarded(n - k)))
        }
        Gold::List(golds) => {
            if let Some(missing) = golds.iter().find(|g| !raw.options.contains(g)) {
                return Err(Error::InvalidGold(format!("gold item {missing:?} is not an option")));
            }
            let (truth, rule) = if golds.is_empty() {
                if !raw.allows_empty_gold {
                    return Err(Error::InvalidGold("empty gold list not allowed for this record".into()));
                }
                (empty_gold_text.to_string(), Rule::TemplatedTruth)
            } else {
                let pick = rng.gen_range(0..golds.len());
                (golds[pick].clone(), Rule::SampledFromGoldList)
            };
            let mut exclude: HashSet<&str> = golds.iter().map(String::as_str).collect();
            exclude.insert(truth.as_str());
            let candidates = pool.candidates(&exclude);
            if candidates.len() < k - 1 {
                return Err(Error::PoolExhausted {
                    needed: k - 1,
                    available: candidates.len(),
                });
            }
            let mut picks: Vec<usize> = index::sample(rng, candidates.len(), k - 1).into_vec();
            picks.sort_unstable();
            let mut options: Vec<String> = std::iter::once(truth)
                .chain(picks.iter().map(|&i| candidates[i].to_string()))
                .collect();
            let label = shuffle_gold_first(&mut options, rng);
            let ex = Example {
                context,
                question,
                options,
                label,
            };
            Ok((ex, rule))
        }
    }
}

/// Shuffles `options` (gold at index 0) and returns the new gold index.
fn shuffle_gold_first<R: Rng + ?Sized>(options: &mut [String], rng: &mut R) -> usize {
    let mut order: Vec<usize> = (0..options.len()).collect();
    order.shuffle(rng);
    let shuffled: Vec<String> = order.iter().map(|&i| options[i].clone()).collect();
    options.clone_from_slice(&shuffled);
    order.iter().position(|&i| i == 0).expect("gold is among the options")
}

/// `[CLS] <prefix> <context> [SEP] <question> <option> [SEP]` for every option.
///
/// An empty question leaves no extra whitespace behind.
pub fn assemble_sequences(ex: &Example, prefix: &str) -> Vec<String> {
    ex.options
        .iter()
        .map(|opt| assemble(prefix, &ex.context, &ex.question, opt))
        .collect()
}

/// Sequence with the option slot left empty, as used for probing.
pub fn assemble_without_options(ex: &Example, prefix: &str) -> String {
    assemble(prefix, &ex.context, &ex.question, "")
}

pub(crate) fn assemble(prefix: &str, context: &str, question: &str, option: &str) -> String {
    let mut out = String::from("[CLS]");
    for part in [prefix, context] {
        if !part.is_empty() {
            out.push(' ');
            out.push_str(part);
        }
    }
    out.push_str(" [SEP]");
    for part in [question, option] {
        if !part.is_empty() {
            out.push(' ');
            out.push_str(part);
        }
    }
    out.push_str(" [SEP]");
    out
}

/// One entry of a corpus manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub name: String,
    /// Defaults to `[name]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<String>,
    pub family: String,
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empty_gold_text: Option<String>,
}

impl TaskDescriptor {
    pub fn prefix(&self) -> String {
        self.prefix.clone().unwrap_or_else(|| format!("[{}]", self.name))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub tasks: Vec<TaskDescriptor>,
}

impl Manifest {
    pub fn new(k: Option<usize>, tasks: Vec<TaskDescriptor>) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            k,
            tasks,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        check_format(MANIFEST_FORMAT, &manifest.format)?;
        Ok(manifest)
    }

    /// Reads every task file, resolving paths relative to `base`.
    pub fn read_tasks(&self, base: &Path) -> Result<Vec<RawTask>> {
        self.tasks
            .iter()
            .map(|d| {
                let train = read_records(&base.join(&d.train))?;
                let dev = match &d.dev {
                    Some(p) => read_records(&base.join(p))?,
                    None => Vec::new(),
                };
                Ok(RawTask {
                    descriptor: d.clone(),
                    train,
                    dev,
                })
            })
            .collect()
    }
}

pub(crate) fn check_format(expected: &str, found: &str) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Format {
            expected: expected.into(),
            found: found.into(),
        })
    }
}

/// Reads a line-delimited JSON record file; blank lines are skipped.
pub fn read_records(path: &Path) -> Result<Vec<RawExample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            file: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    let mut text = String::new();
    for ex in examples {
        text.push_str(&serde_json::to_string(ex)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A task before unification.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawTask {
    pub descriptor: TaskDescriptor,
    pub train: Vec<RawExample>,
    pub dev: Vec<RawExample>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub name: String,
    pub prefix: String,
    pub family: String,
    pub k: usize,
    pub examples: Vec<Example>,
    pub dev: Vec<Example>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub k: usize,
    pub tasks: Vec<TaskDataset>,
    pub stats: BTreeMap<String, ConversionStats>,
}

impl Corpus {
    pub fn task(&self, name: &str) -> Result<&TaskDataset> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    pub fn task_names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.name.clone()).collect()
    }

    /// Sub-corpus with the named tasks, in the given order.
    pub fn select(&self, names: &[String]) -> Result<Corpus> {
        let tasks = names
            .iter()
            .map(|n| self.task(n).cloned())
            .collect::<Result<Vec<_>>>()?;
        let stats = self
            .stats
            .iter()
            .filter(|(k, _)| names.contains(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(Corpus {
            k: self.k,
            tasks,
            stats,
        })
    }

    pub fn total_stats(&self) -> ConversionStats {
        let mut total = ConversionStats::default();
        for s in self.stats.values() {
            total.merge(s);
        }
        total
    }

    /// Writes one normalized record file per task and split, a manifest that
    /// points at them and a stats report.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut descriptors = Vec::new();
        for task in &self.tasks {
            let train = PathBuf::from(format!("{}.train.jsonl", task.name));
            write_examples(&dir.join(&train), &task.examples)?;
            let dev = if task.dev.is_empty() {
                None
            } else {
                let p = PathBuf::from(format!("{}.dev.jsonl", task.name));
                write_examples(&dir.join(&p), &task.dev)?;
                Some(p)
            };
            descriptors.push(TaskDescriptor {
                name: task.name.clone(),
                prefix: Some(task.prefix.clone()),
                family: task.family.clone(),
                train,
                dev,
                empty_gold_text: None,
            });
        }
        let manifest = Manifest::new(Some(self.k), descriptors);
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
        let report = StatsReport {
            format: STATS_FORMAT.into(),
            k: self.k,
            tasks: self.stats.clone(),
            total: self.total_stats(),
        };
        let path = dir.join("stats.json");
        fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Loads a manifest and unifies all of its tasks.
    pub fn from_manifest(path: &Path, k: Option<usize>, seed: u64) -> Result<Corpus> {
        let manifest = Manifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let k = k.or(manifest.k).unwrap_or(DEFAULT_K);
        build_corpus(&manifest.read_tasks(base)?, k, seed)
    }
}

const STATS_FORMAT: &str = "prefixmtl.stats.v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsReport {
    pub format: String,
    pub k: usize,
    pub tasks: BTreeMap<String, ConversionStats>,
    pub total: ConversionStats,
}

impl StatsReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: StatsReport = serde_json::from_str(&text)?;
        check_format(STATS_FORMAT, &report.format)?;
        Ok(report)
    }
}

/// Unifies every task. Each record draws from its own random stream keyed on
/// `(seed, task, split, index)`, so the result is independent of processing order.
pub fn build_corpus(tasks: &[RawTask], k: usize, seed: u64) -> Result<Corpus> {
    let mut prefixes = BTreeSet::new();
    let mut out = Corpus {
        k,
        tasks: Vec::new(),
        stats: BTreeMap::new(),
    };
    for task in tasks {
        let d = &task.descriptor;
        let prefix = d.prefix();
        if !prefixes.insert(prefix.clone()) {
            return Err(Error::DuplicatePrefix(prefix));
        }
        let pool = HeldOutPool::from_examples(task.train.iter().chain(&task.dev));
        let truth = d.empty_gold_text.as_deref().unwrap_or(DEFAULT_EMPTY_GOLD_TEXT);
        let mut stats = ConversionStats::default();
        let task_key = seed::hash_str(&d.name);
        let mut convert = |records: &[RawExample], split: u64, file: &Path| -> Result<Vec<Example>> {
            records
                .iter()
                .enumerate()
                .map(|(i, raw)| {
                    let mut rng = seed::rng(&[seed, task_key, split, i as u64]);
                    let (ex, rule) = normalize_example(raw, k, &pool, truth, &mut rng)
                        .map_err(|e| match e {
                            Error::Config(_) => e,
                            other => Error::Parse {
                                file: file.to_path_buf(),
                                line: i + 1,
                                message: format!("task {}: {other}", d.name),
                            },
                        })?;
                    stats.record(rule);
                    Ok(ex)
                })
                .collect()
        };
        let examples = convert(&task.train, 0, &d.train)?;
        let dev_path = d.dev.clone().unwrap_or_default();
        let dev = convert(&task.dev, 1, &dev_path)?;
        out.stats.insert(d.name.clone(), stats);
        out.tasks.push(TaskDataset {
            name: d.name.clone(),
            prefix,
            family: d.family.clone(),
            k,
            examples,
            dev,
        });
    }
    Ok(out)
}
