//! Synthetic corpora with known structure, for tests and desk-scale experiments.
//!
//! Words are short alphanumeric tokens such as `a3k7`, so each one is a
//! single token after splitting. Every generator is a pure function of its
//! spec, seed included.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Gold, Manifest, RawExample, RawTask, TaskDescriptor};
use crate::error::{Error, Result};
use crate::seed;

fn descriptor(name: &str, family: &str) -> TaskDescriptor {
    TaskDescriptor {
        name: name.into(),
        prefix: None,
        family: family.into(),
        train: PathBuf::from(format!("{name}.train.jsonl")),
        dev: Some(PathBuf::from(format!("{name}.dev.jsonl"))),
        empty_gold_text: None,
    }
}

fn two_way(context: String, options: [&str; 2], gold: usize) -> RawExample {
    RawExample {
        context,
        question: None,
        options: options.iter().map(|s| s.to_string()).collect(),
        gold: Gold::Index(gold),
        allows_empty_gold: false,
    }
}

/// Two tasks that see identical inputs and disagree on every label.
///
/// Each context starts with one of `keys` key words; half of the keys are
/// "in". The first task answers `yes` for keys that are in, the second answers
/// `no`. The dev sets of the two tasks are the same inputs, so a model that
/// cannot tell the tasks apart scores exactly 50% over both.
#[derive(Clone, Debug)]
pub struct DisambiguationSpec {
    pub keys: usize,
    pub fillers: usize,
    pub context_words: usize,
    pub train_per_task: usize,
    pub dev_inputs: usize,
    pub seed: u64,
}

impl Default for DisambiguationSpec {
    fn default() -> Self {
        Self {
            keys: 16,
            fillers: 12,
            context_words: 3,
            train_per_task: 200,
            dev_inputs: 50,
            seed: 0,
        }
    }
}

pub const DISAMBIGUATION_TASKS: [&str; 2] = ["agree", "disagree"];

pub fn disambiguation_pair(spec: &DisambiguationSpec) -> Vec<RawTask> {
    let mut rng = seed::rng(&[spec.seed, seed::hash_str("disambiguation")]);
    let mut keys: Vec<usize> = (0..spec.keys).collect();
    keys.shuffle(&mut rng);
    let inside: Vec<bool> = {
        let mut v = vec![false; spec.keys];
        for &k in &keys[..spec.keys / 2] {
            v[k] = true;
        }
        v
    };
    let input = |rng: &mut ChaCha8Rng| -> (String, bool) {
        let key = rng.gen_range(0..spec.keys);
        let mut words = vec![format!("k{key}")];
        for _ in 1..spec.context_words {
            words.push(format!("f{}", rng.gen_range(0..spec.fillers)));
        }
        (words.join(" "), inside[key])
    };
    let dev_inputs: Vec<(String, bool)> = (0..spec.dev_inputs).map(|_| input(&mut rng)).collect();
    DISAMBIGUATION_TASKS
        .iter()
        .enumerate()
        .map(|(t, name)| {
            let mut task_rng = seed::rng(&[spec.seed, seed::hash_str(name)]);
            let label = |is_in: bool| usize::from(is_in == (t == 1));
            let train = (0..spec.train_per_task)
                .map(|_| {
                    let (ctx, is_in) = input(&mut task_rng);
                    two_way(ctx, ["yes", "no"], label(is_in))
                })
                .collect();
            let dev = dev_inputs
                .iter()
                .map(|(ctx, is_in)| two_way(ctx.clone(), ["yes", "no"], label(*is_in)))
                .collect();
            RawTask {
                descriptor: descriptor(name, "disambiguation"),
                train,
                dev,
            }
        })
        .collect()
}

/// Vocabulary owned by one task family: key words that get paired and filler
/// words that pad contexts.
#[derive(Clone, Debug)]
pub struct FamilyPool {
    pub name: String,
    pub keys: Vec<String>,
    pub fillers: Vec<String>,
}

impl FamilyPool {
    pub fn new(name: &str, keys: usize, fillers: usize) -> Self {
        Self {
            name: name.into(),
            keys: (0..keys).map(|i| format!("{name}k{i}")).collect(),
            fillers: (0..fillers).map(|i| format!("{name}f{i}")).collect(),
        }
    }

    /// A fixed-point-free pairing of the keys, drawn from `seed`.
    pub fn mapping(&self, seed: u64) -> Vec<usize> {
        let n = self.keys.len();
        let mut rng = seed::rng(&[seed, seed::hash_str(&self.name), seed::hash_str("mapping")]);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        // a cyclic shift over a random order never maps a key to itself
        let mut out = vec![0; n];
        for i in 0..n {
            out[perm[i]] = perm[(i + 1) % n];
        }
        out
    }
}

/// One matching task: the context opens with a key word and the gold option
/// is that key's partner under `mapping`; the distractor is another key.
#[derive(Clone, Debug)]
pub struct PairTaskSpec {
    pub name: String,
    pub context_words: usize,
    pub train: usize,
    pub dev: usize,
    pub mapping: Vec<usize>,
    pub seed: u64,
}

pub fn pair_task(pool: &FamilyPool, spec: &PairTaskSpec) -> RawTask {
    let mut rng = seed::rng(&[spec.seed, seed::hash_str(&spec.name)]);
    let n = pool.keys.len();
    let example = |rng: &mut ChaCha8Rng| {
        let key = rng.gen_range(0..n);
        let partner = spec.mapping[key];
        let distractor = loop {
            let d = rng.gen_range(0..n);
            if d != partner && d != key {
                break d;
            }
        };
        let mut words = vec![pool.keys[key].clone()];
        for _ in 1..spec.context_words.max(1) {
            words.push(pool.fillers.choose(rng).expect("filler pool").clone());
        }
        let gold = rng.gen_range(0..2);
        let mut options = [pool.keys[distractor].as_str(); 2];
        options[gold] = pool.keys[partner].as_str();
        two_way(words.join(" "), options, gold)
    };
    let train = (0..spec.train).map(|_| example(&mut rng)).collect();
    let dev = (0..spec.dev).map(|_| example(&mut rng)).collect();
    RawTask {
        descriptor: descriptor(&spec.name, &pool.name),
        train,
        dev,
    }
}

/// `families` families of `tasks_per_family` equally sized tasks. Tasks in a
/// family share one word pool and one pairing; pools are disjoint.
#[derive(Clone, Debug)]
pub struct FamilySpec {
    pub families: usize,
    pub tasks_per_family: usize,
    pub keys: usize,
    pub fillers: usize,
    pub context_words: usize,
    pub train: usize,
    pub dev: usize,
    pub seed: u64,
}

impl Default for FamilySpec {
    fn default() -> Self {
        Self {
            families: 2,
            tasks_per_family: 3,
            keys: 12,
            fillers: 16,
            context_words: 5,
            train: 150,
            dev: 20,
            seed: 0,
        }
    }
}

pub fn family_corpus(spec: &FamilySpec) -> Vec<RawTask> {
    let mut tasks = Vec::new();
    for f in 0..spec.families {
        let pool = FamilyPool::new(&family_name(f), spec.keys, spec.fillers);
        let mapping = pool.mapping(spec.seed);
        for t in 0..spec.tasks_per_family {
            tasks.push(pair_task(
                &pool,
                &PairTaskSpec {
                    name: format!("{}{t}", pool.name),
                    context_words: spec.context_words,
                    train: spec.train,
                    dev: spec.dev,
                    mapping: mapping.clone(),
                    seed: spec.seed,
                },
            ));
        }
    }
    tasks
}

fn family_name(f: usize) -> String {
    let letters = b"abcdefghijklmnopqrstuvwxyz";
    format!("{}{}", letters[f % 26] as char, letters[(f * 7 + 3) % 26] as char)
}

/// A transfer benchmark with planted structure.
///
/// Each family owns a word pool and a pairing. Its low-resource target and its
/// sources all use that pairing, so same-family sources teach the target's
/// pairs and other-family sources teach nothing about them. Context lengths
/// run against the structure: a family's sources are as long as the next
/// family's target, so length similarity does not track relatedness.
#[derive(Clone, Debug)]
pub struct PlantedSpec {
    pub families: usize,
    pub sources_per_family: usize,
    pub keys: usize,
    pub fillers: usize,
    pub target_train: usize,
    pub source_train: usize,
    pub dev: usize,
    /// Target context length of family `f` is `base_length + f * length_step`.
    pub base_length: usize,
    pub length_step: usize,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            families: 3,
            sources_per_family: 2,
            keys: 10,
            fillers: 12,
            target_train: 20,
            source_train: 240,
            dev: 60,
            base_length: 3,
            length_step: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlantedBenchmark {
    pub tasks: Vec<RawTask>,
    pub targets: Vec<String>,
    pub sources: Vec<String>,
    /// Task name to family name.
    pub family: BTreeMap<String, String>,
}

impl PlantedBenchmark {
    pub fn related(&self, a: &str, b: &str) -> bool {
        self.family.contains_key(a) && self.family.get(a) == self.family.get(b)
    }
}

pub fn planted_benchmark(spec: &PlantedSpec) -> PlantedBenchmark {
    let pools: Vec<FamilyPool> = (0..spec.families)
        .map(|f| FamilyPool::new(&family_name(f), spec.keys, spec.fillers))
        .collect();
    let length = |f: usize| spec.base_length + (f % spec.families) * spec.length_step;
    let mut bench = PlantedBenchmark {
        tasks: Vec::new(),
        targets: Vec::new(),
        sources: Vec::new(),
        family: BTreeMap::new(),
    };
    for (f, pool) in pools.iter().enumerate() {
        let mapping = pool.mapping(spec.seed);
        let name = format!("target_{}", pool.name);
        bench.tasks.push(pair_task(
            pool,
            &PairTaskSpec {
                name: name.clone(),
                context_words: length(f),
                train: spec.target_train,
                dev: spec.dev,
                mapping: mapping.clone(),
                seed: spec.seed,
            },
        ));
        bench.family.insert(name.clone(), pool.name.clone());
        bench.targets.push(name);
        for s in 0..spec.sources_per_family {
            let name = format!("source_{}{s}", pool.name);
            bench.tasks.push(pair_task(
                pool,
                &PairTaskSpec {
                    name: name.clone(),
                    context_words: length(f + 1),
                    train: spec.source_train,
                    dev: spec.dev / 2,
                    mapping: mapping.clone(),
                    seed: spec.seed,
                },
            ));
            bench.family.insert(name.clone(), pool.name.clone());
            bench.sources.push(name);
        }
    }
    bench
}

/// Same words as `pool` under a different pairing: a source that teaches the
/// wrong answers for every key.
pub fn flipped_source(pool: &FamilyPool, name: &str, context_words: usize, train: usize, seed: u64) -> RawTask {
    let base = pool.mapping(seed);
    let n = base.len();
    // shift each partner to the next key in the base cycle, never back to the original
    let flipped: Vec<usize> = (0..n)
        .map(|k| {
            let candidate = base[base[k]];
            if candidate == k {
                (base[k] + 1) % n
            } else {
                candidate
            }
        })
        .collect();
    pair_task(
        pool,
        &PairTaskSpec {
            name: name.into(),
            context_words,
            train,
            dev: 0,
            mapping: flipped,
            seed,
        },
    )
}

/// Writes raw tasks as JSONL files next to a manifest; returns the manifest path.
pub fn write_raw_tasks(dir: &Path, tasks: &[RawTask], k: Option<usize>) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |path: &Path, records: &[RawExample]| -> Result<()> {
        let mut out = Vec::new();
        for r in records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(path, e))
    };
    let mut descriptors = Vec::new();
    for task in tasks {
        let d = task.descriptor.clone();
        write(&dir.join(&d.train), &task.train)?;
        if let Some(dev) = &d.dev {
            write(&dir.join(dev), &task.dev)?;
        }
        descriptors.push(d);
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&Manifest::new(k, descriptors))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
