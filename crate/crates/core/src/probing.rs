//! Task relationships read off trained prefix embeddings, plus two
//! data-only baselines.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::check_format;
use crate::error::{Error, Result};
use crate::model::EncoderModel;
use crate::training::{EpochRecord, Objective, PrefixPolicy, PreparedCorpus, PreparedTask, Stage, TrainConfig, Trainer};

const MATRIX_FORMAT: &str = "prefixmtl.relationships.v1";
const BASELINE_FORMAT: &str = "prefixmtl.baseline.v1";

pub const PROBE_STAGE: &str = "probe";

/// Trains the probing model: MLM only, on option-free sequences of every
/// task, with prefixes masked like any other token.
///
/// `config.epochs` and `config.lr` set the schedule; the prefix policy and
/// `lambda` are ignored. With `warm_start` training continues from those
/// weights instead of a fresh initialization.
pub fn train_probe_model(
    data: &PreparedCorpus,
    config: &TrainConfig,
    warm_start: Option<EncoderModel>,
) -> Result<(EncoderModel, Vec<EpochRecord>)> {
    if !data.use_prefix {
        return Err(Error::Config("probing needs task prefixes".into()));
    }
    let config = TrainConfig {
        prefix_policy: PrefixPolicy::Default,
        ..config.clone()
    };
    let stages = vec![Stage {
        name: PROBE_STAGE.into(),
        tasks: (0..data.tasks.len()).collect(),
        epochs: config.epochs,
        lr: config.lr,
        lambda: 1.0,
        objective: Objective::MlmOnly,
    }];
    let mut trainer = match warm_start {
        Some(model) => Trainer::with_model(data, config, stages, None, model)?,
        None => Trainer::new(data, config, stages, None)?,
    };
    trainer.run(&mut |_| {})?;
    let history = trainer.history().to_vec();
    Ok((trainer.into_model(), history))
}

/// Pearson correlation of two equally long vectors.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::shape("pearson", &[a.len()], &[b.len()]));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ConstantVector);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Scope of the min-max rescaling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// One min and max over every off-diagonal entry.
    #[default]
    Global,
    /// Each row rescaled over its own off-diagonal entries; the result may be asymmetric.
    PerRow,
}

/// Value given to every off-diagonal entry when all of them are equal.
pub const FLAT_NORMALIZED: f64 = 0.5;

/// Min-max rescales the off-diagonal entries of a square matrix into [0, 1].
/// The diagonal is set to 1 and takes no part in the min and max.
pub fn minmax_normalize(raw: &[Vec<f64>], mode: Normalization) -> Vec<Vec<f64>> {
    let n = raw.len();
    let rescale = |values: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
        move |x: f64| if hi > lo { (x - lo) / (hi - lo) } else { FLAT_NORMALIZED }
    };
    let off_diagonal = |i: usize, j: usize| i != j;
    let mut out = vec![vec![1.0; n]; n];
    match mode {
        Normalization::Global => {
            let f = rescale(&mut (0..n).flat_map(|i| (0..n).filter(move |&j| off_diagonal(i, j)).map(move |j| raw[i][j])));
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    out[i][j] = f(raw[i][j]);
                }
            }
        }
        Normalization::PerRow => {
            for i in 0..n {
                let f = rescale(&mut (0..n).filter(|&j| j != i).map(|j| raw[i][j]));
                for j in (0..n).filter(|&j| j != i) {
                    out[i][j] = f(raw[i][j]);
                }
            }
        }
    }
    out
}

/// Pairwise task relationships from prefix embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationshipMatrix {
    pub format: String,
    pub tasks: Vec<String>,
    pub normalization: Normalization,
    /// Pearson correlations; exactly 1 on the diagonal.
    pub raw: Vec<Vec<f64>>,
    pub normalized: Vec<Vec<f64>>,
}

impl RelationshipMatrix {
    pub fn from_raw(tasks: Vec<String>, raw: Vec<Vec<f64>>, normalization: Normalization) -> Self {
        let normalized = minmax_normalize(&raw, normalization);
        Self {
            format: MATRIX_FORMAT.into(),
            tasks,
            normalization,
            raw,
            normalized,
        }
    }

    /// Correlates the embedding rows of the given tasks' prefixes.
    pub fn from_model(
        model: &EncoderModel,
        data: &PreparedCorpus,
        tasks: &[String],
        normalization: Normalization,
    ) -> Result<Self> {
        let rows: Vec<&[f64]> = tasks
            .iter()
            .map(|t| {
                data.vocab
                    .prefix_id(t)
                    .ok_or_else(|| Error::MissingPrefix(t.clone()))
                    .map(|id| model.embedding_row(id))
            })
            .collect::<Result<_>>()?;
        let n = tasks.len();
        let mut raw = vec![vec![1.0; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                let r = pearson(rows[i], rows[j])?;
                raw[i][j] = r;
                raw[j][i] = r;
            }
        }
        Ok(Self::from_raw(tasks.to_vec(), raw, normalization))
    }

    pub fn index(&self, task: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t == task)
            .ok_or_else(|| Error::UnknownTask(task.into()))
    }

    /// Normalized score of `source` against `target`.
    pub fn score(&self, target: &str, source: &str) -> Result<f64> {
        Ok(self.normalized[self.index(target)?][self.index(source)?])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        check_format(MATRIX_FORMAT, &m.format)?;
        Ok(m)
    }

    /// CSV with a header row and a leading column of task names.
    pub fn to_csv(&self, normalized: bool) -> String {
        let values = if normalized { &self.normalized } else { &self.raw };
        square_csv(&self.tasks, values)
    }

    /// Each task followed by its other tasks, best first.
    pub fn ranked_table(&self) -> String {
        let mut out = String::new();
        let width = self.tasks.iter().map(String::len).max().unwrap_or(0);
        for target in &self.tasks {
            let ranked = rank_complementary(self, target, self.tasks.len() - 1).unwrap_or_default();
            let cells: Vec<String> = ranked
                .iter()
                .map(|s| format!("{s} {:.3}", self.score(target, s).unwrap_or(f64::NAN)))
                .collect();
            let _ = writeln!(out, "{target:<width$}  {}", cells.join("  "));
        }
        out
    }

    /// Grayscale heatmap of the normalized matrix as a binary PGM; brighter is
    /// more related. Each entry becomes a `cell` by `cell` pixel square.
    pub fn write_pgm(&self, path: &Path, cell: usize) -> Result<()> {
        let n = self.tasks.len();
        let side = n * cell.max(1);
        let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
        for y in 0..side {
            for x in 0..side {
                let v = self.normalized[y / cell.max(1)][x / cell.max(1)];
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn square_csv(names: &[String], values: &[Vec<f64>]) -> String {
    let mut out = String::from("task");
    for t in names {
        out.push(',');
        out.push_str(t);
    }
    out.push('\n');
    for (t, row) in names.iter().zip(values) {
        out.push_str(t);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// The `top_k` tasks most related to `target`, best first, never `target`
/// itself. Ties go to the task name that sorts first.
pub fn rank_complementary(matrix: &RelationshipMatrix, target: &str, top_k: usize) -> Result<Vec<String>> {
    let t = matrix.index(target)?;
    if top_k >= matrix.tasks.len() {
        return Err(Error::Config(format!(
            "top_k {top_k} must be below the number of tasks ({})",
            matrix.tasks.len()
        )));
    }
    let mut others: Vec<(f64, &String)> = matrix
        .tasks
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != t)
        .map(|(j, name)| (matrix.normalized[t][j], name))
        .collect();
    others.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(others.into_iter().take(top_k).map(|(_, n)| n.clone()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Negative absolute difference of mean sequence length in tokens.
    Length,
    /// Jaccard overlap of content-token sets.
    Vocab,
}

/// A data-only relationship measure over every task pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineMeasure {
    pub format: String,
    pub kind: BaselineKind,
    pub tasks: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

fn nonempty(task: &PreparedTask) -> Result<&PreparedTask> {
    if task.train.is_empty() {
        Err(Error::EmptyTask(task.name.clone()))
    } else {
        Ok(task)
    }
}

/// `-|mean length(source) - mean length(target)|`.
pub fn baseline_length(source: &PreparedTask, target: &PreparedTask) -> Result<f64> {
    Ok(-(nonempty(source)?.mean_length - nonempty(target)?.mean_length).abs())
}

/// Content tokens of every training sequence of a task.
pub fn task_vocabulary(task: &PreparedTask, data: &PreparedCorpus) -> BTreeSet<usize> {
    let content = data.vocab.content_ids();
    task.train
        .iter()
        .flat_map(|ex| ex.options.iter().flat_map(|o| o.ids.iter().copied()))
        .filter(|id| content.contains(id))
        .collect()
}

pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

pub fn baseline_vocab(source: &PreparedTask, target: &PreparedTask, data: &PreparedCorpus) -> Result<f64> {
    Ok(jaccard(
        &task_vocabulary(nonempty(source)?, data),
        &task_vocabulary(nonempty(target)?, data),
    ))
}

impl BaselineMeasure {
    pub fn compute(kind: BaselineKind, data: &PreparedCorpus) -> Result<Self> {
        let n = data.tasks.len();
        let vocabs: Vec<BTreeSet<usize>> = match kind {
            BaselineKind::Vocab => data.tasks.iter().map(|t| task_vocabulary(t, data)).collect(),
            BaselineKind::Length => Vec::new(),
        };
        let mut scores = vec![vec![0.0; n]; n];
        for i in 0..n {
            nonempty(&data.tasks[i])?;
            for j in 0..n {
                scores[i][j] = match kind {
                    BaselineKind::Length => baseline_length(&data.tasks[j], &data.tasks[i])?,
                    BaselineKind::Vocab => jaccard(&vocabs[j], &vocabs[i]),
                };
            }
        }
        Ok(Self {
            format: BASELINE_FORMAT.into(),
            kind,
            tasks: data.tasks.iter().map(|t| t.name.clone()).collect(),
            scores,
        })
    }

    /// Score of `source` against `target`.
    pub fn score(&self, target: &str, source: &str) -> Result<f64> {
        let find = |name: &str| {
            self.tasks
                .iter()
                .position(|t| t == name)
                .ok_or_else(|| Error::UnknownTask(name.into()))
        };
        Ok(self.scores[find(target)?][find(source)?])
    }

    pub fn to_csv(&self) -> String {
        square_csv(&self.tasks, &self.scores)
    }
}
