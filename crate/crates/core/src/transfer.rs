//! Dual-task transfer grids, correlation of relationship measures with
//! transfer accuracy, and mixture selection experiments.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::check_format;
use crate::error::{Error, Result};
use crate::model::EncoderModel;
use crate::probing::{pearson, rank_complementary, RelationshipMatrix};
use crate::seed;
use crate::training::{dev_accuracy, two_stage_plan, Objective, PreparedCorpus, RunMetrics, Stage, TrainConfig, Trainer};

const CELL_FORMAT: &str = "prefixmtl.cell.v1";
const GRID_FORMAT: &str = "prefixmtl.grid.v1";
const CORRELATION_FORMAT: &str = "prefixmtl.correlation.v1";
const MIXTURE_FORMAT: &str = "prefixmtl.mixture.v1";

pub const DUAL_STAGE: &str = "dual";

/// Sampling and masking seed of one grid cell; depends only on the pair.
pub fn cell_seed(seed: u64, source: &str, target: &str) -> u64 {
    seed::derive(&[seed, seed::hash_str("cell"), seed::hash_str(source), seed::hash_str(target)])
}

/// Initialization seed shared by every cell of one target.
pub fn target_init_seed(seed: u64, target: &str) -> u64 {
    seed::derive(&[seed, seed::hash_str("init"), seed::hash_str(target)])
}

/// Trains one model on the union of `source` and `target` and returns its
/// dev accuracy on `target`. With `source == target` the target is simply
/// seen twice per epoch.
pub fn dual_task_cell(data: &PreparedCorpus, source: &str, target: &str, config: &TrainConfig) -> Result<f64> {
    let (s, t) = (data.task_index(source)?, data.task_index(target)?);
    let stages = vec![Stage {
        name: DUAL_STAGE.into(),
        tasks: vec![s, t],
        epochs: config.epochs,
        lr: config.lr,
        lambda: config.lambda,
        objective: Objective::Joint,
    }];
    let cell_config = TrainConfig {
        seed: cell_seed(config.seed, source, target),
        ..config.clone()
    };
    let model = EncoderModel::new(
        config.model.encoder(data.vocab.len()),
        target_init_seed(config.seed, target),
    )?;
    let mut trainer = Trainer::with_model(data, cell_config, stages, None, model)?;
    trainer.run(&mut |_| {})?;
    dev_accuracy(trainer.model(), &data.tasks[t])?.ok_or_else(|| Error::EmptyTask(format!("{target} has no dev examples")))
}

/// Fingerprint of everything that must match for a persisted cell to be reused.
pub fn config_fingerprint(config: &TrainConfig, data: &PreparedCorpus) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config)?);
    h.update(data.vocab.hash().as_bytes());
    Ok(h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// One persisted grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub format: String,
    pub source: String,
    pub target: String,
    pub seed: u64,
    pub fingerprint: String,
    pub accuracy: Option<f64>,
    /// Set when training the cell failed; the grid carries on without it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferGrid {
    pub format: String,
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    /// `accuracy[target][source]`; `None` for failed cells.
    pub accuracy: Vec<Vec<Option<f64>>>,
    pub fingerprint: String,
}

impl TransferGrid {
    pub fn get(&self, target: &str, source: &str) -> Option<f64> {
        let t = self.targets.iter().position(|x| x == target)?;
        let s = self.sources.iter().position(|x| x == source)?;
        self.accuracy[t][s]
    }

    /// Targets as rows, sources as columns; failed cells are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("target");
        for s in &self.sources {
            out.push(',');
            out.push_str(s);
        }
        out.push('\n');
        for (t, row) in self.targets.iter().zip(&self.accuracy) {
            out.push_str(t);
            for v in row {
                out.push(',');
                if let Some(v) = v {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = dir.join("grid.json");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("grid.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("grid.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let grid: Self = serde_json::from_str(&text)?;
        check_format(GRID_FORMAT, &grid.format)?;
        Ok(grid)
    }
}

fn cell_path(dir: &Path, source: &str, target: &str) -> PathBuf {
    dir.join("cells").join(format!("{target}__{source}.json"))
}

fn read_cell(path: &Path, fingerprint: &str) -> Option<CellResult> {
    let text = fs::read_to_string(path).ok()?;
    let cell: CellResult = serde_json::from_str(&text).ok()?;
    (cell.format == CELL_FORMAT && cell.fingerprint == fingerprint).then_some(cell)
}

/// Progress of a grid run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GridRun {
    pub computed: usize,
    pub reused: usize,
    pub failed: usize,
}

/// Computes every `(target, source)` cell. With `dir`, each finished cell is
/// written to `dir/cells/` as soon as it completes and cells already there
/// (for the same config and vocabulary) are reused without training.
pub fn run_grid(
    data: &PreparedCorpus,
    sources: &[String],
    targets: &[String],
    config: &TrainConfig,
    dir: Option<&Path>,
    on_cell: &mut dyn FnMut(&CellResult, bool),
) -> Result<(TransferGrid, GridRun)> {
    if sources.is_empty() || targets.is_empty() {
        return Err(Error::Config("a grid needs at least one source and one target".into()));
    }
    for name in sources.iter().chain(targets) {
        data.task_index(name)?;
    }
    let fingerprint = config_fingerprint(config, data)?;
    if let Some(dir) = dir {
        let cells = dir.join("cells");
        fs::create_dir_all(&cells).map_err(|e| Error::io(&cells, e))?;
    }
    let mut run = GridRun::default();
    let mut accuracy = vec![vec![None; sources.len()]; targets.len()];
    for (ti, target) in targets.iter().enumerate() {
        for (si, source) in sources.iter().enumerate() {
            let path = dir.map(|d| cell_path(d, source, target));
            if let Some(cell) = path.as_deref().and_then(|p| read_cell(p, &fingerprint)) {
                accuracy[ti][si] = cell.accuracy;
                run.reused += 1;
                on_cell(&cell, true);
                continue;
            }
            let outcome = dual_task_cell(data, source, target, config);
            let cell = CellResult {
                format: CELL_FORMAT.into(),
                source: source.clone(),
                target: target.clone(),
                seed: cell_seed(config.seed, source, target),
                fingerprint: fingerprint.clone(),
                accuracy: outcome.as_ref().ok().copied(),
                error: outcome.as_ref().err().map(ToString::to_string),
            };
            if let Some(path) = &path {
                fs::write(path, serde_json::to_string_pretty(&cell)?).map_err(|e| Error::io(path, e))?;
            }
            accuracy[ti][si] = cell.accuracy;
            run.computed += 1;
            if cell.error.is_some() {
                run.failed += 1;
            }
            on_cell(&cell, false);
        }
    }
    let grid = TransferGrid {
        format: GRID_FORMAT.into(),
        sources: sources.to_vec(),
        targets: targets.to_vec(),
        accuracy,
        fingerprint,
    };
    if let Some(dir) = dir {
        grid.save(dir)?;
    }
    Ok((grid, run))
}

/// Per-target Pearson correlation between one measure and transfer accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureCorrelation {
    pub measure: String,
    /// `None` where the correlation is undefined (a constant vector or fewer
    /// than two usable cells).
    pub per_target: Vec<(String, Option<f64>)>,
    /// Mean over the defined targets.
    pub mean: Option<f64>,
}

/// For each target, correlates `score(target, source)` with the grid accuracy over sources.
pub fn correlate_measure(
    grid: &TransferGrid,
    measure: &str,
    score: impl Fn(&str, &str) -> Result<f64>,
) -> Result<MeasureCorrelation> {
    let mut per_target = Vec::new();
    for (t, target) in grid.targets.iter().enumerate() {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for (s, source) in grid.sources.iter().enumerate() {
            if let Some(acc) = grid.accuracy[t][s] {
                xs.push(score(target, source)?);
                ys.push(acc);
            }
        }
        let r = match pearson(&xs, &ys) {
            Ok(r) => Some(r),
            Err(Error::ConstantVector | Error::ShapeMismatch { .. }) => None,
            Err(e) => return Err(e),
        };
        per_target.push((target.clone(), r));
    }
    let defined: Vec<f64> = per_target.iter().filter_map(|(_, r)| *r).collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(MeasureCorrelation {
        measure: measure.into(),
        per_target,
        mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub format: String,
    pub targets: Vec<String>,
    pub measures: Vec<MeasureCorrelation>,
}

impl CorrelationReport {
    pub fn new(grid: &TransferGrid, measures: Vec<MeasureCorrelation>) -> Self {
        Self {
            format: CORRELATION_FORMAT.into(),
            targets: grid.targets.clone(),
            measures,
        }
    }

    /// One row per measure, one column per target, then the average.
    pub fn to_table(&self) -> String {
        let name_w = self.measures.iter().map(|m| m.measure.len()).max().unwrap_or(0).max(7);
        let col_w = self.targets.iter().map(String::len).max().unwrap_or(0).max(6);
        let mut out = format!("{:<name_w$}", "Measure");
        for t in &self.targets {
            let _ = write!(out, "  {t:>col_w$}");
        }
        let _ = writeln!(out, "  {:>col_w$}", "Avg.");
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.2}"));
        for m in &self.measures {
            let _ = write!(out, "{:<name_w$}", m.measure);
            for (_, r) in &m.per_target {
                let _ = write!(out, "  {:>col_w$}", fmt(*r));
            }
            let _ = writeln!(out, "  {:>col_w$}", fmt(m.mean));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: Self = serde_json::from_str(&text)?;
        check_format(CORRELATION_FORMAT, &r.format)?;
        Ok(r)
    }
}

/// How the stage-1 mixture for a target is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// The target alone.
    Single,
    /// Every task in the corpus.
    Fullset,
    /// The target plus its five highest-ranked tasks.
    Top5,
    /// The target's family.
    Family,
    /// The target plus an explicit task list.
    Subset,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "fullset" => Ok(Self::Fullset),
            "top5" => Ok(Self::Top5),
            "family" => Ok(Self::Family),
            "subset" => Ok(Self::Subset),
            other => Err(Error::UnknownStrategy(other.into())),
        }
    }
}

pub const TOP_K: usize = 5;

/// Task indices of the mixture, in corpus order, each at most once.
pub fn mixture_tasks(
    data: &PreparedCorpus,
    target: &str,
    strategy: Strategy,
    matrix: Option<&RelationshipMatrix>,
    subset: &[String],
) -> Result<Vec<usize>> {
    let t = data.task_index(target)?;
    let mut chosen = BTreeSet::from([t]);
    match strategy {
        Strategy::Single => {}
        Strategy::Fullset => chosen.extend(0..data.tasks.len()),
        Strategy::Top5 => {
            let matrix = matrix.ok_or_else(|| Error::Config("top5 needs a relationship matrix".into()))?;
            let k = TOP_K.min(matrix.tasks.len().saturating_sub(1));
            for name in rank_complementary(matrix, target, k)? {
                chosen.insert(data.task_index(&name)?);
            }
        }
        Strategy::Family => {
            let family = &data.tasks[t].family;
            chosen.extend((0..data.tasks.len()).filter(|&i| &data.tasks[i].family == family));
        }
        Strategy::Subset => {
            for name in subset {
                chosen.insert(data.task_index(name)?);
            }
        }
    }
    Ok(chosen.into_iter().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureResult {
    pub format: String,
    pub target: String,
    pub strategy: Strategy,
    pub mixture: Vec<String>,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub metrics: RunMetrics,
}

/// Multi-task training on the strategy's mixture, then fine-tuning on the
/// target; reports final target dev accuracy.
pub fn mixture_experiment(
    data: &PreparedCorpus,
    target: &str,
    strategy: Strategy,
    matrix: Option<&RelationshipMatrix>,
    subset: &[String],
    config: &TrainConfig,
) -> Result<MixtureResult> {
    let mixture = mixture_tasks(data, target, strategy, matrix, subset)?;
    let t = data.task_index(target)?;
    let stages = two_stage_plan(&mixture, Some(t), config);
    let mut trainer = Trainer::new(data, config.clone(), stages, Some(t))?;
    trainer.run(&mut |_| {})?;
    let metrics = trainer.metrics();
    Ok(MixtureResult {
        format: MIXTURE_FORMAT.into(),
        target: target.into(),
        strategy,
        mixture: mixture.iter().map(|&i| data.tasks[i].name.clone()).collect(),
        seed: config.seed,
        accuracy: metrics.final_accuracy,
        metrics,
    })
}
