use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{lr_at, MlmSequences, TrainConfig};
use super::data::{sample_mixture, PreparedCorpus, PreparedExample, PreparedTask};
use super::masking::{apply_masking, MaskedSequence};
use crate::corpus::check_format;
use crate::error::{Error, Result};
use crate::model::{argmax, DropoutKey, EncoderModel, SeqBatch};
use crate::numerics::{adam_step, AdamConfig, AdamState, Graph, Tensor, Var};
use crate::seed;
use crate::tokenizer::Encoded;

const STATE_FORMAT: &str = "prefixmtl.trainer.v1";
const METRICS_FORMAT: &str = "prefixmtl.metrics.v1";
const OPTIMIZER_MAGIC: &[u8; 8] = b"PMTLADAM";

/// `-log softmax(scores)[label]`.
pub fn option_nll(scores: &[f64], label: usize) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    log_z - scores[label]
}

/// Supervised loss of one example: softmax cross-entropy over its `k` option scores.
pub fn mtl_loss(model: &EncoderModel, option_seqs: &[Encoded], label: usize) -> Result<f64> {
    Ok(option_nll(&model.scores(option_seqs)?, label))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlmLoss {
    pub value: f64,
    /// True when no position was masked; `value` is then zero.
    pub skipped: bool,
}

/// Mean of `-log p(original token | masked sequence)` over all masked positions.
pub fn mlm_loss(model: &EncoderModel, batch: &[MaskedSequence]) -> Result<MlmLoss> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    match mlm_term(model, &mut g, &p, batch, None)? {
        Some(v) => Ok(MlmLoss {
            value: g.value(v).item(),
            skipped: false,
        }),
        None => Ok(MlmLoss {
            value: 0.0,
            skipped: true,
        }),
    }
}

fn mlm_term(
    model: &EncoderModel,
    g: &mut Graph,
    p: &crate::model::Bound,
    batch: &[MaskedSequence],
    dropout: Option<DropoutKey>,
) -> Result<Option<Var>> {
    if batch.iter().all(|m| m.positions.is_empty()) {
        return Ok(None);
    }
    let seqs = SeqBatch::from_encoded(batch.iter().map(|m| &m.masked));
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (s, m) in batch.iter().enumerate() {
        for (&pos, t) in m.positions.iter().zip(m.targets()) {
            rows.push(s * seqs.len + pos);
            targets.push(t);
        }
    }
    let hidden = model.forward_hidden(g, p, &seqs, dropout)?;
    let logits = model.forward_mlm(g, p, hidden, &rows)?;
    Ok(Some(g.cross_entropy(logits, &targets)?))
}

fn mtl_term(
    model: &EncoderModel,
    g: &mut Graph,
    p: &crate::model::Bound,
    batch: &TrainBatch,
    dropout: Option<DropoutKey>,
) -> Result<Option<Var>> {
    if batch.labels.is_empty() {
        return Ok(None);
    }
    let seqs = SeqBatch::from_encoded(&batch.options);
    let hidden = model.forward_hidden(g, p, &seqs, dropout)?;
    let scores = model.forward_scores(g, p, hidden, &seqs)?;
    let scores = g.reshape(scores, &[batch.labels.len(), batch.k])?;
    Ok(Some(g.cross_entropy(scores, &batch.labels)?))
}

/// What a training stage optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Supervised option loss plus `lambda` times MLM on the option sequences.
    Joint,
    /// MLM alone on option-free sequences (the probing model).
    MlmOnly,
}

/// Inputs of one optimization step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainBatch {
    /// `labels.len() * k` option sequences, grouped by example.
    pub options: Vec<Encoded>,
    pub labels: Vec<usize>,
    pub k: usize,
    pub masked: Vec<MaskedSequence>,
}

impl TrainBatch {
    pub fn build<R: Rng + ?Sized>(
        examples: &[&PreparedExample],
        data: &PreparedCorpus,
        config: &TrainConfig,
        objective: Objective,
        with_mlm: bool,
        rng: &mut R,
    ) -> Self {
        let mut batch = TrainBatch {
            options: Vec::new(),
            labels: Vec::new(),
            k: data.k,
            masked: Vec::new(),
        };
        let specials = data.vocab.specials();
        let random_ids = specials.mask + 1..data.vocab.len();
        let mask = |seq: &Encoded, rng: &mut R| {
            apply_masking(
                seq,
                data.prefix_position(),
                config.prefix_policy,
                config.mask_ratio,
                specials,
                random_ids.clone(),
                rng,
            )
        };
        for ex in examples {
            match objective {
                Objective::Joint => {
                    batch.options.extend(ex.options.iter().cloned());
                    batch.labels.push(ex.label);
                    if with_mlm {
                        match config.mlm_sequences {
                            MlmSequences::Gold => batch.masked.push(mask(&ex.options[ex.label], rng)),
                            MlmSequences::All => {
                                for seq in &ex.options {
                                    let m = mask(seq, rng);
                                    batch.masked.push(m);
                                }
                            }
                        }
                    }
                }
                Objective::MlmOnly => batch.masked.push(mask(&ex.probe, rng)),
            }
        }
        batch
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub mtl: f64,
    pub mlm: f64,
    /// `lambda * mlm`, the MLM share of `total`.
    pub weighted_mlm: f64,
    pub mlm_skipped: bool,
}

/// Evaluates `L = L_mtl + lambda * L_mlm` on one batch and returns the losses
/// with one gradient per parameter. A batch without labels is trained on its
/// MLM term alone. With `detach_mlm` the MLM term still counts towards the
/// total but sends no gradient.
pub fn joint_gradients(
    model: &EncoderModel,
    batch: &TrainBatch,
    lambda: f64,
    dropout: Option<DropoutKey>,
    detach_mlm: bool,
) -> Result<(StepLosses, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let mtl = mtl_term(model, &mut g, &p, batch, dropout)?;
    let mlm = if lambda > 0.0 || mtl.is_none() {
        mlm_term(model, &mut g, &p, batch.masked.as_slice(), dropout)?
    } else {
        None
    };
    let mtl_value = mtl.map_or(0.0, |v| g.value(v).item());
    let mlm_value = mlm.map_or(0.0, |v| g.value(v).item());
    let weight = if mtl.is_none() { 1.0 } else { lambda };
    let mlm = match mlm {
        Some(v) if detach_mlm => {
            let constant = g.value(v).clone();
            Some(g.leaf(constant, false))
        }
        other => other,
    };
    let total = match (mtl, mlm) {
        (Some(a), Some(b)) => {
            let scaled = g.scale(b, weight)?;
            Some(g.add(a, scaled)?)
        }
        (Some(a), None) => Some(a),
        (None, b) => b,
    };
    let losses = StepLosses {
        total: total.map_or(0.0, |v| g.value(v).item()),
        mtl: mtl_value,
        mlm: mlm_value,
        weighted_mlm: weight * mlm_value,
        mlm_skipped: mlm.is_none(),
    };
    if !losses.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss: total {} (mtl {}, mlm {})",
            losses.total, losses.mtl, losses.mlm
        )));
    }
    let Some(total) = total else {
        return Ok((losses, vec![None; p.vars().len()]));
    };
    g.backward(total)?;
    let grads = p.vars().iter().map(|&v| g.take_grad(v)).collect();
    Ok((losses, grads))
}

/// One optimization step: [`joint_gradients`] followed by an Adam update at `lr`.
pub fn joint_step(
    model: &mut EncoderModel,
    adam: &mut AdamState,
    batch: &TrainBatch,
    lambda: f64,
    lr: f64,
    dropout: Option<DropoutKey>,
) -> Result<StepLosses> {
    let (losses, grads) = joint_gradients(model, batch, lambda, dropout, false)?;
    let config = AdamConfig {
        lr,
        ..AdamConfig::default()
    };
    let mut params: Vec<&mut Tensor> = model.params_mut().iter_mut().collect();
    adam_step(&mut params, &grads, adam, config)?;
    Ok(losses)
}

/// Fraction of examples whose highest-scoring option is the gold one.
pub fn accuracy(model: &EncoderModel, examples: &[PreparedExample]) -> Result<Option<f64>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let mut correct = 0usize;
    for chunk in examples.chunks(32) {
        let seqs: Vec<Encoded> = chunk.iter().flat_map(|e| e.options.iter().cloned()).collect();
        let scores = model.scores(&seqs)?;
        let mut offset = 0;
        for ex in chunk {
            let k = ex.options.len();
            if argmax(&scores[offset..offset + k]) == ex.label {
                correct += 1;
            }
            offset += k;
        }
    }
    Ok(Some(correct as f64 / examples.len() as f64))
}

pub fn dev_accuracy(model: &EncoderModel, task: &PreparedTask) -> Result<Option<f64>> {
    accuracy(model, &task.dev)
}

/// One phase of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    /// Indices into the prepared corpus.
    pub tasks: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub lambda: f64,
    pub objective: Objective,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: String,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: StepLosses,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub steps: usize,
    pub total: f64,
    pub mtl: f64,
    /// Mean MLM loss over steps that masked at least one position.
    pub mlm: f64,
    pub dev_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
struct Position {
    stage: usize,
    epoch: usize,
    global_step: u64,
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    format: String,
    position: Position,
    history: Vec<EpochRecord>,
    config: TrainConfig,
    stages: Vec<Stage>,
    vocab_hash: String,
}

/// Runs a list of stages over a prepared corpus, one epoch at a time.
///
/// Every random draw is keyed on `(seed, stage, epoch)` or `(seed, step)`, so
/// a run interrupted after any epoch and resumed from its saved state ends
/// with exactly the parameters of an uninterrupted run.
pub struct Trainer<'a> {
    data: &'a PreparedCorpus,
    config: TrainConfig,
    stages: Vec<Stage>,
    eval_task: Option<usize>,
    model: EncoderModel,
    adam: AdamState,
    position: Position,
    history: Vec<EpochRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a PreparedCorpus, config: TrainConfig, stages: Vec<Stage>, eval_task: Option<usize>) -> Result<Self> {
        config.validate()?;
        let model = EncoderModel::new(config.model.encoder(data.vocab.len()), config.seed)?;
        Self::with_model(data, config, stages, eval_task, model)
    }

    /// Starts from existing weights instead of a fresh initialization.
    pub fn with_model(
        data: &'a PreparedCorpus,
        config: TrainConfig,
        stages: Vec<Stage>,
        eval_task: Option<usize>,
        model: EncoderModel,
    ) -> Result<Self> {
        config.validate()?;
        if model.config().vocab_size != data.vocab.len() {
            return Err(Error::Config(format!(
                "model vocabulary {} does not match corpus vocabulary {}",
                model.config().vocab_size,
                data.vocab.len()
            )));
        }
        if let Some(bad) = stages.iter().flat_map(|s| &s.tasks).find(|&&t| t >= data.tasks.len()) {
            return Err(Error::UnknownTask(format!("task index {bad}")));
        }
        let adam = AdamState::new(&model.params().iter().collect::<Vec<_>>());
        Ok(Self {
            data,
            config,
            stages,
            eval_task,
            model,
            adam,
            position: Position::default(),
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &EncoderModel {
        &self.model
    }

    pub fn into_model(self) -> EncoderModel {
        self.model
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn finished(&self) -> bool {
        self.position.stage >= self.stages.len()
    }

    /// Optimization steps taken so far, over all stages.
    pub fn global_step(&self) -> u64 {
        self.position.global_step
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    fn skip_empty_stages(&mut self) {
        while let Some(stage) = self.stages.get(self.position.stage) {
            if self.position.epoch < stage.epochs && !stage.tasks.is_empty() {
                break;
            }
            self.position.stage += 1;
            self.position.epoch = 0;
            self.adam = AdamState::new(&self.model.params().iter().collect::<Vec<_>>());
        }
    }

    /// Trains one epoch of the current stage. Returns `false` once every stage is done.
    pub fn run_epoch(&mut self, on_step: &mut dyn FnMut(&StepRecord)) -> Result<bool> {
        self.skip_empty_stages();
        let Some(stage) = self.stages.get(self.position.stage).cloned() else {
            return Ok(false);
        };
        let (si, epoch) = (self.position.stage as u64, self.position.epoch);
        let seed = self.config.seed;
        let sizes: Vec<usize> = stage.tasks.iter().map(|&t| self.data.tasks[t].train.len()).collect();
        let mut mix_rng = seed::rng(&[seed, seed::hash_str("mixture"), si, epoch as u64]);
        let stream = sample_mixture(&sizes, self.config.dataset_cap, &mut mix_rng)?;
        let per_epoch = stream.len().div_ceil(self.config.batch_size);
        let total_steps = per_epoch * stage.epochs;
        let with_mlm = stage.lambda > 0.0;

        let (mut sum_total, mut sum_mtl, mut sum_mlm, mut mlm_steps) = (0.0, 0.0, 0.0, 0usize);
        for (i, chunk) in stream.chunks(self.config.batch_size).enumerate() {
            let step = self.position.global_step;
            let examples: Vec<&PreparedExample> = chunk
                .iter()
                .map(|&(t, e)| &self.data.tasks[stage.tasks[t]].train[e])
                .collect();
            let mut mask_rng = seed::rng(&[seed, seed::hash_str("mask"), step]);
            let batch = TrainBatch::build(&examples, self.data, &self.config, stage.objective, with_mlm, &mut mask_rng);
            let lr = lr_at(stage.lr, self.config.warmup, epoch * per_epoch + i, total_steps);
            let key = DropoutKey {
                seed: seed::derive(&[seed, seed::hash_str("dropout")]),
                step,
            };
            let losses = joint_step(&mut self.model, &mut self.adam, &batch, stage.lambda, lr, Some(key))?;
            sum_total += losses.total;
            sum_mtl += losses.mtl;
            if !losses.mlm_skipped {
                sum_mlm += losses.mlm;
                mlm_steps += 1;
            }
            self.position.global_step += 1;
            on_step(&StepRecord {
                stage: stage.name.clone(),
                epoch,
                step,
                lr,
                losses,
            });
        }
        let dev_accuracy = match self.eval_task {
            Some(t) if stage.objective == Objective::Joint => dev_accuracy(&self.model, &self.data.tasks[t])?,
            _ => None,
        };
        self.history.push(EpochRecord {
            stage: stage.name.clone(),
            epoch,
            steps: per_epoch,
            total: sum_total / per_epoch as f64,
            mtl: sum_mtl / per_epoch as f64,
            mlm: if mlm_steps == 0 { 0.0 } else { sum_mlm / mlm_steps as f64 },
            dev_accuracy,
        });
        self.position.epoch += 1;
        self.skip_empty_stages();
        Ok(true)
    }

    /// Runs to completion.
    pub fn run(&mut self, on_step: &mut dyn FnMut(&StepRecord)) -> Result<()> {
        while self.run_epoch(on_step)? {}
        Ok(())
    }

    /// Writes `model.ckpt`, `optimizer.bin` and `trainer.json` into `dir`.
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let vocab_hash = self.data.vocab.hash();
        self.model.save(&dir.join("model.ckpt"), &vocab_hash)?;
        write_optimizer(&dir.join("optimizer.bin"), &self.adam)?;
        let state = TrainerState {
            format: STATE_FORMAT.into(),
            position: self.position,
            history: self.history.clone(),
            config: self.config.clone(),
            stages: self.stages.clone(),
            vocab_hash,
        };
        let path = dir.join("trainer.json");
        fs::write(&path, serde_json::to_string_pretty(&state)?).map_err(|e| Error::io(&path, e))
    }

    /// Restores a trainer written by [`Trainer::save_state`].
    pub fn resume(data: &'a PreparedCorpus, dir: &Path, eval_task: Option<usize>) -> Result<Self> {
        let path = dir.join("trainer.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: TrainerState = serde_json::from_str(&text)?;
        check_format(STATE_FORMAT, &state.format)?;
        if state.vocab_hash != data.vocab.hash() {
            return Err(Error::Config("saved run used a different vocabulary".into()));
        }
        let (model, _) = EncoderModel::load(&dir.join("model.ckpt"))?;
        let mut trainer = Self::with_model(data, state.config, state.stages, eval_task, model)?;
        trainer.adam = read_optimizer(&dir.join("optimizer.bin"), &trainer.model)?;
        trainer.position = state.position;
        trainer.history = state.history;
        Ok(trainer)
    }

    pub fn metrics(&self) -> RunMetrics {
        let mut stage_accuracy = BTreeMap::new();
        for r in &self.history {
            if let Some(acc) = r.dev_accuracy {
                stage_accuracy.insert(r.stage.clone(), acc);
            }
        }
        RunMetrics {
            format: METRICS_FORMAT.into(),
            final_accuracy: self.history.iter().rev().find_map(|r| r.dev_accuracy),
            stage_accuracy,
            history: self.history.clone(),
        }
    }
}

fn write_optimizer(path: &Path, state: &AdamState) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(OPTIMIZER_MAGIC);
    out.extend_from_slice(&state.step.to_le_bytes());
    for t in state.m.iter().chain(&state.v) {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_optimizer(path: &Path, model: &EncoderModel) -> Result<AdamState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = 16 + 16 * model.num_parameters();
    if bytes.len() != expected || &bytes[..8] != OPTIMIZER_MAGIC {
        return Err(Error::StateMismatch(format!(
            "{} holds {} bytes, expected {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let mut state = AdamState::new(&model.params().iter().collect::<Vec<_>>());
    state.step = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let mut offset = 16;
    for t in state.m.iter_mut().chain(state.v.iter_mut()) {
        for x in t.data_mut() {
            *x = f64::from_le_bytes(bytes[offset..offset + 8].try_into().expect("8 bytes"));
            offset += 8;
        }
    }
    Ok(state)
}

/// Summary of a run: per-epoch losses and dev accuracy after each stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub format: String,
    pub history: Vec<EpochRecord>,
    pub stage_accuracy: BTreeMap<String, f64>,
    pub final_accuracy: Option<f64>,
}

impl RunMetrics {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: RunMetrics = serde_json::from_str(&text)?;
        check_format(METRICS_FORMAT, &m.format)?;
        Ok(m)
    }
}

pub const STAGE_MULTITASK: &str = "multitask";
pub const STAGE_FINETUNE: &str = "finetune";

/// Stage list for multi-task training on `mixture` followed by supervised
/// fine-tuning on `target`. Stages with zero epochs are dropped, so
/// `config.epochs = 0` gives plain single-task training.
pub fn two_stage_plan(mixture: &[usize], target: Option<usize>, config: &TrainConfig) -> Vec<Stage> {
    let mut stages = Vec::new();
    if config.epochs > 0 && !mixture.is_empty() {
        stages.push(Stage {
            name: STAGE_MULTITASK.into(),
            tasks: mixture.to_vec(),
            epochs: config.epochs,
            lr: config.lr,
            lambda: config.lambda,
            objective: Objective::Joint,
        });
    }
    if let Some(t) = target {
        if config.finetune_epochs > 0 {
            stages.push(Stage {
                name: STAGE_FINETUNE.into(),
                tasks: vec![t],
                epochs: config.finetune_epochs,
                lr: config.finetune_lr,
                lambda: 0.0,
                objective: Objective::Joint,
            });
        }
    }
    stages
}

/// Multi-task training on `mixture`, then fine-tuning on `target` alone.
/// Dev accuracy on the target is recorded after every epoch of both stages.
pub fn pretrain_then_finetune(
    data: &PreparedCorpus,
    mixture: &[usize],
    target: usize,
    config: &TrainConfig,
) -> Result<(EncoderModel, RunMetrics)> {
    let stages = two_stage_plan(mixture, Some(target), config);
    let mut trainer = Trainer::new(data, config.clone(), stages, Some(target))?;
    trainer.run(&mut |_| {})?;
    let metrics = trainer.metrics();
    Ok((trainer.into_model(), metrics))
}
