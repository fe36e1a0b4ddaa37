use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use prefixmtl::corpus::{Corpus, StatsReport};
use prefixmtl::model::EncoderModel;
use prefixmtl::probing::{
    rank_complementary, train_probe_model, BaselineKind, BaselineMeasure, Normalization, RelationshipMatrix,
};
use prefixmtl::training::{
    two_stage_plan, EpochRecord, PrefixPolicy, PreparedCorpus, RunMetrics, StepRecord, TrainConfig, Trainer,
};
use prefixmtl::transfer::{
    correlate_measure, mixture_tasks, run_grid, CorrelationReport, Strategy, TransferGrid,
};
use serde_json::json;

use crate::args::{Cli, Command, CorpusArgsOpt, NormalizationArg, PolicyArg, TrainingArgs};
use crate::failure::Failure;
use crate::run::{absolute, matrix_file, CorpusSource, Job, RunConfig, RUN_FILE};

pub const RELATIONSHIPS_FILE: &str = "relationships.json";
const STATE_DIR: &str = "state";
const STEPS_FILE: &str = "steps.jsonl";
const METRICS_FILE: &str = "metrics.json";
const CORRELATION_FILE: &str = "correlation.json";
const GRID_FILE: &str = "grid.json";
const STATS_FILE: &str = "stats.json";
const REPORT_DIR: &str = "report";

struct Ctx {
    out: PathBuf,
    verbose: u8,
    dry_run: bool,
}

impl Ctx {
    fn log(&self, level: u8, message: impl FnOnce() -> String) {
        if self.verbose >= level {
            eprintln!("{}", message());
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), Failure> {
    let ctx = Ctx {
        out: cli.out,
        verbose: cli.verbose,
        dry_run: cli.dry_run,
    };
    let seed = cli.seed;
    let config = match cli.command {
        Command::Report(a) => return report(&a.run),
        Command::Rerun(a) => RunConfig::load(&a.run_config)?,
        Command::Train(a) if a.resume.is_some() => {
            reject_overrides(&a.training, seed)?;
            return resume(a.resume.as_deref().unwrap(), "train", &ctx);
        }
        Command::Transfer(a) if a.resume.is_some() => {
            reject_overrides(&a.training, seed)?;
            return resume(a.resume.as_deref().unwrap(), "transfer", &ctx);
        }
        Command::Convert(a) => RunConfig::new(
            seed.unwrap_or(0),
            Job::Convert {
                corpus: CorpusSource {
                    manifest: absolute(&a.manifest)?,
                    k: a.k,
                },
            },
        ),
        Command::Train(a) => {
            let train = train_config(&a.training, seed)?;
            let strategy = match (&a.target, &a.strategy) {
                (None, Some(_)) => return Err(Failure::usage("--strategy needs --target")),
                (None, None) => None,
                (Some(_), s) => Some(s.as_deref().unwrap_or("fullset").parse::<Strategy>()?),
            };
            if strategy == Some(Strategy::Top5) && a.matrix.is_none() {
                return Err(Failure::usage("the top5 strategy needs --matrix"));
            }
            RunConfig::new(
                train.seed,
                Job::Train {
                    corpus: corpus_source(&a.corpus)?,
                    train,
                    target: a.target,
                    strategy,
                    subset: a.subset,
                    matrix: a.matrix.as_deref().map(|m| absolute(&matrix_file(m))).transpose()?,
                },
            )
        }
        Command::Probe(a) => {
            let train = train_config(&a.training, seed)?;
            RunConfig::new(
                train.seed,
                Job::Probe {
                    corpus: CorpusSource {
                        manifest: absolute(&a.corpus.manifest)?,
                        k: a.corpus.k,
                    },
                    train,
                    normalization: match a.normalization {
                        NormalizationArg::Global => Normalization::Global,
                        NormalizationArg::PerRow => Normalization::PerRow,
                    },
                    warm_start: a.warm_start.as_deref().map(absolute).transpose()?,
                },
            )
        }
        Command::Transfer(a) => {
            let train = train_config(&a.training, seed)?;
            RunConfig::new(
                train.seed,
                Job::Transfer {
                    corpus: corpus_source(&a.corpus)?,
                    train,
                    sources: a.sources,
                    targets: a.targets,
                    matrix: a.matrix.as_deref().map(|m| absolute(&matrix_file(m))).transpose()?,
                },
            )
        }
        Command::Select(a) => RunConfig::new(
            seed.unwrap_or(0),
            Job::Select {
                matrix: absolute(&matrix_file(&a.matrix))?,
                target: a.target,
                top_k: a.top_k,
            },
        ),
    };
    if ctx.dry_run {
        println!("{}", config.to_json());
        return Ok(());
    }
    let dir = config.create_dir(&ctx.out)?;
    println!("run {}", dir.display());
    run_in(&config, &dir, &ctx, false)
}

fn reject_overrides(args: &TrainingArgs, seed: Option<u64>) -> Result<(), Failure> {
    let any = args.lambda.is_some()
        || args.mask_ratio.is_some()
        || args.prefix_policy.is_some()
        || args.cap.is_some()
        || args.epochs.is_some()
        || args.finetune_epochs.is_some()
        || args.lr.is_some()
        || args.batch_size.is_some()
        || args.no_prefix
        || seed.is_some();
    if any {
        Err(Failure::usage("a resumed run keeps its own configuration; drop the override flags"))
    } else {
        Ok(())
    }
}

fn resume(dir: &Path, command: &str, ctx: &Ctx) -> Result<(), Failure> {
    let config = RunConfig::load(&dir.join(RUN_FILE))?;
    if config.job.name() != command {
        return Err(Failure::usage(format!(
            "{} holds a {} run, not a {command} run",
            dir.display(),
            config.job.name()
        )));
    }
    if ctx.dry_run {
        println!("{}", config.to_json());
        return Ok(());
    }
    println!("run {}", dir.display());
    run_in(&config, dir, ctx, true)
}

fn run_in(config: &RunConfig, dir: &Path, ctx: &Ctx, resuming: bool) -> Result<(), Failure> {
    let outcome = match &config.job {
        Job::Convert { corpus } => convert(corpus, config.seed, dir),
        Job::Train {
            corpus,
            train,
            target,
            strategy,
            subset,
            matrix,
        } => train_run(corpus, train, target.as_deref(), *strategy, subset, matrix.as_deref(), dir, ctx, resuming),
        Job::Probe {
            corpus,
            train,
            normalization,
            warm_start,
        } => probe(corpus, train, *normalization, warm_start.as_deref(), dir, ctx),
        Job::Transfer {
            corpus,
            train,
            sources,
            targets,
            matrix,
        } => transfer(corpus, train, sources, targets, matrix.as_deref(), dir, ctx),
        Job::Select { matrix, target, top_k } => select(matrix, target, *top_k, dir),
    };
    if let Err(failure) = &outcome {
        let _ = fs::write(dir.join("error.json"), failure.to_json() + "\n");
    }
    outcome
}

fn corpus_source(args: &CorpusArgsOpt) -> Result<CorpusSource, Failure> {
    let manifest = args.manifest.as_deref().ok_or_else(|| Failure::usage("--manifest is required"))?;
    Ok(CorpusSource {
        manifest: absolute(manifest)?,
        k: args.k,
    })
}

fn train_config(args: &TrainingArgs, seed: Option<u64>) -> Result<TrainConfig, Failure> {
    let mut c = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.lambda {
        c.lambda = v;
    }
    if let Some(v) = args.mask_ratio {
        c.mask_ratio = v;
    }
    if let Some(p) = args.prefix_policy {
        c.prefix_policy = match p {
            PolicyArg::Default => PrefixPolicy::Default,
            PolicyArg::Must => PrefixPolicy::Must,
            PolicyArg::No => PrefixPolicy::No,
            PolicyArg::Only => PrefixPolicy::Only,
        };
    }
    if let Some(v) = args.cap {
        c.dataset_cap = v;
    }
    if let Some(v) = args.epochs {
        c.epochs = v;
    }
    if let Some(v) = args.finetune_epochs {
        c.finetune_epochs = v;
    }
    if let Some(v) = args.lr {
        c.lr = v;
    }
    if let Some(v) = args.batch_size {
        c.batch_size = v;
    }
    if args.no_prefix {
        c.use_prefix = false;
    }
    if let Some(s) = seed {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

fn load_corpus(source: &CorpusSource, seed: u64) -> Result<Corpus, Failure> {
    Ok(Corpus::from_manifest(&source.manifest, source.k, seed)?)
}

fn prepare(source: &CorpusSource, train: &TrainConfig) -> Result<PreparedCorpus, Failure> {
    let corpus = load_corpus(source, train.seed)?;
    Ok(PreparedCorpus::from_config(&corpus, train)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn convert(source: &CorpusSource, seed: u64, dir: &Path) -> Result<(), Failure> {
    let corpus = load_corpus(source, seed)?;
    corpus.write(dir)?;
    let report = StatsReport::load(&dir.join(STATS_FILE))?;
    print!("{}", stats_table(&report));
    Ok(())
}

fn stats_table(report: &StatsReport) -> String {
    let mut rows: Vec<(&str, &prefixmtl::corpus::ConversionStats)> =
        report.tasks.iter().map(|(n, s)| (n.as_str(), s)).collect();
    rows.push(("total", &report.total));
    let w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(4).max(4);
    let mut out = format!(
        "{:<w$}  {:>8}  {:>9}  {:>6}  {:>6}  {:>6}  {:>6}\n",
        "task", "examples", "unchanged", "rule1", "rule2", "rule3", "rule4"
    );
    for (name, s) in rows {
        out += &format!(
            "{name:<w$}  {:>8}  {:>9}  {:>6}  {:>6}  {:>6}  {:>6}\n",
            s.examples, s.unchanged, s.rule1_examples, s.rule2_examples, s.rule3_examples, s.rule4_examples
        );
    }
    out
}

fn log_epoch(ctx: &Ctx, r: &EpochRecord) {
    ctx.log(1, || {
        let acc = r.dev_accuracy.map_or("-".into(), |a| format!("{a:.4}"));
        format!(
            "{} epoch {} steps {} loss {:.4} mtl {:.4} mlm {:.4} dev {acc}",
            r.stage, r.epoch, r.steps, r.total, r.mtl, r.mlm
        )
    });
}

/// Keeps the first `n` lines of a file; steps logged after the last saved
/// epoch are dropped on resume and recomputed.
fn truncate_lines(path: &Path, n: u64) -> Result<(), Failure> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<String> = BufReader::new(File::open(path)?)
        .lines()
        .take(n as usize)
        .collect::<Result<_, _>>()?;
    let mut text = kept.join("\n");
    if !kept.is_empty() {
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_run(
    source: &CorpusSource,
    config: &TrainConfig,
    target: Option<&str>,
    strategy: Option<Strategy>,
    subset: &[String],
    matrix: Option<&Path>,
    dir: &Path,
    ctx: &Ctx,
    resuming: bool,
) -> Result<(), Failure> {
    let data = prepare(source, config)?;
    let matrix = matrix.map(RelationshipMatrix::load).transpose()?;
    let (mixture, eval) = match target {
        Some(t) => {
            let strategy = strategy.unwrap_or(Strategy::Fullset);
            let mixture = mixture_tasks(&data, t, strategy, matrix.as_ref(), subset)?;
            (mixture, Some(data.task_index(t)?))
        }
        None => ((0..data.tasks.len()).collect(), None),
    };
    let state = dir.join(STATE_DIR);
    let steps_path = dir.join(STEPS_FILE);
    let mut trainer = if resuming && state.join("trainer.json").exists() {
        let t = Trainer::resume(&data, &state, eval)?;
        truncate_lines(&steps_path, t.global_step())?;
        ctx.log(1, || format!("resumed after {} epochs", t.epochs_done()));
        t
    } else {
        let _ = fs::remove_file(&steps_path);
        Trainer::new(&data, config.clone(), two_stage_plan(&mixture, eval, config), eval)?
    };
    let names: Vec<&str> = mixture.iter().map(|&i| data.tasks[i].name.as_str()).collect();
    write_json(
        &dir.join("mixture.json"),
        &json!({"target": target, "strategy": strategy, "mixture": names}),
    )?;
    data.vocab.save(&dir.join("vocab.txt"))?;

    let file = OpenOptions::new().create(true).append(true).open(&steps_path)?;
    let mut steps = BufWriter::new(file);
    let mut write_error = None;
    loop {
        let mut on_step = |s: &StepRecord| {
            ctx.log(2, || format!("{} step {} loss {:.5}", s.stage, s.step, s.losses.total));
            if write_error.is_none() {
                if let Err(e) = serde_json::to_string(s).map(|line| writeln!(steps, "{line}")) {
                    write_error = Some(Failure::from(e));
                }
            }
        };
        let more = trainer.run_epoch(&mut on_step)?;
        if let Some(e) = write_error.take() {
            return Err(e);
        }
        steps.flush()?;
        if let Some(r) = trainer.history().last() {
            log_epoch(ctx, r);
        }
        trainer.save_state(&state)?;
        if !more {
            break;
        }
    }
    let metrics = trainer.metrics();
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    trainer.model().save(&dir.join("model.ckpt"), &data.vocab.hash())?;
    match metrics.final_accuracy {
        Some(acc) => println!("{} dev accuracy {acc:.4}", target.unwrap_or("target")),
        None => println!("trained {} epochs", metrics.history.len()),
    }
    Ok(())
}

fn probe(
    source: &CorpusSource,
    config: &TrainConfig,
    normalization: Normalization,
    warm_start: Option<&Path>,
    dir: &Path,
    ctx: &Ctx,
) -> Result<(), Failure> {
    let data = prepare(source, config)?;
    let warm = match warm_start {
        Some(path) => {
            let (model, hash) = EncoderModel::load(path)?;
            if hash != data.vocab.hash() {
                return Err(prefixmtl::Error::Config(format!(
                    "checkpoint {} was trained on a different vocabulary",
                    path.display()
                ))
                .into());
            }
            Some(model)
        }
        None => None,
    };
    let (model, history) = train_probe_model(&data, config, warm)?;
    for r in &history {
        log_epoch(ctx, r);
    }
    let tasks: Vec<String> = data.tasks.iter().map(|t| t.name.clone()).collect();
    let matrix = RelationshipMatrix::from_model(&model, &data, &tasks, normalization)?;
    model.save(&dir.join("model.ckpt"), &data.vocab.hash())?;
    data.vocab.save(&dir.join("vocab.txt"))?;
    write_json(&dir.join("history.json"), &history)?;
    matrix.save(&dir.join(RELATIONSHIPS_FILE))?;
    fs::write(dir.join("relationships.csv"), matrix.to_csv(true))?;
    fs::write(dir.join("relationships_raw.csv"), matrix.to_csv(false))?;
    for kind in [BaselineKind::Length, BaselineKind::Vocab] {
        let measure = BaselineMeasure::compute(kind, &data)?;
        let name = baseline_name(kind);
        write_json(&dir.join(format!("baseline_{name}.json")), &measure)?;
        fs::write(dir.join(format!("baseline_{name}.csv")), measure.to_csv())?;
    }
    render_matrix(&matrix, dir)?;
    print!("{}", matrix.ranked_table());
    Ok(())
}

fn baseline_name(kind: BaselineKind) -> &'static str {
    match kind {
        BaselineKind::Length => "length",
        BaselineKind::Vocab => "vocab",
    }
}

fn render_matrix(matrix: &RelationshipMatrix, dir: &Path) -> Result<(), Failure> {
    matrix.write_pgm(&dir.join("heatmap.pgm"), 16)?;
    fs::write(dir.join("ranked.txt"), matrix.ranked_table())?;
    Ok(())
}

fn transfer(
    source: &CorpusSource,
    config: &TrainConfig,
    sources: &[String],
    targets: &[String],
    matrix: Option<&Path>,
    dir: &Path,
    ctx: &Ctx,
) -> Result<(), Failure> {
    let data = prepare(source, config)?;
    let sources: Vec<String> = if sources.is_empty() {
        data.tasks.iter().map(|t| t.name.clone()).filter(|n| !targets.contains(n)).collect()
    } else {
        sources.to_vec()
    };
    let matrix = matrix.map(RelationshipMatrix::load).transpose()?;
    let mut on_cell = |cell: &prefixmtl::transfer::CellResult, reused: bool| {
        ctx.log(1, || {
            let acc = cell.accuracy.map_or_else(|| "failed".into(), |a| format!("{a:.4}"));
            let how = if reused { " (reused)" } else { "" };
            format!("{} <- {}: {acc}{how}", cell.target, cell.source)
        });
    };
    let (grid, run) = run_grid(&data, &sources, targets, config, Some(dir), &mut on_cell)?;
    write_json(&dir.join("grid_run.json"), &json!({"computed": run.computed, "reused": run.reused, "failed": run.failed}))?;
    let mut measures = Vec::new();
    for kind in [BaselineKind::Length, BaselineKind::Vocab] {
        let baseline = BaselineMeasure::compute(kind, &data)?;
        let mut name = baseline_name(kind).to_string();
        name[..1].make_ascii_uppercase();
        measures.push(correlate_measure(&grid, &name, |t, s| baseline.score(t, s))?);
    }
    if let Some(m) = &matrix {
        measures.push(correlate_measure(&grid, "Probing", |t, s| m.score(t, s))?);
    }
    let report = CorrelationReport::new(&grid, measures);
    report.save(&dir.join(CORRELATION_FILE))?;
    fs::write(dir.join("correlation.txt"), report.to_table())?;
    println!("cells computed {} reused {} failed {}", run.computed, run.reused, run.failed);
    print!("{}", report.to_table());
    Ok(())
}

fn select(matrix: &Path, target: &str, top_k: usize, dir: &Path) -> Result<(), Failure> {
    let matrix = RelationshipMatrix::load(matrix)?;
    let ranked = rank_complementary(&matrix, target, top_k)?;
    let mut rows = Vec::new();
    for (i, task) in ranked.iter().enumerate() {
        let score = matrix.score(target, task)?;
        println!("{}\t{task}\t{score:.4}", i + 1);
        rows.push(json!({"task": task, "score": score}));
    }
    write_json(&dir.join("selection.json"), &json!({"target": target, "top_k": top_k, "ranked": rows}))
}

/// Renders whatever a run directory holds. Reads persisted artifacts only.
fn report(dir: &Path) -> Result<(), Failure> {
    if !dir.is_dir() {
        return Err(Failure::data("io", format!("{} is not a directory", dir.display())));
    }
    let out = dir.join(REPORT_DIR);
    let mut rendered = Vec::new();
    let mut sections = Vec::new();

    let stats = dir.join(STATS_FILE);
    if stats.exists() {
        let report = StatsReport::load(&stats)?;
        sections.push(("conversion", stats_table(&report)));
    }
    let metrics = dir.join(METRICS_FILE);
    if metrics.exists() {
        let m = RunMetrics::load(&metrics)?;
        let mut text = String::new();
        for r in &m.history {
            let acc = r.dev_accuracy.map_or("-".into(), |a| format!("{a:.4}"));
            text += &format!("{} {} loss {:.4} mtl {:.4} mlm {:.4} dev {acc}\n", r.stage, r.epoch, r.total, r.mtl, r.mlm);
        }
        if let Some(acc) = m.final_accuracy {
            text += &format!("final dev accuracy {acc:.4}\n");
        }
        sections.push(("training", text));
    }
    let relationships = dir.join(RELATIONSHIPS_FILE);
    if relationships.exists() {
        let matrix = RelationshipMatrix::load(&relationships)?;
        fs::create_dir_all(&out)?;
        render_matrix(&matrix, &out)?;
        rendered.push("heatmap.pgm");
        sections.push(("relationships", matrix.ranked_table()));
    }
    if dir.join(GRID_FILE).exists() {
        let grid = TransferGrid::load(dir)?;
        sections.push(("transfer", grid.to_csv()));
    }
    let correlation = dir.join(CORRELATION_FILE);
    if correlation.exists() {
        sections.push(("correlation", CorrelationReport::load(&correlation)?.to_table()));
    }
    if sections.is_empty() {
        return Err(Failure::data(
            "no_artifacts",
            format!("{} holds no run artifacts to report", dir.display()),
        ));
    }
    let mut text = String::new();
    for (title, body) in &sections {
        text += &format!("== {title}\n{body}\n");
    }
    fs::create_dir_all(&out)?;
    fs::write(out.join("summary.txt"), &text)?;
    print!("{text}");
    for file in rendered {
        println!("wrote {}", out.join(file).display());
    }
    Ok(())
}
