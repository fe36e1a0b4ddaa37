//! Runs the planted transfer benchmark end to end: probing, the dual-task
//! grid, measure correlations, then top-5 against single-task mixtures.
use std::time::Instant;

use prefixmtl::corpus::build_corpus;
use prefixmtl::probing::{train_probe_model, BaselineKind, BaselineMeasure, Normalization, RelationshipMatrix};
use prefixmtl::synthetic::{planted_benchmark, PlantedSpec};
use prefixmtl::training::{ModelShape, PreparedCorpus, TrainConfig};
use prefixmtl::transfer::{correlate_measure, mixture_experiment, run_grid, CorrelationReport, Strategy};

fn main() -> prefixmtl::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let bench = planted_benchmark(&PlantedSpec { seed, ..Default::default() });
    let corpus = build_corpus(&bench.tasks, 2, seed)?;
    let config = TrainConfig {
        epochs: 8,
        finetune_epochs: 4,
        lr: 2e-3,
        finetune_lr: 1e-3,
        seed,
        model: ModelShape { layers: 2, hidden: 32, heads: 2, ffn: 64, max_len: 24, dropout: 0.0 },
        ..TrainConfig::default()
    };
    let data = PreparedCorpus::from_config(&corpus, &config)?;
    let t = Instant::now();
    let (model, _) = train_probe_model(&data, &config, None)?;
    let matrix = RelationshipMatrix::from_model(&model, &data, &corpus.task_names(), Normalization::Global)?;
    println!("probe {:.1}s", t.elapsed().as_secs_f64());
    print!("{}", matrix.ranked_table());
    let t = Instant::now();
    let (grid, _) = run_grid(&data, &bench.sources, &bench.targets, &config, None, &mut |c, _| {
        println!("  {} <- {}: {:?}", c.target, c.source, c.accuracy)
    })?;
    println!("grid {:.1}s", t.elapsed().as_secs_f64());
    let length = BaselineMeasure::compute(BaselineKind::Length, &data)?;
    let vocab = BaselineMeasure::compute(BaselineKind::Vocab, &data)?;
    let report = CorrelationReport::new(&grid, vec![
        correlate_measure(&grid, "Length", |t, s| length.score(t, s))?,
        correlate_measure(&grid, "Vocab", |t, s| vocab.score(t, s))?,
        correlate_measure(&grid, "Probing", |t, s| matrix.score(t, s))?,
    ]);
    print!("{}", report.to_table());
    for target in &bench.targets {
        let t = Instant::now();
        let single = mixture_experiment(&data, target, Strategy::Single, None, &[], &config)?;
        let top5 = mixture_experiment(&data, target, Strategy::Top5, Some(&matrix), &[], &config)?;
        println!("{target}: single {:?} top5 {:?} {:?} ({:.1}s)", single.accuracy, top5.accuracy, top5.mixture, t.elapsed().as_secs_f64());
    }
    Ok(())
}
