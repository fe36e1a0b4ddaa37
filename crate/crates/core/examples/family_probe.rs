//! Trains the probing model on two synthetic task families and prints the
//! relationship matrix with within- and cross-family means.
use prefixmtl::corpus::build_corpus;
use prefixmtl::probing::{train_probe_model, Normalization, RelationshipMatrix};
use prefixmtl::synthetic::{family_corpus, FamilySpec};
use prefixmtl::training::{ModelShape, PreparedCorpus, TrainConfig};

fn main() -> prefixmtl::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let tasks = family_corpus(&FamilySpec { seed, ..Default::default() });
    let corpus = build_corpus(&tasks, 2, seed)?;
    let config = TrainConfig {
        epochs,
        lr: 2e-3,
        seed,
        model: ModelShape { layers: 2, hidden: 32, heads: 2, ffn: 64, max_len: 16, dropout: 0.0 },
        ..TrainConfig::default()
    };
    let data = PreparedCorpus::from_config(&corpus, &config)?;
    let t = std::time::Instant::now();
    let (model, history) = train_probe_model(&data, &config, None)?;
    let names = corpus.task_names();
    let m = RelationshipMatrix::from_model(&model, &data, &names, Normalization::Global)?;
    print!("{}", m.to_csv(true));
    let (mut within, mut cross) = (Vec::new(), Vec::new());
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            let same = data.tasks[i].family == data.tasks[j].family;
            if same { within.push(m.normalized[i][j]) } else { cross.push(m.normalized[i][j]) }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("mlm loss {:.3} -> {:.3}", history[0].mlm, history.last().unwrap().mlm);
    println!("within {:.3} cross {:.3} ({:.1}s)", mean(&within), mean(&cross), t.elapsed().as_secs_f64());
    Ok(())
}
