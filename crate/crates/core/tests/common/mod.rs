//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use prefixmtl::corpus::{build_corpus, RawTask};
use prefixmtl::model::{DropoutKey, EncoderModel};
use prefixmtl::numerics::{check_gradients, finite_difference, GradCheck, Graph, Tensor, Var};
use prefixmtl::seed;
use prefixmtl::training::{joint_gradients, ModelShape, Objective, PreparedCorpus, PreparedExample, TrainBatch, TrainConfig};
use prefixmtl::Result;

pub const H: f64 = 1e-4;

fn randn(shape: &[usize], key: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut seed::rng(&[key]))
}

/// Reduces any output to a scalar through a fixed random weighting, so every
/// output element contributes a distinct gradient.
fn project(g: &mut Graph, v: Var, key: u64) -> Result<Var> {
    let w = g.leaf(randn(g.shape(v), 1000 + key), false);
    let prod = g.mul(v, w)?;
    Ok(g.sum(prod))
}

type Check = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn cases() -> Vec<Check> {
    let ids = [0usize, 2, 2, 5];
    let mask: Vec<bool> = (0..12).map(|i| i % 3 == 1).collect();
    vec![
        ("matmul", vec![randn(&[3, 4], 1), randn(&[4, 5], 2)], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 0)
        })),
        ("matmul_transposed", vec![randn(&[3, 4], 3), randn(&[5, 4], 4)], Box::new(|g, v| {
            let y = g.matmul_t(v[0], v[1], true)?;
            project(g, y, 1)
        })),
        ("batch_matmul", vec![randn(&[2, 3, 4], 5), randn(&[2, 4, 5], 6)], Box::new(|g, v| {
            let y = g.batch_matmul(v[0], v[1], false)?;
            project(g, y, 2)
        })),
        ("batch_matmul_transposed", vec![randn(&[2, 3, 4], 7), randn(&[2, 5, 4], 8)], Box::new(|g, v| {
            let y = g.batch_matmul(v[0], v[1], true)?;
            project(g, y, 3)
        })),
        ("add", vec![randn(&[3, 4], 9), randn(&[3, 4], 10)], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 4)
        })),
        ("add_row", vec![randn(&[3, 4], 11), randn(&[4], 12)], Box::new(|g, v| {
            let y = g.add_row(v[0], v[1])?;
            project(g, y, 5)
        })),
        ("mul", vec![randn(&[3, 4], 13), randn(&[3, 4], 14)], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 6)
        })),
        ("scale", vec![randn(&[3, 4], 15)], Box::new(|g, v| {
            let y = g.scale(v[0], -1.7)?;
            project(g, y, 7)
        })),
        ("softmax_last_axis", vec![randn(&[3, 4], 16)], Box::new(|g, v| {
            let y = g.softmax(v[0], 1)?;
            project(g, y, 8)
        })),
        ("softmax_middle_axis", vec![randn(&[2, 3, 4], 17)], Box::new(|g, v| {
            let y = g.softmax(v[0], 1)?;
            project(g, y, 9)
        })),
        ("layer_norm", vec![randn(&[3, 5], 18), randn(&[5], 19), randn(&[5], 20)], Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1, 1e-5)?;
            project(g, y, 10)
        })),
        ("layer_norm_first_axis", vec![randn(&[4, 3], 21), randn(&[4], 22), randn(&[4], 23)], Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 0, 1e-5)?;
            project(g, y, 11)
        })),
        ("gelu", vec![randn(&[3, 4], 24)], Box::new(|g, v| {
            let y = g.gelu(v[0])?;
            project(g, y, 12)
        })),
        ("embedding", vec![randn(&[6, 3], 25)], Box::new(move |g, v| {
            let y = g.embedding(v[0], &ids)?;
            project(g, y, 13)
        })),
        ("dropout", vec![randn(&[4, 5], 26)], Box::new(|g, v| {
            let y = g.dropout(v[0], 0.3, &mut seed::rng(&[77]))?;
            project(g, y, 14)
        })),
        ("cross_entropy", vec![randn(&[4, 5], 27)], Box::new(|g, v| g.cross_entropy(v[0], &[1, 0, 4, 4]))),
        ("masked_fill", vec![randn(&[3, 4], 28)], Box::new(move |g, v| {
            let y = g.masked_fill(v[0], &mask, -3.0)?;
            project(g, y, 15)
        })),
        ("sum", vec![randn(&[3, 4], 29)], Box::new(|g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        })),
        ("reshape", vec![randn(&[3, 4], 30)], Box::new(|g, v| {
            let y = g.reshape(v[0], &[2, 6])?;
            project(g, y, 16)
        })),
        ("permute_0213", vec![randn(&[2, 3, 2, 2], 31)], Box::new(|g, v| {
            let y = g.permute_0213(v[0])?;
            project(g, y, 17)
        })),
        ("gather_rows", vec![randn(&[5, 3], 32)], Box::new(|g, v| {
            let y = g.gather_rows(v[0], &[4, 0, 4])?;
            project(g, y, 18)
        })),
    ]
}

/// Finite-difference check of every differentiable primitive.
pub fn primitive_checks() -> Vec<(&'static str, GradCheck)> {
    cases()
        .into_iter()
        .map(|(name, inputs, f)| (name, check_gradients(&inputs, H, f).unwrap()))
        .collect()
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        model: ModelShape {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn: 12,
            max_len: 24,
            dropout: 0.1,
        },
        ..TrainConfig::default()
    }
}

pub fn prepare(tasks: &[RawTask], k: usize, config: &TrainConfig) -> PreparedCorpus {
    let corpus = build_corpus(tasks, k, config.seed).unwrap();
    PreparedCorpus::from_config(&corpus, config).unwrap()
}

/// Finite-difference check of `L_mtl + lambda * L_mlm` with respect to every
/// model parameter, dropout included under a fixed key.
pub fn joint_loss_check() -> GradCheck {
    let config = tiny_config();
    let spec = prefixmtl::synthetic::FamilySpec {
        families: 2,
        tasks_per_family: 1,
        keys: 4,
        fillers: 4,
        context_words: 3,
        train: 4,
        dev: 0,
        seed: 3,
    };
    let data = prepare(&prefixmtl::synthetic::family_corpus(&spec), 2, &config);
    let mut model = EncoderModel::new(config.model.encoder(data.vocab.len()), 5).unwrap();
    // small embeddings put layer norm where h = 1e-4 is a large step
    let mut rng = seed::rng(&[6]);
    for p in &mut model.params_mut()[..2] {
        let noise = Tensor::randn(p.shape(), 0.3, &mut rng);
        for (x, n) in p.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
    let examples: Vec<&PreparedExample> = data.tasks.iter().flat_map(|t| &t.train[..2]).collect();
    // find a masking draw that selects something, so both terms are live
    let batch = (0..)
        .map(|s| TrainBatch::build(&examples, &data, &config, Objective::Joint, true, &mut seed::rng(&[s])))
        .find(|b| b.masked.iter().map(|m| m.positions.len()).sum::<usize>() >= 3)
        .unwrap();
    let key = Some(DropoutKey { seed: 11, step: 2 });
    let (_, analytic) = joint_gradients(&model, &batch, 0.1, key, false).unwrap();
    let mut params = model.params().to_vec();
    finite_difference(&mut params, &analytic, H, |p| {
        let mut m = model.clone();
        m.params_mut().clone_from_slice(p);
        Ok(joint_gradients(&m, &batch, 0.1, key, false)?.0.total)
    })
    .unwrap()
}
