use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::TrainConfig;
use crate::corpus::{assemble, Corpus, Example};
use crate::error::{Error, Result};
use crate::tokenizer::{Encoded, Vocabulary};

/// An example with its option sequences and its option-free probing sequence encoded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreparedExample {
    pub options: Vec<Encoded>,
    pub label: usize,
    pub probe: Encoded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedTask {
    pub name: String,
    pub family: String,
    pub prefix_id: usize,
    pub train: Vec<PreparedExample>,
    pub dev: Vec<PreparedExample>,
    /// Mean token count of the untruncated option sequences.
    pub mean_length: f64,
}

/// A corpus encoded once against a fixed vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedCorpus {
    pub vocab: Vocabulary,
    pub tasks: Vec<PreparedTask>,
    pub k: usize,
    pub max_len: usize,
    pub use_prefix: bool,
}

impl PreparedCorpus {
    /// Encodes every example. With `use_prefix` off the prefix slot is left
    /// empty, giving `[CLS] context [SEP] ...`.
    pub fn new(corpus: &Corpus, vocab: Vocabulary, max_len: usize, use_prefix: bool) -> Result<Self> {
        if max_len < 3 {
            return Err(Error::Config(format!("max_len {max_len} leaves no room for [CLS], prefix and [SEP]")));
        }
        let mut tasks = Vec::with_capacity(corpus.tasks.len());
        for task in &corpus.tasks {
            let prefix_id = vocab
                .prefix_id(&task.name)
                .ok_or_else(|| Error::MissingPrefix(task.name.clone()))?;
            let prefix = if use_prefix { task.prefix.as_str() } else { "" };
            let mut total_len = 0usize;
            let mut count = 0usize;
            let mut prepare = |ex: &Example| -> PreparedExample {
                let options = ex
                    .options
                    .iter()
                    .map(|opt| {
                        let text = assemble(prefix, &ex.context, &ex.question, opt);
                        total_len += vocab.ids(&text).len();
                        count += 1;
                        vocab.encode(&text, max_len)
                    })
                    .collect();
                let probe = vocab.encode(&assemble(prefix, &ex.context, &ex.question, ""), max_len);
                PreparedExample {
                    options,
                    label: ex.label,
                    probe,
                }
            };
            let train: Vec<_> = task.examples.iter().map(&mut prepare).collect();
            let dev: Vec<_> = task.dev.iter().map(&mut prepare).collect();
            tasks.push(PreparedTask {
                name: task.name.clone(),
                family: task.family.clone(),
                prefix_id,
                train,
                dev,
                mean_length: if count == 0 { 0.0 } else { total_len as f64 / count as f64 },
            });
        }
        Ok(Self {
            vocab,
            tasks,
            k: corpus.k,
            max_len,
            use_prefix,
        })
    }

    /// Builds the vocabulary and encodes with the lengths and prefix setting of `config`.
    pub fn from_config(corpus: &Corpus, config: &TrainConfig) -> Result<Self> {
        let vocab = Vocabulary::build(corpus, config.min_count)?;
        Self::new(corpus, vocab, config.model.max_len, config.use_prefix)
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    /// Position of the prefix token in every encoded sequence, if prefixes are used.
    pub fn prefix_position(&self) -> Option<usize> {
        self.use_prefix.then_some(1)
    }
}

/// One epoch's example stream: every task contributes `min(size, cap)` examples
/// drawn without replacement, and the union is shuffled.
///
/// Items are `(task index, example index)` pairs over `sizes`.
pub fn sample_mixture<R: Rng + ?Sized>(sizes: &[usize], cap: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if sizes.iter().all(|&s| s == 0) {
        return Err(Error::EmptyCorpus);
    }
    if cap == 0 {
        return Err(Error::Config("dataset cap must be at least 1".into()));
    }
    let mut stream = Vec::new();
    for (t, &size) in sizes.iter().enumerate() {
        if size <= cap {
            stream.extend((0..size).map(|i| (t, i)));
        } else {
            let mut picked = index::sample(rng, size, cap).into_vec();
            picked.sort_unstable();
            stream.extend(picked.into_iter().map(|i| (t, i)));
        }
    }
    stream.shuffle(rng);
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    #[test]
    fn capped_task_contributes_cap_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stream = sample_mixture(&[5, 50], 10, &mut rng).unwrap();
        assert_eq!(stream.len(), 15);
        assert_eq!(stream.iter().filter(|(t, _)| *t == 0).count(), 5);
        let second: BTreeSet<usize> = stream.iter().filter(|(t, _)| *t == 1).map(|(_, i)| *i).collect();
        assert_eq!(second.len(), 10);
    }

    #[test]
    fn large_cap_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut stream = sample_mixture(&[3, 4], 100, &mut rng).unwrap();
        stream.sort_unstable();
        let all: Vec<(usize, usize)> = (0..3).map(|i| (0, i)).chain((0..4).map(|i| (1, i))).collect();
        assert_eq!(stream, all);
    }

    #[test]
    fn stream_is_seeded() {
        let a = sample_mixture(&[30, 40], 25, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_mixture(&[30, 40], 25, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_mixture(&[0, 0], 3, &mut rng), Err(Error::EmptyCorpus)));
    }
}
