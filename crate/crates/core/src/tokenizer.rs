//! Word-level tokenizer with special tokens and atomic task-prefix tokens.
//!
//! Text is lowercased and split on whitespace, then each piece is split into
//! runs of alphanumeric characters and single punctuation characters. Pieces
//! that exactly match a special token or a registered task prefix are kept
//! whole, so `[hellaswag]` is always one id.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

const FORMAT_TAG: &str = "prefixmtl.vocab.v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Specials {
    pub pad: usize,
    pub unk: usize,
    pub cls: usize,
    pub sep: usize,
    pub mask: usize,
}

impl Specials {
    const ORDER: [&'static str; 5] = [PAD, UNK, CLS, SEP, MASK];

    pub fn contains(&self, id: usize) -> bool {
        id < Self::ORDER.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    specials: Specials,
    /// task name -> prefix token id
    prefix_ids: BTreeMap<String, usize>,
}

/// Token ids padded to a fixed length, with 1 marking real tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
}

impl Encoded {
    /// Number of non-pad positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }
}

fn split_piece(piece: &str, out: &mut Vec<String>) {
    let mut word = String::new();
    for ch in piece.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
}

/// Splits text into tokens, keeping any whitespace piece accepted by `is_atomic` intact.
pub fn split_words(text: &str, is_atomic: impl Fn(&str) -> bool) -> Vec<String> {
    let mut out = Vec::new();
    for piece in text.split_whitespace() {
        if is_atomic(piece) {
            out.push(piece.to_string());
        } else {
            split_piece(piece, &mut out);
        }
    }
    out
}

impl Vocabulary {
    /// Builds a vocabulary from every context, question and option in the corpus.
    ///
    /// Ids are assigned as specials, then task prefixes in corpus order, then
    /// ordinary tokens by descending count with ties broken lexicographically.
    pub fn build(corpus: &Corpus, min_count: usize) -> Result<Self> {
        if corpus.tasks.is_empty() || corpus.tasks.iter().all(|t| t.examples.is_empty()) {
            return Err(Error::EmptyCorpus);
        }
        let prefixes: Vec<(String, String)> = corpus
            .tasks
            .iter()
            .map(|t| (t.name.clone(), t.prefix.clone()))
            .collect();
        let texts = corpus.tasks.iter().flat_map(|t| {
            t.examples.iter().chain(&t.dev).flat_map(|ex| {
                std::iter::once(ex.context.as_str())
                    .chain(std::iter::once(ex.question.as_str()))
                    .chain(ex.options.iter().map(String::as_str))
            })
        });
        Self::from_texts(texts, &prefixes, min_count)
    }

    /// Builds a vocabulary from raw texts and `(task name, prefix token)` pairs.
    pub fn from_texts<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        prefixes: &[(String, String)],
        min_count: usize,
    ) -> Result<Self> {
        let mut vocab = Self {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
            specials: Specials {
                pad: 0,
                unk: 1,
                cls: 2,
                sep: 3,
                mask: 4,
            },
            prefix_ids: BTreeMap::new(),
        };
        for tok in Specials::ORDER {
            vocab.push(tok.to_string());
        }
        for (task, prefix) in prefixes {
            if vocab.token_to_id.contains_key(prefix) {
                return Err(Error::DuplicatePrefix(prefix.clone()));
            }
            let id = vocab.push(prefix.clone());
            vocab.prefix_ids.insert(task.clone(), id);
        }

        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen_any = false;
        for text in texts {
            seen_any = true;
            for tok in split_words(text, |p| vocab.token_to_id.contains_key(p)) {
                if !vocab.token_to_id.contains_key(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        if !seen_any {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (tok, _) in ranked {
            vocab.push(tok);
        }
        Ok(vocab)
    }

    fn push(&mut self, token: String) -> usize {
        let id = self.id_to_token.len();
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
        id
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn prefix_id(&self, task: &str) -> Option<usize> {
        self.prefix_ids.get(task).copied()
    }

    pub fn prefix_ids(&self) -> &BTreeMap<String, usize> {
        &self.prefix_ids
    }

    pub fn is_prefix_id(&self, id: usize) -> bool {
        self.prefix_ids.values().any(|&p| p == id)
    }

    /// Id range of ordinary tokens (neither special nor prefix).
    pub fn content_ids(&self) -> std::ops::Range<usize> {
        Specials::ORDER.len() + self.prefix_ids.len()..self.len()
    }

    /// Splits `text` into token strings, keeping specials and prefixes atomic.
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        split_words(text, |p| {
            p.starts_with('[') && self.id(p).is_some_and(|id| id < self.content_ids().start)
        })
    }

    pub fn ids(&self, text: &str) -> Vec<usize> {
        self.tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(self.specials.unk))
            .collect()
    }

    /// Encodes an assembled sequence to exactly `max_len` ids.
    ///
    /// Sequences of the form `[CLS] prefix context [SEP] tail [SEP]` are
    /// truncated from the end of the context first, then from the end of the
    /// tail; `[CLS]`, the prefix and the closing `[SEP]` are kept. Text without
    /// a closing `[SEP]` is cut from the end.
    pub fn encode(&self, text: &str, max_len: usize) -> Encoded {
        let ids = truncate(self.ids(text), max_len, self.specials, |id| self.is_prefix_id(id));
        let real = ids.len();
        let mut ids = ids;
        ids.resize(max_len, self.specials.pad);
        let mut attention_mask = vec![1u8; real];
        attention_mask.resize(max_len, 0);
        Encoded { ids, attention_mask }
    }

    /// Space-joined tokens with padding dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != self.specials.pad)
            .map(|&id| self.token(id).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Stable digest of the serialized vocabulary.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Serializes as a header block (format tag, specials, prefixes), a blank
    /// line, then one `token<TAB>id` line per entry.
    pub fn to_text(&self) -> String {
        let mut out = format!("# format\t{FORMAT_TAG}\n");
        for tok in Specials::ORDER {
            let _ = writeln!(out, "# special\t{tok}\t{}", self.token_to_id[tok]);
        }
        for (task, id) in &self.prefix_ids {
            let _ = writeln!(out, "# prefix\t{task}\t{}\t{id}", self.id_to_token[*id]);
        }
        out.push('\n');
        for (id, tok) in self.id_to_token.iter().enumerate() {
            let _ = writeln!(out, "{tok}\t{id}");
        }
        out
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            file: origin.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let mut format = None;
        let mut prefix_ids = BTreeMap::new();
        for (n, line) in lines.by_ref() {
            if line.is_empty() {
                break;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["# format", tag] => format = Some(tag.to_string()),
                ["# special", ..] => {}
                ["# prefix", task, _, id] => {
                    let id = id.parse().map_err(|e| parse_err(n + 1, format!("{e}")))?;
                    prefix_ids.insert(task.to_string(), id);
                }
                _ => return Err(parse_err(n + 1, format!("bad header line {line:?}"))),
            }
        }
        match format.as_deref() {
            Some(FORMAT_TAG) => {}
            other => {
                return Err(Error::Format {
                    expected: FORMAT_TAG.into(),
                    found: other.unwrap_or("").into(),
                })
            }
        }
        let mut id_to_token = Vec::new();
        for (n, line) in lines {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| parse_err(n + 1, "expected token<TAB>id".into()))?;
            let id: usize = id.parse().map_err(|e| parse_err(n + 1, format!("{e}")))?;
            if id != id_to_token.len() {
                return Err(parse_err(n + 1, format!("id {id} out of order")));
            }
            id_to_token.push(tok.to_string());
        }
        if id_to_token.len() < Specials::ORDER.len()
            || Specials::ORDER.iter().zip(&id_to_token).any(|(a, b)| a != b)
        {
            return Err(parse_err(0, "special tokens missing".into()));
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self {
            token_to_id,
            id_to_token,
            specials: Specials {
                pad: 0,
                unk: 1,
                cls: 2,
                sep: 3,
                mask: 4,
            },
            prefix_ids,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

fn truncate(
    ids: Vec<usize>,
    max_len: usize,
    specials: Specials,
    is_prefix: impl Fn(usize) -> bool,
) -> Vec<usize> {
    if ids.len() <= max_len {
        return ids;
    }
    let structured = ids.first() == Some(&specials.cls) && ids.last() == Some(&specials.sep);
    if !structured {
        return ids[..max_len].to_vec();
    }
    let head_len = if ids.get(1).is_some_and(|&id| is_prefix(id)) { 2 } else { 1 };
    let body = &ids[head_len..ids.len() - 1];
    let (mut context, mut tail, mut has_sep) = match body.iter().position(|&id| id == specials.sep) {
        Some(p) => (body[..p].to_vec(), body[p + 1..].to_vec(), true),
        None => (body.to_vec(), Vec::new(), false),
    };
    let mut excess = ids.len() - max_len;
    let cut = excess.min(context.len());
    context.truncate(context.len() - cut);
    excess -= cut;
    let cut = excess.min(tail.len());
    tail.truncate(tail.len() - cut);
    excess -= cut;
    if excess > 0 && has_sep {
        has_sep = false;
        excess -= 1;
    }
    let mut head = ids[..head_len].to_vec();
    head.truncate(head.len() - excess.min(head.len() - 1));

    let mut out = head;
    out.extend(context);
    if has_sep {
        out.push(specials.sep);
    }
    out.extend(tail);
    out.push(specials.sep);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(texts: &[&str], min_count: usize) -> Vocabulary {
        Vocabulary::from_texts(
            texts.iter().copied(),
            &[("taska".into(), "[taskA]".into())],
            min_count,
        )
        .unwrap()
    }

    #[test]
    fn prefix_is_a_single_token() {
        let v = vocab(&["a b"], 1);
        let ids = v.ids("[CLS] [taskA] a [SEP]");
        assert_eq!(ids, vec![2, v.prefix_id("taska").unwrap(), v.id("a").unwrap(), 3]);
    }

    #[test]
    fn min_count_one_keeps_every_token() {
        let v = vocab(&["a b", "a"], 1);
        assert_eq!(v.len(), 5 + 1 + 2);
        assert_eq!(v.token(6), Some("a"));
        assert_eq!(v.token(7), Some("b"));
    }

    #[test]
    fn rare_tokens_map_to_unk() {
        let v = vocab(&["a b", "a"], 2);
        assert_eq!(v.id("b"), None);
        assert_eq!(v.ids("b"), vec![v.specials().unk]);
    }

    #[test]
    fn punctuation_is_split_and_lowercased() {
        assert_eq!(split_words("Hello, World!", |_| false), ["hello", ",", "world", "!"]);
    }

    #[test]
    fn prefix_ids_are_distinct_from_specials_and_content() {
        let v = Vocabulary::from_texts(
            ["x y"],
            &[("a".into(), "[a]".into()), ("b".into(), "[b]".into())],
            1,
        )
        .unwrap();
        let prefixes: Vec<usize> = v.prefix_ids().values().copied().collect();
        for p in &prefixes {
            assert!(!v.specials().contains(*p));
            assert!(!v.content_ids().contains(p));
        }
        assert_ne!(prefixes[0], prefixes[1]);
    }

    #[test]
    fn duplicate_prefix_is_rejected() {
        let err = Vocabulary::from_texts(
            ["x"],
            &[("a".into(), "[a]".into()), ("b".into(), "[a]".into())],
            1,
        );
        assert!(matches!(err, Err(Error::DuplicatePrefix(_))));
    }

    #[test]
    fn empty_body_encodes_to_four_tokens_plus_padding() {
        let v = vocab(&["a"], 1);
        let enc = v.encode("[CLS] [taskA]  [SEP]  [SEP]", 8);
        let p = v.prefix_id("taska").unwrap();
        assert_eq!(enc.ids, vec![2, p, 3, 3, 0, 0, 0, 0]);
        assert_eq!(enc.attention_mask, vec![1, 1, 1, 1, 0, 0, 0, 0]);
    }

    #[test]
    fn long_context_is_cut_before_question_and_option() {
        let v = vocab(&["a b c d e q r"], 1);
        let enc = v.encode("[CLS] [taskA] a b c d e [SEP] q r [SEP]", 7);
        assert_eq!(v.decode(&enc.ids), "[CLS] [taskA] a [SEP] q r [SEP]");
        assert_eq!(enc.ids.len(), 7);
        let last_real = enc.real_len() - 1;
        assert_eq!(enc.ids[last_real], v.specials().sep);
    }

    #[test]
    fn tail_is_cut_once_context_is_gone() {
        let v = vocab(&["a q r s"], 1);
        let enc = v.encode("[CLS] [taskA] a [SEP] q r s [SEP]", 5);
        assert_eq!(v.decode(&enc.ids), "[CLS] [taskA] [SEP] q [SEP]");
    }

    #[test]
    fn minimum_length_keeps_cls_prefix_and_sep() {
        let v = vocab(&["a q"], 1);
        let enc = v.encode("[CLS] [taskA] a [SEP] q [SEP]", 3);
        assert_eq!(v.decode(&enc.ids), "[CLS] [taskA] [SEP]");
    }

    #[test]
    fn text_round_trip() {
        let v = vocab(&["the cat sat", "on # mat"], 1);
        let back = Vocabulary::from_text(&v.to_text(), Path::new("mem")).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
    }

    #[test]
    fn unknown_vocab_version_is_rejected() {
        let v = vocab(&["a"], 1);
        let text = v.to_text().replace(FORMAT_TAG, "prefixmtl.vocab.v9");
        assert!(matches!(
            Vocabulary::from_text(&text, Path::new("mem")),
            Err(Error::Format { .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn encode_never_exceeds_max_len(words in proptest::collection::vec("[a-e]{1,3}", 0..40), max_len in 3usize..20) {
            let v = vocab(&["a b c d e aa bb"], 1);
            let text = format!("[CLS] [taskA] {} [SEP] q [SEP]", words.join(" "));
            let enc = v.encode(&text, max_len);
            proptest::prop_assert_eq!(enc.ids.len(), max_len);
            proptest::prop_assert_eq!(enc.ids[0], v.specials().cls);
            proptest::prop_assert_eq!(enc.ids[1], v.prefix_id("taska").unwrap());
            proptest::prop_assert_eq!(enc.ids[enc.real_len() - 1], v.specials().sep);
        }

        #[test]
        fn decode_inverts_encode(words in proptest::collection::vec("[a-e]{1,2}", 1..10)) {
            let v = vocab(&["a b c d e aa ab ac ad ae ba bb bc bd be ca cb cc cd ce da db dc dd de ea eb ec ed ee"], 1);
            let text = format!("[CLS] [taskA] {} [SEP] [SEP]", words.join(" "));
            let enc = v.encode(&text, 64);
            proptest::prop_assert_eq!(v.decode(&enc.ids), text);
        }
    }
}
