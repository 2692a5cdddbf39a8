use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::axpy;
use super::{Grads, ParamStore, Params};

pub const OOV_TOKEN: &str = "<unk>";

/// Word-to-row mapping. Row 0 is the shared out-of-vocabulary bucket.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let words: Vec<String> = words.into_iter().filter(|w| w != OOV_TOKEN).collect();
        let mut all = vec![OOV_TOKEN.to_string()];
        all.extend(words);
        let index = all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words: all, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words.into_iter().skip(1).collect()
    }
}

impl Vocab {
    /// Sorted, deduplicated vocabulary over `words`.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list: Vec<String> = words.into_iter().map(Into::into).collect();
        list.sort();
        list.dedup();
        Vocab::from(list)
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Number of rows including the OOV bucket.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 1
    }

    pub fn words(&self) -> &[String] {
        &self.words[1..]
    }
}

/// Lowercased word tokens; punctuation is dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// A learned embedding table stored under one parameter name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub name: String,
    pub dim: usize,
}

impl Embedding {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Embedding { name: name.into(), dim }
    }

    pub fn init(&self, store: &mut ParamStore, rows: usize, rng: &mut ChaCha8Rng) {
        store.add_uniform(&self.name, &[rows, self.dim], 1, rng);
    }

    /// `ids.len() x dim`, row-major.
    pub fn lookup(&self, params: &Params, ids: &[usize]) -> Vec<f64> {
        let table = params.get(&self.name);
        let mut out = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            out.extend_from_slice(&table[id * self.dim..(id + 1) * self.dim]);
        }
        out
    }

    pub fn backward(&self, grads: &mut Grads, ids: &[usize], d_rows: &[f64]) {
        let table = grads.get_mut(&self.name);
        for (k, &id) in ids.iter().enumerate() {
            axpy(1.0, &d_rows[k * self.dim..(k + 1) * self.dim], &mut table[id * self.dim..(id + 1) * self.dim]);
        }
    }

    /// Mean of the rows for `ids`; zeros for an empty list.
    pub fn mean(&self, params: &Params, ids: &[usize]) -> Vec<f64> {
        let table = params.get(&self.name);
        let mut out = vec![0.0; self.dim];
        if ids.is_empty() {
            return out;
        }
        let scale = 1.0 / ids.len() as f64;
        for &id in ids {
            axpy(scale, &table[id * self.dim..(id + 1) * self.dim], &mut out);
        }
        out
    }

    pub fn mean_backward(&self, grads: &mut Grads, ids: &[usize], d_mean: &[f64]) {
        if ids.is_empty() {
            return;
        }
        let scale = 1.0 / ids.len() as f64;
        let table = grads.get_mut(&self.name);
        for &id in ids {
            axpy(scale, d_mean, &mut table[id * self.dim..(id + 1) * self.dim]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup() -> (Vocab, Embedding, ParamStore) {
        let vocab = Vocab::from_words(["take", "apple", "put", "in", "red", "box"]);
        let emb = Embedding::new("emb", 64);
        let mut store = ParamStore::new();
        emb.init(&mut store, vocab.len(), &mut ChaCha8Rng::seed_from_u64(1));
        (vocab, emb, store)
    }

    #[test]
    fn lookup_shape() {
        let (vocab, emb, store) = setup();
        let tokens = tokenize("take apple put apple in red box take box apple");
        assert_eq!(tokens.len(), 10);
        assert_eq!(emb.lookup(&store.params, &vocab.ids(&tokens)).len(), 10 * 64);
        assert!(emb.lookup(&store.params, &[]).is_empty());
    }

    #[test]
    fn unseen_words_share_the_oov_row() {
        let (vocab, emb, store) = setup();
        let ids = vocab.ids(&tokenize("plum quince"));
        assert_eq!(ids, [0, 0]);
        let rows = emb.lookup(&store.params, &ids);
        assert_eq!(rows[..64], rows[64..]);
    }

    #[test]
    fn vocab_serializes_without_oov() {
        let vocab = Vocab::from_words(["b", "a", "a"]);
        let json = serde_json::to_string(&vocab).unwrap();
        assert_eq!(json, r#"["a","b"]"#);
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vocab);
        assert_eq!(back.id("a"), 1);
    }

    #[test]
    fn tokenizer_keeps_apostrophes() {
        assert_eq!(tokenize("You can't do that here."), ["you", "can't", "do", "that", "here"]);
    }
}
