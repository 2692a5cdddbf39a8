//! Lexicon-driven chunking of observation text into object and relation
//! phrases, and their normalization into image queries.
//!
//! Tokens are tagged from a [`Lexicon`] and chunked with
//!
//! ```text
//! NP  := DET? ADJ* NOUN+
//! REL := NP STOP{0,3} PREP NP
//! ```
//!
//! scanning left to right inside each sentence. A relation consumes both noun
//! phrases; remaining noun phrases become object phrases. Up to three
//! stop-word tokens (copulas and verbs such as "is sitting") may separate the
//! head phrase from the preposition.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EntityPool, TEMPLATE_STOPWORDS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhraseKind {
    Object,
    Relation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phrase {
    pub surface: String,
    pub kind: PhraseKind,
    pub head: String,
    pub relation: Option<String>,
    pub tail: Option<String>,
    pub query: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnknownPolicy {
    Noun,
    Skip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag {
    Determiner,
    Adjective,
    Noun,
    Preposition,
    Stop,
    /// Punctuation inside a sentence; never part of a chunk.
    Break,
}

/// Anything that can assign a part-of-speech tag to a lowercase token.
pub trait Tagger {
    fn tag(&self, token: &str) -> Tag;
    fn is_determiner(&self, token: &str) -> bool {
        self.tag(token) == Tag::Determiner
    }
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("lexicon is missing required preposition `{0}`")]
    MissingPreposition(String),
    #[error("word `{0}` appears in more than one lexicon list")]
    Overlap(String),
    #[error("lexicon file: {0}")]
    File(String),
}

pub const REQUIRED_PREPOSITIONS: [&str; 5] = ["on", "in", "at", "of", "under"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub nouns: BTreeSet<String>,
    pub adjectives: BTreeSet<String>,
    pub determiners: BTreeSet<String>,
    pub prepositions: BTreeSet<String>,
    /// Verbs, pronouns and function words that break noun phrases.
    #[serde(default)]
    pub stopwords: BTreeSet<String>,
    pub unknown_policy: UnknownPolicy,
}

const DETERMINERS: &[&str] = &["a", "an", "the", "your", "my", "some", "this", "that", "these", "those"];
const ADJECTIVES: &[&str] = &[
    "red", "green", "blue", "white", "black", "brown", "yellow", "wet", "dirty", "clean", "small",
    "large", "old", "ordinary", "empty", "wooden", "precious",
];
const NOUNS: &[&str] = &["floor", "inventory", "house", "table", "bottle", "chair", "room"];
const STOPWORDS: &[&str] = &[
    "i", "you", "he", "she", "it", "we", "they", "is", "are", "was", "were", "be", "been", "am",
    "there", "here", "and", "or", "but", "not", "sitting", "sits", "lying", "lies", "standing",
    "stands", "resting", "rests", "hanging", "hangs", "see", "sees", "can", "can't", "cannot",
    "do", "does", "has", "have", "had", "holds", "contains", "lead", "leads", "exits", "north",
    "south", "east", "west", "up", "down", "by", "one", "point", "score", "gone", "to", "from",
    "with", "also", "what", "which",
];

impl Lexicon {
    /// General-purpose lexicon with no entity nouns; unknown words are nouns.
    pub fn base() -> Self {
        let set = |words: &[&str]| words.iter().map(|w| w.to_string()).collect::<BTreeSet<_>>();
        let mut stopwords = set(STOPWORDS);
        stopwords.extend(TEMPLATE_STOPWORDS.iter().map(|w| w.to_string()));
        let mut lexicon = Lexicon {
            nouns: set(NOUNS),
            adjectives: set(ADJECTIVES),
            determiners: set(DETERMINERS),
            prepositions: set(&REQUIRED_PREPOSITIONS),
            stopwords,
            unknown_policy: UnknownPolicy::Noun,
        };
        lexicon.dedupe();
        lexicon
    }

    /// Base lexicon extended with every entity and room token of `pool`.
    pub fn for_pool(pool: &EntityPool) -> Self {
        let mut lexicon = Lexicon::base();
        let names = pool
            .objects
            .iter()
            .map(|o| o.name.as_str())
            .chain(pool.containers.iter().map(|c| c.name.as_str()))
            .chain(pool.rooms.iter().map(String::as_str));
        for name in names {
            for word in name.split_whitespace() {
                if !lexicon.adjectives.contains(word) {
                    lexicon.nouns.insert(word.to_string());
                }
            }
        }
        lexicon.dedupe();
        lexicon
    }

    /// Removes cross-list duplicates; adjectives, determiners, prepositions
    /// and stop words win over nouns.
    fn dedupe(&mut self) {
        for word in self
            .adjectives
            .iter()
            .chain(&self.determiners)
            .chain(&self.prepositions)
            .chain(&self.stopwords)
        {
            self.nouns.remove(word);
        }
        for word in self.determiners.iter().chain(&self.prepositions) {
            self.stopwords.remove(word);
        }
    }

    pub fn validate(&self) -> Result<(), LexiconError> {
        for p in REQUIRED_PREPOSITIONS {
            if !self.prepositions.contains(p) {
                return Err(LexiconError::MissingPreposition(p.to_string()));
            }
        }
        let lists =
            [&self.nouns, &self.adjectives, &self.determiners, &self.prepositions, &self.stopwords];
        let mut seen = BTreeSet::new();
        for list in lists {
            for word in list {
                if !seen.insert(word) {
                    return Err(LexiconError::Overlap(word.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let text = std::fs::read_to_string(path).map_err(|e| LexiconError::File(e.to_string()))?;
        let lexicon: Lexicon =
            serde_json::from_str(&text).map_err(|e| LexiconError::File(e.to_string()))?;
        lexicon.validate()?;
        Ok(lexicon)
    }

    pub fn save(&self, path: &Path) -> Result<(), LexiconError> {
        let text = serde_json::to_string_pretty(self).expect("lexicon serializes");
        std::fs::write(path, text).map_err(|e| LexiconError::File(e.to_string()))
    }
}

impl Tagger for Lexicon {
    fn tag(&self, token: &str) -> Tag {
        if self.determiners.contains(token) {
            Tag::Determiner
        } else if self.prepositions.contains(token) {
            Tag::Preposition
        } else if self.adjectives.contains(token) {
            Tag::Adjective
        } else if self.nouns.contains(token) {
            Tag::Noun
        } else if self.stopwords.contains(token) {
            Tag::Stop
        } else {
            match self.unknown_policy {
                UnknownPolicy::Noun => Tag::Noun,
                UnknownPolicy::Skip => Tag::Stop,
            }
        }
    }
}

/// A word or a punctuation break, with the original spelling kept for
/// surfaces.
struct Token {
    original: String,
    lower: String,
    tag: Tag,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\'' || c == '-'
}

/// Splits text into sentences of tagged tokens.
fn tokenize(text: &str, tagger: &dyn Tagger) -> Vec<Vec<Token>> {
    let mut sentences = vec![Vec::new()];
    let mut word = String::new();
    let flush = |word: &mut String, sentence: &mut Vec<Token>| {
        if !word.is_empty() {
            let trimmed = word.trim_matches(|c| c == '\'' || c == '-');
            if !trimmed.is_empty() {
                let lower = trimmed.to_lowercase();
                let tag = tagger.tag(&lower);
                sentence.push(Token { original: trimmed.to_string(), lower, tag });
            }
            word.clear();
        }
    };
    for c in text.chars() {
        if is_word_char(c) {
            word.push(c);
            continue;
        }
        flush(&mut word, sentences.last_mut().expect("nonempty"));
        match c {
            '.' | '!' | '?' | ';' | '\n' => sentences.push(Vec::new()),
            c if c.is_whitespace() => {}
            _ => sentences.last_mut().expect("nonempty").push(Token {
                original: c.to_string(),
                lower: c.to_string(),
                tag: Tag::Break,
            }),
        }
    }
    flush(&mut word, sentences.last_mut().expect("nonempty"));
    sentences.retain(|s| !s.is_empty());
    sentences
}

/// Longest noun phrase starting at `start`, as an exclusive end index.
fn noun_phrase_at(tokens: &[Token], start: usize) -> Option<usize> {
    let mut i = start;
    if tokens.get(i).is_some_and(|t| t.tag == Tag::Determiner) {
        i += 1;
    }
    while tokens.get(i).is_some_and(|t| t.tag == Tag::Adjective) {
        i += 1;
    }
    let nouns_start = i;
    while tokens.get(i).is_some_and(|t| t.tag == Tag::Noun) {
        i += 1;
    }
    (i > nouns_start).then_some(i)
}

const MAX_GAP: usize = 3;

pub fn extract_phrases(text: &str, lexicon: &Lexicon) -> Vec<Phrase> {
    extract_phrases_with(text, lexicon)
}

pub fn extract_phrases_with(text: &str, tagger: &dyn Tagger) -> Vec<Phrase> {
    let mut phrases: Vec<Phrase> = Vec::new();
    for tokens in tokenize(text, tagger) {
        // Noun phrases as (start, end) spans, in order.
        let mut spans = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            match noun_phrase_at(&tokens, i) {
                Some(end) => {
                    spans.push((i, end));
                    i = end;
                }
                None => i += 1,
            }
        }

        let mut k = 0;
        while k < spans.len() {
            let (start, end) = spans[k];
            let relation = spans.get(k + 1).and_then(|&(next_start, next_end)| {
                let mut p = end;
                while p < next_start && tokens[p].tag == Tag::Stop && p - end < MAX_GAP {
                    p += 1;
                }
                (p + 1 == next_start && tokens[p].tag == Tag::Preposition)
                    .then_some((p, next_start, next_end))
            });
            match relation {
                Some((prep, tail_start, tail_end)) => {
                    let head_start =
                        if tokens[start].tag == Tag::Determiner { start + 1 } else { start };
                    let words: Vec<&str> = tokens[head_start..end]
                        .iter()
                        .chain(std::iter::once(&tokens[prep]))
                        .chain(&tokens[tail_start..tail_end])
                        .map(|t| t.original.as_str())
                        .collect();
                    let surface = words.join(" ");
                    phrases.push(Phrase {
                        query: normalize_query_with(&surface, tagger),
                        surface,
                        kind: PhraseKind::Relation,
                        head: tokens[end - 1].lower.clone(),
                        relation: Some(tokens[prep].lower.clone()),
                        tail: Some(tokens[tail_end - 1].lower.clone()),
                    });
                    k += 2;
                }
                None => {
                    let surface = tokens[start..end]
                        .iter()
                        .map(|t| t.original.as_str())
                        .collect::<Vec<_>>()
                        .join(" ");
                    phrases.push(Phrase {
                        query: normalize_query_with(&surface, tagger),
                        surface,
                        kind: PhraseKind::Object,
                        head: tokens[end - 1].lower.clone(),
                        relation: None,
                        tail: None,
                    });
                    k += 1;
                }
            }
        }
    }
    let mut seen = BTreeSet::new();
    phrases.retain(|p| !p.query.is_empty() && seen.insert(p.query.clone()));
    phrases
}

/// Lowercases, drops determiners and punctuation, and collapses whitespace.
/// Idempotent.
pub fn normalize_query(surface: &str, lexicon: &Lexicon) -> String {
    normalize_query_with(surface, lexicon)
}

fn normalize_query_with(surface: &str, tagger: &dyn Tagger) -> String {
    let lowered = surface.to_lowercase();
    let cleaned: String =
        lowered.chars().map(|c| if is_word_char(c) { c } else { ' ' }).collect();
    cleaned
        .split_whitespace()
        .map(|w| w.trim_matches(|c| c == '\'' || c == '-'))
        .filter(|w| !w.is_empty() && !tagger.is_determiner(w))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Default number of images per step.
pub const DEFAULT_K: usize = 4;

/// At most `k` queries: relation phrases first, then object phrases, each in
/// text order.
pub fn select_queries(phrases: &[Phrase], k: usize) -> Vec<String> {
    phrases
        .iter()
        .filter(|p| p.kind == PhraseKind::Relation)
        .chain(phrases.iter().filter(|p| p.kind == PhraseKind::Object))
        .take(k)
        .map(|p| p.query.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relations(phrases: &[Phrase]) -> Vec<&str> {
        phrases
            .iter()
            .filter(|p| p.kind == PhraseKind::Relation)
            .map(|p| p.surface.as_str())
            .collect()
    }

    #[test]
    fn kitchen_of_the_white_house() {
        let phrases = extract_phrases("You are in the kitchen of the white house.", &Lexicon::base());
        assert_eq!(relations(&phrases), ["kitchen of the white house"]);
        let rel = &phrases[0];
        assert_eq!(rel.head, "kitchen");
        assert_eq!(rel.relation.as_deref(), Some("of"));
        assert_eq!(rel.tail.as_deref(), Some("house"));
        assert_eq!(rel.query, "kitchen of white house");
    }

    #[test]
    fn bottle_on_the_table() {
        let phrases = extract_phrases("A bottle is sitting on the table.", &Lexicon::base());
        assert_eq!(relations(&phrases), ["bottle on the table"]);
        assert_eq!(phrases[0].query, "bottle on table");
        assert_eq!(phrases.len(), 1);
    }

    #[test]
    fn empty_text_has_no_phrases() {
        assert!(extract_phrases("", &Lexicon::base()).is_empty());
        assert!(extract_phrases("  ...  ", &Lexicon::base()).is_empty());
    }

    #[test]
    fn unknown_words_follow_policy() {
        let mut lexicon = Lexicon::base();
        let phrases = extract_phrases("A precious jewel is under the altar.", &lexicon);
        assert_eq!(phrases[0].query, "precious jewel under altar");
        lexicon.unknown_policy = UnknownPolicy::Skip;
        assert!(extract_phrases("A precious jewel is under the altar.", &lexicon).is_empty());
    }

    #[test]
    fn relations_do_not_cross_sentences() {
        let phrases = extract_phrases("Look at the lamp. On the desk.", &Lexicon::base());
        assert!(phrases.iter().all(|p| p.kind == PhraseKind::Object));
    }

    #[test]
    fn unconsumed_noun_phrases_become_objects_and_duplicates_drop() {
        let text = "You see a red box, a green bin and a red box. A kiwi is in your inventory.";
        let phrases = extract_phrases(text, &Lexicon::base());
        let queries: Vec<_> = phrases.iter().map(|p| p.query.as_str()).collect();
        assert_eq!(queries, ["red box", "green bin", "kiwi in inventory"]);
    }

    #[test]
    fn normalization_examples() {
        let lexicon = Lexicon::base();
        assert_eq!(normalize_query("The Patio  Chair", &lexicon), "patio chair");
        assert_eq!(
            normalize_query("wet brown dress on patio chair", &lexicon),
            "wet brown dress on patio chair"
        );
        assert_eq!(normalize_query("  A lamp, (the) LAMP!", &lexicon), "lamp lamp");
    }

    #[test]
    fn select_prefers_relations() {
        let text = "A bowl is on the shelf. You see a cup, a plate and a fork. A mug is at the sink.";
        let phrases = extract_phrases(text, &Lexicon::base());
        assert_eq!(
            select_queries(&phrases, 4),
            ["bowl on shelf", "mug at sink", "cup", "plate"]
        );
        assert_eq!(select_queries(&phrases, 10).len(), 5);
        assert_eq!(select_queries(&phrases, 1), ["bowl on shelf"]);
    }

    #[test]
    fn base_and_pool_lexicons_validate() {
        Lexicon::base().validate().unwrap();
        Lexicon::for_pool(&EntityPool::default_pool()).validate().unwrap();
    }

    #[test]
    fn lexicon_file_round_trips() {
        let lexicon = Lexicon::for_pool(&EntityPool::default_pool());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lexicon.json");
        lexicon.save(&path).unwrap();
        assert_eq!(Lexicon::load(&path).unwrap(), lexicon);
    }

    #[test]
    fn missing_preposition_rejected() {
        let mut lexicon = Lexicon::base();
        lexicon.prepositions.remove("under");
        assert!(matches!(lexicon.validate(), Err(LexiconError::MissingPreposition(p)) if p == "under"));
    }
}
