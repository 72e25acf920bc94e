//! Tokenization, part-of-speech tagging, and TF-IDF keyword selection.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::corpus::Conversation;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_LEN: usize = 30;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedUtterance {
    pub tokens: Vec<String>,
    pub pos_tags: Vec<String>,
    /// Token count before truncation.
    pub raw_length: usize,
}

/// Splits on whitespace, strips punctuation and symbols from each piece, and
/// lowercases. Pieces that are pure punctuation disappear.
pub fn split_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|piece| {
            let cleaned: String = piece
                .chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect();
            (!cleaned.is_empty()).then_some(cleaned)
        })
        .collect()
}

/// Tokenizes and truncates to `max_len`. Tags are left empty; see
/// [`tag_utterance`].
pub fn tokenize(text: &str, max_len: usize) -> Result<TokenizedUtterance> {
    if text.trim().is_empty() {
        return Err(Error::Empty("utterance text"));
    }
    let mut tokens = split_tokens(text);
    let raw_length = tokens.len();
    tokens.truncate(max_len);
    Ok(TokenizedUtterance {
        tokens,
        pos_tags: Vec::new(),
        raw_length,
    })
}

/// Assigns one tag per token. Implementations must be deterministic.
pub trait PosTagger: Send + Sync {
    /// `key` is the utterance key (`conversation#index`); `tokens` is the
    /// full, untruncated token list.
    fn tag(&self, key: &str, tokens: &[String]) -> Result<Vec<String>>;
}

const FUNCTION_WORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "if", "of", "to", "in", "on", "at", "by", "for", "with",
    "from", "i", "you", "he", "she", "it", "we", "they", "me", "him", "her", "us", "them", "my",
    "your", "his", "its", "our", "their", "this", "that", "these", "those", "is", "am", "are",
    "was", "were", "be", "been", "do", "does", "did", "not", "no", "so", "then", "there", "here",
];

/// Rule-based stand-in tagger: closed-class words, digits, and a handful of
/// English suffixes. Anything else is `X`.
#[derive(Debug, Default, Clone, Copy)]
pub struct StubTagger;

impl StubTagger {
    pub fn tag_token(token: &str) -> &'static str {
        if token.chars().all(|c| c.is_ascii_digit()) {
            return "NUM";
        }
        if FUNCTION_WORDS.contains(&token) {
            return "FUNC";
        }
        if !token.is_ascii() {
            return "X";
        }
        const SUFFIXES: &[(&str, &str)] = &[
            ("ly", "ADV"),
            ("ing", "VERB"),
            ("ed", "VERB"),
            ("tion", "NOUN"),
            ("ness", "NOUN"),
            ("ment", "NOUN"),
            ("ful", "ADJ"),
            ("ous", "ADJ"),
            ("ive", "ADJ"),
            ("able", "ADJ"),
        ];
        for (suffix, tag) in SUFFIXES {
            if token.len() > suffix.len() + 1 && token.ends_with(suffix) {
                return tag;
            }
        }
        "X"
    }
}

impl PosTagger for StubTagger {
    fn tag(&self, _key: &str, tokens: &[String]) -> Result<Vec<String>> {
        Ok(tokens.iter().map(|t| Self::tag_token(t).to_string()).collect())
    }
}

/// Tags read from a tagged-corpus sidecar, one line per utterance:
/// `conversation_id#utterance_index<TAB>tag1 tag2 ...`. Utterances absent from
/// the sidecar fall back to [`StubTagger`].
#[derive(Debug, Default, Clone)]
pub struct SidecarTagger {
    tags: HashMap<String, Vec<String>>,
}

impl SidecarTagger {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, context: &str) -> Result<Self> {
        let mut tags = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (key, rest) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(context, lineno + 1, "expected key<TAB>tags"))?;
            if !key.contains('#') {
                return Err(Error::parse(context, lineno + 1, format!("bad utterance key {key:?}")));
            }
            let list: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
            if tags.insert(key.to_string(), list).is_some() {
                return Err(Error::parse(context, lineno + 1, format!("duplicate key {key:?}")));
            }
        }
        Ok(Self { tags })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

impl PosTagger for SidecarTagger {
    fn tag(&self, key: &str, tokens: &[String]) -> Result<Vec<String>> {
        match self.tags.get(key) {
            Some(tags) if tags.len() == tokens.len() => Ok(tags.clone()),
            Some(tags) => Err(Error::Shape(format!(
                "sidecar has {} tags for {key} but the tokenizer produced {} tokens",
                tags.len(),
                tokens.len()
            ))),
            None => StubTagger.tag(key, tokens),
        }
    }
}

/// Tokenizes, tags the full token list, then truncates tokens and tags
/// together.
pub fn tag_utterance(
    text: &str,
    key: &str,
    max_len: usize,
    tagger: &dyn PosTagger,
) -> Result<TokenizedUtterance> {
    let mut tu = tokenize(text, usize::MAX)?;
    let mut tags = tagger.tag(key, &tu.tokens)?;
    if tags.len() != tu.tokens.len() {
        return Err(Error::Shape(format!(
            "tagger returned {} tags for {} tokens at {key}",
            tags.len(),
            tu.tokens.len()
        )));
    }
    tu.tokens.truncate(max_len);
    tags.truncate(max_len);
    tu.pos_tags = tags;
    Ok(tu)
}

pub fn pos_diversity(tu: &TokenizedUtterance) -> usize {
    tu.pos_tags.iter().collect::<BTreeSet<_>>().len()
}

/// Document statistics for TF-IDF: one document per utterance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TfIdfIndex {
    doc_count: usize,
    doc_freq: BTreeMap<String, usize>,
    per_doc_tf: HashMap<String, BTreeMap<String, usize>>,
}

impl TfIdfIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one document. Re-adding an existing key counts as a new
    /// document for the statistics and replaces the stored term counts.
    pub fn add_document(&mut self, key: impl Into<String>, tokens: &[String]) {
        let mut tf: BTreeMap<String, usize> = BTreeMap::new();
        for t in tokens {
            *tf.entry(t.clone()).or_default() += 1;
        }
        for term in tf.keys() {
            *self.doc_freq.entry(term.clone()).or_default() += 1;
        }
        self.doc_count += 1;
        self.per_doc_tf.insert(key.into(), tf);
    }

    /// Rebuilds an index that carries only document frequencies, as stored in
    /// checkpoints. It can score token lists but holds no documents.
    pub fn from_doc_freq(doc_count: usize, doc_freq: BTreeMap<String, usize>) -> Result<Self> {
        if let Some((t, &df)) = doc_freq.iter().find(|(_, &df)| df == 0 || df > doc_count) {
            return Err(Error::Config(format!(
                "document frequency {df} for {t:?} outside [1, {doc_count}]"
            )));
        }
        Ok(Self {
            doc_count,
            doc_freq,
            per_doc_tf: HashMap::new(),
        })
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn doc_freq(&self) -> &BTreeMap<String, usize> {
        &self.doc_freq
    }

    pub fn term_freq(&self, doc_key: &str, term: &str) -> Option<usize> {
        self.per_doc_tf.get(doc_key)?.get(term).copied()
    }

    fn idf(&self, term: &str) -> f64 {
        // Terms unseen in the index score as if they occurred in one document.
        let df = self.doc_freq.get(term).copied().unwrap_or(1).max(1);
        let n = self.doc_count.max(df);
        (n as f64 / df as f64).ln()
    }

    fn rank(&self, tf: &BTreeMap<String, usize>, k: usize) -> Vec<(String, f64)> {
        let mut scored: Vec<(String, f64)> = tf
            .iter()
            .map(|(term, &count)| (term.clone(), count as f64 * self.idf(term)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }

    /// Top `k` terms of an indexed document by `tf · ln(N / df)`, ties broken
    /// lexicographically.
    pub fn top_k_terms(&self, doc_key: &str, k: usize) -> Result<Vec<(String, f64)>> {
        let tf = self
            .per_doc_tf
            .get(doc_key)
            .ok_or_else(|| Error::UnknownDocument(doc_key.to_string()))?;
        Ok(self.rank(tf, k))
    }

    /// Scores a token list against this index's document frequencies.
    pub fn top_k_for_tokens(&self, tokens: &[String], k: usize) -> Vec<(String, f64)> {
        let mut tf: BTreeMap<String, usize> = BTreeMap::new();
        for t in tokens {
            *tf.entry(t.clone()).or_default() += 1;
        }
        self.rank(&tf, k)
    }
}

/// One document per utterance across all conversations, keyed
/// `conversation#index`. Documents use the full untruncated token list.
pub fn build_tfidf_index(convs: &[Conversation]) -> Result<TfIdfIndex> {
    if convs.is_empty() {
        return Err(Error::Empty("dataset for tf-idf index"));
    }
    let mut index = TfIdfIndex::new();
    for conv in convs {
        for u in &conv.utterances {
            index.add_document(conv.utterance_key(u.index), &split_tokens(&u.text));
        }
    }
    Ok(index)
}
