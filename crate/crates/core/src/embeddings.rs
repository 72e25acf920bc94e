//! Embedding providers for sentence vectors and word vectors.
//!
//! Tables are exchanged as line-oriented text:
//!
//! ```text
//! ECRC-EMB v1 <sentence|word> <dim>
//! <key>\t<v1> <v2> ... <vdim>
//! ```
//!
//! Sentence tables are keyed `conversationId#utteranceIndex`, word tables by
//! token. Lines after the header that start with `#` are comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::bilm::{BiLm, ElmoMix};
use crate::corpus::utterance_key;
use crate::error::{Error, Result};
use crate::tensor::{axpy, norm};
use crate::textproc::TokenizedUtterance;

pub const EMBEDDING_MAGIC: &str = "ECRC-EMB v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    Sentence,
    Word,
}

impl EmbeddingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingKind::Sentence => "sentence",
            EmbeddingKind::Word => "word",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub kind: EmbeddingKind,
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(kind: EmbeddingKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(Self {
            kind,
            dim,
            vectors: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.vectors.get(key).map(Vec::as_slice)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(String::as_str)
    }

    pub fn insert(&mut self, key: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let key = key.into();
        if key.is_empty() || key.contains('\t') || key.contains('\n') {
            return Err(Error::Config(format!("invalid embedding key {key:?}")));
        }
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector for {key:?} has {} entries, table dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding for {key:?}")));
        }
        if self.vectors.contains_key(&key) {
            return Err(Error::Config(format!("duplicate embedding key {key:?}")));
        }
        self.vectors.insert(key, vector);
        Ok(())
    }

    pub fn parse(text: &str, context: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let header = lines
            .next()
            .map(|(_, l)| l)
            .ok_or_else(|| Error::parse(context, 1, "missing header"))?;
        let fields: Vec<&str> = header.split(' ').collect();
        let (kind, dim) = match fields.as_slice() {
            ["ECRC-EMB", "v1", kind, dim] => {
                let kind = match *kind {
                    "sentence" => EmbeddingKind::Sentence,
                    "word" => EmbeddingKind::Word,
                    other => return Err(Error::parse(context, 1, format!("unknown table kind {other:?}"))),
                };
                let dim: usize = dim
                    .parse()
                    .map_err(|_| Error::parse(context, 1, format!("bad dimension {dim:?}")))?;
                (kind, dim)
            }
            _ => return Err(Error::parse(context, 1, format!("bad magic or version in {header:?}"))),
        };
        let mut table = Self::new(kind, dim).map_err(|e| Error::parse(context, 1, e.to_string()))?;
        for (lineno, line) in lines {
            let lineno = lineno + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, values) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(context, lineno, "expected key<TAB>values"))?;
            let vector = values
                .split(' ')
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|_| Error::parse(context, lineno, format!("bad number {tok:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if vector.len() != dim {
                return Err(Error::parse(
                    context,
                    lineno,
                    format!("{} values for dimension {dim}", vector.len()),
                ));
            }
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse(context, lineno, "non-finite value"));
            }
            if table.vectors.insert(key.to_string(), vector).is_some() {
                return Err(Error::parse(context, lineno, format!("duplicate key {key:?}")));
            }
        }
        Ok(table)
    }

    /// Rows are emitted in sorted key order with round-trip exact floats.
    pub fn to_text(&self) -> String {
        let mut out = format!("{EMBEDDING_MAGIC} {} {}\n", self.kind.as_str(), self.dim);
        for (key, vector) in &self.vectors {
            out.push_str(key);
            out.push('\t');
            for (i, v) in vector.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_embedding_file(path: &Path) -> Result<EmbeddingTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EmbeddingTable::parse(&text, &path.display().to_string())
}

pub fn write_embedding_file(path: &Path, table: &EmbeddingTable) -> Result<()> {
    table.write(path)
}

/// Deterministic pseudo-random unit vector for `(token, seed)`.
///
/// Coordinates are uniform in `[-1, 1)` from a ChaCha stream keyed by the
/// SHA-256 of the token and seed, then scaled to unit length. Only exact
/// IEEE operations are involved, so the output is identical on every
/// platform.
pub fn hash_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(token.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Where sentence vectors come from, as written in a run configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum SentenceSourceConfig {
    File(PathBuf),
    HashRandom { seed: u64 },
    BiLm { model: PathBuf, trainable: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub enum WordSourceConfig {
    File(PathBuf),
    HashRandom { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderConfig {
    pub sentence: SentenceSourceConfig,
    pub word: WordSourceConfig,
    pub sentence_dim: usize,
    pub word_dim: usize,
}

impl ProviderConfig {
    pub fn hash(seed: u64, sentence_dim: usize, word_dim: usize) -> Self {
        Self {
            sentence: SentenceSourceConfig::HashRandom { seed },
            word: WordSourceConfig::HashRandom { seed },
            sentence_dim,
            word_dim,
        }
    }
}

#[derive(Debug, Clone)]
pub enum SentenceSource {
    File(EmbeddingTable),
    HashRandom { seed: u64 },
    BiLm {
        model: Arc<BiLm>,
        mix: ElmoMix,
        trainable: bool,
    },
}

#[derive(Debug, Clone)]
pub enum WordSource {
    File(EmbeddingTable),
    HashRandom { seed: u64 },
}

/// Resolved providers: loaded tables or models plus the declared dims.
#[derive(Debug)]
pub struct EmbeddingProvider {
    sentence: SentenceSource,
    word: WordSource,
    sentence_dim: usize,
    word_dim: usize,
    oov: AtomicUsize,
}

impl Clone for EmbeddingProvider {
    fn clone(&self) -> Self {
        Self {
            sentence: self.sentence.clone(),
            word: self.word.clone(),
            sentence_dim: self.sentence_dim,
            word_dim: self.word_dim,
            oov: AtomicUsize::new(self.oov_count()),
        }
    }
}

impl EmbeddingProvider {
    pub fn new(sentence: SentenceSource, word: WordSource, sentence_dim: usize, word_dim: usize) -> Result<Self> {
        if sentence_dim == 0 || word_dim == 0 {
            return Err(Error::Config("embedding dimensions must be positive".into()));
        }
        match &sentence {
            SentenceSource::File(t) => {
                if t.kind != EmbeddingKind::Sentence || t.dim() != sentence_dim {
                    return Err(Error::Config(format!(
                        "sentence table is {} dim {}, configured sentence_dim {sentence_dim}",
                        t.kind.as_str(),
                        t.dim()
                    )));
                }
            }
            SentenceSource::BiLm { model, mix, .. } => {
                if model.representation_dim() != sentence_dim {
                    return Err(Error::Config(format!(
                        "bilm produces {}-dim vectors, configured sentence_dim {sentence_dim}",
                        model.representation_dim()
                    )));
                }
                if mix.s_raw.len() != model.params.layers() + 1 {
                    return Err(Error::Config("mix weight count must be layers + 1".into()));
                }
            }
            SentenceSource::HashRandom { .. } => {}
        }
        if let WordSource::File(t) = &word {
            if t.kind != EmbeddingKind::Word || t.dim() != word_dim {
                return Err(Error::Config(format!(
                    "word table is {} dim {}, configured word_dim {word_dim}",
                    t.kind.as_str(),
                    t.dim()
                )));
            }
        }
        Ok(Self {
            sentence,
            word,
            sentence_dim,
            word_dim,
            oov: AtomicUsize::new(0),
        })
    }

    pub fn from_config(cfg: &ProviderConfig) -> Result<Self> {
        let sentence = match &cfg.sentence {
            SentenceSourceConfig::File(p) => SentenceSource::File(load_embedding_file(p)?),
            SentenceSourceConfig::HashRandom { seed } => SentenceSource::HashRandom { seed: *seed },
            SentenceSourceConfig::BiLm { model, trainable } => {
                let model = BiLm::load(model)?;
                let mix = ElmoMix::uniform(model.params.layers());
                SentenceSource::BiLm {
                    model: Arc::new(model),
                    mix,
                    trainable: *trainable,
                }
            }
        };
        let word = match &cfg.word {
            WordSourceConfig::File(p) => WordSource::File(load_embedding_file(p)?),
            WordSourceConfig::HashRandom { seed } => WordSource::HashRandom { seed: *seed },
        };
        Self::new(sentence, word, cfg.sentence_dim, cfg.word_dim)
    }

    pub fn hash(seed: u64, sentence_dim: usize, word_dim: usize) -> Self {
        Self::new(
            SentenceSource::HashRandom { seed },
            WordSource::HashRandom { seed },
            sentence_dim,
            word_dim,
        )
        .expect("positive dims")
    }

    pub fn sentence_dim(&self) -> usize {
        self.sentence_dim
    }

    pub fn word_dim(&self) -> usize {
        self.word_dim
    }

    pub fn sentence_source(&self) -> &SentenceSource {
        &self.sentence
    }

    /// The layer mix when sentence vectors come from a biLM.
    pub fn mix(&self) -> Option<&ElmoMix> {
        match &self.sentence {
            SentenceSource::BiLm { mix, .. } => Some(mix),
            _ => None,
        }
    }

    pub fn trainable_mix(&self) -> bool {
        matches!(self.sentence, SentenceSource::BiLm { trainable: true, .. })
    }

    pub fn set_mix(&mut self, new_mix: ElmoMix) -> Result<()> {
        match &mut self.sentence {
            SentenceSource::BiLm { model, mix, .. } => {
                if new_mix.s_raw.len() != model.params.layers() + 1 {
                    return Err(Error::Shape("mix weight count must be layers + 1".into()));
                }
                *mix = new_mix;
                Ok(())
            }
            _ => Err(Error::Config("mix weights only apply to the bilm sentence source".into())),
        }
    }

    /// Number of word lookups that fell back to the zero vector.
    pub fn oov_count(&self) -> usize {
        self.oov.load(Ordering::Relaxed)
    }

    pub fn reset_oov(&self) {
        self.oov.store(0, Ordering::Relaxed);
    }

    pub fn sentence_vector(&self, conv_id: &str, utt_index: usize, tu: &TokenizedUtterance) -> Result<Vec<f64>> {
        match &self.sentence {
            SentenceSource::File(table) => {
                let key = utterance_key(conv_id, utt_index);
                table
                    .get(&key)
                    .map(<[f64]>::to_vec)
                    .ok_or(Error::MissingEmbedding(key))
            }
            SentenceSource::HashRandom { seed } => {
                let mut acc = vec![0.0; self.sentence_dim];
                if tu.tokens.is_empty() {
                    return Ok(acc);
                }
                for t in &tu.tokens {
                    axpy(1.0, &hash_vector(t, self.sentence_dim, *seed), &mut acc);
                }
                let n = tu.tokens.len() as f64;
                acc.iter_mut().for_each(|v| *v /= n);
                let len = norm(&acc);
                if len > 0.0 {
                    acc.iter_mut().for_each(|v| *v /= len);
                }
                Ok(acc)
            }
            SentenceSource::BiLm { model, mix, .. } => model.sentence_vector(&tu.tokens, mix),
        }
    }

    /// Per-layer token means when the source is a biLM.
    pub fn sentence_layers(&self, tu: &TokenizedUtterance) -> Result<Option<Vec<Vec<f64>>>> {
        match &self.sentence {
            SentenceSource::BiLm { model, .. } => model.layer_means(&tu.tokens).map(Some),
            _ => Ok(None),
        }
    }

    pub fn word_vector(&self, token: &str) -> Vec<f64> {
        match &self.word {
            WordSource::File(table) => match table.get(token) {
                Some(v) => v.to_vec(),
                None => {
                    self.oov.fetch_add(1, Ordering::Relaxed);
                    vec![0.0; self.word_dim]
                }
            },
            WordSource::HashRandom { seed } => hash_vector(token, self.word_dim, *seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;
    use crate::textproc::tokenize;

    #[test]
    fn parses_minimal_table() {
        let t = EmbeddingTable::parse("ECRC-EMB v1 word 3\ncat\t1 0 0\n", "t").unwrap();
        assert_eq!(t.dim(), 3);
        assert_eq!(t.get("cat"), Some(&[1.0, 0.0, 0.0][..]));
    }

    #[test]
    fn parse_errors() {
        let short = EmbeddingTable::parse("ECRC-EMB v1 word 3\ncat\t1 0\n", "f").unwrap_err();
        assert!(matches!(short, Error::Parse { line: 2, .. }), "{short}");
        let dup = EmbeddingTable::parse("ECRC-EMB v1 word 1\ncat\t1\ncat\t2\n", "f").unwrap_err();
        assert!(dup.to_string().contains("duplicate"));
        assert!(EmbeddingTable::parse("ECRC-EMB v2 word 1\n", "f").is_err());
        assert!(EmbeddingTable::parse("XX v1 word 1\n", "f").is_err());
        assert!(EmbeddingTable::parse("ECRC-EMB v1 word 1\nx\tNaN\n", "f").is_err());
        assert!(EmbeddingTable::parse("ECRC-EMB v1 word 1\nx\tinf\n", "f").is_err());
        assert!(EmbeddingTable::parse("ECRC-EMB v1 thing 1\n", "f").is_err());
    }

    #[test]
    fn hash_vector_properties() {
        let a = hash_vector("x", 200, 1);
        assert_eq!(a, hash_vector("x", 200, 1));
        assert!((norm(&a) - 1.0).abs() < 1e-9);
        assert_ne!(a, hash_vector("x", 200, 2));
    }

    #[test]
    fn hash_vectors_are_nearly_orthogonal() {
        let vecs: Vec<Vec<f64>> = (0..1000).map(|i| hash_vector(&format!("tok{i}"), 200, 1)).collect();
        let x = hash_vector("x", 200, 1);
        let y = hash_vector("y", 200, 1);
        assert!(dot(&x, &y).abs() < 0.5);
        for w in vecs.windows(2) {
            assert!(dot(&w[0], &w[1]).abs() < 0.5);
        }
    }

    #[test]
    fn file_sentence_lookup() {
        let mut t = EmbeddingTable::new(EmbeddingKind::Sentence, 2).unwrap();
        t.insert("c1#0", vec![0.5, 0.5]).unwrap();
        let p = EmbeddingProvider::new(SentenceSource::File(t), WordSource::HashRandom { seed: 0 }, 2, 4).unwrap();
        let tu = tokenize("hello", 30).unwrap();
        assert_eq!(p.sentence_vector("c1", 0, &tu).unwrap(), vec![0.5, 0.5]);
        match p.sentence_vector("c1", 1, &tu) {
            Err(Error::MissingEmbedding(k)) => assert_eq!(k, "c1#1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_dims_must_match() {
        let t = EmbeddingTable::new(EmbeddingKind::Sentence, 2).unwrap();
        assert!(EmbeddingProvider::new(SentenceSource::File(t), WordSource::HashRandom { seed: 0 }, 3, 4).is_err());
    }

    #[test]
    fn hash_sentence_vectors() {
        let p = EmbeddingProvider::hash(3, 16, 8);
        let empty = tokenize("!!", 30).unwrap();
        assert_eq!(p.sentence_vector("c", 0, &empty).unwrap(), vec![0.0; 16]);
        let aa = p.sentence_vector("c", 0, &tokenize("a a", 30).unwrap()).unwrap();
        let a = p.sentence_vector("c", 0, &tokenize("a", 30).unwrap()).unwrap();
        assert_eq!(aa, a);
        assert!((norm(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn word_lookup_with_oov_fallback() {
        let mut t = EmbeddingTable::new(EmbeddingKind::Word, 2).unwrap();
        t.insert("cat", vec![1.0, 2.0]).unwrap();
        let p = EmbeddingProvider::new(SentenceSource::HashRandom { seed: 0 }, WordSource::File(t), 4, 2).unwrap();
        assert_eq!(p.word_vector("cat"), vec![1.0, 2.0]);
        assert_eq!(p.oov_count(), 0);
        assert_eq!(p.word_vector("dog"), vec![0.0, 0.0]);
        assert_eq!(p.oov_count(), 1);
        let h = EmbeddingProvider::hash(1, 4, 6);
        assert!((norm(&h.word_vector("cat")) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn table_round_trip() {
        let mut t = EmbeddingTable::new(EmbeddingKind::Word, 3).unwrap();
        t.insert("b", vec![0.1, -2.5e-7, 1.0 / 3.0]).unwrap();
        t.insert("a", vec![1e300, 0.0, -0.0]).unwrap();
        let text = t.to_text();
        let back = EmbeddingTable::parse(&text, "t").unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_text(), text);
    }
}
