//! Conversation datasets: parsing, validation, label vocabularies, splitting,
//! and a label-planted synthetic generator.
//!
//! Utterance positions are 0-based. Users speak at even positions, the system
//! at odd positions, and every conversation opens and closes with the user.
//!
//! Corpora are JSON Lines, one conversation per line. Blank lines and lines
//! starting with `#` are skipped.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_EMOTIONS: usize = 6;
pub const NUM_CAUSALITIES: usize = 12;
pub const DEFAULT_UTTERANCES: usize = 5;

pub const DEFAULT_EMOTIONS: [&str; NUM_EMOTIONS] =
    ["Joy", "Panic", "Anger", "Frustration", "Hurt", "Sorrow"];

pub const DEFAULT_CAUSALITIES: [&str; NUM_CAUSALITIES] = [
    "Career, Job",
    "Personal relationship",
    "Love, Marriage, Childbirth",
    "Retirement",
    "Financial",
    "Disease, Death",
    "Academic career",
    "School violence/bullying",
    "Working stress",
    "Personal relationships (couple, children)",
    "Family relationship",
    "Health",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub emotion: Option<usize>,
    pub causality: Option<usize>,
}

impl Conversation {
    /// Builds a conversation from texts with alternating speakers starting
    /// from the user, then validates it.
    pub fn from_texts<S: AsRef<str>>(
        id: impl Into<String>,
        texts: &[S],
        emotion: Option<usize>,
        causality: Option<usize>,
    ) -> Result<Self> {
        let utterances = texts
            .iter()
            .enumerate()
            .map(|(index, t)| Utterance {
                speaker: speaker_at(index),
                text: t.as_ref().to_string(),
                index,
            })
            .collect();
        let conv = Conversation {
            id: id.into(),
            utterances,
            emotion,
            causality,
        };
        conv.validate()?;
        Ok(conv)
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Key used by sentence embedding tables and tagged-corpus sidecars.
    pub fn utterance_key(&self, index: usize) -> String {
        utterance_key(&self.id, index)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::InvalidConversation {
            id: self.id.clone(),
            message,
        };
        if self.id.is_empty() {
            return Err(fail("empty id".into()));
        }
        let n = self.utterances.len();
        if n.is_multiple_of(2) {
            return Err(fail(format!("even utterance count {n}")));
        }
        if n < 3 {
            return Err(fail(format!("utterance count {n} below 3")));
        }
        if self.utterances[n - 1].speaker != Speaker::User {
            return Err(fail("last speaker must be user".into()));
        }
        for (i, u) in self.utterances.iter().enumerate() {
            if u.index != i {
                return Err(fail(format!("utterance {i} carries index {}", u.index)));
            }
            if u.speaker != speaker_at(i) {
                return Err(fail(format!(
                    "speaker at utterance {i} must be {:?}",
                    speaker_at(i)
                )));
            }
            if u.text.trim().is_empty() {
                return Err(fail(format!("utterance {i} has empty text")));
            }
        }
        if let Some(e) = self.emotion {
            if e >= NUM_EMOTIONS {
                return Err(fail(format!("emotion id {e} out of range")));
            }
        }
        if let Some(c) = self.causality {
            if c >= NUM_CAUSALITIES {
                return Err(fail(format!("causality id {c} out of range")));
            }
        }
        Ok(())
    }
}

pub fn speaker_at(index: usize) -> Speaker {
    if index.is_multiple_of(2) {
        Speaker::User
    } else {
        Speaker::System
    }
}

pub fn utterance_key(conv_id: &str, index: usize) -> String {
    format!("{conv_id}#{index}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocab {
    emotion_names: Vec<String>,
    causality_names: Vec<String>,
}

impl Default for LabelVocab {
    fn default() -> Self {
        Self {
            emotion_names: DEFAULT_EMOTIONS.iter().map(|s| s.to_string()).collect(),
            causality_names: DEFAULT_CAUSALITIES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl LabelVocab {
    pub fn new(emotion_names: Vec<String>, causality_names: Vec<String>) -> Result<Self> {
        check_names("emotion", &emotion_names, NUM_EMOTIONS)?;
        check_names("causality", &causality_names, NUM_CAUSALITIES)?;
        Ok(Self {
            emotion_names,
            causality_names,
        })
    }

    pub fn emotion_names(&self) -> &[String] {
        &self.emotion_names
    }

    pub fn causality_names(&self) -> &[String] {
        &self.causality_names
    }

    pub fn emotion_id(&self, name: &str) -> Option<usize> {
        self.emotion_names.iter().position(|n| n == name)
    }

    pub fn causality_id(&self, name: &str) -> Option<usize> {
        self.causality_names.iter().position(|n| n == name)
    }

    /// Reads the sidecar format: `[emotion]` and `[causality]` sections, one
    /// label name per line. Blank lines and `#` comments are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, context: &str) -> Result<Self> {
        let mut emotion = Vec::new();
        let mut causality = Vec::new();
        let mut section: Option<&mut Vec<String>> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[emotion]" => section = Some(&mut emotion),
                "[causality]" => section = Some(&mut causality),
                name => match section.as_deref_mut() {
                    Some(list) => list.push(name.to_string()),
                    None => {
                        return Err(Error::parse(
                            context,
                            lineno + 1,
                            "label outside of a [emotion]/[causality] section",
                        ))
                    }
                },
            }
        }
        Self::new(emotion, causality)
    }

    pub fn to_sidecar(&self) -> String {
        let mut out = String::from("[emotion]\n");
        for n in &self.emotion_names {
            out.push_str(n);
            out.push('\n');
        }
        out.push_str("[causality]\n");
        for n in &self.causality_names {
            out.push_str(n);
            out.push('\n');
        }
        out
    }
}

fn check_names(kind: &str, names: &[String], expected: usize) -> Result<()> {
    if names.len() != expected {
        return Err(Error::InvalidVocab(format!(
            "{kind} list has {} entries, expected {expected}",
            names.len()
        )));
    }
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::InvalidVocab(format!("duplicate {kind} label {n:?}")));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordUtterance {
    speaker: Speaker,
    text: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    utterances: Vec<RecordUtterance>,
    #[serde(default)]
    emotion: Option<String>,
    #[serde(default)]
    causality: Option<String>,
}

/// Parses one corpus record (a single JSON object).
pub fn parse_record(line: &str, vocab: &LabelVocab) -> std::result::Result<Conversation, RecordError> {
    let record: Record = serde_json::from_str(line).map_err(|e| RecordError::Malformed(e.to_string()))?;
    let emotion = match record.emotion {
        Some(name) => Some(vocab.emotion_id(&name).ok_or_else(|| {
            RecordError::Invalid(Error::UnknownLabel {
                kind: "emotion",
                name,
                id: record.id.clone(),
            })
        })?),
        None => None,
    };
    let causality = match record.causality {
        Some(name) => Some(vocab.causality_id(&name).ok_or_else(|| {
            RecordError::Invalid(Error::UnknownLabel {
                kind: "causality",
                name,
                id: record.id.clone(),
            })
        })?),
        None => None,
    };
    let conv = Conversation {
        id: record.id,
        utterances: record
            .utterances
            .into_iter()
            .enumerate()
            .map(|(index, u)| Utterance {
                speaker: u.speaker,
                text: u.text,
                index,
            })
            .collect(),
        emotion,
        causality,
    };
    conv.validate().map_err(RecordError::Invalid)?;
    Ok(conv)
}

#[derive(Debug)]
pub enum RecordError {
    Malformed(String),
    Invalid(Error),
}

pub fn parse_corpus_str(text: &str, vocab: &LabelVocab, context: &str) -> Result<Vec<Conversation>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let conv = match parse_record(line, vocab) {
            Ok(c) => c,
            Err(RecordError::Malformed(m)) => {
                return Err(Error::parse(context, lineno + 1, format!("malformed record: {m}")))
            }
            Err(RecordError::Invalid(e)) => return Err(e),
        };
        if !ids.insert(conv.id.clone()) {
            return Err(Error::InvalidConversation {
                id: conv.id,
                message: format!("duplicate id at line {}", lineno + 1),
            });
        }
        out.push(conv);
    }
    Ok(out)
}

pub fn parse_corpus(path: &Path, vocab: &LabelVocab) -> Result<Vec<Conversation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus_str(&text, vocab, &path.display().to_string())
}

pub fn serialize_conversation(conv: &Conversation, vocab: &LabelVocab) -> String {
    let record = Record {
        id: conv.id.clone(),
        utterances: conv
            .utterances
            .iter()
            .map(|u| RecordUtterance {
                speaker: u.speaker,
                text: u.text.clone(),
            })
            .collect(),
        emotion: conv.emotion.map(|e| vocab.emotion_names[e].clone()),
        causality: conv.causality.map(|c| vocab.causality_names[c].clone()),
    };
    serde_json::to_string(&record).expect("corpus records always serialize")
}

pub fn serialize_corpus(convs: &[Conversation], vocab: &LabelVocab) -> String {
    let mut out = String::new();
    for c in convs {
        out.push_str(&serialize_conversation(c, vocab));
        out.push('\n');
    }
    out
}

pub fn write_corpus(path: &Path, convs: &[Conversation], vocab: &LabelVocab) -> Result<()> {
    fs::write(path, serialize_corpus(convs, vocab)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Conversation>,
    pub test: Vec<Conversation>,
    pub seed: u64,
}

/// Seeded shuffle followed by a `train:test` partition. The test side gets
/// `floor(n · test / (train + test))` conversations.
pub fn split_dataset(convs: &[Conversation], ratio: (u32, u32), seed: u64) -> Result<DatasetSplit> {
    if convs.is_empty() {
        return Err(Error::Empty("dataset to split"));
    }
    let (train_part, test_part) = ratio;
    if train_part + test_part == 0 {
        return Err(Error::Config("split ratio must be positive".into()));
    }
    let mut shuffled = convs.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = shuffled.len() * test_part as usize / (train_part + test_part) as usize;
    let test = shuffled.split_off(shuffled.len() - n_test);
    Ok(DatasetSplit {
        train: shuffled,
        test,
        seed,
    })
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_conversations: usize,
    pub n_utterances: usize,
    pub seed: u64,
    /// Filler tokens placed ahead of the planted keywords in user turns.
    pub user_prefix_tokens: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_conversations: 64,
            n_utterances: DEFAULT_UTTERANCES,
            seed: 0,
            user_prefix_tokens: 30,
        }
    }
}

const FILLER: [&str; 32] = [
    "the", "a", "i", "you", "it", "was", "is", "today", "really", "just", "so", "that", "and",
    "then", "about", "my", "we", "they", "very", "think", "feel", "know", "time", "day", "thing",
    "some", "again", "still", "maybe", "there", "here", "now",
];

const SYSTEM_FILLER: [&str; 12] = [
    "i", "see", "tell", "me", "more", "that", "sounds", "hard", "how", "do", "you", "feel",
];

const EMOTION_KEYWORDS: [[&str; 2]; NUM_EMOTIONS] = [
    ["delighted", "thrilled"],
    ["terrified", "frantic"],
    ["furious", "outraged"],
    ["stuck", "hopeless"],
    ["betrayed", "wounded"],
    ["grieving", "heartbroken"],
];

const CAUSALITY_KEYWORDS: [[&str; 2]; NUM_CAUSALITIES] = [
    ["interview", "promotion"],
    ["coworker", "neighbor"],
    ["wedding", "pregnancy"],
    ["pension", "retiring"],
    ["debt", "mortgage"],
    ["funeral", "diagnosis"],
    ["exam", "thesis"],
    ["bully", "classmates"],
    ["overtime", "deadline"],
    ["boyfriend", "toddler"],
    ["sister", "parents"],
    ["fever", "surgery"],
];

/// Label pair for the `index`-th conversation. Walks all 72 pairs in an
/// order where both marginals stay balanced on every prefix.
pub fn planted_labels(index: usize) -> (usize, usize) {
    let c = index % (NUM_EMOTIONS * NUM_CAUSALITIES);
    let causality = c % NUM_CAUSALITIES;
    let emotion = (c % NUM_EMOTIONS + c / NUM_CAUSALITIES) % NUM_EMOTIONS;
    (emotion, causality)
}

/// Label-planted conversations. Every user turn opens with
/// `user_prefix_tokens` filler words and ends with one keyword tied to the
/// emotion label and one tied to the causality label, so the labels are
/// recoverable from word-level features. With the default prefix of 30 the
/// keywords fall outside the default 30-token embedding window.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<Conversation>> {
    if cfg.n_utterances < 3 || cfg.n_utterances.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "n_utterances must be odd and at least 3, got {}",
            cfg.n_utterances
        )));
    }
    if cfg.n_conversations == 0 {
        return Err(Error::Config("n_conversations must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut convs = Vec::with_capacity(cfg.n_conversations);
    for i in 0..cfg.n_conversations {
        let (emotion, causality) = planted_labels(i);
        let mut texts = Vec::with_capacity(cfg.n_utterances);
        for u in 0..cfg.n_utterances {
            let mut text = String::new();
            if u % 2 == 0 {
                for _ in 0..cfg.user_prefix_tokens {
                    let _ = write!(text, "{} ", FILLER[rng.gen_range(0..FILLER.len())]);
                }
                let ek = EMOTION_KEYWORDS[emotion][rng.gen_range(0..2)];
                let ck = CAUSALITY_KEYWORDS[causality][rng.gen_range(0..2)];
                if rng.gen_bool(0.5) {
                    let _ = write!(text, "{ek} {ck}.");
                } else {
                    let _ = write!(text, "{ck} {ek}.");
                }
            } else {
                let len = rng.gen_range(4..9);
                let words: Vec<&str> = (0..len)
                    .map(|_| SYSTEM_FILLER[rng.gen_range(0..SYSTEM_FILLER.len())])
                    .collect();
                text = format!("{}?", words.join(" "));
            }
            texts.push(text);
        }
        convs.push(Conversation::from_texts(
            format!("synth-{i:05}"),
            &texts,
            Some(emotion),
            Some(causality),
        )?);
    }
    convs.shuffle(&mut rng);
    Ok(convs)
}
