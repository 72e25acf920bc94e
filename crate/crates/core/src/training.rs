//! Mini-batch training, evaluation metrics, prediction, and model
//! checkpoints.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bilm::{read_tensor, write_tensor, ElmoMix};
use crate::corpus::{Conversation, LabelVocab, NUM_CAUSALITIES, NUM_EMOTIONS};
use crate::embeddings::{EmbeddingProvider, ProviderConfig, SentenceSourceConfig, WordSourceConfig};
use crate::error::{Error, Result};
use crate::gcnnet::{backward, forward_graph, mix_backward, Classification, DropoutMode, GcnParams, TaskTarget, HIDDEN_DIM};
use crate::graphbuild::{build_graph, build_template, ConversationGraph, FeatureContext, GraphTemplate, GraphVariant};
use crate::textproc::{PosTagger, TfIdfIndex};

pub const CHECKPOINT_MAGIC: &str = "ECRC-GCN v1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Optimizer::Adam { .. } => f.write_str("adam"),
            Optimizer::Sgd => f.write_str("sgd"),
        }
    }
}

impl FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Optimizer::adam()),
            "sgd" => Ok(Optimizer::Sgd),
            other => Err(Error::Config(format!("unknown optimizer {other:?} (adam, sgd)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 0.001,
            dropout: 0.5,
            optimizer: Optimizer::adam(),
            seed: 0,
            hidden: vec![HIDDEN_DIM, HIDDEN_DIM],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(format!("invalid hidden dims {:?}", self.hidden)));
        }
        Ok(())
    }
}

/// Turns conversations into graphs with a fixed set of providers.
pub struct Featurizer {
    pub provider: EmbeddingProvider,
    pub tfidf: TfIdfIndex,
    pub tagger: Box<dyn PosTagger>,
    pub max_len: usize,
    pub variant: GraphVariant,
}

#[derive(Debug, Clone)]
pub enum ExampleInput {
    Graph(ConversationGraph),
    /// Sentence features still depend on a trainable layer mix.
    Template(GraphTemplate),
}

#[derive(Debug, Clone)]
pub struct Example {
    pub input: ExampleInput,
    pub target: TaskTarget,
}

impl Example {
    pub fn graph(&self, mix: Option<&ElmoMix>) -> Result<ConversationGraph> {
        match (&self.input, mix) {
            (ExampleInput::Graph(g), _) => Ok(g.clone()),
            (ExampleInput::Template(t), Some(m)) => t.assemble(m),
            (ExampleInput::Template(_), None) => Err(Error::Config("template example needs a layer mix".into())),
        }
    }
}

pub fn target_of(conv: &Conversation) -> Result<TaskTarget> {
    TaskTarget::new(conv.emotion, conv.causality).map_err(|_| Error::InvalidConversation {
        id: conv.id.clone(),
        message: "no emotion or causality label".into(),
    })
}

impl Featurizer {
    pub fn input_dim(&self) -> usize {
        self.variant.feature_dim(self.provider.sentence_dim(), self.provider.word_dim())
    }

    pub fn context(&self) -> FeatureContext<'_> {
        FeatureContext {
            provider: &self.provider,
            tfidf: &self.tfidf,
            tagger: self.tagger.as_ref(),
            max_len: self.max_len,
        }
    }

    pub fn graph(&self, conv: &Conversation) -> Result<ConversationGraph> {
        build_graph(conv, &self.context(), self.variant)
    }

    pub fn graphs(&self, convs: &[Conversation]) -> Result<Vec<ConversationGraph>> {
        convs.par_iter().map(|c| self.graph(c)).collect()
    }

    /// Labeled examples. Templates are built when the provider's layer mix is
    /// trainable, so that training can update it.
    pub fn examples(&self, convs: &[Conversation]) -> Result<Vec<Example>> {
        let ctx = self.context();
        let trainable = self.provider.trainable_mix();
        convs
            .par_iter()
            .map(|c| {
                let target = target_of(c)?;
                let input = if trainable {
                    ExampleInput::Template(build_template(c, &ctx, self.variant)?)
                } else {
                    ExampleInput::Graph(build_graph(c, &ctx, self.variant)?)
                };
                Ok(Example { input, target })
            })
            .collect()
    }
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    fn new(kind: Optimizer, lr: f64, sizes: &[usize]) -> Self {
        Self {
            kind,
            lr,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        self.t += 1;
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            match self.kind {
                Optimizer::Sgd => {
                    for (pv, gv) in p.iter_mut().zip(g) {
                        *pv -= self.lr * gv;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.t);
                    let c2 = 1.0 - beta2.powi(self.t);
                    for ((pv, gv), (m, v)) in p.iter_mut().zip(g).zip(self.m[k].iter_mut().zip(self.v[k].iter_mut())) {
                        *m = beta1 * *m + (1.0 - beta1) * gv;
                        *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *pv -= self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

fn flat_params<'a>(params: &'a mut GcnParams, mix: Option<&'a mut ElmoMix>) -> Vec<&'a mut [f64]> {
    let mut out: Vec<&mut [f64]> = params.layers.iter_mut().map(|w| w.as_mut_slice()).collect();
    out.push(params.fc.as_mut_slice());
    if let Some(m) = mix {
        out.push(&mut m.s_raw);
        out.push(std::slice::from_mut(&mut m.gamma));
    }
    out
}

fn flat_grads<'a>(params: &'a GcnParams, mix: Option<&'a ElmoMix>) -> Vec<&'a [f64]> {
    let mut out: Vec<&[f64]> = params.layers.iter().map(|w| w.as_slice()).collect();
    out.push(params.fc.as_slice());
    if let Some(m) = mix {
        out.push(&m.s_raw);
        out.push(std::slice::from_ref(&m.gamma));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: GcnParams,
    pub mix: Option<ElmoMix>,
    /// Mean batch loss, one entry per optimizer step.
    pub history: Vec<f64>,
    pub steps_per_epoch: usize,
}

impl TrainOutcome {
    /// Mean of the batch losses in each epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.history
            .chunks(self.steps_per_epoch.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

struct ExampleGrad {
    loss: f64,
    params: GcnParams,
    mix: Option<ElmoMix>,
}

fn example_grad(params: &GcnParams, mix: Option<&ElmoMix>, ex: &Example, dropout: f64, mode: DropoutMode) -> Result<ExampleGrad> {
    match (&ex.input, mix) {
        (ExampleInput::Template(t), Some(m)) => {
            let (loss, params, d_mix) = mix_backward(params, t, m, &ex.target, dropout, mode)?;
            Ok(ExampleGrad { loss, params, mix: Some(d_mix) })
        }
        _ => {
            let graph = ex.graph(mix)?;
            let trace = forward_graph(params, &graph, dropout, mode)?;
            let grads = backward(params, &trace, &ex.target, false)?;
            Ok(ExampleGrad {
                loss: trace.loss(&ex.target),
                params: grads.params,
                mix: None,
            })
        }
    }
}

/// Trains a fresh model. Each epoch shuffles the examples, then takes one
/// optimizer step per batch on the mean batch loss. Per-example gradients
/// are computed in parallel and summed in batch order, so the result does
/// not depend on the thread count.
pub fn train(examples: &[Example], input_dim: usize, cfg: &TrainConfig, mix: Option<ElmoMix>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let has_template = examples.iter().any(|e| matches!(e.input, ExampleInput::Template(_)));
    if has_template && mix.is_none() {
        return Err(Error::Config("template examples need an initial layer mix".into()));
    }
    let mut mix = if has_template { mix } else { None };
    let mut params = GcnParams::new(input_dim, &cfg.hidden, cfg.seed)?;
    let sizes: Vec<usize> = flat_grads(&params, mix.as_ref()).iter().map(|g| g.len()).collect();
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr, &sizes);

    let n = examples.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let dropout_seed = cfg.seed;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<ExampleGrad> = batch
                .par_iter()
                .map(|&i| {
                    let mode = DropoutMode::Train {
                        seed: dropout_seed,
                        counter: (epoch * n + i) as u64,
                    };
                    example_grad(&params, mix.as_ref(), &examples[i], cfg.dropout, mode)
                })
                .collect::<Result<_>>()?;
            let mut total_loss = 0.0;
            let mut sum = params.zeros_like();
            let mut mix_sum = mix.as_ref().map(|m| ElmoMix {
                s_raw: vec![0.0; m.s_raw.len()],
                gamma: 0.0,
            });
            for r in &results {
                total_loss += r.loss;
                sum.add_assign(&r.params);
                if let (Some(acc), Some(g)) = (mix_sum.as_mut(), r.mix.as_ref()) {
                    for (a, v) in acc.s_raw.iter_mut().zip(&g.s_raw) {
                        *a += v;
                    }
                    acc.gamma += g.gamma;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let loss = total_loss * scale;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch} batch {b}")));
            }
            sum.scale(scale);
            if let Some(acc) = mix_sum.as_mut() {
                acc.s_raw.iter_mut().for_each(|v| *v *= scale);
                acc.gamma *= scale;
            }
            opt.step(flat_params(&mut params, mix.as_mut()), flat_grads(&sum, mix_sum.as_ref()));
            history.push(loss);
        }
    }
    if !params.is_finite() {
        return Err(Error::Diverged("final parameters".into()));
    }
    Ok(TrainOutcome {
        params,
        mix,
        history,
        steps_per_epoch,
    })
}

/// Two-column `step loss` text.
pub fn loss_history_text(history: &[f64]) -> String {
    let mut out = String::from("step loss\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(out, "{i} {l:e}");
    }
    out
}

pub fn classify_graph(params: &GcnParams, graph: &ConversationGraph) -> Result<Classification> {
    Ok(forward_graph(params, graph, 0.0, DropoutMode::Eval)?.classification)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskMetrics {
    pub names: Vec<String>,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassScores>,
    pub macro_avg: Averages,
    pub weighted: Averages,
    pub accuracy: f64,
    pub total: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl TaskMetrics {
    pub fn from_confusion(names: Vec<String>, confusion: Vec<Vec<usize>>) -> Result<Self> {
        let k = names.len();
        if confusion.len() != k || confusion.iter().any(|r| r.len() != k) {
            return Err(Error::Shape(format!("confusion matrix must be {k}x{k}")));
        }
        let total: usize = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Empty("evaluation set"));
        }
        let per_class: Vec<ClassScores> = (0..k)
            .map(|c| {
                let tp = confusion[c][c];
                let predicted: usize = confusion.iter().map(|r| r[c]).sum();
                let support: usize = confusion[c].iter().sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassScores {
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        let macro_avg = Averages {
            precision: per_class.iter().map(|s| s.precision).sum::<f64>() / k as f64,
            recall: per_class.iter().map(|s| s.recall).sum::<f64>() / k as f64,
            f1: per_class.iter().map(|s| s.f1).sum::<f64>() / k as f64,
        };
        let w = |f: fn(&ClassScores) -> f64| per_class.iter().map(|s| f(s) * s.support as f64).sum::<f64>() / total as f64;
        let weighted = Averages {
            precision: w(|s| s.precision),
            recall: w(|s| s.recall),
            f1: w(|s| s.f1),
        };
        let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
        Ok(Self {
            names,
            confusion,
            per_class,
            macro_avg,
            weighted,
            accuracy: ratio(correct, total),
            total,
        })
    }

    /// From `(true, predicted)` pairs.
    pub fn from_pairs(names: Vec<String>, pairs: &[(usize, usize)]) -> Result<Self> {
        let k = names.len();
        let mut confusion = vec![vec![0; k]; k];
        for &(t, p) in pairs {
            if t >= k || p >= k {
                return Err(Error::Shape(format!("class id outside {k} classes")));
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(names, confusion)
    }

    fn to_json(&self) -> serde_json::Value {
        let classes: serde_json::Map<String, serde_json::Value> = self
            .names
            .iter()
            .zip(&self.per_class)
            .map(|(n, s)| (n.clone(), serde_json::to_value(s).expect("plain struct")))
            .collect();
        serde_json::json!({
            "classes": classes,
            "macro": self.macro_avg,
            "weighted": self.weighted,
            "accuracy": self.accuracy,
            "total": self.total,
            "confusion": self.confusion,
        })
    }

    fn write_table(&self, task: &str, out: &mut String) {
        let width = self.names.iter().map(String::len).max().unwrap_or(0).max(12);
        let _ = writeln!(out, "{task} (n={}, accuracy {:.4})", self.total, self.accuracy);
        let _ = writeln!(out, "  {:<width$}  {:>9}  {:>9}  {:>9}  {:>7}", "class", "precision", "recall", "f1", "support");
        for (name, s) in self.names.iter().zip(&self.per_class) {
            let _ = writeln!(out, "  {name:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}", s.precision, s.recall, s.f1, s.support);
        }
        for (label, a) in [("macro avg", &self.macro_avg), ("weighted avg", &self.weighted)] {
            let _ = writeln!(out, "  {label:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}", a.precision, a.recall, a.f1, self.total);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub emotion: Option<TaskMetrics>,
    pub causality: Option<TaskMetrics>,
}

impl Metrics {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(m) = &self.emotion {
            m.write_table("emotion", &mut out);
        }
        if let Some(m) = &self.causality {
            if !out.is_empty() {
                out.push('\n');
            }
            m.write_table("causality", &mut out);
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        if let Some(m) = &self.emotion {
            map.insert("emotion".into(), m.to_json());
        }
        if let Some(m) = &self.causality {
            map.insert("causality".into(), m.to_json());
        }
        serde_json::Value::Object(map)
    }
}

/// Eval-mode metrics over labeled graphs. Only examples carrying a task's
/// label count toward that task.
pub fn evaluate(params: &GcnParams, examples: &[Example], mix: Option<&ElmoMix>, labels: &LabelVocab) -> Result<Metrics> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let predictions: Vec<(usize, usize)> = examples
        .par_iter()
        .map(|ex| {
            let cls = classify_graph(params, &ex.graph(mix)?)?;
            Ok((cls.emotion_prediction().0, cls.causality_prediction().0))
        })
        .collect::<Result<_>>()?;
    let mut emo = Vec::new();
    let mut cau = Vec::new();
    for (ex, (pe, pc)) in examples.iter().zip(predictions) {
        if let Some(t) = ex.target.emotion {
            emo.push((t, pe));
        }
        if let Some(t) = ex.target.causality {
            cau.push((t, pc));
        }
    }
    let task = |names: &[String], pairs: &[(usize, usize)]| -> Result<Option<TaskMetrics>> {
        if pairs.is_empty() {
            Ok(None)
        } else {
            TaskMetrics::from_pairs(names.to_vec(), pairs).map(Some)
        }
    };
    Ok(Metrics {
        emotion: task(labels.emotion_names(), &emo)?,
        causality: task(labels.causality_names(), &cau)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelPrediction {
    pub id: usize,
    pub label: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub conversation: String,
    pub emotion: LabelPrediction,
    pub causality: LabelPrediction,
}

pub fn prediction_from(conv_id: &str, cls: &Classification, labels: &LabelVocab) -> Prediction {
    let (e, pe) = cls.emotion_prediction();
    let (c, pc) = cls.causality_prediction();
    Prediction {
        conversation: conv_id.to_string(),
        emotion: LabelPrediction {
            id: e,
            label: labels.emotion_names()[e].clone(),
            probability: pe,
        },
        causality: LabelPrediction {
            id: c,
            label: labels.causality_names()[c].clone(),
            probability: pc,
        },
    }
}

/// A trained model plus everything needed to featurize new conversations.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: GcnParams,
    pub variant: GraphVariant,
    pub provider: ProviderConfig,
    pub mix: Option<ElmoMix>,
    pub max_len: usize,
    pub labels: LabelVocab,
    /// Document statistics of the training corpus.
    pub tfidf: TfIdfIndex,
    /// Effective run configuration, echoed into the checkpoint header.
    pub config: Vec<(String, String)>,
}

fn sentence_config_text(c: &SentenceSourceConfig) -> String {
    match c {
        SentenceSourceConfig::HashRandom { seed } => format!("hash {seed}"),
        SentenceSourceConfig::File(p) => format!("file {}", p.display()),
        SentenceSourceConfig::BiLm { model, trainable } => {
            format!("bilm {} {}", if *trainable { "trainable" } else { "frozen" }, model.display())
        }
    }
}

fn word_config_text(c: &WordSourceConfig) -> String {
    match c {
        WordSourceConfig::HashRandom { seed } => format!("hash {seed}"),
        WordSourceConfig::File(p) => format!("file {}", p.display()),
    }
}

fn parse_hash_seed(rest: &str) -> Option<u64> {
    rest.parse().ok()
}

fn parse_sentence_config(v: &str) -> Option<SentenceSourceConfig> {
    let (kind, rest) = v.split_once(' ')?;
    match kind {
        "hash" => Some(SentenceSourceConfig::HashRandom { seed: parse_hash_seed(rest)? }),
        "file" => Some(SentenceSourceConfig::File(PathBuf::from(rest))),
        "bilm" => {
            let (mode, path) = rest.split_once(' ')?;
            let trainable = match mode {
                "trainable" => true,
                "frozen" => false,
                _ => return None,
            };
            Some(SentenceSourceConfig::BiLm {
                model: PathBuf::from(path),
                trainable,
            })
        }
        _ => None,
    }
}

fn parse_word_config(v: &str) -> Option<WordSourceConfig> {
    let (kind, rest) = v.split_once(' ')?;
    match kind {
        "hash" => Some(WordSourceConfig::HashRandom { seed: parse_hash_seed(rest)? }),
        "file" => Some(WordSourceConfig::File(PathBuf::from(rest))),
        _ => None,
    }
}

impl Model {
    /// Rebuilds the featurizer this model was trained with.
    pub fn featurizer(&self, tagger: Box<dyn PosTagger>) -> Result<Featurizer> {
        let mut provider = EmbeddingProvider::from_config(&self.provider)?;
        if let Some(m) = &self.mix {
            provider.set_mix(m.clone())?;
        }
        let f = Featurizer {
            provider,
            tfidf: self.tfidf.clone(),
            tagger,
            max_len: self.max_len,
            variant: self.variant,
        };
        if f.input_dim() != self.params.input_dim() {
            return Err(Error::Shape(format!(
                "providers give {}-dim features, model expects {}",
                f.input_dim(),
                self.params.input_dim()
            )));
        }
        Ok(f)
    }

    pub fn predict(&self, featurizer: &Featurizer, conv: &Conversation) -> Result<Prediction> {
        let cls = classify_graph(&self.params, &featurizer.graph(conv)?)?;
        Ok(prediction_from(&conv.id, &cls, &self.labels))
    }

    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "arch dims={} variant={} seed={}", self.params.dims_string(), self.variant, self.params.seed);
        let mut kv = |k: &str, v: &str| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("provider.sentence", &sentence_config_text(&self.provider.sentence));
        kv("provider.word", &word_config_text(&self.provider.word));
        kv("provider.dims", &format!("{} {}", self.provider.sentence_dim, self.provider.word_dim));
        kv("text.max_len", &self.max_len.to_string());
        for name in self.labels.emotion_names() {
            kv("label.emotion", name);
        }
        for name in self.labels.causality_names() {
            kv("label.causality", name);
        }
        for (k, v) in &self.config {
            kv(&format!("config.{k}"), v);
        }
        if let Some(m) = &self.mix {
            kv("mix.layers", &m.s_raw.len().to_string());
        }
        kv("tfidf.docs", &self.tfidf.doc_count().to_string());
        kv("tfidf.terms", &self.tfidf.doc_freq().len().to_string());
        for (name, m) in self.params.tensors() {
            write_tensor(&mut out, &name, m.as_slice());
        }
        if let Some(m) = &self.mix {
            write_tensor(&mut out, "mix.s", &m.s_raw);
            write_tensor(&mut out, "mix.gamma", &[m.gamma]);
        }
        out.push_str("tfidf\n");
        for (term, df) in self.tfidf.doc_freq() {
            let _ = writeln!(out, "{term}\t{df}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text, &path.display().to_string())
    }

    pub fn from_checkpoint(text: &str, context: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let bad = |ln: usize, msg: String| Error::parse(context, ln + 1, msg);
        if lines.first() != Some(&CHECKPOINT_MAGIC) {
            return Err(bad(0, format!("expected {CHECKPOINT_MAGIC:?} header")));
        }
        let arch = lines.get(1).and_then(|l| l.strip_prefix("arch ")).ok_or_else(|| bad(1, "missing arch line".into()))?;
        let mut dims = None;
        let mut variant = None;
        let mut seed = None;
        for field in arch.split(' ') {
            match field.split_once('=') {
                Some(("dims", v)) => dims = v.split(',').map(|d| d.parse::<usize>().ok()).collect::<Option<Vec<_>>>(),
                Some(("variant", v)) => variant = v.parse::<GraphVariant>().ok(),
                Some(("seed", v)) => seed = v.parse::<u64>().ok(),
                _ => return Err(bad(1, format!("bad arch field {field:?}"))),
            }
        }
        let (Some(dims), Some(variant), Some(seed)) = (dims, variant, seed) else {
            return Err(bad(1, "arch line needs dims, variant and seed".into()));
        };
        if dims.len() < 3 || dims.last() != Some(&(NUM_EMOTIONS + NUM_CAUSALITIES)) {
            return Err(bad(1, format!("unsupported dims {dims:?}")));
        }

        let mut pos = 2;
        let mut header: Vec<(usize, &str, &str)> = Vec::new();
        while pos < lines.len() && !lines[pos].starts_with("tensor ") {
            let (k, v) = lines[pos].split_once(" = ").ok_or_else(|| bad(pos, format!("expected `key = value`, found {:?}", lines[pos])))?;
            header.push((pos, k, v));
            pos += 1;
        }
        let single = |key: &str| -> Result<(usize, &str)> {
            let mut found = header.iter().filter(|(_, k, _)| *k == key);
            let first = found.next().ok_or_else(|| bad(pos, format!("missing {key}")))?;
            Ok((first.0, first.2))
        };
        let number = |key: &str| -> Result<usize> {
            let (ln, v) = single(key)?;
            v.parse().map_err(|_| bad(ln, format!("{key} is not a count")))
        };
        let (ln, v) = single("provider.sentence")?;
        let sentence = parse_sentence_config(v).ok_or_else(|| bad(ln, format!("bad sentence source {v:?}")))?;
        let (ln, v) = single("provider.word")?;
        let word = parse_word_config(v).ok_or_else(|| bad(ln, format!("bad word source {v:?}")))?;
        let (ln, v) = single("provider.dims")?;
        let (sentence_dim, word_dim) = v
            .split_once(' ')
            .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
            .ok_or_else(|| bad(ln, format!("bad provider dims {v:?}")))?;
        let max_len = number("text.max_len")?;
        let names = |key: &str| header.iter().filter(|(_, k, _)| *k == key).map(|(_, _, v)| v.to_string()).collect::<Vec<_>>();
        let labels = LabelVocab::new(names("label.emotion"), names("label.causality"))?;
        let config = header
            .iter()
            .filter_map(|(_, k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.to_string())))
            .collect();
        let mix_layers = if header.iter().any(|(_, k, _)| *k == "mix.layers") {
            Some(number("mix.layers")?)
        } else {
            None
        };
        let doc_count = number("tfidf.docs")?;
        let term_count = number("tfidf.terms")?;

        let mut params = GcnParams::zeros(dims[0], &dims[1..dims.len() - 1])?;
        params.seed = seed;
        let mut next = |name: &str| -> Result<(usize, &str)> {
            let ln = pos;
            let line = lines.get(pos).ok_or_else(|| Error::parse(context, ln + 1, format!("truncated before {name}")))?;
            pos += 1;
            Ok((ln, *line))
        };
        for (name, m) in params.tensors_mut() {
            read_tensor(&mut next, context, &name, m.as_mut_slice())?;
        }
        let mix = match mix_layers {
            Some(k) => {
                let mut s_raw = vec![0.0; k];
                let mut gamma = [0.0];
                read_tensor(&mut next, context, "mix.s", &mut s_raw)?;
                read_tensor(&mut next, context, "mix.gamma", &mut gamma)?;
                Some(ElmoMix::new(s_raw, gamma[0])?)
            }
            None => None,
        };
        let (ln, marker) = next("tfidf")?;
        if marker != "tfidf" {
            return Err(bad(ln, format!("expected tfidf section, found {marker:?}")));
        }
        let mut doc_freq = BTreeMap::new();
        for _ in 0..term_count {
            let (ln, line) = next("tfidf term")?;
            let (term, df) = line
                .split_once('\t')
                .and_then(|(t, d)| Some((t.to_string(), d.parse::<usize>().ok()?)))
                .ok_or_else(|| bad(ln, format!("bad tfidf entry {line:?}")))?;
            doc_freq.insert(term, df);
        }
        if pos != lines.len() {
            return Err(bad(pos, "trailing content".into()));
        }
        Ok(Self {
            params,
            variant,
            provider: ProviderConfig {
                sentence,
                word,
                sentence_dim,
                word_dim,
            },
            mix,
            max_len,
            labels,
            tfidf: TfIdfIndex::from_doc_freq(doc_count, doc_freq)?,
            config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_dataset, SynthConfig};
    use crate::textproc::{build_tfidf_index, StubTagger};

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn two_class_confusion_fixture() {
        let m = TaskMetrics::from_confusion(names(2), vec![vec![1, 1], vec![0, 2]]).unwrap();
        let c0 = &m.per_class[0];
        let c1 = &m.per_class[1];
        assert!((c0.precision - 1.0).abs() < 1e-12);
        assert!((c0.recall - 0.5).abs() < 1e-12);
        assert!((c0.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((c1.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((c1.recall - 1.0).abs() < 1e-12);
        assert!((c1.f1 - 0.8).abs() < 1e-12);
        assert!((m.macro_avg.f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        assert!((m.macro_avg.f1 - 0.7333).abs() < 1e-4);
        assert!((m.weighted.recall - m.accuracy).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_empty_classes() {
        let pairs: Vec<(usize, usize)> = (0..10).map(|i| (i % 3, i % 3)).collect();
        let m = TaskMetrics::from_pairs(names(4), &pairs).unwrap();
        for c in &m.per_class[..3] {
            assert_eq!((c.precision, c.recall, c.f1), (1.0, 1.0, 1.0));
        }
        assert_eq!(m.per_class[3], ClassScores { precision: 0.0, recall: 0.0, f1: 0.0, support: 0 });
        assert_eq!(m.weighted.f1, 1.0);
        assert!(TaskMetrics::from_pairs(names(2), &[]).is_err());
    }

    #[test]
    fn metrics_report_has_both_averages() {
        let m = Metrics {
            emotion: Some(TaskMetrics::from_confusion(names(2), vec![vec![1, 1], vec![0, 2]]).unwrap()),
            causality: None,
        };
        let text = m.to_text();
        assert!(text.contains("macro avg"));
        assert!(text.contains("weighted avg"));
        let json = m.to_json();
        assert_eq!(json["emotion"]["classes"]["c1"]["support"], 2);
        assert!(json.get("causality").is_none());
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut opt = OptimizerState::new(Optimizer::adam(), 0.1, &[3]);
        let mut p = vec![1.0, -2.0, 3.0];
        opt.step(vec![&mut p], vec![&[0.0, 0.0, 0.0]]);
        assert_eq!(p, [1.0, -2.0, 3.0]);
        let mut fresh = OptimizerState::new(Optimizer::adam(), 0.1, &[3]);
        fresh.step(vec![&mut p], vec![&[1.0, -1.0, 0.0]]);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 1.9).abs() < 1e-6 && p[2] == 3.0);
    }

    fn small_featurizer(convs: &[Conversation], variant: GraphVariant) -> Featurizer {
        Featurizer {
            provider: EmbeddingProvider::hash(0, 8, 4),
            tfidf: build_tfidf_index(convs).unwrap(),
            tagger: Box::new(StubTagger),
            max_len: 30,
            variant,
        }
    }

    fn small_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            lr: 0.01,
            hidden: vec![6, 6],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_return_initialization() {
        let convs = synth_dataset(&SynthConfig { n_conversations: 6, ..SynthConfig::default() }).unwrap();
        let f = small_featurizer(&convs, GraphVariant::NodePlusEdge);
        let ex = f.examples(&convs).unwrap();
        let cfg = small_config(0);
        let out = train(&ex, f.input_dim(), &cfg, None).unwrap();
        assert_eq!(out.params, GcnParams::new(f.input_dim(), &cfg.hidden, cfg.seed).unwrap());
        assert!(out.history.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_history_sized() {
        let convs = synth_dataset(&SynthConfig { n_conversations: 10, ..SynthConfig::default() }).unwrap();
        let f = small_featurizer(&convs, GraphVariant::NodePlusEdge);
        let ex = f.examples(&convs).unwrap();
        let cfg = small_config(3);
        let a = train(&ex, f.input_dim(), &cfg, None).unwrap();
        let b = train(&ex, f.input_dim(), &cfg, None).unwrap();
        assert_eq!(a.history.len(), 3 * 3);
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn zero_model_predicts_first_classes() {
        let convs = synth_dataset(&SynthConfig { n_conversations: 2, ..SynthConfig::default() }).unwrap();
        let f = small_featurizer(&convs, GraphVariant::SentencePlusNode);
        let params = GcnParams::zeros(f.input_dim(), &[5]).unwrap();
        let cls = classify_graph(&params, &f.graph(&convs[0]).unwrap()).unwrap();
        let p = prediction_from(&convs[0].id, &cls, &LabelVocab::default());
        assert_eq!((p.emotion.id, p.causality.id), (0, 0));
        assert!((p.emotion.probability - 1.0 / 6.0).abs() < 1e-15);
        assert!((p.causality.probability - 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let convs = synth_dataset(&SynthConfig { n_conversations: 4, ..SynthConfig::default() }).unwrap();
        let model = Model {
            params: GcnParams::new(5, &[3, 2], 4).unwrap(),
            variant: GraphVariant::NodePlusEdge,
            provider: ProviderConfig {
                sentence: SentenceSourceConfig::BiLm {
                    model: PathBuf::from("models/a b.bilm"),
                    trainable: true,
                },
                word: WordSourceConfig::HashRandom { seed: 9 },
                sentence_dim: 4,
                word_dim: 2,
            },
            mix: Some(ElmoMix::new(vec![0.1, -0.3], 1.7).unwrap()),
            max_len: 30,
            labels: LabelVocab::default(),
            tfidf: build_tfidf_index(&convs).unwrap(),
            config: vec![("epochs".into(), "200".into()), ("lr".into(), "0.001".into())],
        };
        let text = model.to_checkpoint();
        assert!(text.starts_with("ECRC-GCN v1\narch dims=5,3,2,18 variant=graph-node-edge seed=4\n"));
        let back = Model::from_checkpoint(&text, "ckpt").unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.provider, model.provider);
        assert_eq!(back.mix, model.mix);
        assert_eq!(back.labels, model.labels);
        assert_eq!(back.config, model.config);
        assert_eq!(back.tfidf.doc_freq(), model.tfidf.doc_freq());
        assert_eq!(back.to_checkpoint(), text);

        let truncated: String = text.lines().take(12).collect::<Vec<_>>().join("\n");
        assert!(Model::from_checkpoint(&truncated, "ckpt").is_err());
        assert!(Model::from_checkpoint("ECRC-GCN v2\n", "ckpt").is_err());
    }
}
