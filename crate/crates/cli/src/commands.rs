use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use ecrc::bilm::{bilm_train, BiLm, BiLmTrainConfig, ElmoMix};
use ecrc::corpus::{parse_corpus, parse_corpus_str, serialize_corpus, split_dataset, synth_dataset, Conversation, LabelVocab, SynthConfig};
use ecrc::embeddings::{
    load_embedding_file, EmbeddingKind, EmbeddingProvider, EmbeddingTable, ProviderConfig, SentenceSource, SentenceSourceConfig, WordSource,
    WordSourceConfig,
};
use ecrc::gcnnet::gradient_suite;
use ecrc::graphbuild::GraphVariant;
use ecrc::textproc::{build_tfidf_index, split_tokens, tag_utterance, tokenize, PosTagger, SidecarTagger, StubTagger, TfIdfIndex};
use ecrc::training::{self, evaluate, loss_history_text, Featurizer, Metrics, Model, TrainConfig};

use crate::config::RunConfig;
use crate::Invalid;

const DEFAULT_SENTENCE_DIM: usize = 1024;
const DEFAULT_WORD_DIM: usize = 200;

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| ecrc::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn labels(cfg: &RunConfig) -> Result<LabelVocab> {
    Ok(match cfg.path("labels") {
        Some(p) => LabelVocab::load(&p)?,
        None => LabelVocab::default(),
    })
}

fn tagger(cfg: &RunConfig) -> Result<Box<dyn PosTagger>> {
    Ok(match cfg.path("pos_tags") {
        Some(p) => Box::new(SidecarTagger::load(&p)?),
        None => Box::new(StubTagger),
    })
}

fn variant(cfg: &RunConfig) -> Result<GraphVariant> {
    Ok(cfg.raw("variant").parse()?)
}

fn load_corpus(path: &Path, vocab: &LabelVocab) -> Result<Vec<Conversation>> {
    let convs = parse_corpus(path, vocab)?;
    if convs.is_empty() {
        return Err(Invalid(format!("{} holds no conversations", path.display())).into());
    }
    Ok(convs)
}

fn dim_setting(cfg: &RunConfig, key: &str) -> Result<Option<usize>> {
    match cfg.raw(key) {
        "auto" => Ok(None),
        _ => Ok(Some(cfg.get(key)?)),
    }
}

fn required_path(cfg: &RunConfig, key: &str, why: &str) -> Result<PathBuf> {
    cfg.path(key).ok_or_else(|| Invalid(format!("{key} must be set when {why}")).into())
}

/// Resolves the configured embedding sources. Dimensions set to `auto`
/// follow the source: table and biLM widths, or the defaults for hashing.
fn provider(cfg: &RunConfig) -> Result<(ProviderConfig, EmbeddingProvider)> {
    let hash_seed: u64 = cfg.get("hash_seed")?;
    let sentence_dim = dim_setting(cfg, "sentence_dim")?;
    let word_dim = dim_setting(cfg, "word_dim")?;
    let (sentence_cfg, sentence, natural_sdim) = match cfg.raw("sentence_source") {
        "hash" => (
            SentenceSourceConfig::HashRandom { seed: hash_seed },
            SentenceSource::HashRandom { seed: hash_seed },
            DEFAULT_SENTENCE_DIM,
        ),
        "file" => {
            let path = required_path(cfg, "sentence_file", "sentence_source = file")?;
            let table = load_embedding_file(&path)?;
            let dim = table.dim();
            (SentenceSourceConfig::File(path), SentenceSource::File(table), dim)
        }
        "bilm" => {
            let path = required_path(cfg, "bilm_model", "sentence_source = bilm")?;
            let trainable: bool = cfg.get("bilm_trainable")?;
            let model = BiLm::load(&path)?;
            let dim = model.representation_dim();
            let mix = ElmoMix::uniform(model.params.layers());
            (
                SentenceSourceConfig::BiLm { model: path, trainable },
                SentenceSource::BiLm {
                    model: Arc::new(model),
                    mix,
                    trainable,
                },
                dim,
            )
        }
        other => return Err(Invalid(format!("sentence_source must be hash, file, or bilm, got {other:?}")).into()),
    };
    let (word_cfg, word, natural_wdim) = match cfg.raw("word_source") {
        "hash" => (WordSourceConfig::HashRandom { seed: hash_seed }, WordSource::HashRandom { seed: hash_seed }, DEFAULT_WORD_DIM),
        "file" => {
            let path = required_path(cfg, "word_file", "word_source = file")?;
            let table = load_embedding_file(&path)?;
            let dim = table.dim();
            (WordSourceConfig::File(path), WordSource::File(table), dim)
        }
        other => return Err(Invalid(format!("word_source must be hash or file, got {other:?}")).into()),
    };
    let sdim = sentence_dim.unwrap_or(natural_sdim);
    let wdim = word_dim.unwrap_or(natural_wdim);
    let provider = EmbeddingProvider::new(sentence, word, sdim, wdim)?;
    Ok((
        ProviderConfig {
            sentence: sentence_cfg,
            word: word_cfg,
            sentence_dim: sdim,
            word_dim: wdim,
        },
        provider,
    ))
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let tc = TrainConfig {
        epochs: cfg.get("epochs")?,
        batch_size: cfg.get("batch_size")?,
        lr: cfg.get("lr")?,
        dropout: cfg.get("dropout")?,
        optimizer: cfg.raw("optimizer").parse()?,
        seed: cfg.get("seed")?,
        hidden: cfg.list("hidden")?,
    };
    tc.validate()?;
    Ok(tc)
}

fn split_ratio(cfg: &RunConfig) -> Result<(u32, u32)> {
    let raw = cfg.raw("split");
    raw.split_once(':')
        .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
        .ok_or_else(|| Invalid(format!("split must look like 8:2, got {raw:?}")).into())
}

pub fn ingest(cfg: &RunConfig, data: &Path) -> Result<()> {
    let vocab = labels(cfg)?;
    let convs = load_corpus(data, &vocab)?;
    let lengths: Vec<usize> = convs.iter().map(Conversation::len).collect();
    let utterances: usize = lengths.iter().sum();
    let tokens: usize = convs
        .iter()
        .flat_map(|c| &c.utterances)
        .map(|u| split_tokens(&u.text).len())
        .sum();
    println!("conversations {}", convs.len());
    println!(
        "utterances {utterances} (min {} max {} per conversation)",
        lengths.iter().min().unwrap_or(&0),
        lengths.iter().max().unwrap_or(&0)
    );
    println!("tokens per utterance {:.2}", tokens as f64 / utterances as f64);
    let mut emotion = vec![0usize; vocab.emotion_names().len()];
    let mut causality = vec![0usize; vocab.causality_names().len()];
    for c in &convs {
        if let Some(e) = c.emotion {
            emotion[e] += 1;
        }
        if let Some(k) = c.causality {
            causality[k] += 1;
        }
    }
    println!("emotion labels {}", emotion.iter().sum::<usize>());
    for (name, n) in vocab.emotion_names().iter().zip(&emotion) {
        println!("  {name:<44} {n}");
    }
    println!("causality labels {}", causality.iter().sum::<usize>());
    for (name, n) in vocab.causality_names().iter().zip(&causality) {
        println!("  {name:<44} {n}");
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let convs = synth_dataset(&SynthConfig {
        n_conversations: cfg.get("synth_conversations")?,
        n_utterances: cfg.get("synth_utterances")?,
        seed: cfg.get("seed")?,
        ..SynthConfig::default()
    })?;
    let text = cfg.header("synth") + &serialize_corpus(&convs, &labels(cfg)?);
    write_file(out, &text)?;
    println!("wrote {} conversations to {}", convs.len(), out.display());
    Ok(())
}

/// Table text with the run header placed after the format line.
fn table_with_header(table: &EmbeddingTable, header: &str) -> String {
    let text = table.to_text();
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    format!("{first}\n{header}{rest}")
}

pub fn embed(cfg: &RunConfig, data: &Path, train_bilm: Option<&Path>, sentence_out: Option<&Path>, word_out: Option<&Path>) -> Result<()> {
    if train_bilm.is_none() && sentence_out.is_none() && word_out.is_none() {
        return Err(Invalid("embed needs at least one of --train-bilm, --sentence-out, --word-out".into()).into());
    }
    let vocab = labels(cfg)?;
    let convs = load_corpus(data, &vocab)?;
    let max_len: usize = cfg.get("max_len")?;
    let mut cfg = cfg.clone();
    if let Some(out) = train_bilm {
        let sequences: Vec<Vec<String>> = convs
            .iter()
            .flat_map(|c| &c.utterances)
            .map(|u| tokenize(&u.text, max_len).map(|t| t.tokens))
            .collect::<ecrc::Result<_>>()?;
        let dim: usize = cfg.get("bilm_dim")?;
        let model = bilm_train(
            &sequences,
            &BiLmTrainConfig {
                layers: cfg.get("bilm_layers")?,
                embed_dim: dim,
                hidden_dim: dim,
                lr: cfg.get("bilm_lr")?,
                steps: cfg.get("bilm_steps")?,
                seed: cfg.get("seed")?,
                ..BiLmTrainConfig::default()
            },
        )?;
        model.save(out)?;
        let encoded: Vec<Vec<usize>> = sequences.iter().map(|s| model.encode(s).0).collect();
        println!(
            "trained bilm: vocab {} perplexity {:.4}, saved to {}",
            model.vocab().len(),
            model.perplexity(&encoded)?,
            out.display()
        );
        if cfg.raw("bilm_model").is_empty() {
            cfg.set("bilm_model", &out.display().to_string())?;
        }
    }
    if sentence_out.is_none() && word_out.is_none() {
        return Ok(());
    }
    let (_, provider) = provider(&cfg)?;
    let header = cfg.header("embed");
    if let Some(out) = sentence_out {
        let tagger = tagger(&cfg)?;
        let mut table = EmbeddingTable::new(EmbeddingKind::Sentence, provider.sentence_dim())?;
        for c in &convs {
            for u in &c.utterances {
                let key = c.utterance_key(u.index);
                let tu = tag_utterance(&u.text, &key, max_len, tagger.as_ref())?;
                table.insert(key, provider.sentence_vector(&c.id, u.index, &tu)?)?;
            }
        }
        write_file(out, &table_with_header(&table, &header))?;
        println!("wrote {} sentence vectors to {}", table.len(), out.display());
    }
    if let Some(out) = word_out {
        let terms: BTreeSet<String> = convs.iter().flat_map(|c| &c.utterances).flat_map(|u| split_tokens(&u.text)).collect();
        let mut table = EmbeddingTable::new(EmbeddingKind::Word, provider.word_dim())?;
        provider.reset_oov();
        for term in terms {
            let before = provider.oov_count();
            let v = provider.word_vector(&term);
            if provider.oov_count() == before {
                table.insert(term, v)?;
            }
        }
        write_file(out, &table_with_header(&table, &header))?;
        println!("wrote {} word vectors to {} ({} out of vocabulary)", table.len(), out.display(), provider.oov_count());
    }
    Ok(())
}

fn corpus_featurizer(cfg: &RunConfig, tfidf: TfIdfIndex) -> Result<Featurizer> {
    let (_, provider) = provider(cfg)?;
    Ok(Featurizer {
        provider,
        tfidf,
        tagger: tagger(cfg)?,
        max_len: cfg.get("max_len")?,
        variant: variant(cfg)?,
    })
}

pub fn build_graphs(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let convs = load_corpus(data, &labels(cfg)?)?;
    let featurizer = corpus_featurizer(cfg, build_tfidf_index(&convs)?)?;
    let graphs = featurizer.graphs(&convs)?;
    let mut text = cfg.header("build-graphs");
    for g in &graphs {
        text.push('\n');
        text.push_str(&g.dump());
    }
    write_file(out, &text)?;
    println!("wrote {} graphs to {}", graphs.len(), out.display());
    Ok(())
}

fn summary_line(name: &str, m: &Metrics) -> String {
    let mut out = format!("{name:<5}");
    for (task, t) in [("emotion", &m.emotion), ("causality", &m.causality)] {
        if let Some(t) = t {
            let _ = write!(out, "  {task} acc {:.4} weighted-f1 {:.4} macro-f1 {:.4}", t.accuracy, t.weighted.f1, t.macro_avg.f1);
        }
    }
    out
}

pub fn train(cfg: &RunConfig, data: &Path, checkpoint: &Path, history: Option<PathBuf>, test_out: Option<&Path>) -> Result<()> {
    let vocab = labels(cfg)?;
    let convs = load_corpus(data, &vocab)?;
    let tc = train_config(cfg)?;
    let split = split_dataset(&convs, split_ratio(cfg)?, tc.seed)?;
    if split.train.is_empty() {
        return Err(Invalid("split leaves no training conversations".into()).into());
    }
    let (provider_cfg, provider) = provider(cfg)?;
    let featurizer = Featurizer {
        provider,
        tfidf: build_tfidf_index(&split.train)?,
        tagger: tagger(cfg)?,
        max_len: cfg.get("max_len")?,
        variant: variant(cfg)?,
    };
    let examples = featurizer.examples(&split.train)?;
    let outcome = training::train(&examples, featurizer.input_dim(), &tc, featurizer.provider.mix().cloned())?;
    let model = Model {
        params: outcome.params.clone(),
        variant: featurizer.variant,
        provider: provider_cfg,
        mix: outcome.mix.clone(),
        max_len: featurizer.max_len,
        labels: vocab.clone(),
        tfidf: TfIdfIndex::from_doc_freq(featurizer.tfidf.doc_count(), featurizer.tfidf.doc_freq().clone())?,
        config: cfg.artifact_entries(),
    };
    model.save(checkpoint)?;
    let history = history.unwrap_or_else(|| PathBuf::from(format!("{}.loss", checkpoint.display())));
    write_file(&history, &(cfg.header("train") + &loss_history_text(&outcome.history)))?;
    let epochs = outcome.epoch_losses();
    if let (Some(first), Some(last)) = (epochs.first(), epochs.last()) {
        println!("epoch loss {first:.4} -> {last:.4} over {} epochs", epochs.len());
    }
    println!("{}", summary_line("train", &evaluate(&model.params, &examples, model.mix.as_ref(), &vocab)?));
    if !split.test.is_empty() {
        let test = featurizer.examples(&split.test)?;
        println!("{}", summary_line("test", &evaluate(&model.params, &test, model.mix.as_ref(), &vocab)?));
    }
    if let Some(out) = test_out {
        write_file(out, &(cfg.header("train") + &serialize_corpus(&split.test, &vocab)))?;
    }
    println!("checkpoint {} ({} train, {} test conversations)", checkpoint.display(), split.train.len(), split.test.len());
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, json: Option<&Path>) -> Result<()> {
    let model = Model::load(checkpoint)?;
    let convs = load_corpus(data, &model.labels)?;
    let featurizer = model.featurizer(tagger(cfg)?)?;
    let examples = featurizer.examples(&convs)?;
    let metrics = evaluate(&model.params, &examples, model.mix.as_ref(), &model.labels)?;
    print!("{}", cfg.header("eval"));
    println!("# checkpoint = {}", checkpoint.display());
    print!("{}", metrics.to_text());
    if let Some(path) = json {
        let mut value = metrics.to_json();
        let config: serde_json::Map<String, serde_json::Value> =
            cfg.artifact_entries().into_iter().map(|(k, v)| (k, serde_json::Value::String(v))).collect();
        value["config"] = serde_json::Value::Object(config);
        write_file(path, &(serde_json::to_string_pretty(&value)? + "\n"))?;
    }
    Ok(())
}

pub fn predict(cfg: &RunConfig, checkpoint: &Path, input: Option<&Path>) -> Result<()> {
    let model = Model::load(checkpoint)?;
    let (text, context) = match input {
        Some(p) if p != Path::new("-") => (
            fs::read_to_string(p).map_err(|e| ecrc::Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?,
            p.display().to_string(),
        ),
        _ => {
            let mut buf = String::new();
            std::io::stdin().read_to_string(&mut buf).context("reading standard input")?;
            (buf, "<stdin>".to_string())
        }
    };
    let convs = parse_corpus_str(&text, &model.labels, &context)?;
    if convs.is_empty() {
        return Err(Invalid("no conversation to predict".into()).into());
    }
    let featurizer = model.featurizer(tagger(cfg)?)?;
    for conv in &convs {
        println!("{}", serde_json::to_string(&model.predict(&featurizer, conv)?)?);
    }
    Ok(())
}

pub fn inspect_graph(cfg: &RunConfig, data: &Path, id: &str, checkpoint: Option<&Path>) -> Result<()> {
    let (featurizer, vocab) = match checkpoint {
        Some(p) => {
            let model = Model::load(p)?;
            (model.featurizer(tagger(cfg)?)?, model.labels)
        }
        None => {
            let vocab = labels(cfg)?;
            let convs = load_corpus(data, &vocab)?;
            (corpus_featurizer(cfg, build_tfidf_index(&convs)?)?, vocab)
        }
    };
    let convs = load_corpus(data, &vocab)?;
    let conv = convs
        .iter()
        .find(|c| c.id == id)
        .ok_or_else(|| Invalid(format!("no conversation {id:?} in {}", data.display())))?;
    print!("{}", featurizer.graph(conv)?.dump());
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, dims: &str, step: f64, tol: f64) -> Result<()> {
    let dims: Vec<usize> = dims
        .split(',')
        .map(|d| d.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| Invalid(format!("--dims must be comma-separated sizes, got {dims:?}")))?;
    let seed: u64 = cfg.get("seed")?;
    let reports = gradient_suite(seed, &dims, step, tol)?;
    let mut worst: f64 = 0.0;
    for (name, report) in &reports {
        println!("case {name}: {report}");
        worst = worst.max(report.max_rel_err);
    }
    if reports.iter().all(|(_, r)| r.passed()) {
        println!("PASS max_rel_err < {tol:e}");
        Ok(())
    } else {
        println!("FAIL max_rel_err {worst:.3e} >= {tol:e}");
        Err(anyhow::anyhow!("gradient check failed"))
    }
}
