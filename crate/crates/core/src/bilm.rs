//! Small bidirectional LSTM language model with ELMo-style layer mixing.
//!
//! Two stacks of LSTM layers read a token sequence left-to-right and
//! right-to-left. They share the token embedding table and the output softmax
//! and differ only in their recurrent weights. Position `k` is predicted from
//! the forward state after `t_{k-1}` and from the backward state after
//! `t_{k+1}`; the state before the first consumed token is zero.
//!
//! Each position exposes `L + 1` representations of width `2·d`: the token
//! embedding duplicated side by side, then the concatenated forward and
//! backward hidden states of every layer. [`elmo_mix`] collapses them with
//! softmax-normalized layer weights and a scale.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{axpy, log_sum_exp, softmax, Matrix};

pub const CHECKPOINT_MAGIC: &str = "ECRC-BILM v1";

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// input → gates, `in × 4d`, gate blocks ordered input, forget, output, candidate.
    pub w_input: Matrix,
    /// hidden → gates, `d × 4d`.
    pub w_hidden: Matrix,
    pub bias: Vec<f64>,
}

impl LstmLayer {
    fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_input: Matrix::zeros(input, 4 * hidden),
            w_hidden: Matrix::zeros(hidden, 4 * hidden),
            bias: vec![0.0; 4 * hidden],
        }
    }

    fn hidden(&self) -> usize {
        self.w_hidden.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLmParams {
    pub token_embed: Matrix,
    pub forward_layers: Vec<LstmLayer>,
    pub backward_layers: Vec<LstmLayer>,
    /// Output projection shared by both directions, `d × |V|`.
    pub softmax_weight: Matrix,
    pub softmax_bias: Vec<f64>,
}

impl BiLmParams {
    /// All-zero parameters. `dim` is both the embedding and hidden width.
    pub fn zeros(vocab: usize, layers: usize, dim: usize) -> Self {
        Self {
            token_embed: Matrix::zeros(vocab, dim),
            forward_layers: (0..layers).map(|_| LstmLayer::zeros(dim, dim)).collect(),
            backward_layers: (0..layers).map(|_| LstmLayer::zeros(dim, dim)).collect(),
            softmax_weight: Matrix::zeros(dim, vocab),
            softmax_bias: vec![0.0; vocab],
        }
    }

    pub fn random(vocab: usize, layers: usize, dim: usize, scale: f64, seed: u64) -> Self {
        let mut p = Self::zeros(vocab, layers, dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, values) in p.tensors_mut() {
            for v in values.iter_mut() {
                *v = rand::Rng::gen_range(&mut rng, -scale..scale);
            }
        }
        p
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embed.rows()
    }

    pub fn dim(&self) -> usize {
        self.token_embed.cols()
    }

    pub fn layers(&self) -> usize {
        self.forward_layers.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.vocab_size(), self.layers(), self.dim())
    }

    /// Every tensor in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![("token_embed".into(), self.token_embed.as_slice())];
        for (dir, layers) in [("fwd", &self.forward_layers), ("bwd", &self.backward_layers)] {
            for (j, l) in layers.iter().enumerate() {
                out.push((format!("{dir}{j}.w_input"), l.w_input.as_slice()));
                out.push((format!("{dir}{j}.w_hidden"), l.w_hidden.as_slice()));
                out.push((format!("{dir}{j}.bias"), &l.bias));
            }
        }
        out.push(("softmax.weight".into(), self.softmax_weight.as_slice()));
        out.push(("softmax.bias".into(), &self.softmax_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> =
            vec![("token_embed".into(), self.token_embed.as_mut_slice())];
        for (dir, layers) in [("fwd", &mut self.forward_layers), ("bwd", &mut self.backward_layers)] {
            for (j, l) in layers.iter_mut().enumerate() {
                out.push((format!("{dir}{j}.w_input"), l.w_input.as_mut_slice()));
                out.push((format!("{dir}{j}.w_hidden"), l.w_hidden.as_mut_slice()));
                out.push((format!("{dir}{j}.bias"), &mut l.bias));
            }
        }
        out.push(("softmax.weight".into(), self.softmax_weight.as_mut_slice()));
        out.push(("softmax.bias".into(), &mut self.softmax_bias));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        let vocab = self.vocab_size();
        match ids.iter().find(|&&id| id >= vocab) {
            Some(&id) => Err(Error::TokenOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone)]
struct StepCache {
    input: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gate_i: Vec<f64>,
    gate_f: Vec<f64>,
    gate_o: Vec<f64>,
    gate_g: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

/// Runs a layer stack over `inputs` in the given order. Returns caches indexed
/// `[layer][step]`.
fn run_stack(layers: &[LstmLayer], inputs: &[Vec<f64>]) -> Vec<Vec<StepCache>> {
    let mut out = Vec::with_capacity(layers.len());
    let mut current: Vec<Vec<f64>> = inputs.to_vec();
    for layer in layers {
        let d = layer.hidden();
        let mut h = vec![0.0; d];
        let mut c = vec![0.0; d];
        let mut caches = Vec::with_capacity(current.len());
        for x in &current {
            let mut z = layer.bias.clone();
            for (k, &xv) in x.iter().enumerate() {
                if xv != 0.0 {
                    axpy(xv, layer.w_input.row(k), &mut z);
                }
            }
            for (k, &hv) in h.iter().enumerate() {
                if hv != 0.0 {
                    axpy(hv, layer.w_hidden.row(k), &mut z);
                }
            }
            let gate_i: Vec<f64> = z[..d].iter().map(|&v| sigmoid(v)).collect();
            let gate_f: Vec<f64> = z[d..2 * d].iter().map(|&v| sigmoid(v)).collect();
            let gate_o: Vec<f64> = z[2 * d..3 * d].iter().map(|&v| sigmoid(v)).collect();
            let gate_g: Vec<f64> = z[3 * d..].iter().map(|&v| v.tanh()).collect();
            let c_new: Vec<f64> = (0..d).map(|u| gate_f[u] * c[u] + gate_i[u] * gate_g[u]).collect();
            let tanh_c: Vec<f64> = c_new.iter().map(|v| v.tanh()).collect();
            let h_new: Vec<f64> = (0..d).map(|u| gate_o[u] * tanh_c[u]).collect();
            caches.push(StepCache {
                input: x.clone(),
                h_prev: h,
                c_prev: c,
                gate_i,
                gate_f,
                gate_o,
                gate_g,
                tanh_c,
                h: h_new.clone(),
            });
            h = h_new;
            c = c_new;
        }
        current = caches.iter().map(|s| s.h.clone()).collect();
        out.push(caches);
    }
    out
}

/// Backpropagates through one layer over time. `dh_out[t]` is the gradient
/// flowing into the layer output at step `t`; returns the gradient at each
/// step's input.
fn backprop_layer(layer: &LstmLayer, caches: &[StepCache], dh_out: &[Vec<f64>], grad: &mut LstmLayer) -> Vec<Vec<f64>> {
    let d = layer.hidden();
    let mut d_inputs = vec![Vec::new(); caches.len()];
    let mut dh_next = vec![0.0; d];
    let mut dc_next = vec![0.0; d];
    for t in (0..caches.len()).rev() {
        let s = &caches[t];
        let mut dz = vec![0.0; 4 * d];
        let mut dc_prev = vec![0.0; d];
        for u in 0..d {
            let dh = dh_out[t][u] + dh_next[u];
            let d_o = dh * s.tanh_c[u];
            let dc = dh * s.gate_o[u] * (1.0 - s.tanh_c[u] * s.tanh_c[u]) + dc_next[u];
            let d_i = dc * s.gate_g[u];
            let d_g = dc * s.gate_i[u];
            let d_f = dc * s.c_prev[u];
            dc_prev[u] = dc * s.gate_f[u];
            dz[u] = d_i * s.gate_i[u] * (1.0 - s.gate_i[u]);
            dz[d + u] = d_f * s.gate_f[u] * (1.0 - s.gate_f[u]);
            dz[2 * d + u] = d_o * s.gate_o[u] * (1.0 - s.gate_o[u]);
            dz[3 * d + u] = d_g * (1.0 - s.gate_g[u] * s.gate_g[u]);
        }
        for (k, &xv) in s.input.iter().enumerate() {
            axpy(xv, &dz, grad.w_input.row_mut(k));
        }
        for (k, &hv) in s.h_prev.iter().enumerate() {
            axpy(hv, &dz, grad.w_hidden.row_mut(k));
        }
        axpy(1.0, &dz, &mut grad.bias);
        d_inputs[t] = (0..layer.w_input.rows()).map(|k| crate::tensor::dot(layer.w_input.row(k), &dz)).collect();
        dh_next = (0..d).map(|k| crate::tensor::dot(layer.w_hidden.row(k), &dz)).collect();
        dc_next = dc_prev;
    }
    d_inputs
}

fn embed(params: &BiLmParams, ids: &[usize]) -> Vec<Vec<f64>> {
    ids.iter().map(|&id| params.token_embed.row(id).to_vec()).collect()
}

fn context_logits(params: &BiLmParams, ctx: Option<&[f64]>) -> Vec<f64> {
    let mut logits = params.softmax_bias.clone();
    if let Some(h) = ctx {
        for (k, &hv) in h.iter().enumerate() {
            axpy(hv, params.softmax_weight.row(k), &mut logits);
        }
    }
    logits
}

/// Log-likelihood of one direction over `ids` in processing order, with the
/// gradient accumulated into `grad` when given.
fn direction_log_likelihood(
    params: &BiLmParams,
    layers: &[LstmLayer],
    ids: &[usize],
    mut grad: Option<(&mut BiLmParams, bool)>,
) -> f64 {
    let inputs = embed(params, ids);
    let caches = run_stack(layers, &inputs);
    let top = caches.last().expect("at least one layer");
    let d = params.dim();
    let mut ll = 0.0;
    let mut dh_top = vec![vec![0.0; d]; ids.len()];
    for (r, &target) in ids.iter().enumerate() {
        let ctx = (r > 0).then(|| top[r - 1].h.as_slice());
        let logits = context_logits(params, ctx);
        ll += logits[target] - log_sum_exp(&logits);
        if let Some((g, _)) = grad.as_mut() {
            let mut delta: Vec<f64> = softmax(&logits).into_iter().map(|p| -p).collect();
            delta[target] += 1.0;
            axpy(1.0, &delta, &mut g.softmax_bias);
            if let Some(h) = ctx {
                for (k, &hv) in h.iter().enumerate() {
                    axpy(hv, &delta, g.softmax_weight.row_mut(k));
                }
                for (k, dh) in dh_top[r - 1].iter_mut().enumerate() {
                    *dh += crate::tensor::dot(params.softmax_weight.row(k), &delta);
                }
            }
        }
    }
    if let Some((g, is_forward)) = grad {
        let mut upstream = dh_top;
        for j in (0..layers.len()).rev() {
            let layer_grad = if is_forward {
                &mut g.forward_layers[j]
            } else {
                &mut g.backward_layers[j]
            };
            upstream = backprop_layer(&layers[j], &caches[j], &upstream, layer_grad);
        }
        for (&id, d_in) in ids.iter().zip(&upstream) {
            axpy(1.0, d_in, g.token_embed.row_mut(id));
        }
    }
    ll
}

/// Sum over positions of the forward and backward log-probabilities, in nats.
pub fn bilm_log_likelihood(params: &BiLmParams, ids: &[usize]) -> Result<f64> {
    if ids.len() < 2 {
        return Err(Error::Config("sequence must contain at least two tokens".into()));
    }
    params.check_ids(ids)?;
    let reversed: Vec<usize> = ids.iter().rev().copied().collect();
    Ok(direction_log_likelihood(params, &params.forward_layers, ids, None)
        + direction_log_likelihood(params, &params.backward_layers, &reversed, None))
}

/// Log-likelihood and its gradient with respect to every parameter.
pub fn bilm_log_likelihood_grad(params: &BiLmParams, ids: &[usize]) -> Result<(f64, BiLmParams)> {
    if ids.len() < 2 {
        return Err(Error::Config("sequence must contain at least two tokens".into()));
    }
    params.check_ids(ids)?;
    let mut grad = params.zeros_like();
    let reversed: Vec<usize> = ids.iter().rev().copied().collect();
    let fwd = direction_log_likelihood(params, &params.forward_layers, ids, Some((&mut grad, true)));
    let bwd = direction_log_likelihood(params, &params.backward_layers, &reversed, Some((&mut grad, false)));
    Ok((fwd + bwd, grad))
}

/// Per-direction, per-position log-probabilities in natural position order.
pub fn position_log_probs(params: &BiLmParams, ids: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    params.check_ids(ids)?;
    let run = |layers: &[LstmLayer], seq: &[usize]| -> Vec<f64> {
        let caches = run_stack(layers, &embed(params, seq));
        let top = caches.last().expect("at least one layer");
        seq.iter()
            .enumerate()
            .map(|(r, &t)| {
                let logits = context_logits(params, (r > 0).then(|| top[r - 1].h.as_slice()));
                logits[t] - log_sum_exp(&logits)
            })
            .collect()
    };
    let fwd = run(&params.forward_layers, ids);
    let reversed: Vec<usize> = ids.iter().rev().copied().collect();
    let mut bwd = run(&params.backward_layers, &reversed);
    bwd.reverse();
    Ok((fwd, bwd))
}

/// `L + 1` vectors of width `2·d` per position.
pub fn representations(params: &BiLmParams, ids: &[usize]) -> Result<Vec<Vec<Vec<f64>>>> {
    params.check_ids(ids)?;
    let inputs = embed(params, ids);
    let fwd = run_stack(&params.forward_layers, &inputs);
    let rev_inputs: Vec<Vec<f64>> = inputs.iter().rev().cloned().collect();
    let bwd = run_stack(&params.backward_layers, &rev_inputs);
    let n = ids.len();
    Ok((0..n)
        .map(|k| {
            let mut reps = Vec::with_capacity(params.layers() + 1);
            let mut base = inputs[k].clone();
            base.extend_from_slice(&inputs[k]);
            reps.push(base);
            for j in 0..params.layers() {
                let mut h = fwd[j][k].h.clone();
                h.extend_from_slice(&bwd[j][n - 1 - k].h);
                reps.push(h);
            }
            reps
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElmoMix {
    pub s_raw: Vec<f64>,
    pub gamma: f64,
}

impl ElmoMix {
    pub fn uniform(layers: usize) -> Self {
        Self {
            s_raw: vec![0.0; layers + 1],
            gamma: 1.0,
        }
    }

    pub fn new(s_raw: Vec<f64>, gamma: f64) -> Result<Self> {
        if s_raw.is_empty() {
            return Err(Error::Config("mix needs at least one layer weight".into()));
        }
        if !(gamma > 0.0 && gamma.is_finite()) || s_raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("invalid mix gamma {gamma} or weights")));
        }
        Ok(Self { s_raw, gamma })
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.s_raw)
    }

    /// `γ Σ_j w_j h_j` for one position.
    pub fn apply(&self, layers: &[Vec<f64>]) -> Result<Vec<f64>> {
        if layers.len() != self.s_raw.len() {
            return Err(Error::Shape(format!(
                "{} layer representations for {} mix weights",
                layers.len(),
                self.s_raw.len()
            )));
        }
        let width = layers[0].len();
        if let Some(bad) = layers.iter().find(|l| l.len() != width) {
            return Err(Error::Shape(format!("layer widths {width} and {}", bad.len())));
        }
        let mut out = vec![0.0; width];
        for (w, layer) in self.weights().iter().zip(layers) {
            axpy(self.gamma * w, layer, &mut out);
        }
        Ok(out)
    }
}

pub fn elmo_mix(mix: &ElmoMix, reps: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    reps.iter().map(|r| mix.apply(r)).collect()
}

#[derive(Debug, Clone)]
pub struct BiLmTrainConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for BiLmTrainConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            embed_dim: 16,
            hidden_dim: 16,
            lr: 0.5,
            steps: 200,
            seed: 0,
            init_scale: 0.1,
        }
    }
}

/// A trained model with its token vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLm {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    pub params: BiLmParams,
}

impl BiLm {
    pub fn new(vocab: Vec<String>, params: BiLmParams) -> Result<Self> {
        if vocab.len() != params.vocab_size() {
            return Err(Error::Shape(format!(
                "{} vocabulary entries for {} embedding rows",
                vocab.len(),
                params.vocab_size()
            )));
        }
        let mut index = HashMap::new();
        for (i, t) in vocab.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) || index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("bad vocabulary token {t:?}")));
            }
        }
        Ok(Self { vocab, index, params })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Known token ids and the number of tokens skipped as unknown.
    pub fn encode(&self, tokens: &[String]) -> (Vec<usize>, usize) {
        let ids: Vec<usize> = tokens.iter().filter_map(|t| self.token_id(t)).collect();
        let oov = tokens.len() - ids.len();
        (ids, oov)
    }

    /// Output width of every representation layer.
    pub fn representation_dim(&self) -> usize {
        2 * self.params.dim()
    }

    /// Per-layer means over the known tokens of an utterance; zero vectors
    /// when none are known.
    pub fn layer_means(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>> {
        let (ids, _) = self.encode(tokens);
        let width = self.representation_dim();
        let mut means = vec![vec![0.0; width]; self.params.layers() + 1];
        if ids.is_empty() {
            return Ok(means);
        }
        let reps = representations(&self.params, &ids)?;
        for token_reps in &reps {
            for (m, r) in means.iter_mut().zip(token_reps) {
                axpy(1.0, r, m);
            }
        }
        let n = reps.len() as f64;
        for m in &mut means {
            m.iter_mut().for_each(|v| *v /= n);
        }
        Ok(means)
    }

    /// Mean of mixed per-token representations.
    pub fn sentence_vector(&self, tokens: &[String], mix: &ElmoMix) -> Result<Vec<f64>> {
        mix.apply(&self.layer_means(tokens)?)
    }

    /// Per-token perplexity averaged over both directions:
    /// `exp(-LL / (2·tokens))`.
    pub fn perplexity(&self, corpus: &[Vec<usize>]) -> Result<f64> {
        let mut ll = 0.0;
        let mut count = 0usize;
        for seq in corpus.iter().filter(|s| s.len() >= 2) {
            ll += bilm_log_likelihood(&self.params, seq)?;
            count += 2 * seq.len();
        }
        if count == 0 {
            return Err(Error::Empty("sequences of length two or more"));
        }
        Ok((-ll / count as f64).exp())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn to_checkpoint(&self) -> String {
        let p = &self.params;
        let mut out = format!(
            "{CHECKPOINT_MAGIC}\nlayers {} dim {} vocab {}\n",
            p.layers(),
            p.dim(),
            p.vocab_size()
        );
        out.push_str(&self.vocab.join(" "));
        out.push('\n');
        for (name, values) in p.tensors() {
            write_tensor(&mut out, &name, values);
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text, &path.display().to_string())
    }

    pub fn from_checkpoint(text: &str, context: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::parse(context, 0, format!("missing {what}")))
        };
        let (_, magic) = next("header")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::parse(context, 1, format!("bad header {magic:?}")));
        }
        let (ln, dims) = next("dims")?;
        let fields: Vec<&str> = dims.split_whitespace().collect();
        let parse_field = |key: &str, idx: usize| -> Result<usize> {
            match (fields.get(idx), fields.get(idx + 1)) {
                (Some(k), Some(v)) if *k == key => v
                    .parse()
                    .map_err(|_| Error::parse(context, ln + 1, format!("bad {key} value"))),
                _ => Err(Error::parse(context, ln + 1, format!("expected {key}"))),
            }
        };
        let (layers, dim, vocab_size) = (parse_field("layers", 0)?, parse_field("dim", 2)?, parse_field("vocab", 4)?);
        if layers == 0 || dim == 0 || vocab_size == 0 {
            return Err(Error::parse(context, ln + 1, "dimensions must be positive"));
        }
        let (ln, vocab_line) = next("vocabulary")?;
        let vocab: Vec<String> = vocab_line.split(' ').map(str::to_string).collect();
        if vocab.len() != vocab_size {
            return Err(Error::parse(context, ln + 1, "vocabulary size mismatch"));
        }
        let mut params = BiLmParams::zeros(vocab_size, layers, dim);
        for (name, slot) in params.tensors_mut() {
            read_tensor(&mut next, context, &name, slot)?;
        }
        BiLm::new(vocab, params)
    }
}

pub(crate) fn write_tensor(out: &mut String, name: &str, values: &[f64]) {
    let _ = writeln!(out, "tensor {name} {}", values.len());
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        let _ = write!(out, "{v:e}");
    }
    out.push('\n');
}

pub(crate) fn read_tensor<'a, F>(next: &mut F, context: &str, name: &str, slot: &mut [f64]) -> Result<()>
where
    F: FnMut(&str) -> Result<(usize, &'a str)>,
{
    let (ln, header) = next(name)?;
    let expected = format!("tensor {name} {}", slot.len());
    if header != expected {
        return Err(Error::parse(context, ln + 1, format!("expected {expected:?}, found {header:?}")));
    }
    let (ln, body) = next(name)?;
    let mut count = 0;
    for (slot_v, tok) in slot.iter_mut().zip(body.split(' ')) {
        let v: f64 = tok
            .parse()
            .map_err(|_| Error::parse(context, ln + 1, format!("bad number {tok:?}")))?;
        if !v.is_finite() {
            return Err(Error::parse(context, ln + 1, "non-finite value"));
        }
        *slot_v = v;
        count += 1;
    }
    if count != slot.len() || body.split(' ').count() != slot.len() {
        return Err(Error::parse(context, ln + 1, format!("tensor {name} has wrong length")));
    }
    Ok(())
}

/// Gradient ascent on the summed bidirectional log-likelihood, averaged per
/// predicted token, with a fixed step size. Vocabulary is the sorted set of
/// corpus tokens.
pub fn bilm_train(corpus: &[Vec<String>], cfg: &BiLmTrainConfig) -> Result<BiLm> {
    if cfg.embed_dim != cfg.hidden_dim {
        return Err(Error::Config(format!(
            "embedding width {} must equal hidden width {} so layer 0 can be duplicated",
            cfg.embed_dim, cfg.hidden_dim
        )));
    }
    if cfg.layers == 0 || cfg.hidden_dim == 0 || !cfg.lr.is_finite() || cfg.lr <= 0.0 {
        return Err(Error::Config("layers, hidden_dim and lr must be positive".into()));
    }
    let vocab: Vec<String> = corpus
        .iter()
        .flatten()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if vocab.is_empty() {
        return Err(Error::Empty("bilm training corpus"));
    }
    let params = BiLmParams::random(vocab.len(), cfg.layers, cfg.hidden_dim, cfg.init_scale, cfg.seed);
    let mut model = BiLm::new(vocab, params)?;
    let sequences: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| model.encode(s).0)
        .filter(|s| s.len() >= 2)
        .collect();
    if sequences.is_empty() {
        return Err(Error::Empty("sequences of length two or more"));
    }
    let predictions: usize = sequences.iter().map(|s| 2 * s.len()).sum();
    let scale = cfg.lr / predictions as f64;
    for step in 0..cfg.steps {
        let mut total = model.params.zeros_like();
        let mut ll = 0.0;
        for seq in &sequences {
            let (l, g) = bilm_log_likelihood_grad(&model.params, seq)?;
            ll += l;
            for ((_, acc), (_, gv)) in total.tensors_mut().into_iter().zip(g.tensors()) {
                axpy(1.0, gv, acc);
            }
        }
        if !ll.is_finite() {
            return Err(Error::Diverged(format!("bilm step {step}")));
        }
        for ((_, p), (_, g)) in model.params.tensors_mut().into_iter().zip(total.tensors()) {
            axpy(scale, g, p);
        }
        if !model.params.is_finite() {
            return Err(Error::Diverged(format!("bilm step {step}")));
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alternating(len: usize, copies: usize) -> Vec<Vec<String>> {
        let seq: Vec<String> = (0..len).map(|i| if i % 2 == 0 { "a" } else { "b" }.to_string()).collect();
        vec![seq; copies]
    }

    #[test]
    fn zero_params_give_uniform_likelihood() {
        let p = BiLmParams::zeros(2, 1, 3);
        let ll = bilm_log_likelihood(&p, &[0, 1, 0]).unwrap();
        assert!((ll - 6.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((ll + 4.1589).abs() < 1e-4);
    }

    #[test]
    fn likelihood_is_non_positive() {
        for seed in 0..5 {
            let p = BiLmParams::random(5, 2, 3, 1.0, seed);
            assert!(bilm_log_likelihood(&p, &[0, 4, 2, 2, 1]).unwrap() <= 0.0);
        }
    }

    #[test]
    fn rejects_bad_ids_and_short_sequences() {
        let p = BiLmParams::zeros(2, 1, 2);
        assert!(matches!(bilm_log_likelihood(&p, &[0, 2]), Err(Error::TokenOutOfRange { id: 2, vocab: 2 })));
        assert!(bilm_log_likelihood(&p, &[0]).is_err());
    }

    #[test]
    fn representation_shape() {
        let p = BiLmParams::random(4, 1, 3, 0.5, 1);
        let reps = representations(&p, &[0, 1, 2]).unwrap();
        assert_eq!(reps.len(), 3);
        for r in &reps {
            assert_eq!(r.len(), 2);
            assert!(r.iter().all(|v| v.len() == 6));
        }
        assert_eq!(&reps[1][0][..3], p.token_embed.row(1));
        assert_eq!(&reps[1][0][3..], p.token_embed.row(1));
    }

    #[test]
    fn zero_recurrence_makes_layer_one_context_free() {
        let mut p = BiLmParams::random(3, 1, 4, 0.5, 2);
        for l in p.forward_layers.iter_mut().chain(p.backward_layers.iter_mut()) {
            l.w_hidden = Matrix::zeros(4, 16);
        }
        // Forget gate still sees c_prev, so also zero its bias and input rows.
        for l in p.forward_layers.iter_mut().chain(p.backward_layers.iter_mut()) {
            for k in 0..4 {
                for u in 4..8 {
                    l.w_input[(k, u)] = 0.0;
                }
            }
            for u in 4..8 {
                l.bias[u] = -1e3;
            }
        }
        let reps = representations(&p, &[1, 0, 2, 1]).unwrap();
        assert_eq!(reps[0][1], reps[3][1]);
    }

    #[test]
    fn reversal_swaps_directions() {
        let mut p = BiLmParams::random(5, 1, 3, 0.7, 9);
        p.backward_layers = p.forward_layers.clone();
        let ids = [0, 3, 1, 4];
        let rev: Vec<usize> = ids.iter().rev().copied().collect();
        let a = representations(&p, &ids).unwrap();
        let b = representations(&p, &rev).unwrap();
        for k in 0..4 {
            let (fa, ba) = a[k][1].split_at(3);
            let (fb, bb) = b[3 - k][1].split_at(3);
            assert_eq!(fa, bb);
            assert_eq!(ba, fb);
        }
    }

    #[test]
    fn directions_only_see_their_context() {
        let p = BiLmParams::random(6, 2, 3, 0.8, 4);
        let base = [1, 2, 3, 4, 5];
        let (f0, b0) = position_log_probs(&p, &base).unwrap();
        for pos in 0..base.len() {
            let mut changed = base;
            changed[pos] = 0;
            let (f1, b1) = position_log_probs(&p, &changed).unwrap();
            for k in 0..base.len() {
                if k < pos {
                    assert_eq!(f0[k], f1[k], "forward term {k} saw position {pos}");
                }
                if k > pos {
                    assert_eq!(b0[k], b1[k], "backward term {k} saw position {pos}");
                }
            }
        }
        let total: f64 = f0.iter().chain(&b0).sum();
        assert!((total - bilm_log_likelihood(&p, &base).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = BiLmParams::random(3, 1, 4, 0.5, 11);
        let ids = [0, 2, 1];
        let (_, grad) = bilm_log_likelihood_grad(&p, &ids).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut probe = p.clone();
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        for (t, name) in names.iter().enumerate() {
            let len = p.tensors()[t].1.len();
            for i in 0..len {
                let orig = probe.tensors()[t].1[i];
                probe.tensors_mut()[t].1[i] = orig + h;
                let up = bilm_log_likelihood(&probe, &ids).unwrap();
                probe.tensors_mut()[t].1[i] = orig - h;
                let down = bilm_log_likelihood(&probe, &ids).unwrap();
                probe.tensors_mut()[t].1[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grad.tensors()[t].1[i];
                let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{i}] analytic {analytic} numeric {numeric}");
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn mix_fixtures() {
        let layers = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let uniform = ElmoMix::uniform(1);
        assert_eq!(uniform.apply(&layers).unwrap(), vec![0.5, 0.5]);
        let dominant = ElmoMix::new(vec![-50.0, 50.0], 1.0).unwrap();
        let out = dominant.apply(&layers).unwrap();
        assert!((out[0] - 0.0).abs() < 1e-9 && (out[1] - 1.0).abs() < 1e-9);
        let doubled = ElmoMix::new(vec![0.3, -0.2], 2.0).unwrap().apply(&layers).unwrap();
        let single = ElmoMix::new(vec![0.3, -0.2], 1.0).unwrap().apply(&layers).unwrap();
        assert_eq!(doubled, single.iter().map(|v| 2.0 * v).collect::<Vec<_>>());
        assert!(uniform.apply(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(uniform.apply(&[vec![1.0]]).is_err());
        assert!(ElmoMix::new(vec![0.0], 0.0).is_err());
    }

    #[test]
    fn training_beats_uniform_and_is_deterministic() {
        let corpus = alternating(8, 4);
        let cfg = BiLmTrainConfig {
            hidden_dim: 8,
            embed_dim: 8,
            ..Default::default()
        };
        let model = bilm_train(&corpus, &cfg).unwrap();
        let ids: Vec<Vec<usize>> = corpus.iter().map(|s| model.encode(s).0).collect();
        let untrained = bilm_train(&corpus, &BiLmTrainConfig { steps: 0, ..cfg.clone() }).unwrap();
        let before = bilm_log_likelihood(&untrained.params, &ids[0]).unwrap();
        let after = bilm_log_likelihood(&model.params, &ids[0]).unwrap();
        assert!(after > before);
        assert!(model.perplexity(&ids).unwrap() < 2.0);
        assert_eq!(bilm_train(&corpus, &cfg).unwrap(), model);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let corpus = alternating(4, 1);
        let cfg = BiLmTrainConfig {
            steps: 0,
            hidden_dim: 4,
            embed_dim: 4,
            ..Default::default()
        };
        let model = bilm_train(&corpus, &cfg).unwrap();
        assert_eq!(model.params, BiLmParams::random(2, 1, 4, cfg.init_scale, cfg.seed));
    }

    #[test]
    fn mismatched_dims_rejected() {
        let cfg = BiLmTrainConfig {
            embed_dim: 4,
            hidden_dim: 8,
            ..Default::default()
        };
        assert!(bilm_train(&alternating(4, 1), &cfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = bilm_train(
            &alternating(6, 2),
            &BiLmTrainConfig {
                steps: 3,
                hidden_dim: 4,
                embed_dim: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let text = model.to_checkpoint();
        assert!(text.starts_with("ECRC-BILM v1\n"));
        let back = BiLm::from_checkpoint(&text, "t").unwrap();
        assert_eq!(back, model);
        assert!(BiLm::from_checkpoint(&text.replace("v1", "v2"), "t").is_err());
    }

    #[test]
    fn sentence_vector_skips_unknown_tokens() {
        let model = bilm_train(&alternating(4, 1), &BiLmTrainConfig { steps: 1, hidden_dim: 4, embed_dim: 4, ..Default::default() }).unwrap();
        let mix = ElmoMix::uniform(1);
        let empty = model.sentence_vector(&["zzz".to_string()], &mix).unwrap();
        assert_eq!(empty, vec![0.0; 8]);
        let v = model.sentence_vector(&["a".to_string(), "zzz".to_string()], &mix).unwrap();
        assert_eq!(v, model.sentence_vector(&["a".to_string()], &mix).unwrap());
    }
}
