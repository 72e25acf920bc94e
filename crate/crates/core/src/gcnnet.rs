//! Graph convolution layers, mean readout, the two-task softmax head, and
//! exact reverse-mode gradients.
//!
//! Each hidden layer computes `ReLU(Â · H · W)` followed by inverted dropout
//! while training. The readout averages node rows; logits are `hᵀ W_F` with
//! the first six columns scored as emotions and the remaining twelve as
//! causalities.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bilm::{BiLm, BiLmParams, ElmoMix};
use crate::corpus::{NUM_CAUSALITIES, NUM_EMOTIONS};
use crate::error::{Error, Result};
use crate::graphbuild::{ConversationGraph, GraphTemplate, GraphVariant, NodeInfo};
use crate::tensor::{argmax, log_sum_exp, softmax, Matrix};

pub const HIDDEN_DIM: usize = 128;
pub const OUTPUT_DIM: usize = NUM_EMOTIONS + NUM_CAUSALITIES;

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub layers: Vec<Matrix>,
    pub fc: Matrix,
    pub seed: u64,
}

impl GcnParams {
    /// Glorot-uniform weights for `input → hidden[0] → … → 18`.
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        Self::check_dims(input_dim, hidden)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(hidden.len());
        let mut fan_in = input_dim;
        for &h in hidden {
            layers.push(Matrix::glorot(fan_in, h, &mut rng));
            fan_in = h;
        }
        let fc = Matrix::glorot(fan_in, OUTPUT_DIM, &mut rng);
        Ok(Self { layers, fc, seed })
    }

    pub fn zeros(input_dim: usize, hidden: &[usize]) -> Result<Self> {
        Self::check_dims(input_dim, hidden)?;
        let mut fan_in = input_dim;
        let layers = hidden
            .iter()
            .map(|&h| {
                let m = Matrix::zeros(fan_in, h);
                fan_in = h;
                m
            })
            .collect();
        Ok(Self {
            layers,
            fc: Matrix::zeros(fan_in, OUTPUT_DIM),
            seed: 0,
        })
    }

    fn check_dims(input_dim: usize, hidden: &[usize]) -> Result<()> {
        if input_dim == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Config(format!("invalid layer dims {input_dim} -> {hidden:?}")));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            fc: Matrix::zeros(self.fc.rows(), self.fc.cols()),
            seed: self.seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers.iter().map(Matrix::cols).collect()
    }

    /// Named tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = self.layers.iter().enumerate().map(|(i, w)| (format!("gcn.{i}"), w)).collect();
        out.push(("fc".into(), &self.fc));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = self.layers.iter_mut().enumerate().map(|(i, w)| (format!("gcn.{i}"), w)).collect();
        out.push(("fc".into(), &mut self.fc));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Matrix::is_finite) && self.fc.is_finite()
    }

    pub fn add_assign(&mut self, other: &GcnParams) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
        self.fc.add_assign(&other.fc);
    }

    pub fn scale(&mut self, s: f64) {
        self.layers.iter_mut().for_each(|w| w.scale(s));
        self.fc.scale(s);
    }

    /// Line describing dims, e.g. `dims=1627,128,128,18`.
    pub fn dims_string(&self) -> String {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.hidden_dims());
        dims.push(OUTPUT_DIM);
        dims.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TaskTarget {
    pub emotion: Option<usize>,
    pub causality: Option<usize>,
}

impl TaskTarget {
    pub fn new(emotion: Option<usize>, causality: Option<usize>) -> Result<Self> {
        if emotion.is_none() && causality.is_none() {
            return Err(Error::Config("a target needs at least one task".into()));
        }
        if emotion.is_some_and(|e| e >= NUM_EMOTIONS) || causality.is_some_and(|c| c >= NUM_CAUSALITIES) {
            return Err(Error::Config(format!("target out of range: {emotion:?}/{causality:?}")));
        }
        Ok(Self { emotion, causality })
    }

    pub fn both(emotion: usize, causality: usize) -> Self {
        Self::new(Some(emotion), Some(causality)).expect("labels in range")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    /// `counter` selects an independent stream under `seed`.
    Train { seed: u64, counter: u64 },
    Eval,
}

/// Inverted dropout. Returns the output and, in training mode, the mask of
/// per-entry scale factors (0 or `1/(1-rate)`).
pub fn dropout_apply(h: &Matrix, rate: f64, mode: DropoutMode) -> Result<(Matrix, Option<Matrix>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    let DropoutMode::Train { seed, counter } = mode else {
        return Ok((h.clone(), None));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(counter);
    let keep = 1.0 / (1.0 - rate);
    let mut mask = Matrix::zeros(h.rows(), h.cols());
    for m in mask.as_mut_slice() {
        *m = if rate == 0.0 || rng.gen::<f64>() >= rate { keep } else { 0.0 };
    }
    let mut out = h.clone();
    for (o, m) in out.as_mut_slice().iter_mut().zip(mask.as_slice()) {
        *o *= m;
    }
    Ok((out, Some(mask)))
}

fn relu_in_place(m: &mut Matrix) {
    m.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// `ReLU(Â · H · W)`.
pub fn gcn_layer(h: &Matrix, a_hat: &Matrix, w: &Matrix) -> Result<Matrix> {
    let mut z = Matrix::node_mix(a_hat, &h.matmul(w)?)?;
    relu_in_place(&mut z);
    Ok(z)
}

/// Column-wise mean of node rows.
pub fn readout(h: &Matrix) -> Result<Vec<f64>> {
    h.column_mean()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub logits: Vec<f64>,
    pub emotion: Vec<f64>,
    pub causality: Vec<f64>,
}

impl Classification {
    pub fn emotion_prediction(&self) -> (usize, f64) {
        let k = argmax(&self.emotion);
        (k, self.emotion[k])
    }

    pub fn causality_prediction(&self) -> (usize, f64) {
        let k = argmax(&self.causality);
        (k, self.causality[k])
    }
}

pub fn classify(h: &[f64], params: &GcnParams) -> Result<Classification> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("readout vector".into()));
    }
    if h.len() != params.fc.rows() {
        return Err(Error::Shape(format!("readout of width {} for head of {} rows", h.len(), params.fc.rows())));
    }
    let row = Matrix::from_vec(1, h.len(), h.to_vec())?;
    let logits = row.matmul(&params.fc)?.into_vec();
    Ok(Classification {
        emotion: softmax(&logits[..NUM_EMOTIONS]),
        causality: softmax(&logits[NUM_EMOTIONS..]),
        logits,
    })
}

/// Sum over present tasks of `-ln p[target]`, evaluated from logits.
pub fn multitask_loss(cls: &Classification, target: &TaskTarget) -> f64 {
    let (emo, cau) = cls.logits.split_at(NUM_EMOTIONS);
    let mut loss = 0.0;
    if let Some(e) = target.emotion {
        loss += log_sum_exp(emo) - emo[e];
    }
    if let Some(c) = target.causality {
        loss += log_sum_exp(cau) - cau[c];
    }
    loss
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub input: Matrix,
    /// `H · W`, kept for the adjacency gradient.
    pub projected: Matrix,
    pub pre_activation: Matrix,
    pub mask: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    pub output: Matrix,
    pub readout: Vec<f64>,
    pub classification: Classification,
    a_hat: Matrix,
}

impl ForwardTrace {
    pub fn loss(&self, target: &TaskTarget) -> f64 {
        multitask_loss(&self.classification, target)
    }
}

/// Stream counter for layer `layer` of the graph seen at `step`.
fn layer_counter(counter: u64, layer: usize) -> u64 {
    counter.wrapping_mul(16).wrapping_add(layer as u64)
}

pub fn forward(params: &GcnParams, x: &Matrix, a_hat: &Matrix, dropout: f64, mode: DropoutMode) -> Result<ForwardTrace> {
    if x.cols() != params.input_dim() {
        return Err(Error::Shape(format!("features of width {} for a model expecting {}", x.cols(), params.input_dim())));
    }
    let mut h = x.clone();
    let mut layers = Vec::with_capacity(params.layers.len());
    for (l, w) in params.layers.iter().enumerate() {
        let projected = h.matmul(w)?;
        let pre_activation = Matrix::node_mix(a_hat, &projected)?;
        let mut act = pre_activation.clone();
        relu_in_place(&mut act);
        let layer_mode = match mode {
            DropoutMode::Train { seed, counter } => DropoutMode::Train {
                seed,
                counter: layer_counter(counter, l),
            },
            DropoutMode::Eval => DropoutMode::Eval,
        };
        let (out, mask) = dropout_apply(&act, dropout, layer_mode)?;
        layers.push(LayerTrace {
            input: std::mem::replace(&mut h, out),
            projected,
            pre_activation,
            mask,
        });
    }
    let readout = readout(&h)?;
    let classification = classify(&readout, params)?;
    Ok(ForwardTrace {
        layers,
        output: h,
        readout,
        classification,
        a_hat: a_hat.clone(),
    })
}

pub fn forward_graph(params: &GcnParams, graph: &ConversationGraph, dropout: f64, mode: DropoutMode) -> Result<ForwardTrace> {
    forward(params, &graph.x, &graph.a_hat, dropout, mode)
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: GcnParams,
    pub d_x: Option<Matrix>,
    pub d_a_hat: Option<Matrix>,
}

/// Exact gradients of [`multitask_loss`]. With `inputs` set, also returns
/// gradients with respect to `X` and `Â`.
pub fn backward(params: &GcnParams, trace: &ForwardTrace, target: &TaskTarget, inputs: bool) -> Result<Gradients> {
    if trace.layers.len() != params.layers.len() {
        return Err(Error::Shape("trace does not match the model depth".into()));
    }
    let cls = &trace.classification;
    let mut dz = vec![0.0; OUTPUT_DIM];
    if let Some(e) = target.emotion {
        for (k, p) in cls.emotion.iter().enumerate() {
            dz[k] = p - if k == e { 1.0 } else { 0.0 };
        }
    }
    if let Some(c) = target.causality {
        for (k, p) in cls.causality.iter().enumerate() {
            dz[NUM_EMOTIONS + k] = p - if k == c { 1.0 } else { 0.0 };
        }
    }
    let mut grads = params.zeros_like();
    let h = &trace.readout;
    for (r, hv) in h.iter().enumerate() {
        if *hv != 0.0 {
            for (g, d) in grads.fc.row_mut(r).iter_mut().zip(&dz) {
                *g += hv * d;
            }
        }
    }
    let dh: Vec<f64> = (0..h.len())
        .map(|r| params.fc.row(r).iter().zip(&dz).map(|(w, d)| w * d).sum())
        .collect();
    let n = trace.output.rows();
    let per_node: Vec<f64> = dh.iter().map(|v| v / n as f64).collect();
    let mut d_out = Matrix::from_vec(n, per_node.len(), per_node.repeat(n))?;

    let mut d_a_hat = inputs.then(|| Matrix::zeros(n, n));
    for (l, layer) in trace.layers.iter().enumerate().rev() {
        let mut d_pre = d_out;
        for (i, d) in d_pre.as_mut_slice().iter_mut().enumerate() {
            let m = layer.mask.as_ref().map_or(1.0, |m| m.as_slice()[i]);
            if layer.pre_activation.as_slice()[i] <= 0.0 {
                *d = 0.0;
            } else {
                *d *= m;
            }
        }
        if let Some(da) = d_a_hat.as_mut() {
            da.add_assign(&d_pre.matmul_t(&layer.projected)?);
        }
        let d_projected = Matrix::node_mix_transposed(&trace.a_hat, &d_pre)?;
        Matrix::accumulate_node_outer(&mut grads.layers[l], &layer.input, &d_projected);
        d_out = if l > 0 || inputs {
            d_projected.matmul_t(&params.layers[l])?
        } else {
            Matrix::zeros(0, 0)
        };
    }
    Ok(Gradients {
        params: grads,
        d_x: inputs.then_some(d_out),
        d_a_hat,
    })
}

/// Central difference `(f(x+h) - f(x-h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Denominator floor for relative errors so that two near-zero gradients
/// do not divide noise by noise.
pub const REL_ERR_FLOOR: f64 = 1e-7;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub per_tensor: Vec<(String, f64)>,
    pub checked: usize,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    pub fn failing_tensors(&self) -> Vec<&str> {
        self.per_tensor
            .iter()
            .filter(|(_, e)| *e >= self.tol)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            write!(f, "PASS max_rel_err < {:e} ({:.3e} over {} entries)", self.tol, self.max_rel_err, self.checked)?;
        } else {
            write!(
                f,
                "FAIL max_rel_err {:.3e} >= {:e} at {}[{}]",
                self.max_rel_err, self.tol, self.worst_tensor, self.worst_index
            )?;
        }
        for (name, err) in &self.per_tensor {
            write!(f, "\n  {name:<12} {err:.3e}")?;
        }
        Ok(())
    }
}

/// Compares named analytic gradients against central differences of `loss`.
/// `perturb(tensor, index, delta)` must add `delta` to that scalar and
/// `loss` must read the perturbed state.
pub fn compare_gradients<S>(
    state: &mut S,
    analytic: &[(String, Vec<f64>)],
    mut perturb: impl FnMut(&mut S, usize, usize, f64),
    loss: impl Fn(&S) -> Result<f64>,
    step: f64,
    tol: f64,
) -> Result<GradReport> {
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        per_tensor: Vec::new(),
        checked: 0,
        tol,
    };
    for (t, (name, values)) in analytic.iter().enumerate() {
        let mut tensor_max = 0.0f64;
        for (i, &a) in values.iter().enumerate() {
            perturb(state, t, i, step);
            let up = loss(state)?;
            perturb(state, t, i, -2.0 * step);
            let down = loss(state)?;
            perturb(state, t, i, step);
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(a, numeric);
            tensor_max = tensor_max.max(err);
            if report.checked == 0 || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_tensor = name.clone();
                report.worst_index = i;
            }
            report.checked += 1;
        }
        report.per_tensor.push((name.clone(), tensor_max));
    }
    Ok(report)
}

fn param_gradient_list(grads: &GcnParams) -> Vec<(String, Vec<f64>)> {
    grads.tensors().into_iter().map(|(n, m)| (n, m.as_slice().to_vec())).collect()
}

fn perturb_param(p: &mut GcnParams, t: usize, i: usize, delta: f64) {
    if t < p.layers.len() {
        p.layers[t].as_mut_slice()[i] += delta;
    } else {
        p.fc.as_mut_slice()[i] += delta;
    }
}

/// Finite-difference check of every parameter on one graph, dropout off.
pub fn finite_diff_check(params: &GcnParams, graph: &ConversationGraph, target: &TaskTarget, step: f64, tol: f64) -> Result<GradReport> {
    let trace = forward_graph(params, graph, 0.0, DropoutMode::Eval)?;
    let grads = backward(params, &trace, target, false)?;
    check_against(params, &grads.params, graph, target, step, tol)
}

/// Like [`finite_diff_check`] but against caller-supplied gradients.
pub fn check_against(params: &GcnParams, analytic: &GcnParams, graph: &ConversationGraph, target: &TaskTarget, step: f64, tol: f64) -> Result<GradReport> {
    let mut state = params.clone();
    compare_gradients(
        &mut state,
        &param_gradient_list(analytic),
        perturb_param,
        |p| Ok(forward_graph(p, graph, 0.0, DropoutMode::Eval)?.loss(target)),
        step,
        tol,
    )
}

/// Gradients of the loss for a template graph, including the layer mix.
pub fn mix_backward(params: &GcnParams, template: &GraphTemplate, mix: &ElmoMix, target: &TaskTarget, dropout: f64, mode: DropoutMode) -> Result<(f64, GcnParams, ElmoMix)> {
    let graph = template.assemble(mix)?;
    let trace = forward_graph(params, &graph, dropout, mode)?;
    let grads = backward(params, &trace, target, true)?;
    let d_x = grads.d_x.as_ref().expect("input gradients requested");
    let (d_s, d_gamma) = template.mix_gradient(mix, &graph, d_x, grads.d_a_hat.as_ref())?;
    Ok((trace.loss(target), grads.params, ElmoMix { s_raw: d_s, gamma: d_gamma }))
}

/// Finite-difference check of the GCN parameters and the mix parameters
/// when sentence vectors are a trainable biLM layer mix.
pub fn finite_diff_check_mix(params: &GcnParams, template: &GraphTemplate, mix: &ElmoMix, target: &TaskTarget, step: f64, tol: f64) -> Result<GradReport> {
    let (_, grads, d_mix) = mix_backward(params, template, mix, target, 0.0, DropoutMode::Eval)?;
    let mut analytic = param_gradient_list(&grads);
    analytic.push(("mix.s".into(), d_mix.s_raw));
    analytic.push(("mix.gamma".into(), vec![d_mix.gamma]));
    let n_params = params.layers.len() + 1;
    let mut state = (params.clone(), mix.clone());
    compare_gradients(
        &mut state,
        &analytic,
        |(p, m), t, i, delta| {
            if t < n_params {
                perturb_param(p, t, i, delta);
            } else if t == n_params {
                m.s_raw[i] += delta;
            } else {
                m.gamma += delta;
            }
        },
        |(p, m)| {
            let graph = template.assemble(m)?;
            Ok(forward_graph(p, &graph, 0.0, DropoutMode::Eval)?.loss(target))
        },
        step,
        tol,
    )
}

/// Finite-difference checks on seeded random 3-node instances: one per graph
/// variant, plus a cosine-weighted graph whose sentence block comes from a
/// random biLM through a trainable layer mix. `dims` lists the input width
/// followed by the hidden widths; the input must be at least 3 wide so the
/// biLM case can use 2 columns of sentence features.
pub fn gradient_suite(seed: u64, dims: &[usize], step: f64, tol: f64) -> Result<Vec<(String, GradReport)>> {
    if dims.len() < 2 || dims[0] < 3 {
        return Err(Error::Config(format!("gradcheck dims {dims:?} need an input of width 3 or more and a hidden layer")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = GcnParams::new(dims[0], &dims[1..], seed)?;
    let target = TaskTarget::both(rng.gen_range(0..NUM_EMOTIONS), rng.gen_range(0..NUM_CAUSALITIES));
    let x = Matrix::uniform(3, dims[0], 1.0, &mut rng);
    let mut out = Vec::new();
    for variant in GraphVariant::ALL {
        let graph = ConversationGraph::from_features("gradcheck", x.clone(), variant, blank_nodes(3))?;
        out.push((variant.name().to_string(), finite_diff_check(&params, &graph, &target, step, tol)?));
    }

    let vocab: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    let model = BiLm::new(vocab.clone(), BiLmParams::random(vocab.len(), 1, 1, 0.5, seed))?;
    let layer_means = (0..3)
        .map(|_| {
            let len = rng.gen_range(2..6);
            let tokens: Vec<String> = (0..len).map(|_| vocab[rng.gen_range(0..vocab.len())].clone()).collect();
            model.layer_means(&tokens)
        })
        .collect::<Result<Vec<_>>>()?;
    let tail = Matrix::uniform(3, dims[0] - model.representation_dim(), 1.0, &mut rng);
    let template = GraphTemplate::new("gradcheck", layer_means, tail, GraphVariant::NodePlusEdge, blank_nodes(3))?;
    let mix = ElmoMix::new(vec![rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)], rng.gen_range(0.5..1.5))?;
    out.push(("bilm-mix".to_string(), finite_diff_check_mix(&params, &template, &mix, &target, step, tol)?));
    Ok(out)
}

fn blank_nodes(n: usize) -> Vec<NodeInfo> {
    vec![
        NodeInfo {
            t: 0.0,
            l: 0.0,
            p: 0.0,
            top_terms: Vec::new(),
        };
        n
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn layer_examples() {
        let x = m(&[&[-1.0, 2.0]]);
        let out = gcn_layer(&x, &Matrix::identity(1), &Matrix::identity(2)).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 2.0]);
        let zero = gcn_layer(&x, &Matrix::identity(1), &Matrix::zeros(2, 3)).unwrap();
        assert!(zero.as_slice().iter().all(|v| *v == 0.0));
        let two = gcn_layer(&m(&[&[2.0], &[0.0]]), &m(&[&[0.5, 0.5], &[0.5, 0.5]]), &m(&[&[1.0]])).unwrap();
        assert_eq!(two.as_slice(), &[1.0, 1.0]);
        assert!(gcn_layer(&x, &Matrix::identity(2), &Matrix::identity(2)).is_err());
    }

    #[test]
    fn readout_examples() {
        assert_eq!(readout(&m(&[&[1.0, 3.0], &[3.0, 5.0]])).unwrap(), vec![2.0, 4.0]);
        assert_eq!(readout(&m(&[&[0.5, 1.5], &[0.5, 1.5], &[0.5, 1.5]])).unwrap(), vec![0.5, 1.5]);
        assert!(readout(&Matrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn classify_examples() {
        let p = GcnParams::zeros(4, &[3]).unwrap();
        let c = classify(&[1.0, 2.0, 3.0], &p).unwrap();
        assert!(c.emotion.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));
        assert!(c.causality.iter().all(|v| (v - 1.0 / 12.0).abs() < 1e-15));
        assert_eq!(c.emotion_prediction().0, 0);
        assert_eq!(c.causality_prediction().0, 0);

        let mut p = GcnParams::zeros(1, &[1]).unwrap();
        p.fc[(0, 0)] = 1.0;
        let c = classify(&[1.0], &p).unwrap();
        let e = std::f64::consts::E;
        assert!((c.emotion[0] - e / (e + 5.0)).abs() < 1e-15);
        assert!((c.emotion[0] - 0.3521).abs() < 1e-4);

        for k in 0..NUM_EMOTIONS {
            p.fc[(0, k)] += 7.5;
        }
        let shifted = classify(&[1.0], &p).unwrap();
        for (a, b) in shifted.emotion.iter().zip(&c.emotion) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(classify(&[f64::NAN], &p).is_err());
    }

    #[test]
    fn loss_examples() {
        let p = GcnParams::zeros(1, &[1]).unwrap();
        let c = classify(&[0.0], &p).unwrap();
        let both = multitask_loss(&c, &TaskTarget::both(2, 5));
        assert!((both - (6f64.ln() + 12f64.ln())).abs() < 1e-12);
        assert!((both - 4.27667).abs() < 1e-5);
        let emo = multitask_loss(&c, &TaskTarget::new(Some(1), None).unwrap());
        assert!((emo - 6f64.ln()).abs() < 1e-12);
        assert!(TaskTarget::new(None, None).is_err());
        assert!(TaskTarget::new(Some(6), None).is_err());

        let mut p = GcnParams::zeros(1, &[1]).unwrap();
        p.fc[(0, 0)] = 800.0;
        p.fc[(0, 6)] = 800.0;
        let c = classify(&[1.0], &p).unwrap();
        assert!(multitask_loss(&c, &TaskTarget::both(0, 0)) < 1e-300);
        assert!(multitask_loss(&c, &TaskTarget::both(1, 1)).is_finite());
    }

    #[test]
    fn dropout_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Matrix::uniform(100, 100, 1.0, &mut rng);
        assert_eq!(dropout_apply(&h, 0.5, DropoutMode::Eval).unwrap().0, h);
        let (same, _) = dropout_apply(&h, 0.0, DropoutMode::Train { seed: 1, counter: 0 }).unwrap();
        assert_eq!(same, h);
        assert!(dropout_apply(&h, 1.0, DropoutMode::Eval).is_err());

        let ones = Matrix::from_vec(100, 100, vec![1.0; 10_000]).unwrap();
        let (out, mask) = dropout_apply(&ones, 0.5, DropoutMode::Train { seed: 7, counter: 3 }).unwrap();
        let mean = out.as_slice().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
        let mask = mask.unwrap();
        assert!(mask.as_slice().iter().all(|v| *v == 0.0 || *v == 2.0));
        let (again, _) = dropout_apply(&ones, 0.5, DropoutMode::Train { seed: 7, counter: 3 }).unwrap();
        assert_eq!(again, out);
        let (other, _) = dropout_apply(&ones, 0.5, DropoutMode::Train { seed: 7, counter: 4 }).unwrap();
        assert_ne!(other, out);
    }

    #[test]
    fn fc_gradient_is_outer_product_on_active_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::uniform(3, 4, 1.0, &mut rng);
        let graph = ConversationGraph::from_features("g", x, GraphVariant::SentencePlusNode, blank_nodes(3)).unwrap();
        let mut params = GcnParams::new(4, &[3], 1).unwrap();
        params.fc = Matrix::zeros(3, OUTPUT_DIM);
        let trace = forward_graph(&params, &graph, 0.0, DropoutMode::Eval).unwrap();
        let target = TaskTarget::new(Some(2), None).unwrap();
        let g = backward(&params, &trace, &target, false).unwrap();
        for (r, h) in trace.readout.iter().enumerate() {
            for k in 0..OUTPUT_DIM {
                let expected = if k < NUM_EMOTIONS { h * (1.0 / 6.0 - if k == 2 { 1.0 } else { 0.0 }) } else { 0.0 };
                assert!((g.params.fc[(r, k)] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_loss_gives_zero_gradients() {
        let graph = ConversationGraph::from_features("g", m(&[&[1.0], &[1.0], &[1.0]]), GraphVariant::SentencePlusNode, blank_nodes(3)).unwrap();
        let mut params = GcnParams::zeros(1, &[1]).unwrap();
        params.layers[0][(0, 0)] = 1.0;
        params.fc[(0, 0)] = 2000.0;
        params.fc[(0, 6)] = 2000.0;
        let trace = forward_graph(&params, &graph, 0.0, DropoutMode::Eval).unwrap();
        let target = TaskTarget::both(0, 0);
        assert_eq!(trace.loss(&target), 0.0);
        let g = backward(&params, &trace, &target, true).unwrap();
        for (_, t) in g.params.tensors() {
            assert!(t.as_slice().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn suite_passes_on_seed_zero() {
        for (name, report) in gradient_suite(0, &[5, 4, 4], 1e-4, 1e-4).unwrap() {
            assert!(report.passed(), "{name}: {report}");
        }
        assert!(gradient_suite(0, &[2, 4], 1e-4, 1e-4).is_err());
    }

    #[test]
    fn quadratic_central_difference() {
        let d = central_difference(|w| w * w, 3.0, 1e-4);
        assert!((d - 6.0).abs() < 1e-6);
    }

    fn random_instance(variant: GraphVariant, seed: u64) -> (GcnParams, ConversationGraph) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::uniform(3, 5, 1.0, &mut rng);
        let graph = ConversationGraph::from_features("g", x, variant, blank_nodes(3)).unwrap();
        (GcnParams::new(5, &[4, 4], seed).unwrap(), graph)
    }

    #[test]
    fn gradients_match_finite_differences_for_every_variant() {
        for variant in GraphVariant::ALL {
            for seed in 0..5 {
                let (params, graph) = random_instance(variant, seed);
                let report = finite_diff_check(&params, &graph, &TaskTarget::both(1, 7), 1e-4, 1e-4).unwrap();
                assert!(report.passed(), "{variant} seed {seed}: {report}");
                let single = finite_diff_check(&params, &graph, &TaskTarget::new(None, Some(3)).unwrap(), 1e-4, 1e-4).unwrap();
                assert!(single.passed(), "{variant} seed {seed}: {single}");
            }
        }
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let (params, graph) = random_instance(GraphVariant::NodePlusEdge, 0);
        let target = TaskTarget::both(0, 0);
        let trace = forward_graph(&params, &graph, 0.0, DropoutMode::Eval).unwrap();
        let mut g = backward(&params, &trace, &target, false).unwrap().params;
        g.layers[1].scale(1.1);
        let report = check_against(&params, &g, &graph, &target, 1e-4, 1e-4).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failing_tensors(), ["gcn.1"]);
        assert_eq!(report.worst_tensor, "gcn.1");
        assert!(report.to_string().starts_with("FAIL"));
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let (params, graph) = random_instance(GraphVariant::SentencePlusNode, 4);
        let target = TaskTarget::both(3, 2);
        let trace = forward_graph(&params, &graph, 0.0, DropoutMode::Eval).unwrap();
        let g = backward(&params, &trace, &target, true).unwrap();
        let analytic = vec![
            ("x".to_string(), g.d_x.unwrap().into_vec()),
            ("a_hat".to_string(), g.d_a_hat.unwrap().into_vec()),
        ];
        let mut state = (graph.x.clone(), graph.a_hat.clone());
        let report = compare_gradients(
            &mut state,
            &analytic,
            |(x, a), t, i, d| {
                if t == 0 {
                    x.as_mut_slice()[i] += d;
                } else {
                    a.as_mut_slice()[i] += d;
                }
            },
            |(x, a)| Ok(forward(&params, x, a, 0.0, DropoutMode::Eval)?.loss(&target)),
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn dropout_gradients_follow_the_recorded_mask() {
        let (params, graph) = random_instance(GraphVariant::NodePlusEdge, 8);
        let target = TaskTarget::both(5, 11);
        let mode = DropoutMode::Train { seed: 3, counter: 9 };
        let trace = forward_graph(&params, &graph, 0.3, mode).unwrap();
        let g = backward(&params, &trace, &target, false).unwrap();
        let mut state = params.clone();
        let report = compare_gradients(
            &mut state,
            &param_gradient_list(&g.params),
            perturb_param,
            |p| Ok(forward_graph(p, &graph, 0.3, mode)?.loss(&target)),
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn eval_forward_is_deterministic_and_normalized() {
        let (params, graph) = random_instance(GraphVariant::NodePlusEdge, 11);
        let a = forward_graph(&params, &graph, 0.5, DropoutMode::Eval).unwrap();
        let b = forward_graph(&params, &graph, 0.5, DropoutMode::Eval).unwrap();
        assert_eq!(a.classification, b.classification);
        for probs in [&a.classification.emotion, &a.classification.causality] {
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(probs.iter().all(|p| *p > 0.0 && *p < 1.0));
        }
    }

    #[test]
    fn layer_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Matrix::uniform(5, 4, 1.0, &mut rng);
        let graph = ConversationGraph::from_features("g", x, GraphVariant::NodePlusEdge, blank_nodes(5)).unwrap();
        let w = Matrix::uniform(4, 3, 1.0, &mut rng);
        let perm = [4, 2, 0, 3, 1];
        let p = graph.permuted(&perm);
        let base = gcn_layer(&graph.x, &graph.a_hat, &w).unwrap();
        let moved = gcn_layer(&p.x, &p.a_hat, &w).unwrap();
        for (k, &old) in perm.iter().enumerate() {
            assert_eq!(moved.row(k), base.row(old));
        }
    }
}
