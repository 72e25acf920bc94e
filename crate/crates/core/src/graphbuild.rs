//! Conversation → graph.
//!
//! One node per utterance. Consecutive utterances are linked, and every pair
//! of user utterances (even positions) is linked; system utterances are never
//! linked to each other. For `n` utterances that gives
//! `(n - 1) + (n² - 1)/8 = (n² + 8n - 9)/8` undirected edges.
//!
//! Node features concatenate `[s, t, l, p, w1, w2, w3]`: the sentence vector,
//! a user flag, the untruncated token count, the number of distinct POS tags,
//! and the word vectors of the three highest TF-IDF terms (zero-padded).

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::bilm::ElmoMix;
use crate::corpus::{Conversation, Speaker};
use crate::embeddings::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, norm, ordered_sum, Matrix};
use crate::textproc::{pos_diversity, tag_utterance, PosTagger, TfIdfIndex};

pub const TOP_TERMS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GraphVariant {
    /// Sentence vectors only, binary adjacency.
    SentenceOnly,
    /// Full node features, binary adjacency.
    SentencePlusNode,
    /// Full node features, cosine-weighted adjacency.
    NodePlusEdge,
}

impl GraphVariant {
    pub const ALL: [GraphVariant; 3] = [
        GraphVariant::SentenceOnly,
        GraphVariant::SentencePlusNode,
        GraphVariant::NodePlusEdge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GraphVariant::SentenceOnly => "graph",
            GraphVariant::SentencePlusNode => "graph-node",
            GraphVariant::NodePlusEdge => "graph-node-edge",
        }
    }

    pub fn full_features(self) -> bool {
        !matches!(self, GraphVariant::SentenceOnly)
    }

    pub fn weighted_edges(self) -> bool {
        matches!(self, GraphVariant::NodePlusEdge)
    }

    /// Node feature width for the given embedding dims.
    pub fn feature_dim(self, sentence_dim: usize, word_dim: usize) -> usize {
        if self.full_features() {
            sentence_dim + 3 + TOP_TERMS * word_dim
        } else {
            sentence_dim
        }
    }
}

impl fmt::Display for GraphVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GraphVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        GraphVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (graph, graph-node, graph-node-edge)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    Sequential,
    UserUser,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub kind: EdgeKind,
}

pub fn edge_count_formula(n: usize) -> usize {
    (n * n + 8 * n - 9) / 8
}

pub fn build_topology(n: usize) -> Result<Vec<Edge>> {
    if n < 3 || n.is_multiple_of(2) {
        return Err(Error::Config(format!("node count must be odd and at least 3, got {n}")));
    }
    let mut edges: Vec<Edge> = (0..n - 1)
        .map(|i| Edge {
            i,
            j: i + 1,
            kind: EdgeKind::Sequential,
        })
        .collect();
    for i in (0..n).step_by(2) {
        for j in (i + 2..n).step_by(2) {
            edges.push(Edge {
                i,
                j,
                kind: EdgeKind::UserUser,
            });
        }
    }
    edges.sort_by_key(|e| (e.i, e.j));
    Ok(edges)
}

/// Everything needed to turn utterances into node features.
pub struct FeatureContext<'a> {
    pub provider: &'a EmbeddingProvider,
    pub tfidf: &'a TfIdfIndex,
    pub tagger: &'a dyn PosTagger,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    pub s: Vec<f64>,
    pub t: f64,
    pub l: f64,
    pub p: f64,
    pub words: [Vec<f64>; TOP_TERMS],
    pub top_terms: Vec<String>,
}

impl NodeFeatures {
    pub fn assembled(&self) -> Vec<f64> {
        let mut row = self.s.clone();
        row.extend([self.t, self.l, self.p]);
        for w in &self.words {
            row.extend_from_slice(w);
        }
        row
    }

    /// Everything after the sentence vector.
    pub fn tail(&self) -> Vec<f64> {
        let mut row = vec![self.t, self.l, self.p];
        for w in &self.words {
            row.extend_from_slice(w);
        }
        row
    }
}

struct NodeParts {
    tokens: crate::textproc::TokenizedUtterance,
    features: NodeFeatures,
}

fn node_parts(conv: &Conversation, ctx: &FeatureContext<'_>) -> Result<Vec<NodeParts>> {
    conv.utterances
        .iter()
        .map(|u| {
            let key = conv.utterance_key(u.index);
            let tu = tag_utterance(&u.text, &key, ctx.max_len, ctx.tagger)?;
            let s = ctx.provider.sentence_vector(&conv.id, u.index, &tu)?;
            let full = crate::textproc::split_tokens(&u.text);
            let top: Vec<String> = ctx
                .tfidf
                .top_k_for_tokens(&full, TOP_TERMS)
                .into_iter()
                .map(|(t, _)| t)
                .collect();
            let mut words: [Vec<f64>; TOP_TERMS] = Default::default();
            for (slot, w) in words.iter_mut().enumerate() {
                *w = match top.get(slot) {
                    Some(term) => ctx.provider.word_vector(term),
                    None => vec![0.0; ctx.provider.word_dim()],
                };
            }
            let features = NodeFeatures {
                s,
                t: if u.speaker == Speaker::User { 1.0 } else { 0.0 },
                l: tu.raw_length as f64,
                p: pos_diversity(&tu) as f64,
                words,
                top_terms: top,
            };
            Ok(NodeParts { tokens: tu, features })
        })
        .collect()
}

pub fn node_features(conv: &Conversation, ctx: &FeatureContext<'_>) -> Result<Vec<NodeFeatures>> {
    Ok(node_parts(conv, ctx)?.into_iter().map(|p| p.features).collect())
}

pub fn build_node_features(conv: &Conversation, ctx: &FeatureContext<'_>, variant: GraphVariant) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = node_features(conv, ctx)?
        .iter()
        .map(|f| if variant.full_features() { f.assembled() } else { f.s.clone() })
        .collect();
    Matrix::from_rows(&rows)
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine_similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", x.len(), y.len())));
    }
    let (nx, ny) = (norm(x), norm(y));
    if nx == 0.0 || ny == 0.0 {
        return Ok(0.0);
    }
    Ok(dot(x, y) / (nx * ny))
}

/// Symmetric adjacency with zero diagonal. Weighted variants use
/// `max(0, cos(X_i, X_j))` on edges; the others put 1 on edges.
pub fn build_adjacency(x: &Matrix, edges: &[Edge], variant: GraphVariant) -> Result<Matrix> {
    let n = x.rows();
    let mut a = Matrix::zeros(n, n);
    for e in edges {
        if e.i >= n || e.j >= n {
            return Err(Error::Shape(format!("edge ({}, {}) outside {n} nodes", e.i, e.j)));
        }
        let w = if variant.weighted_edges() {
            cosine_similarity(x.row(e.i), x.row(e.j))?.max(0.0)
        } else {
            1.0
        };
        a[(e.i, e.j)] = w;
        a[(e.j, e.i)] = w;
    }
    Ok(a)
}

/// Degrees of `A + I`, each an order-independent row sum.
pub fn self_loop_degrees(a: &Matrix) -> Vec<f64> {
    (0..a.rows())
        .map(|i| {
            let mut row: Vec<f64> = a.row(i).to_vec();
            row[i] += 1.0;
            ordered_sum(&mut row)
        })
        .collect()
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Shape(format!("adjacency is {}x{}", n, a.cols())));
    }
    for i in 0..n {
        for j in 0..n {
            let v = a[(i, j)];
            if v < 0.0 || !v.is_finite() {
                return Err(Error::NegativeWeight { row: i, col: j, value: v });
            }
        }
    }
    let inv_sqrt: Vec<f64> = self_loop_degrees(a).iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let tilde = a[(i, j)] + if i == j { 1.0 } else { 0.0 };
            if tilde != 0.0 {
                out[(i, j)] = tilde * (inv_sqrt[i] * inv_sqrt[j]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeInfo {
    pub t: f64,
    pub l: f64,
    pub p: f64,
    pub top_terms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConversationGraph {
    pub id: String,
    pub edges: Vec<Edge>,
    pub x: Matrix,
    pub a: Matrix,
    pub a_hat: Matrix,
    pub variant: GraphVariant,
    pub nodes: Vec<NodeInfo>,
}

impl ConversationGraph {
    pub fn from_features(id: impl Into<String>, x: Matrix, variant: GraphVariant, nodes: Vec<NodeInfo>) -> Result<Self> {
        let edges = build_topology(x.rows())?;
        let a = build_adjacency(&x, &edges, variant)?;
        let a_hat = normalize_adjacency(&a)?;
        Ok(Self {
            id: id.into(),
            edges,
            x,
            a,
            a_hat,
            variant,
            nodes,
        })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.x.cols()
    }

    /// Relabels nodes so that new node `k` is old node `perm[k]`. The edge
    /// list is carried along; it no longer follows the utterance layout.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n();
        assert_eq!(perm.len(), n);
        let mut inverse = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let rows: Vec<Vec<f64>> = perm.iter().map(|&old| self.x.row(old).to_vec()).collect();
        let sym = |m: &Matrix| {
            let mut out = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    out[(i, j)] = m[(perm[i], perm[j])];
                }
            }
            out
        };
        Self {
            id: self.id.clone(),
            edges: self
                .edges
                .iter()
                .map(|e| {
                    let (a, b) = (inverse[e.i], inverse[e.j]);
                    Edge {
                        i: a.min(b),
                        j: a.max(b),
                        kind: e.kind,
                    }
                })
                .collect(),
            x: Matrix::from_rows(&rows).expect("rows share a width"),
            a: sym(&self.a),
            a_hat: sym(&self.a_hat),
            variant: self.variant,
            nodes: perm.iter().map(|&old| self.nodes[old].clone()).collect(),
        }
    }

    /// Human-readable dump: node table, edge list, and both matrices.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "graph {} variant={} nodes={} edges={} feature_dim={}", self.id, self.variant, self.n(), self.edges.len(), self.feature_dim());
        let _ = writeln!(out, "nodes");
        let _ = writeln!(out, "  {:>4} {:>3} {:>5} {:>3}  top_terms", "node", "t", "l", "p");
        for (i, node) in self.nodes.iter().enumerate() {
            let _ = writeln!(out, "  {:>4} {:>3} {:>5} {:>3}  {}", i, node.t, node.l, node.p, node.top_terms.join(","));
        }
        let _ = writeln!(out, "edges");
        for e in &self.edges {
            let kind = match e.kind {
                EdgeKind::Sequential => "sequential",
                EdgeKind::UserUser => "user-user",
            };
            let _ = writeln!(out, "  {:>3} {:>3}  {:<10} {:.6}", e.i, e.j, kind, self.a[(e.i, e.j)]);
        }
        for (name, m) in [("A", &self.a), ("A_hat", &self.a_hat)] {
            let _ = writeln!(out, "{name}");
            for r in 0..m.rows() {
                out.push(' ');
                for v in m.row(r) {
                    let _ = write!(out, " {v:>9.6}");
                }
                out.push('\n');
            }
        }
        out
    }
}

pub fn build_graph(conv: &Conversation, ctx: &FeatureContext<'_>, variant: GraphVariant) -> Result<ConversationGraph> {
    let feats = node_features(conv, ctx)?;
    let rows: Vec<Vec<f64>> = feats
        .iter()
        .map(|f| if variant.full_features() { f.assembled() } else { f.s.clone() })
        .collect();
    let nodes = feats
        .into_iter()
        .map(|f| NodeInfo {
            t: f.t,
            l: f.l,
            p: f.p,
            top_terms: f.top_terms,
        })
        .collect();
    ConversationGraph::from_features(conv.id.clone(), Matrix::from_rows(&rows)?, variant, nodes)
}

/// A graph whose sentence block is still a function of the layer mix.
///
/// Row `i` of `X` is `[γ Σ_j softmax(s)_j · M_ij, tail_i]` where `M_ij` is the
/// token mean of biLM layer `j` for utterance `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphTemplate {
    pub id: String,
    pub layer_means: Vec<Vec<Vec<f64>>>,
    pub tail: Matrix,
    pub variant: GraphVariant,
    pub nodes: Vec<NodeInfo>,
}

impl GraphTemplate {
    pub fn new(id: impl Into<String>, layer_means: Vec<Vec<Vec<f64>>>, tail: Matrix, variant: GraphVariant, nodes: Vec<NodeInfo>) -> Result<Self> {
        if layer_means.len() != tail.rows() || layer_means.is_empty() {
            return Err(Error::Shape("layer means and tail must cover the same nodes".into()));
        }
        let depth = layer_means[0].len();
        let width = layer_means[0].first().map_or(0, Vec::len);
        if layer_means.iter().any(|m| m.len() != depth || m.iter().any(|l| l.len() != width)) {
            return Err(Error::Shape("ragged layer means".into()));
        }
        Ok(Self {
            id: id.into(),
            layer_means,
            tail,
            variant,
            nodes,
        })
    }

    pub fn sentence_dim(&self) -> usize {
        self.layer_means[0][0].len()
    }

    pub fn assemble(&self, mix: &ElmoMix) -> Result<ConversationGraph> {
        let rows: Vec<Vec<f64>> = self
            .layer_means
            .iter()
            .enumerate()
            .map(|(i, means)| {
                let mut row = mix.apply(means)?;
                row.extend_from_slice(self.tail.row(i));
                Ok(row)
            })
            .collect::<Result<_>>()?;
        ConversationGraph::from_features(self.id.clone(), Matrix::from_rows(&rows)?, self.variant, self.nodes.clone())
    }

    /// Chains `dL/dX` and `dL/dÂ` back to the mix weights. Returns gradients
    /// for `s_raw` and `γ`. `graph` must come from [`Self::assemble`] with
    /// the same `mix`.
    pub fn mix_gradient(&self, mix: &ElmoMix, graph: &ConversationGraph, d_x: &Matrix, d_a_hat: Option<&Matrix>) -> Result<(Vec<f64>, f64)> {
        let mut d_x = d_x.clone();
        if let (true, Some(g)) = (self.variant.weighted_edges(), d_a_hat) {
            d_x.add_assign(&adjacency_input_gradient(graph, g)?);
        }
        let weights = mix.weights();
        let sdim = self.sentence_dim();
        let mut d_w = vec![0.0; weights.len()];
        let mut d_gamma = 0.0;
        for (i, means) in self.layer_means.iter().enumerate() {
            let d_s = &d_x.row(i)[..sdim];
            for (j, m) in means.iter().enumerate() {
                let proj = dot(d_s, m);
                d_w[j] += mix.gamma * proj;
                d_gamma += weights[j] * proj;
            }
        }
        let inner: f64 = weights.iter().zip(&d_w).map(|(w, g)| w * g).sum();
        let d_s_raw = weights.iter().zip(&d_w).map(|(w, g)| w * (g - inner)).collect();
        Ok((d_s_raw, d_gamma))
    }
}

/// `dL/dX` contributed through a cosine-weighted normalized adjacency.
pub fn adjacency_input_gradient(graph: &ConversationGraph, d_a_hat: &Matrix) -> Result<Matrix> {
    let n = graph.n();
    if d_a_hat.shape() != (n, n) {
        return Err(Error::Shape("adjacency gradient shape".into()));
    }
    let degrees = self_loop_degrees(&graph.a);
    let r: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let tilde = |i: usize, j: usize| graph.a[(i, j)] + if i == j { 1.0 } else { 0.0 };
    // dL/dd_i through both the row and column scalings.
    let d_deg: Vec<f64> = (0..n)
        .map(|i| {
            let d_r: f64 = (0..n)
                .map(|j| d_a_hat[(i, j)] * tilde(i, j) * r[j] + d_a_hat[(j, i)] * tilde(j, i) * r[j])
                .sum();
            d_r * (-0.5 * r[i] / degrees[i])
        })
        .collect();
    let d_tilde = |i: usize, j: usize| d_a_hat[(i, j)] * r[i] * r[j] + d_deg[i];

    let mut d_x = Matrix::zeros(n, graph.feature_dim());
    for e in &graph.edges {
        let (xi, xj) = (graph.x.row(e.i), graph.x.row(e.j));
        let (ni, nj) = (norm(xi), norm(xj));
        if ni == 0.0 || nj == 0.0 {
            continue;
        }
        let cos = dot(xi, xj) / (ni * nj);
        if cos <= 0.0 {
            continue;
        }
        let d_c = d_tilde(e.i, e.j) + d_tilde(e.j, e.i);
        let mut gi: Vec<f64> = xj.iter().map(|v| v / (ni * nj)).collect();
        axpy(-cos / (ni * ni), xi, &mut gi);
        let mut gj: Vec<f64> = xi.iter().map(|v| v / (ni * nj)).collect();
        axpy(-cos / (nj * nj), xj, &mut gj);
        axpy(d_c, &gi, d_x.row_mut(e.i));
        axpy(d_c, &gj, d_x.row_mut(e.j));
    }
    Ok(d_x)
}

/// Template for a conversation when the sentence source is a biLM.
pub fn build_template(conv: &Conversation, ctx: &FeatureContext<'_>, variant: GraphVariant) -> Result<GraphTemplate> {
    let parts = node_parts(conv, ctx)?;
    let mut layer_means = Vec::with_capacity(parts.len());
    let mut tails = Vec::with_capacity(parts.len());
    let mut nodes = Vec::with_capacity(parts.len());
    for part in parts {
        let means = ctx
            .provider
            .sentence_layers(&part.tokens)?
            .ok_or_else(|| Error::Config("graph templates need a bilm sentence source".into()))?;
        layer_means.push(means);
        tails.push(if variant.full_features() { part.features.tail() } else { Vec::new() });
        nodes.push(NodeInfo {
            t: part.features.t,
            l: part.features.l,
            p: part.features.p,
            top_terms: part.features.top_terms,
        });
    }
    let tail = if variant.full_features() {
        Matrix::from_rows(&tails)?
    } else {
        Matrix::zeros(tails.len(), 0)
    };
    GraphTemplate::new(conv.id.clone(), layer_means, tail, variant, nodes)
}
