//! Binary Tree-LSTM with a classifier at every node.
//!
//! ```text
//! leaf:      [i; o; u] = W x + b             c = σ(i) ⊙ tanh(u)
//! internal:  [i; fl; fr; o; u] = U [hl; hr] + b
//!            c = σ(i) ⊙ tanh(u) + σ(fl) ⊙ cl + σ(fr) ⊙ cr
//! both:      h = σ(o) ⊙ tanh(c)
//! ```

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{Real, Shape};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tree {
    Leaf { word: usize, label: usize },
    Node { label: usize, left: Box<Tree>, right: Box<Tree> },
}

impl Tree {
    pub fn leaves(&self) -> usize {
        match self {
            Tree::Leaf { .. } => 1,
            Tree::Node { left, right, .. } => left.leaves() + right.leaves(),
        }
    }

    pub fn nodes(&self) -> usize {
        2 * self.leaves() - 1
    }

    /// Parses `(label word)` leaves and `(label left right)` internal nodes.
    pub fn parse(text: &str) -> Result<Tree> {
        let spaced = text.replace('(', " ( ").replace(')', " ) ");
        let tokens: Vec<&str> = spaced.split_whitespace().collect();
        let mut pos = 0;
        let tree = parse_tree(&tokens, &mut pos)?;
        if pos != tokens.len() {
            return Err(malformed(format!("trailing input after position {pos}")));
        }
        Ok(tree)
    }
}

fn malformed(reason: String) -> Error {
    Error::Contract(format!("malformed tree: {reason}"))
}

fn parse_tree(tokens: &[&str], pos: &mut usize) -> Result<Tree> {
    let mut next = || {
        let t = tokens.get(*pos).copied().ok_or_else(|| malformed("unexpected end of input".into()));
        *pos += 1;
        t
    };
    if next()? != "(" {
        return Err(malformed(format!("expected '(' at token {}", *pos - 1)));
    }
    let number = |t: &str| t.parse::<usize>().map_err(|_| malformed(format!("expected a number, found {t:?}")));
    let label = number(next()?)?;
    let tree = if tokens.get(*pos) == Some(&"(") {
        let left = parse_tree(tokens, pos)?;
        let right = parse_tree(tokens, pos)?;
        Tree::Node { label, left: Box::new(left), right: Box::new(right) }
    } else {
        let word = number(tokens.get(*pos).copied().unwrap_or(")"))?;
        *pos += 1;
        Tree::Leaf { word, label }
    };
    if tokens.get(*pos) != Some(&")") {
        return Err(malformed(format!("expected ')' at token {}", *pos)));
    }
    *pos += 1;
    Ok(tree)
}

impl fmt::Display for Tree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tree::Leaf { word, label } => write!(f, "({label} {word})"),
            Tree::Node { label, left, right } => write!(f, "({label} {left} {right})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub labels: usize,
}

impl TreeDims {
    pub fn desk() -> Self {
        TreeDims { vocab: 100, embed: 16, hidden: 32, labels: 5 }
    }

    pub fn paper() -> Self {
        TreeDims { vocab: 1000, embed: 256, hidden: 256, labels: 5 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TreeLstmParams {
    pub embed: ParamId,
    pub leaf_w: ParamId,
    pub leaf_b: ParamId,
    pub comp_u: ParamId,
    pub comp_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub dims: TreeDims,
}

impl TreeLstmParams {
    pub fn new<T: Real, R: Rng>(store: &mut ParameterStore<T>, dims: TreeDims, rng: &mut R) -> Self {
        let d = dims.hidden;
        TreeLstmParams {
            embed: store.add_random("tree.E", Shape::matrix(dims.vocab, dims.embed), rng),
            leaf_w: store.add_random("tree.W", Shape::matrix(3 * d, dims.embed), rng),
            leaf_b: store.add_zeros("tree.bw", Shape::vector(3 * d)),
            comp_u: store.add_random("tree.U", Shape::matrix(5 * d, 2 * d), rng),
            comp_b: store.add_zeros("tree.bu", Shape::vector(5 * d)),
            out_w: store.add_random("tree.V", Shape::matrix(dims.labels, d), rng),
            out_b: store.add_zeros("tree.bv", Shape::vector(dims.labels)),
            dims,
        }
    }
}

struct Encoded {
    h: NodeId,
    c: NodeId,
}

fn gate<T: Real>(g: &mut Graph<T>, gates: NodeId, k: usize, d: usize, squash: fn(&mut Graph<T>, NodeId) -> Result<NodeId>) -> Result<NodeId> {
    let s = g.slice(gates, k * d, (k + 1) * d)?;
    squash(g, s)
}

fn encode<T: Real>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    tree: &Tree,
    p: &TreeLstmParams,
    losses: &mut Vec<NodeId>,
) -> Result<Encoded> {
    let d = p.dims.hidden;
    let (enc, label) = match tree {
        Tree::Leaf { word, label } => {
            if *word >= p.dims.vocab {
                return Err(Error::IndexOutOfRange { what: "vocabulary", index: *word, size: p.dims.vocab });
            }
            let table = g.parameter(store, p.embed)?;
            let x = g.lookup(table, *word)?;
            let w = g.parameter(store, p.leaf_w)?;
            let b = g.parameter(store, p.leaf_b)?;
            let gates = g.affine(w, x, b)?;
            let i = gate(g, gates, 0, d, Graph::sigmoid)?;
            let o = gate(g, gates, 1, d, Graph::sigmoid)?;
            let u = gate(g, gates, 2, d, Graph::tanh)?;
            let c = g.mul(i, u)?;
            let tc = g.tanh(c)?;
            (Encoded { h: g.mul(o, tc)?, c }, *label)
        }
        Tree::Node { label, left, right } => {
            let l = encode(g, store, left, p, losses)?;
            let r = encode(g, store, right, p, losses)?;
            let u_w = g.parameter(store, p.comp_u)?;
            let b = g.parameter(store, p.comp_b)?;
            let hh = g.concat_rows(&[l.h, r.h])?;
            let gates = g.affine(u_w, hh, b)?;
            let i = gate(g, gates, 0, d, Graph::sigmoid)?;
            let fl = gate(g, gates, 1, d, Graph::sigmoid)?;
            let fr = gate(g, gates, 2, d, Graph::sigmoid)?;
            let o = gate(g, gates, 3, d, Graph::sigmoid)?;
            let u = gate(g, gates, 4, d, Graph::tanh)?;
            let write = g.mul(i, u)?;
            let kl = g.mul(fl, l.c)?;
            let kr = g.mul(fr, r.c)?;
            let c = g.add(write, kl)?;
            let c = g.add(c, kr)?;
            let tc = g.tanh(c)?;
            (Encoded { h: g.mul(o, tc)?, c }, *label)
        }
    };
    if label >= p.dims.labels {
        return Err(Error::IndexOutOfRange { what: "label set", index: label, size: p.dims.labels });
    }
    let v = g.parameter(store, p.out_w)?;
    let bv = g.parameter(store, p.out_b)?;
    let scores = g.affine(v, enc.h, bv)?;
    losses.push(g.pick_neg_log_softmax(scores, label)?);
    Ok(enc)
}

pub fn treelstm_loss<T: Real>(g: &mut Graph<T>, store: &ParameterStore<T>, tree: &Tree, params: &TreeLstmParams) -> Result<NodeId> {
    let mut losses = Vec::with_capacity(tree.nodes());
    encode(g, store, tree, params, &mut losses)?;
    if losses.len() == 1 {
        Ok(losses[0])
    } else {
        g.sum_losses(&losses)
    }
}
