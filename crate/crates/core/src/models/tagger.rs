//! Bidirectional LSTM sequence tagger. Each token's forward and backward
//! states are concatenated and scored by a softmax over tags; the loss is
//! the summed negative log-likelihood of the gold tags. In the character
//! variant, rare words are embedded by a character-level BiLSTM whose final
//! states replace the word-table row.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::models::lstm::LstmParams;
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{Real, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaggerDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub labels: usize,
    pub chars: usize,
    pub char_embed: usize,
    /// Must be half of `embed`, so a character encoding can stand in for a word row.
    pub char_hidden: usize,
}

impl TaggerDims {
    pub fn desk() -> Self {
        TaggerDims { vocab: 100, embed: 16, hidden: 32, labels: 10, chars: 30, char_embed: 8, char_hidden: 8 }
    }

    pub fn paper() -> Self {
        TaggerDims { vocab: 1000, embed: 256, hidden: 256, labels: 300, chars: 60, char_embed: 64, char_hidden: 128 }
    }
}

#[derive(Debug, Clone)]
pub struct CharParams {
    pub table: ParamId,
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

#[derive(Debug, Clone)]
pub struct TaggerParams {
    pub embed: ParamId,
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub chars: Option<CharParams>,
    pub dims: TaggerDims,
}

impl TaggerParams {
    pub fn new<T: Real, R: Rng>(store: &mut ParameterStore<T>, dims: TaggerDims, with_char: bool, rng: &mut R) -> Result<Self> {
        let chars = if with_char {
            if dims.embed != 2 * dims.char_hidden {
                return Err(Error::Contract(format!(
                    "character encoder width {} does not match word embedding width {}",
                    2 * dims.char_hidden,
                    dims.embed
                )));
            }
            Some(CharParams {
                table: store.add_random("char.E", Shape::matrix(dims.chars, dims.char_embed), rng),
                fwd: LstmParams::new(store, "char.fwd", dims.char_embed, dims.char_hidden, rng),
                bwd: LstmParams::new(store, "char.bwd", dims.char_embed, dims.char_hidden, rng),
            })
        } else {
            None
        };
        Ok(TaggerParams {
            embed: store.add_random("tag.E", Shape::matrix(dims.vocab, dims.embed), rng),
            fwd: LstmParams::new(store, "tag.fwd", dims.embed, dims.hidden, rng),
            bwd: LstmParams::new(store, "tag.bwd", dims.embed, dims.hidden, rng),
            out_w: store.add_random("tag.V", Shape::matrix(dims.labels, 2 * dims.hidden), rng),
            out_b: store.add_zeros("tag.bv", Shape::vector(dims.labels)),
            chars,
            dims,
        })
    }
}

/// Words with the top fifth of ids are rare and get character encodings.
pub fn is_rare(word: usize, vocab: usize) -> bool {
    word >= vocab - vocab / 5
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSequence {
    pub words: Vec<usize>,
    pub labels: Vec<usize>,
    /// Spelling of each token, as character ids.
    pub chars: Vec<Vec<usize>>,
}

fn embed_word<T: Real>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    params: &TaggerParams,
    inst: &TaggedSequence,
    pos: usize,
    with_char: bool,
) -> Result<NodeId> {
    let word = inst.words[pos];
    if word >= params.dims.vocab {
        return Err(Error::IndexOutOfRange { what: "vocabulary", index: word, size: params.dims.vocab });
    }
    match (&params.chars, with_char && is_rare(word, params.dims.vocab)) {
        (Some(cp), true) => {
            let spelling = inst.chars.get(pos).filter(|s| !s.is_empty()).ok_or_else(|| {
                Error::Contract(format!("rare word at position {pos} has no character sequence"))
            })?;
            let table = g.parameter(store, cp.table)?;
            let xs = spelling.iter().map(|&ch| g.lookup(table, ch)).collect::<Result<Vec<_>>>()?;
            let hf = *cp.fwd.run(g, store, &xs)?.last().expect("non-empty spelling");
            let rev: Vec<NodeId> = xs.iter().rev().copied().collect();
            let hb = *cp.bwd.run(g, store, &rev)?.last().expect("non-empty spelling");
            g.concat_rows(&[hf, hb])
        }
        (None, true) => Err(Error::Contract("character variant requested without character parameters".into())),
        _ => {
            let table = g.parameter(store, params.embed)?;
            g.lookup(table, word)
        }
    }
}

pub fn bilstm_tagger_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    inst: &TaggedSequence,
    params: &TaggerParams,
    with_char: bool,
) -> Result<NodeId> {
    if inst.words.is_empty() {
        return Err(Error::EmptyInput { op: "bilstm_tagger_loss" });
    }
    if inst.labels.len() != inst.words.len() {
        return Err(Error::Contract(format!("{} labels for {} tokens", inst.labels.len(), inst.words.len())));
    }
    let xs = (0..inst.words.len()).map(|i| embed_word(g, store, params, inst, i, with_char)).collect::<Result<Vec<_>>>()?;
    let hf = params.fwd.run(g, store, &xs)?;
    let rev: Vec<NodeId> = xs.iter().rev().copied().collect();
    let mut hb = params.bwd.run(g, store, &rev)?;
    hb.reverse();
    let v = g.parameter(store, params.out_w)?;
    let bv = g.parameter(store, params.out_b)?;
    let mut losses = Vec::with_capacity(xs.len());
    for ((&f, &b), &label) in hf.iter().zip(&hb).zip(&inst.labels) {
        let h = g.concat_rows(&[f, b])?;
        let scores = g.affine(v, h, bv)?;
        losses.push(g.pick_neg_log_softmax(scores, label)?);
    }
    g.sum_losses(&losses)
}
