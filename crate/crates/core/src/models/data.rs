//! Seeded synthetic datasets. The same seed always yields the same data.

use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::models::rnn::SequenceInstance;
use crate::models::tagger::TaggedSequence;
use crate::models::tree::Tree;
use crate::tensor::{Real, Tensor};

pub const FIXED_LENGTH: usize = 40;
pub const VARIABLE_LENGTHS: (usize, usize) = (4, 40);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lengths {
    Fixed(usize),
    /// Uniform over the inclusive range.
    Uniform(usize, usize),
}

impl Lengths {
    fn sample(self, rng: &mut impl Rng) -> usize {
        match self {
            Lengths::Fixed(n) => n,
            Lengths::Uniform(lo, hi) => rng.gen_range(lo..=hi),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticTask {
    Regression { input: usize, output: usize },
    Tagging { vocab: usize, labels: usize, chars: usize },
    /// `Lengths` counts leaves.
    Trees { vocab: usize, labels: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset<T: Real = f64> {
    Regression(Vec<SequenceInstance<T>>),
    Tagged(Vec<TaggedSequence>),
    Trees(Vec<Tree>),
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Regression(d) => d.len(),
            Dataset::Tagged(d) => d.len(),
            Dataset::Trees(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One instance per line. Sequences list space-separated ids (or values),
    /// trees use the parenthesised form.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        match self {
            Dataset::Regression(d) => {
                for inst in d {
                    let steps: Vec<String> = inst
                        .x
                        .iter()
                        .map(|x| x.data().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
                        .collect();
                    let y: Vec<String> = inst.y.data().iter().map(|v| v.to_string()).collect();
                    let _ = writeln!(out, "{}\t{}", steps.join(" "), y.join(","));
                }
            }
            Dataset::Tagged(d) => {
                for inst in d {
                    let words: Vec<String> = inst.words.iter().map(|w| w.to_string()).collect();
                    let labels: Vec<String> = inst.labels.iter().map(|l| l.to_string()).collect();
                    let _ = writeln!(out, "{}\t{}", words.join(" "), labels.join(" "));
                }
            }
            Dataset::Trees(d) => {
                for t in d {
                    let _ = writeln!(out, "{t}");
                }
            }
        }
        out
    }
}

pub fn generate_synthetic<T: Real>(task: SyntheticTask, lengths: Lengths, size: usize, seed: u64) -> Dataset<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match task {
        SyntheticTask::Regression { input, output } => Dataset::Regression(
            (0..size)
                .map(|_| {
                    let n = lengths.sample(&mut rng).max(1);
                    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..input).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
                    // A learnable target: squashed per-feature means of the inputs.
                    let y: Vec<f64> = (0..output).map(|j| (x.iter().map(|xt| xt[j % input]).sum::<f64>() / n as f64).tanh()).collect();
                    SequenceInstance {
                        x: x.into_iter().map(|xt| Tensor::vector(xt.into_iter().map(T::from_f64_lossy).collect())).collect(),
                        y: Tensor::vector(y.into_iter().map(T::from_f64_lossy).collect::<Vec<_>>()),
                    }
                })
                .collect(),
        ),
        SyntheticTask::Tagging { vocab, labels, chars } => {
            let lexicon: Vec<Vec<usize>> =
                (0..vocab).map(|_| (0..rng.gen_range(2..=6)).map(|_| rng.gen_range(0..chars)).collect()).collect();
            Dataset::Tagged(
                (0..size)
                    .map(|_| {
                        let n = lengths.sample(&mut rng).max(1);
                        let words: Vec<usize> = (0..n).map(|_| rng.gen_range(0..vocab)).collect();
                        let labels = words.iter().map(|&w| w % labels).collect();
                        let chars = words.iter().map(|&w| lexicon[w].clone()).collect();
                        TaggedSequence { words, labels, chars }
                    })
                    .collect(),
            )
        }
        SyntheticTask::Trees { vocab, labels } => Dataset::Trees(
            (0..size).map(|_| random_tree(lengths.sample(&mut rng).max(1), vocab, labels, &mut rng)).collect(),
        ),
    }
}

fn random_tree(leaves: usize, vocab: usize, labels: usize, rng: &mut impl Rng) -> Tree {
    if leaves == 1 {
        let word = rng.gen_range(0..vocab);
        return Tree::Leaf { word, label: word % labels };
    }
    let split = rng.gen_range(1..leaves);
    let left = random_tree(split, vocab, labels, rng);
    let right = random_tree(leaves - split, vocab, labels, rng);
    let label = match (&left, &right) {
        (Tree::Leaf { label: a, .. } | Tree::Node { label: a, .. }, Tree::Leaf { label: b, .. } | Tree::Node { label: b, .. }) => {
            (a + b) % labels
        }
    };
    Tree::Node { label, left: Box::new(left), right: Box::new(right) }
}

/// A perfectly balanced tree over `leaves` (a power of two) with word ids `0..leaves`.
pub fn balanced_tree(leaves: usize, labels: usize) -> Tree {
    fn build(lo: usize, hi: usize, labels: usize) -> Tree {
        if hi - lo == 1 {
            return Tree::Leaf { word: lo, label: lo % labels };
        }
        let mid = (lo + hi) / 2;
        Tree::Node { label: (lo + hi) % labels, left: Box::new(build(lo, mid, labels)), right: Box::new(build(mid, hi, labels)) }
    }
    build(0, leaves.max(1), labels)
}
