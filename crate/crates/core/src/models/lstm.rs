//! Standard LSTM cell with separate input and forget gates:
//!
//! ```text
//! [i; f; o; g] = W [h; x] + b
//! c' = σ(f) ⊙ c + σ(i) ⊙ tanh(g)
//! h' = σ(o) ⊙ tanh(c')
//! ```

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

impl LstmParams {
    pub fn new<T: Real, R: Rng>(store: &mut ParameterStore<T>, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let w = store.add_random(format!("{name}.W"), Shape::matrix(4 * hidden, hidden + input), rng);
        let b = store.add_zeros(format!("{name}.b"), Shape::vector(4 * hidden));
        LstmParams { w, b, input, hidden }
    }

    pub fn initial_state<T: Real>(&self, g: &mut Graph<T>) -> LstmState {
        let h = g.input(Tensor::zeros(Shape::vector(self.hidden)));
        let c = g.input(Tensor::zeros(Shape::vector(self.hidden)));
        LstmState { h, c }
    }

    pub fn step<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        state: LstmState,
        x: NodeId,
    ) -> Result<LstmState> {
        let d = self.hidden;
        let w = g.parameter(store, self.w)?;
        let b = g.parameter(store, self.b)?;
        let hx = g.concat_rows(&[state.h, x])?;
        let gates = g.affine(w, hx, b)?;
        let i = g.slice(gates, 0, d)?;
        let f = g.slice(gates, d, 2 * d)?;
        let o = g.slice(gates, 2 * d, 3 * d)?;
        let u = g.slice(gates, 3 * d, 4 * d)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let o = g.sigmoid(o)?;
        let u = g.tanh(u)?;
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, u)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    /// Hidden states after each element of `xs`, starting from zero.
    pub fn run<T: Real>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, xs: &[NodeId]) -> Result<Vec<NodeId>> {
        let mut state = self.initial_state(g);
        let mut hs = Vec::with_capacity(xs.len());
        for &x in xs {
            state = self.step(g, store, state, x)?;
            hs.push(state.h);
        }
        Ok(hs)
    }
}
