//! Random computation graphs for property tests: every operation kind,
//! shared and unshared parameters, several scalar losses summed at the end.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::executor::ExecOptions;
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{Real, Shape, Tensor};

const DIMS: [usize; 2] = [3, 5];
const COLS: usize = 2;

pub struct RandomGraph<T: Real = f64> {
    pub graph: Graph<T>,
    pub store: ParameterStore<T>,
    pub loss: NodeId,
}

/// Parameters for [`random_graph`], reproducible from `seed`.
pub fn random_store<T: Real>(seed: u64) -> ParameterStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut store = ParameterStore::new();
    for &r in &DIMS {
        for &c in &DIMS {
            store.add_random(format!("W{r}x{c}"), Shape::matrix(r, c), &mut rng);
        }
        store.add_random(format!("b{r}"), Shape::vector(r), &mut rng);
    }
    store.add_random("E", Shape::matrix(7, DIMS[0]), &mut rng);
    store
}

fn weight(r: usize, c: usize) -> ParamId {
    let ri = DIMS.iter().position(|&d| d == r).unwrap();
    let ci = DIMS.iter().position(|&d| d == c).unwrap();
    ParamId(ri * (DIMS.len() + 1) + ci)
}

fn bias(r: usize) -> ParamId {
    let ri = DIMS.iter().position(|&d| d == r).unwrap();
    ParamId(ri * (DIMS.len() + 1) + DIMS.len())
}

const TABLE: ParamId = ParamId(DIMS.len() * (DIMS.len() + 1));

fn random_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<T> {
    let data: Vec<f64> = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &data).expect("shape matches data")
}

/// Builds a graph of at most `max_nodes` nodes from `seed`, ending in a
/// scalar loss. The same seed always builds the same graph.
pub fn random_graph<T: Real>(seed: u64, max_nodes: usize, options: ExecOptions) -> Result<RandomGraph<T>> {
    let store = random_store::<T>(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::<T>::with_options(options);
    let mut vectors: Vec<Vec<NodeId>> = vec![Vec::new(); DIMS.len()];
    let mut matrices: Vec<NodeId> = Vec::new();
    let mut losses: Vec<NodeId> = Vec::new();
    let budget = max_nodes.max(16) - 8;

    for (i, &d) in DIMS.iter().enumerate() {
        for _ in 0..2 {
            let t = random_tensor(&mut rng, Shape::vector(d));
            vectors[i].push(g.input(t));
        }
    }
    for _ in 0..2 {
        let t = random_tensor(&mut rng, Shape::matrix(DIMS[0], COLS));
        matrices.push(g.input(t));
    }

    while g.node_count() + 6 < budget {
        let di = rng.gen_range(0..DIMS.len());
        let d = DIMS[di];
        let pick = |rng: &mut ChaCha8Rng, pool: &[NodeId]| *pool.choose(rng).expect("non-empty pool");
        let x = pick(&mut rng, &vectors[di]);
        match rng.gen_range(0..17) {
            0 => vectors[di].push(g.tanh(x)?),
            1 => vectors[di].push(g.sigmoid(x)?),
            2 => {
                let t = g.tanh(x)?;
                vectors[di].push(g.square(t)?);
            }
            3 => {
                let s = g.sigmoid(x)?;
                vectors[di].push(g.log(s)?);
            }
            4..=6 => {
                let y = pick(&mut rng, &vectors[di]);
                let z = match rng.gen_range(0..3) {
                    0 => g.add(x, y)?,
                    1 => g.sub(x, y)?,
                    _ => g.mul(x, y)?,
                };
                vectors[di].push(g.tanh(z)?);
            }
            7 | 8 => {
                let oi = rng.gen_range(0..DIMS.len());
                let w = g.parameter(&store, weight(DIMS[oi], d))?;
                let out = if rng.gen_bool(0.5) {
                    g.matmul(w, x)?
                } else {
                    let b = if rng.gen_bool(0.7) {
                        g.parameter(&store, bias(DIMS[oi]))?
                    } else {
                        pick(&mut rng, &vectors[oi])
                    };
                    g.affine(w, x, b)?
                };
                vectors[oi].push(g.tanh(out)?);
            }
            9 => {
                let m = pick(&mut rng, &matrices);
                let v = pick(&mut rng, &vectors[0]);
                let bm = g.broadcast_add_col(m, v)?;
                matrices.push(g.tanh(bm)?);
            }
            10 => {
                let a = pick(&mut rng, &matrices);
                let b = pick(&mut rng, &matrices);
                let cat = g.concat_cols(&[a, b])?;
                let start = rng.gen_range(0..=COLS);
                matrices.push(g.slice(cat, start, start + COLS)?);
            }
            11 => {
                let m = pick(&mut rng, &matrices);
                let v = g.slice(x, 0, COLS)?;
                let mv = g.matmul(m, v)?;
                vectors[0].push(mv);
            }
            12 => {
                let other = pick(&mut rng, &vectors[DIMS.len() - 1 - di]);
                let cat = g.concat_rows(&[x, other])?;
                let start = rng.gen_range(0..=DIMS[DIMS.len() - 1 - di]);
                vectors[di].push(g.slice(cat, start, start + d)?);
            }
            13 => {
                let table = g.parameter(&store, TABLE)?;
                vectors[0].push(g.lookup(table, rng.gen_range(0..7))?);
            }
            14 => losses.push(g.pick_neg_log_softmax(x, rng.gen_range(0..d))?),
            15 => {
                let y = pick(&mut rng, &vectors[di]);
                losses.push(g.sq_euclidean(x, y)?);
            }
            _ => {
                if rng.gen_bool(0.5) {
                    let m = pick(&mut rng, &matrices);
                    let mask: Vec<f64> = (0..COLS).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
                    let mask = g.input(Tensor::from_f64(Shape::vector(COLS), &mask)?);
                    losses.push(g.masked_loss(m, mask)?);
                } else {
                    losses.push(g.pick_element(x, rng.gen_range(0..d))?);
                }
            }
        }
    }
    // Tie every pool's newest value into the loss so most of the graph gets gradients.
    for pool in &vectors {
        let last = *pool.last().expect("seeded pool");
        losses.push(g.pick_neg_log_softmax(last, 0)?);
    }
    let m = *matrices.last().expect("seeded pool");
    let mask = g.input(Tensor::from_f64(Shape::vector(COLS), &[1.0, 1.0])?);
    losses.push(g.masked_loss(m, mask)?);
    let loss = g.sum_losses(&losses)?;
    Ok(RandomGraph { graph: g, store, loss })
}
