//! Runs execution plans: one batched kernel per group on the way forward,
//! the same groups in reverse for gradients.
//!
//! Values live in a bump-allocated arena owned by the graph. A group's
//! outputs get adjacent slots in member order, so a later group consuming
//! those outputs in the same order reads them in place instead of copying
//! them into a gather buffer. Gradients use a parallel arena with the same
//! offsets. Parameters stay in the [`ParameterStore`]; their gradients are
//! accumulated per graph and added to the store at the end of backward.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Dag, NodeId, OpKind, PhaseTimes};
use crate::kernels::{self, ElemOp};
use crate::params::{ParamId, ParameterStore};
use crate::scheduler::{BatchGroup, ExecutionPlan};
use crate::signature::SigClass;
use crate::tensor::{Real, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    /// Read adjacent, in-order operands in place instead of copying them.
    pub copy_elision: bool,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions { copy_elision: true }
    }
}

/// Exact instrumentation counts, accumulated over a graph's lifetime.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Forward kernel calls; one per executed group.
    pub kernel_invocations: u64,
    pub backward_invocations: u64,
    pub groups_executed: u64,
    pub nodes_executed: u64,
    /// Operand gathers that needed a copy into scratch memory.
    pub gather_copies: u64,
    /// Multi-member operand gathers served in place.
    pub gather_views: u64,
    pub bytes_copied: u64,
}

impl Counters {
    pub fn merge(&mut self, other: &Counters) {
        self.kernel_invocations += other.kernel_invocations;
        self.backward_invocations += other.backward_invocations;
        self.groups_executed += other.groups_executed;
        self.nodes_executed += other.nodes_executed;
        self.gather_copies += other.gather_copies;
        self.gather_views += other.gather_views;
        self.bytes_copied += other.bytes_copied;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Slot {
    Pending,
    Arena(usize),
    Param(ParamId),
}

pub(crate) struct ExecState<T> {
    pub values: Vec<T>,
    pub slots: Vec<Slot>,
    pub grads: Vec<T>,
    pub counters: Counters,
    options: ExecOptions,
    param_grads: HashMap<ParamId, Vec<T>>,
    transposed: HashMap<ParamId, (u64, Vec<T>)>,
    scratch: Vec<T>,
    grad_scratch: Vec<T>,
}

impl<T: Real> ExecState<T> {
    pub fn new(options: ExecOptions) -> Self {
        ExecState {
            values: Vec::new(),
            slots: Vec::new(),
            grads: Vec::new(),
            counters: Counters::default(),
            options,
            param_grads: HashMap::new(),
            transposed: HashMap::new(),
            scratch: Vec::new(),
            grad_scratch: Vec::new(),
        }
    }

    /// Forgets every value but keeps the buffers' capacity.
    pub fn reset(&mut self) {
        self.values.clear();
        self.slots.clear();
        self.grads.clear();
        self.counters = Counters::default();
        self.param_grads.clear();
        self.transposed.clear();
        self.scratch.clear();
        self.grad_scratch.clear();
    }

    pub fn store_constant(&mut self, data: &[T]) {
        self.slots.push(Slot::Arena(self.values.len()));
        self.values.extend_from_slice(data);
    }
}

/// Where one operand position of a group lives after gathering.
#[derive(Debug, Clone, Copy)]
enum Operand {
    /// Contiguous, in member order, inside the value arena.
    Arena { off: usize, len: usize },
    Param(ParamId),
    Scratch { off: usize, len: usize },
}

impl Operand {
    fn resolve<'a, T: Real>(self, arena: &'a [T], scratch: &'a [T], store: &'a ParameterStore<T>) -> &'a [T] {
        match self {
            Operand::Arena { off, len } => &arena[off..off + len],
            Operand::Scratch { off, len } => &scratch[off..off + len],
            Operand::Param(p) => store.value(p).data(),
        }
    }
}

fn value_of<'a, T: Real>(
    dag: &Dag,
    slots: &[Slot],
    arena: &'a [T],
    store: &'a ParameterStore<T>,
    id: NodeId,
) -> &'a [T] {
    match slots[id.0] {
        Slot::Arena(off) => &arena[off..off + dag.node(id).shape.numel()],
        Slot::Param(p) => store.value(p).data(),
        Slot::Pending => panic!("{id:?} read before evaluation"),
    }
}

/// Collects operand `pos` of every member into one contiguous block,
/// skipping the copy when the sources already sit next to each other.
#[allow(clippy::too_many_arguments)]
fn gather<T: Real>(
    dag: &Dag,
    slots: &[Slot],
    arena: &[T],
    store: &ParameterStore<T>,
    members: &[NodeId],
    pos: usize,
    elide: bool,
    scratch: &mut Vec<T>,
    counters: &mut Counters,
) -> Operand {
    let source = |m: NodeId| dag.inputs(m)[pos];
    let first = source(members[0]);
    if members.len() == 1 {
        return match slots[first.0] {
            Slot::Param(p) => Operand::Param(p),
            Slot::Arena(off) => Operand::Arena { off, len: dag.node(first).shape.numel() },
            Slot::Pending => panic!("{first:?} read before evaluation"),
        };
    }
    if elide {
        if let Slot::Arena(start) = slots[first.0] {
            let mut end = start;
            let contiguous = members.iter().all(|&m| {
                let s = source(m);
                match slots[s.0] {
                    Slot::Arena(off) if off == end => {
                        end += dag.node(s).shape.numel();
                        true
                    }
                    _ => false,
                }
            });
            if contiguous {
                counters.gather_views += 1;
                return Operand::Arena { off: start, len: end - start };
            }
        }
    }
    let off = scratch.len();
    for &m in members {
        scratch.extend_from_slice(value_of(dag, slots, arena, store, source(m)));
    }
    let len = scratch.len() - off;
    counters.gather_copies += 1;
    counters.bytes_copied += (len * std::mem::size_of::<T>()) as u64;
    Operand::Scratch { off, len }
}

/// The shared left factor when a group can run as one matrix product:
/// a parameter `W` applied to one vector per member.
fn fused_product(dag: &Dag, group: &BatchGroup) -> Option<ParamId> {
    if group.signature.class != SigClass::SharedElement {
        return None;
    }
    let first = group.members[0];
    let inputs = dag.inputs(first);
    match dag.node(inputs[0]).op {
        OpKind::Parameter(p) if dag.node(inputs[1]).shape.is_vector() => Some(p),
        _ => None,
    }
}

fn tag(step: usize, node: NodeId) -> impl FnOnce(Error) -> Error {
    move |e| Error::Kernel { step, node, source: Box::new(e) }
}

pub(crate) fn execute_forward<T: Real>(
    dag: &Dag,
    st: &mut ExecState<T>,
    store: &ParameterStore<T>,
    plan: &ExecutionPlan,
) -> Result<()> {
    for (step, group) in plan.groups.iter().enumerate() {
        forward_group(dag, st, store, group, step)?;
    }
    Ok(())
}

fn forward_group<T: Real>(
    dag: &Dag,
    st: &mut ExecState<T>,
    store: &ParameterStore<T>,
    group: &BatchGroup,
    step: usize,
) -> Result<()> {
    let members = &group.members;
    let first = members[0];
    let op = dag.node(first).op;

    let fused = fused_product(dag, group);
    if let Some(p) = fused {
        let slot = store.slot(p)?;
        if st.transposed.get(&p).map(|(stamp, _)| *stamp) != Some(slot.stamp()) {
            let w = &slot.value;
            let (m, k) = (w.shape().rows(), w.shape().cols());
            let mut wt = vec![T::zero(); m * k];
            kernels::transpose(m, k, w.data(), &mut wt);
            st.transposed.insert(p, (slot.stamp(), wt));
        }
    }

    // Parameter values must still match the shapes recorded at construction.
    for &m in members {
        for &input in dag.inputs(m) {
            if let Slot::Param(p) = st.slots[input.0] {
                if store.slot(p)?.value.shape() != dag.node(input).shape {
                    return Err(Error::dims("parameter", dag.node(input).shape, store.value(p).shape()));
                }
            }
        }
    }

    let out_off = st.values.len();
    let total: usize = members.iter().map(|&m| dag.node(m).shape.numel()).sum();
    st.values.resize(out_off + total, T::zero());
    let ExecState { values, slots, counters, options, transposed, scratch, .. } = st;
    let (arena, out) = values.split_at_mut(out_off);
    scratch.clear();

    if members.len() == 1 && fused.is_none() {
        let inputs: Vec<&[T]> = dag.inputs(first).iter().map(|&i| value_of(dag, slots, arena, store, i)).collect();
        let shapes: Vec<Shape> = dag.inputs(first).iter().map(|&i| dag.node(i).shape).collect();
        forward_single(&op, &shapes, &inputs, out).map_err(tag(step, first))?;
    } else if let Some(p) = fused {
        let x = gather(dag, slots, arena, store, members, 1, options.copy_elision, scratch, counters);
        let y = (op == OpKind::Affine && !dag.is_parameter(dag.inputs(first)[2]))
            .then(|| gather(dag, slots, arena, store, members, 2, options.copy_elision, scratch, counters));
        let w_shape = store.value(p).shape();
        let (rows, inner) = (w_shape.rows(), w_shape.cols());
        let xs = x.resolve(arena, scratch, store);
        kernels::gemm(members.len(), inner, rows, xs, &transposed[&p].1, out, false);
        if op == OpKind::Affine {
            match y {
                Some(y) => kernels::add_assign(out, y.resolve(arena, scratch, store)),
                None => {
                    let bias = value_of(dag, slots, arena, store, dag.inputs(first)[2]);
                    for row in out.chunks_mut(rows) {
                        kernels::add_assign(row, bias);
                    }
                }
            }
        }
    } else if let OpKind::Elementwise(e) = op {
        let a = gather(dag, slots, arena, store, members, 0, options.copy_elision, scratch, counters);
        let b = (e.arity() == 2)
            .then(|| gather(dag, slots, arena, store, members, 1, options.copy_elision, scratch, counters));
        let xs = a.resolve(arena, scratch, store);
        if e == ElemOp::Log {
            let mut at = 0;
            for &m in members {
                let len = dag.node(m).shape.numel();
                if let Some(v) = xs[at..at + len].iter().find(|v| **v <= T::zero()) {
                    let err = Error::Domain { op: "log", reason: format!("non-positive input {v}") };
                    return Err(tag(step, m)(err));
                }
                at += len;
            }
        }
        match b {
            None => kernels::unary(e, xs, out),
            Some(b) => kernels::binary(e, xs, b.resolve(arena, scratch, store), out),
        }
    } else {
        // Stack each operand position along the batch, then run the
        // member-sized kernel over consecutive slices of the stacks.
        let arity = dag.inputs(first).len();
        let shared_table = matches!(op, OpKind::Lookup { .. });
        let operands: Vec<Operand> = (0..arity)
            .map(|pos| {
                if shared_table {
                    gather(dag, slots, arena, store, &members[..1], pos, false, scratch, counters)
                } else {
                    gather(dag, slots, arena, store, members, pos, options.copy_elision, scratch, counters)
                }
            })
            .collect();
        let stacks: Vec<&[T]> = operands.iter().map(|o| o.resolve(arena, scratch, store)).collect();
        let mut cursors = vec![0usize; arity];
        let mut out_at = 0;
        for &m in members {
            let inputs = dag.inputs(m);
            let shapes: Vec<Shape> = inputs.iter().map(|&i| dag.node(i).shape).collect();
            let slices: Vec<&[T]> = (0..arity)
                .map(|pos| {
                    if shared_table {
                        stacks[pos]
                    } else {
                        let len = shapes[pos].numel();
                        let s = &stacks[pos][cursors[pos]..cursors[pos] + len];
                        cursors[pos] += len;
                        s
                    }
                })
                .collect();
            let len = dag.node(m).shape.numel();
            let m_op = dag.node(m).op;
            forward_single(&m_op, &shapes, &slices, &mut out[out_at..out_at + len]).map_err(tag(step, m))?;
            out_at += len;
        }
    }

    let mut at = 0;
    for &m in members {
        let len = dag.node(m).shape.numel();
        if !kernels::all_finite(&out[at..at + len]) {
            return Err(tag(step, m)(Error::NonFinite { op: op.name() }));
        }
        slots[m.0] = Slot::Arena(out_off + at);
        at += len;
    }
    counters.kernel_invocations += 1;
    counters.groups_executed += 1;
    counters.nodes_executed += members.len() as u64;
    Ok(())
}

/// Unbatched forward kernel for one node.
fn forward_single<T: Real>(op: &OpKind, shapes: &[Shape], x: &[&[T]], out: &mut [T]) -> Result<()> {
    match *op {
        OpKind::InputConst | OpKind::Parameter(_) => unreachable!("leaves are never executed"),
        OpKind::Lookup { index } => {
            let cols = shapes[0].cols();
            out.copy_from_slice(&x[0][index * cols..(index + 1) * cols]);
        }
        OpKind::MatMul | OpKind::Affine => {
            let (m, k, n) = (shapes[0].rows(), shapes[0].cols(), shapes[1].cols());
            kernels::gemm(m, k, n, x[0], x[1], out, false);
            if *op == OpKind::Affine {
                kernels::add_assign(out, x[2]);
            }
        }
        OpKind::Elementwise(e) => {
            if e.arity() == 1 {
                if e == ElemOp::Log {
                    if let Some(v) = x[0].iter().find(|v| **v <= T::zero()) {
                        return Err(Error::Domain { op: "log", reason: format!("non-positive input {v}") });
                    }
                }
                kernels::unary(e, x[0], out);
            } else {
                kernels::binary(e, x[0], x[1], out);
            }
        }
        OpKind::BroadcastAddCol => {
            let cols = shapes[0].cols();
            for (i, (o, row)) in out.chunks_mut(cols).zip(x[0].chunks(cols)).enumerate() {
                let b = x[1][i];
                o.iter_mut().zip(row).for_each(|(o, &v)| *o = v + b);
            }
        }
        OpKind::ConcatCols => {
            let rows = shapes[0].rows();
            let total: usize = shapes.iter().map(|s| s.cols()).sum();
            let mut col = 0;
            for (s, src) in shapes.iter().zip(x) {
                let w = s.cols();
                for i in 0..rows {
                    out[i * total + col..i * total + col + w].copy_from_slice(&src[i * w..(i + 1) * w]);
                }
                col += w;
            }
        }
        OpKind::ConcatRows => {
            let mut at = 0;
            for src in x {
                out[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
        OpKind::Slice { start, end } => {
            let s = shapes[0];
            if s.is_vector() {
                out.copy_from_slice(&x[0][start..end]);
            } else {
                let (cols, w) = (s.cols(), end - start);
                for i in 0..s.rows() {
                    out[i * w..(i + 1) * w].copy_from_slice(&x[0][i * cols + start..i * cols + end]);
                }
            }
        }
        OpKind::SqEuclidean => out[0] = kernels::sum_sq_diff(x[0], x[1]),
        OpKind::MaskedLoss => {
            if let Some(m) = x[1].iter().find(|m| **m != T::zero() && **m != T::one()) {
                return Err(Error::Domain { op: "masked_loss", reason: format!("mask entry {m} not in {{0,1}}") });
            }
            out[0] = kernels::masked_sum_sq(shapes[0].rows(), shapes[0].cols(), x[0], x[1]);
        }
        OpKind::SumLosses => out[0] = x.iter().fold(T::zero(), |acc, l| acc + l[0]),
        OpKind::PickElement { index } => out[0] = x[0][index],
        OpKind::PickNegLogSoftmax { label } => out[0] = kernels::neg_log_softmax(x[0], label, None),
    }
    Ok(())
}

/// Accumulates into `dst` the gradient flowing to operand `pos` of one node.
#[allow(clippy::too_many_arguments)]
fn backward_single<T: Real>(
    op: &OpKind,
    pos: usize,
    shapes: &[Shape],
    x: &[&[T]],
    y: &[T],
    g: &[T],
    dst: &mut [T],
) {
    let two = T::one() + T::one();
    match *op {
        OpKind::InputConst | OpKind::Parameter(_) => unreachable!(),
        OpKind::Lookup { index } => {
            let cols = shapes[0].cols();
            kernels::add_assign(&mut dst[index * cols..(index + 1) * cols], g);
        }
        OpKind::MatMul | OpKind::Affine => {
            let (m, k, n) = (shapes[0].rows(), shapes[0].cols(), shapes[1].cols());
            match pos {
                0 => {
                    // dA += G · Bᵀ
                    let mut bt = vec![T::zero(); k * n];
                    kernels::transpose(k, n, x[1], &mut bt);
                    kernels::gemm(m, n, k, g, &bt, dst, true);
                }
                1 => {
                    // dB += Aᵀ · G
                    let mut at = vec![T::zero(); m * k];
                    kernels::transpose(m, k, x[0], &mut at);
                    kernels::gemm(k, m, n, &at, g, dst, true);
                }
                _ => kernels::add_assign(dst, g),
            }
        }
        OpKind::Elementwise(e) => {
            if e.arity() == 1 {
                kernels::unary_backward(e, x[0], y, g, dst);
            } else {
                kernels::binary_backward(e, pos, x[0], x[1], g, dst);
            }
        }
        OpKind::BroadcastAddCol => {
            if pos == 0 {
                kernels::add_assign(dst, g);
            } else {
                let cols = shapes[0].cols();
                for (d, row) in dst.iter_mut().zip(g.chunks(cols)) {
                    *d = *d + row.iter().copied().sum::<T>();
                }
            }
        }
        OpKind::ConcatCols => {
            let rows = shapes[0].rows();
            let total: usize = shapes.iter().map(|s| s.cols()).sum();
            let col: usize = shapes[..pos].iter().map(|s| s.cols()).sum();
            let w = shapes[pos].cols();
            for i in 0..rows {
                kernels::add_assign(&mut dst[i * w..(i + 1) * w], &g[i * total + col..i * total + col + w]);
            }
        }
        OpKind::ConcatRows => {
            let at: usize = shapes[..pos].iter().map(|s| s.numel()).sum();
            kernels::add_assign(dst, &g[at..at + shapes[pos].numel()]);
        }
        OpKind::Slice { start, end } => {
            let s = shapes[0];
            if s.is_vector() {
                kernels::add_assign(&mut dst[start..end], g);
            } else {
                let (cols, w) = (s.cols(), end - start);
                for i in 0..s.rows() {
                    kernels::add_assign(&mut dst[i * cols + start..i * cols + end], &g[i * w..(i + 1) * w]);
                }
            }
        }
        OpKind::SqEuclidean => {
            let scale = if pos == 0 { two * g[0] } else { -two * g[0] };
            for ((d, &a), &b) in dst.iter_mut().zip(x[0]).zip(x[1]) {
                *d = *d + scale * (a - b);
            }
        }
        OpKind::MaskedLoss => {
            let cols = shapes[0].cols();
            for (i, d) in dst.iter_mut().enumerate() {
                let m = x[1][i % cols];
                *d = *d + two * g[0] * x[0][i] * m * m;
            }
        }
        OpKind::SumLosses => dst[0] = dst[0] + g[0],
        OpKind::PickElement { index } => dst[index] = dst[index] + g[0],
        OpKind::PickNegLogSoftmax { label } => {
            let mut probs = vec![T::zero(); x[0].len()];
            kernels::neg_log_softmax(x[0], label, Some(&mut probs));
            for (d, p) in dst.iter_mut().zip(probs) {
                *d = *d + g[0] * p;
            }
            dst[label] = dst[label] - g[0];
        }
    }
}

/// Gradient destinations below the output region of the group being processed.
struct GradSink<'a, T> {
    slots: &'a [Slot],
    lower: &'a mut [T],
    params: &'a mut HashMap<ParamId, Vec<T>>,
}

impl<T: Real> GradSink<'_, T> {
    fn dst(&mut self, dag: &Dag, id: NodeId) -> &mut [T] {
        match self.slots[id.0] {
            Slot::Arena(off) => &mut self.lower[off..off + dag.node(id).shape.numel()],
            Slot::Param(p) => self.params.get_mut(&p).expect("parameter gradient buffer").as_mut_slice(),
            Slot::Pending => panic!("{id:?} has no value"),
        }
    }

    /// Adds a stacked gradient back into each member's operand `pos`.
    fn scatter(&mut self, dag: &Dag, members: &[NodeId], pos: usize, stacked: &[T]) {
        let mut at = 0;
        for &m in members {
            let src = dag.inputs(m)[pos];
            let len = dag.node(src).shape.numel();
            kernels::add_assign(self.dst(dag, src), &stacked[at..at + len]);
            at += len;
        }
    }
}

fn wants_grad(dag: &Dag, member: NodeId, pos: usize) -> bool {
    let op = dag.node(member).op;
    op.differentiable(pos) && dag.node(dag.inputs(member)[pos]).requires_grad
}

/// Whether any member needs the gradient of operand `pos`. Batched kernels
/// then compute it for all members; members fed by constants receive
/// gradients nobody reads.
fn any_wants_grad(dag: &Dag, members: &[NodeId], pos: usize) -> bool {
    members.iter().any(|&m| wants_grad(dag, m, pos))
}

pub(crate) fn execute_backward<T: Real>(
    dag: &Dag,
    st: &mut ExecState<T>,
    store: &mut ParameterStore<T>,
    plans: &[ExecutionPlan],
    loss: NodeId,
    times: &mut PhaseTimes,
) -> Result<()> {
    let start = Instant::now();
    st.grads.clear();
    st.grads.resize(st.values.len(), T::zero());
    st.param_grads.retain(|_, _| false);
    for slot in &st.slots {
        if let Slot::Param(p) = *slot {
            st.param_grads.insert(p, vec![T::zero(); store.value(p).shape().numel()]);
        }
    }
    // Nodes whose gradient can be non-zero.
    let mut reaches = vec![false; dag.len()];
    reaches[loss.0] = true;
    for i in (0..=loss.0).rev() {
        if reaches[i] {
            for &input in dag.inputs(NodeId(i)) {
                reaches[input.0] |= dag.node(input).requires_grad;
            }
        }
    }
    match st.slots[loss.0] {
        Slot::Arena(off) => st.grads[off] = T::one(),
        Slot::Param(p) => st.param_grads.get_mut(&p).expect("parameter gradient buffer")[0] = T::one(),
        Slot::Pending => return Err(Error::Contract(format!("backward from unevaluated {loss:?}"))),
    }
    times.backward_prep += start.elapsed();

    let start = Instant::now();
    for plan in plans.iter().rev() {
        for group in plan.groups.iter().rev() {
            let live = group.members.iter().any(|&m| reaches[m.0] && dag.node(m).requires_grad);
            if live {
                backward_group(dag, st, store, group);
            }
        }
    }
    for (p, g) in &st.param_grads {
        kernels::add_assign(store.gradient_mut(*p)?.data_mut(), g);
    }
    times.backward += start.elapsed();
    Ok(())
}

fn backward_group<T: Real>(dag: &Dag, st: &mut ExecState<T>, store: &ParameterStore<T>, group: &BatchGroup) {
    let members = &group.members;
    let first = members[0];
    let op = dag.node(first).op;
    let Slot::Arena(out_off) = st.slots[first.0] else {
        panic!("{first:?} missing forward value");
    };
    let total: usize = members.iter().map(|&m| dag.node(m).shape.numel()).sum();
    let ExecState { values, slots, grads, counters, options, param_grads, scratch, grad_scratch, .. } = st;
    let (lower, upper) = grads.split_at_mut(out_off);
    let g = &upper[..total];
    let y = &values[out_off..out_off + total];
    let arena = &values[..out_off];
    let mut sink = GradSink { slots, lower, params: param_grads };
    scratch.clear();
    counters.backward_invocations += 1;
    let elide = options.copy_elision;
    let n = members.len();

    if let Some(p) = fused_product(dag, group) {
        let w = store.value(p);
        let (rows, inner) = (w.shape().rows(), w.shape().cols());
        let x = gather(dag, sink.slots, arena, store, members, 1, elide, scratch, counters);
        let xs = x.resolve(arena, scratch, store);
        // dW += Gᵀ · X
        grad_scratch.clear();
        grad_scratch.resize(rows * n, T::zero());
        kernels::transpose(n, rows, g, grad_scratch);
        let dw = sink.params.get_mut(&p).expect("parameter gradient buffer");
        kernels::gemm(rows, n, inner, grad_scratch, xs, dw, true);
        // dX += G · W
        if any_wants_grad(dag, members, 1) {
            match x {
                Operand::Arena { off, len } => {
                    kernels::gemm(n, rows, inner, g, w.data(), &mut sink.lower[off..off + len], true);
                }
                _ => {
                    grad_scratch.clear();
                    grad_scratch.resize(n * inner, T::zero());
                    kernels::gemm(n, rows, inner, g, w.data(), grad_scratch, false);
                    sink.scatter(dag, members, 1, grad_scratch);
                }
            }
        }
        if op == OpKind::Affine && any_wants_grad(dag, members, 2) {
            let bias = dag.inputs(first)[2];
            if dag.is_parameter(bias) {
                let db = sink.dst(dag, bias);
                for row in g.chunks(rows) {
                    kernels::add_assign(db, row);
                }
            } else {
                sink.scatter(dag, members, 2, g);
            }
        }
        return;
    }

    if let OpKind::Elementwise(e) = op {
        if n > 1 {
            let a = gather(dag, sink.slots, arena, store, members, 0, elide, scratch, counters);
            let b = (e.arity() == 2).then(|| gather(dag, sink.slots, arena, store, members, 1, elide, scratch, counters));
            let xa = a.resolve(arena, scratch, store);
            let xb = b.map(|b| b.resolve(arena, scratch, store));
            for (pos, operand) in std::iter::once(a).chain(b).enumerate() {
                if !any_wants_grad(dag, members, pos) {
                    continue;
                }
                let run = |dst: &mut [T]| match xb {
                    None => kernels::unary_backward(e, xa, y, g, dst),
                    Some(xb) => kernels::binary_backward(e, pos, xa, xb, g, dst),
                };
                match operand {
                    Operand::Arena { off, len } => run(&mut sink.lower[off..off + len]),
                    _ => {
                        grad_scratch.clear();
                        grad_scratch.resize(total, T::zero());
                        run(grad_scratch);
                        sink.scatter(dag, members, pos, grad_scratch);
                    }
                }
            }
            return;
        }
    }

    let mut at = 0;
    for &m in members {
        let len = dag.node(m).shape.numel();
        let inputs = dag.inputs(m);
        let shapes: Vec<Shape> = inputs.iter().map(|&i| dag.node(i).shape).collect();
        let xs: Vec<&[T]> = inputs.iter().map(|&i| value_of(dag, sink.slots, arena, store, i)).collect();
        let m_op = dag.node(m).op;
        for (pos, &input) in inputs.iter().enumerate() {
            if wants_grad(dag, m, pos) {
                let dst = sink.dst(dag, input);
                backward_single(&m_op, pos, &shapes, &xs, &y[at..at + len], &g[at..at + len], dst);
            }
        }
        at += len;
    }
}
