//! Turns the unevaluated suffix of a graph into an [`ExecutionPlan`].
//!
//! Leaves (constants and parameters) carry their values from construction
//! and never appear in a plan. Every other pending node lands in exactly
//! one [`BatchGroup`]; groups are emitted in an order where each node's
//! inputs are produced by earlier groups.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Dag, NodeId};
use crate::signature::{cost_class, CostClass, Signature};

/// Execution strategy: sequential (NoAuto), depth-based or agenda-based batching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    None,
    Depth,
    #[default]
    Agenda,
}

impl BatchMode {
    pub const ALL: [BatchMode; 3] = [BatchMode::None, BatchMode::Depth, BatchMode::Agenda];

    pub fn as_str(self) -> &'static str {
        match self {
            BatchMode::None => "none",
            BatchMode::Depth => "depth",
            BatchMode::Agenda => "agenda",
        }
    }
}

impl fmt::Display for BatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BatchMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "noauto" => Ok(BatchMode::None),
            "depth" | "bydepth" => Ok(BatchMode::Depth),
            "agenda" | "byagenda" => Ok(BatchMode::Agenda),
            other => Err(format!("unknown batching mode `{other}` (expected none, depth or agenda)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchGroup {
    pub signature: Signature,
    pub members: Vec<NodeId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExecutionPlan {
    pub groups: Vec<BatchGroup>,
}

impl ExecutionPlan {
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn node_count(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).sum()
    }

    pub fn max_group_size(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).max().unwrap_or(0)
    }

    /// One line per group: `step  signature_hex  member_count  member_ids`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (step, g) in self.groups.iter().enumerate() {
            let ids: Vec<String> = g.members.iter().map(|m| m.0.to_string()).collect();
            let _ = writeln!(out, "{step}\t{:x}\t{}\t{}", g.signature, g.members.len(), ids.join(","));
        }
        out
    }
}

pub fn schedule(dag: &Dag, pending: Range<usize>, mode: BatchMode) -> Result<ExecutionPlan> {
    match mode {
        BatchMode::None => Ok(schedule_sequential(dag, pending)),
        BatchMode::Depth => Ok(schedule_by_depth(dag, pending)),
        BatchMode::Agenda => schedule_by_agenda(dag, pending),
    }
}

fn pending_nodes(dag: &Dag, pending: Range<usize>) -> impl Iterator<Item = NodeId> + '_ {
    pending.map(NodeId).filter(move |&id| !dag.node(id).op.is_leaf())
}

/// One singleton group per pending node, in id order.
pub fn schedule_sequential(dag: &Dag, pending: Range<usize>) -> ExecutionPlan {
    let groups = pending_nodes(dag, pending)
        .map(|id| BatchGroup { signature: dag.node(id).signature, members: vec![id] })
        .collect();
    ExecutionPlan { groups }
}

/// Groups nodes sharing (depth, signature), shallowest first.
pub fn schedule_by_depth(dag: &Dag, pending: Range<usize>) -> ExecutionPlan {
    let mut index: HashMap<(u32, u64), usize> = HashMap::new();
    let mut groups: Vec<(u32, BatchGroup)> = Vec::new();
    for id in pending_nodes(dag, pending) {
        let node = dag.node(id);
        let slot = *index.entry((node.depth, node.signature.hash)).or_insert_with(|| {
            groups.push((node.depth, BatchGroup { signature: node.signature, members: Vec::new() }));
            groups.len() - 1
        });
        groups[slot].1.members.push(id);
    }
    groups.sort_by_key(|(depth, g)| (*depth, g.members[0]));
    ExecutionPlan { groups: groups.into_iter().map(|(_, g)| g).collect() }
}

/// Mean depth of a signature's nodes as an exact fraction `sum / count`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AvgDepth {
    pub sum: u64,
    pub count: u64,
}

impl AvgDepth {
    fn add(&mut self, depth: u32) {
        self.sum += u64::from(depth);
        self.count += 1;
    }
}

impl Ord for AvgDepth {
    fn cmp(&self, other: &Self) -> Ordering {
        let lhs = u128::from(self.sum) * u128::from(other.count);
        let rhs = u128::from(other.sum) * u128::from(self.count);
        lhs.cmp(&rhs)
    }
}

impl PartialOrd for AvgDepth {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Per-signature depth statistics over a pending suffix.
pub fn signature_stats(dag: &Dag, pending: Range<usize>) -> HashMap<u64, AvgDepth> {
    let mut stats: HashMap<u64, AvgDepth> = HashMap::new();
    for id in pending_nodes(dag, pending) {
        let node = dag.node(id);
        stats.entry(node.signature.hash).or_default().add(node.depth);
    }
    stats
}

pub fn average_depth(stats: &HashMap<u64, AvgDepth>, sig: &Signature) -> Result<AvgDepth> {
    match stats.get(&sig.hash) {
        Some(avg) if avg.count > 0 => Ok(*avg),
        _ => Err(Error::Internal(format!("no depth statistics for signature {sig:?}"))),
    }
}

struct Bucket {
    signature: Signature,
    avg: AvgDepth,
    cost: CostClass,
    ready: Vec<u32>,
}

/// Agenda-based batching: repeatedly flushes the ready bucket whose signature
/// has the lowest average depth. Ties go to cheap ops first, then to the
/// bucket holding the smallest node id. Averages are fixed when scheduling
/// starts.
pub fn schedule_by_agenda(dag: &Dag, pending: Range<usize>) -> Result<ExecutionPlan> {
    let base = pending.start;
    let nodes: Vec<NodeId> = pending_nodes(dag, pending.clone()).collect();
    const NONE: u32 = u32::MAX;
    let mut local = vec![NONE; pending.len()];
    for (i, id) in nodes.iter().enumerate() {
        local[id.0 - base] = i as u32;
    }
    let local_of = |id: NodeId| -> u32 {
        if id.0 >= base {
            local[id.0 - base]
        } else {
            NONE
        }
    };

    let mut buckets: Vec<Bucket> = Vec::new();
    let mut bucket_of_sig: HashMap<u64, u32> = HashMap::new();
    let mut bucket_of = vec![0u32; nodes.len()];
    let mut unresolved = vec![0u32; nodes.len()];
    let mut succ_count = vec![0u32; nodes.len() + 1];
    for (i, &id) in nodes.iter().enumerate() {
        let node = dag.node(id);
        let b = *bucket_of_sig.entry(node.signature.hash).or_insert_with(|| {
            buckets.push(Bucket {
                signature: node.signature,
                avg: AvgDepth::default(),
                cost: cost_class(&node.op),
                ready: Vec::new(),
            });
            (buckets.len() - 1) as u32
        });
        buckets[b as usize].avg.add(node.depth);
        bucket_of[i] = b;
        for &input in dag.inputs(id) {
            let l = local_of(input);
            if l != NONE {
                unresolved[i] += 1;
                succ_count[l as usize + 1] += 1;
            }
        }
    }
    // Successor lists in one contiguous buffer.
    for i in 1..succ_count.len() {
        succ_count[i] += succ_count[i - 1];
    }
    let offsets = succ_count;
    let mut fill = offsets.clone();
    let mut succ = vec![0u32; *offsets.last().unwrap_or(&0) as usize];
    for (i, &id) in nodes.iter().enumerate() {
        for &input in dag.inputs(id) {
            let l = local_of(input);
            if l != NONE {
                succ[fill[l as usize] as usize] = i as u32;
                fill[l as usize] += 1;
            }
        }
    }

    let mut active: Vec<u32> = Vec::new();
    for i in 0..nodes.len() {
        if unresolved[i] == 0 {
            let b = bucket_of[i] as usize;
            if buckets[b].ready.is_empty() {
                active.push(b as u32);
            }
            buckets[b].ready.push(i as u32);
        }
    }

    let mut groups = Vec::new();
    let mut scheduled = 0usize;
    while scheduled < nodes.len() {
        let Some(best_pos) = pick_bucket(&buckets, &active) else {
            return Err(Error::Internal(format!(
                "agenda stalled with {} of {} nodes unscheduled",
                nodes.len() - scheduled,
                nodes.len()
            )));
        };
        let b = active.swap_remove(best_pos) as usize;
        let mut members = std::mem::take(&mut buckets[b].ready);
        members.sort_unstable();
        scheduled += members.len();
        for &m in &members {
            for &s in &succ[offsets[m as usize] as usize..offsets[m as usize + 1] as usize] {
                let s = s as usize;
                unresolved[s] -= 1;
                if unresolved[s] == 0 {
                    let sb = bucket_of[s] as usize;
                    if buckets[sb].ready.is_empty() {
                        active.push(sb as u32);
                    }
                    buckets[sb].ready.push(s as u32);
                }
            }
        }
        groups.push(BatchGroup {
            signature: buckets[b].signature,
            members: members.into_iter().map(|m| nodes[m as usize]).collect(),
        });
    }
    debug_assert!(unresolved.iter().all(|&u| u == 0));
    Ok(ExecutionPlan { groups })
}

fn pick_bucket(buckets: &[Bucket], active: &[u32]) -> Option<usize> {
    let first_member = |b: &Bucket| b.ready.iter().copied().min().unwrap_or(u32::MAX);
    let mut best: Option<usize> = None;
    for (pos, &b) in active.iter().enumerate() {
        let Some(cur) = best else {
            best = Some(pos);
            continue;
        };
        let (x, y) = (&buckets[b as usize], &buckets[active[cur] as usize]);
        let order = x
            .avg
            .cmp(&y.avg)
            .then(x.cost.cmp(&y.cost))
            .then_with(|| first_member(x).cmp(&first_member(y)));
        if order == Ordering::Less {
            best = Some(pos);
        }
    }
    best
}

/// Checks that `plan` covers every non-leaf node of `pending` exactly once,
/// that groups are signature-uniform, and that every input is produced by a
/// strictly earlier group (which also rules out dependencies inside a group).
pub fn validate_plan(dag: &Dag, pending: Range<usize>, plan: &ExecutionPlan) -> Result<()> {
    let violation = |msg: String| Err(Error::Internal(format!("invalid plan: {msg}")));
    let mut step_of: Vec<Option<usize>> = vec![None; pending.len()];
    for (step, group) in plan.groups.iter().enumerate() {
        if group.members.is_empty() {
            return violation(format!("group {step} is empty"));
        }
        for &m in &group.members {
            if !pending.contains(&m.0) || dag.node(m).op.is_leaf() {
                return violation(format!("group {step} schedules {m:?}, which is not pending"));
            }
            if dag.node(m).signature != group.signature {
                return violation(format!("group {step} mixes signatures at {m:?}"));
            }
            let slot = &mut step_of[m.0 - pending.start];
            if slot.is_some() {
                return violation(format!("{m:?} scheduled twice"));
            }
            *slot = Some(step);
        }
    }
    for id in pending_nodes(dag, pending.clone()) {
        let Some(step) = step_of[id.0 - pending.start] else {
            return violation(format!("{id:?} never scheduled"));
        };
        for &input in dag.inputs(id) {
            if input.0 < pending.start || dag.node(input).op.is_leaf() {
                continue;
            }
            match step_of[input.0 - pending.start] {
                Some(s) if s < step => {}
                _ => return violation(format!("{id:?} at step {step} runs before its input {input:?}")),
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::{Shape, Tensor};

    fn chain_graph() -> Graph<f64> {
        // two tanh chains of lengths 3 and 4
        let mut g = Graph::new();
        for len in [3, 4] {
            let mut x = g.input(Tensor::zeros(Shape::vector(2)));
            for _ in 0..len {
                x = g.tanh(x).unwrap();
            }
        }
        g
    }

    #[test]
    fn sequential_is_one_group_per_node() {
        let g = chain_graph();
        let plan = schedule_sequential(g.dag(), 0..g.node_count());
        assert_eq!(plan.group_count(), 7);
        assert!(plan.groups.iter().all(|gr| gr.members.len() == 1));
        validate_plan(g.dag(), 0..g.node_count(), &plan).unwrap();
    }

    #[test]
    fn depth_groups_equal_depths_only() {
        let g = chain_graph();
        let plan = schedule_by_depth(g.dag(), 0..g.node_count());
        let sizes: Vec<usize> = plan.groups.iter().map(|gr| gr.members.len()).collect();
        assert_eq!(sizes, vec![2, 2, 2, 1]);
        validate_plan(g.dag(), 0..g.node_count(), &plan).unwrap();
    }

    #[test]
    fn average_depth_comparisons() {
        let a = AvgDepth { sum: 2, count: 1 };
        let b = AvgDepth { sum: 4, count: 2 };
        assert_eq!(a.cmp(&b), Ordering::Equal);
        let c = AvgDepth { sum: 15, count: 3 };
        let d = AvgDepth { sum: 10, count: 2 };
        assert_eq!(c.cmp(&d), Ordering::Equal);
        assert!(AvgDepth { sum: 3, count: 2 } < a);
    }

    #[test]
    fn average_depth_unknown_signature() {
        let g = chain_graph();
        let stats = signature_stats(g.dag(), 0..g.node_count());
        let tanh = g.dag().node(NodeId(1)).signature;
        // tanh depths: 1,2,3 and 1,2,3,4
        assert_eq!(average_depth(&stats, &tanh).unwrap(), AvgDepth { sum: 16, count: 7 });
        let leaf = g.dag().node(NodeId(0)).signature;
        assert!(average_depth(&stats, &leaf).is_err());
    }

    #[test]
    fn agenda_tie_prefers_cheap_ops() {
        use crate::params::ParameterStore;
        let mut store = ParameterStore::<f64>::new();
        let w = store.add_zeros("w", Shape::matrix(2, 2));
        let mut g = Graph::new();
        let wn = g.parameter(&store, w).unwrap();
        let x = g.input(Tensor::zeros(Shape::vector(2)));
        // Both sit at depth 1 with single-node signatures.
        let mm = g.matmul(wn, x).unwrap();
        let th = g.tanh(x).unwrap();
        let plan = schedule_by_agenda(g.dag(), 0..g.node_count()).unwrap();
        assert_eq!(plan.groups[0].members, vec![th]);
        assert_eq!(plan.groups[1].members, vec![mm]);
    }

    #[test]
    fn plan_checker_rejects_bad_orders() {
        let g = chain_graph();
        let mut plan = schedule_sequential(g.dag(), 0..g.node_count());
        plan.groups.swap(0, 1);
        assert!(validate_plan(g.dag(), 0..g.node_count(), &plan).is_err());

        let mut plan = schedule_sequential(g.dag(), 0..g.node_count());
        plan.groups.pop();
        assert!(validate_plan(g.dag(), 0..g.node_count(), &plan).is_err());

        // A node and its own input fused into one group.
        let plan = ExecutionPlan {
            groups: vec![BatchGroup { signature: g.dag().node(NodeId(1)).signature, members: vec![NodeId(1), NodeId(2)] }],
        };
        assert!(validate_plan(g.dag(), 0..g.node_count(), &plan).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("ByAgenda".parse::<BatchMode>().unwrap(), BatchMode::Agenda);
        assert_eq!("none".parse::<BatchMode>().unwrap(), BatchMode::None);
        assert!("fastest".parse::<BatchMode>().is_err());
    }
}
