//! Per-operator shape/dataflow selection and multi-PU partitioning.
//!
//! Projection and FFN operators are spread over all PUs with one of four
//! partition modes; attention is scheduled head-parallel with the softmax
//! interleaved between linear stages.

use std::collections::HashMap;
use std::fmt;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::array::{logical_shapes, select_logical_shape, ArrayConfig, Dataflow, LogicalShape};
use crate::error::{Error, Result};
use crate::perf::{
    core_cost_instances, core_cost_with_shape, mac_tree_cycles, op_temporal_limit, tile_instances, Activity, CostReport,
    MacTreeConfig,
};
use crate::system::SystemConfig;
use crate::workload::{AttentionMeta, GemmOp, Nonlinear, OpClass, OperatorGraph};

/// Multi-PU partition mode, in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "IS-S")]
    IsS,
    #[serde(rename = "OS-S")]
    OsS,
    #[serde(rename = "IS-ST")]
    IsSt,
    #[serde(rename = "OS-ST")]
    OsSt,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::IsS, Mode::OsS, Mode::IsSt, Mode::OsSt];

    pub fn dataflow(self) -> Dataflow {
        match self {
            Mode::IsS | Mode::IsSt => Dataflow::Is,
            Mode::OsS | Mode::OsSt => Dataflow::Os,
        }
    }

    pub fn is_spatio_temporal(self) -> bool {
        matches!(self, Mode::IsSt | Mode::OsSt)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Mode::IsS => "IS-S",
            Mode::OsS => "OS-S",
            Mode::IsSt => "IS-ST",
            Mode::OsSt => "OS-ST",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s) || m.label().replace('-', "_").eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Topology {
    Chain1x16,
    Mesh4x4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dim {
    N,
    K,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CollectiveKind {
    AllReduce,
    AllGather,
}

/// One ring collective over `ring_size` PUs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Collective {
    pub kind: CollectiveKind,
    pub ring_size: u64,
    pub payload_bytes: u64,
}

impl Collective {
    /// Bytes each PU sends under the ring algorithm.
    pub fn bytes_per_pu(&self) -> f64 {
        if self.ring_size <= 1 {
            return 0.0;
        }
        let p = self.ring_size as f64;
        let steps = match self.kind {
            CollectiveKind::AllReduce => 2.0 * (p - 1.0) / p,
            CollectiveKind::AllGather => (p - 1.0) / p,
        };
        steps * self.payload_bytes as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub mode: Mode,
    pub topology: Topology,
    pub spatial_dim: Dim,
    pub spatial_factor: u64,
    /// Time blocks of the temporal dimension, one per mesh row; 1 for -S.
    pub temporal_factor: u64,
    pub collectives: Vec<Collective>,
    /// Sub-operator after the spatial split; the temporal dimension is
    /// still whole.
    pub per_pu_op: GemmOp,
    /// Work of one PU: `block_instances` copies of `block_op`.
    pub block_op: GemmOp,
    pub block_instances: u64,
    pub feasible: bool,
}

/// Splits `instances` independent GEMMs of `n` output columns over `parts`
/// workers by output column. Whole instances are dealt first; when there are
/// fewer instances than workers each instance's columns are split further.
/// Returns instances and columns per worker (the largest share) and the
/// number of busy workers.
pub fn split_columns(instances: u64, n: u64, parts: u64) -> (u64, u64, u64) {
    let instances = instances.max(1);
    if instances >= parts {
        (instances.div_ceil(parts), n, parts)
    } else {
        let per = (parts / instances).min(n).max(1);
        (1, n.div_ceil(per), instances * per)
    }
}

/// Enumerates the four partition plans of `op` in tie-break order.
///
/// Spatial factors are `num_pus` for -S modes and the mesh side for -ST
/// modes, whose other mesh axis carries time blocks. An operator with
/// several independent instances is split by output column across the
/// instances, so N splits hand whole instances to PUs.
pub fn partition_modes(op: &GemmOp, num_pus: u64) -> Vec<PartitionPlan> {
    let side = (num_pus as f64).sqrt().round() as u64;
    let mesh_ok = side * side == num_pus;
    let payload = op.m * op.n * op.count * op.elem_bytes;
    Mode::ALL
        .into_iter()
        .map(|mode| {
            let (spatial_dim, spatial_factor, temporal_factor, topology) = match mode {
                Mode::IsS => (Dim::K, num_pus, 1, Topology::Chain1x16),
                Mode::OsS => (Dim::N, num_pus, 1, Topology::Chain1x16),
                Mode::IsSt => (Dim::K, side, side, Topology::Mesh4x4),
                Mode::OsSt => (Dim::N, side, side, Topology::Mesh4x4),
            };
            // OS splits N spatially and K into time blocks; IS the reverse.
            let (n_parts, k_parts) = match spatial_dim {
                Dim::N => (spatial_factor, temporal_factor),
                Dim::K => (temporal_factor, spatial_factor),
            };
            let columns = op.n * op.count.max(1);
            let mut feasible = columns >= n_parts && op.k >= k_parts;
            if mode.is_spatio_temporal() {
                feasible &= mesh_ok;
            }
            let mut per_pu = op.clone().with_count(1);
            match spatial_dim {
                Dim::N => {
                    let (inst, n, _) = split_columns(op.count, op.n, spatial_factor);
                    per_pu.n = n;
                    per_pu.count = inst;
                }
                Dim::K => {
                    per_pu.k = op.k.div_ceil(spatial_factor);
                    per_pu.count = op.count.max(1);
                }
            }
            let (block_instances, block_n, _) = split_columns(op.count, op.n, n_parts);
            let block_op = op.reshaped(op.m, block_n, op.k.div_ceil(k_parts));
            let kind = match mode.dataflow() {
                Dataflow::Is => CollectiveKind::AllReduce,
                Dataflow::Os => CollectiveKind::AllGather,
            };
            // On the mesh the ring runs once along rows and once along
            // columns.
            let (ring_size, passes) = if mode.is_spatio_temporal() { (side, 2) } else { (num_pus, 1) };
            let collectives = vec![
                Collective {
                    kind,
                    ring_size,
                    payload_bytes: payload,
                };
                passes
            ];
            PartitionPlan {
                mode,
                topology,
                spatial_dim,
                spatial_factor,
                temporal_factor,
                collectives,
                per_pu_op: per_pu,
                block_op,
                block_instances,
                feasible,
            }
        })
        .collect()
}

/// Ring collective cost in array cycles.
pub fn collective_cycles(plan: &PartitionPlan, sys: &SystemConfig) -> u64 {
    collectives_cycles(&plan.collectives, sys.mem.noc_link_bw, sys.array.freq_hz)
}

pub fn collectives_cycles(cs: &[Collective], link_bw: f64, freq_hz: f64) -> u64 {
    cs.iter()
        .map(|c| (c.bytes_per_pu() / link_bw * freq_hz).ceil() as u64)
        .sum()
}

/// Best dataflow and logical shape for a single-core operator. Ties break
/// toward OS.
pub fn select_core_dataflow(op: &GemmOp, sys: &SystemConfig, active_cores: u64) -> Result<(Dataflow, LogicalShape, CostReport)> {
    let shape = select_logical_shape(op.m, &sys.array);
    let os = core_cost_with_shape(op, shape, Dataflow::Os, sys, active_cores)?;
    let is = core_cost_with_shape(op, shape, Dataflow::Is, sys, active_cores)?;
    Ok(if is.total_cycles < os.total_cycles {
        (Dataflow::Is, shape, is)
    } else {
        (Dataflow::Os, shape, os)
    })
}

/// Vector-unit cycles for `elems` elements at `per_cycle` elements/cycle.
pub fn vector_cycles(elems: u64, per_cycle: u64) -> u64 {
    elems.div_ceil(per_cycle.max(1))
}

/// Splits `extent` over `parts` workers; the last takes the remainder.
/// Workers that would receive nothing are dropped.
pub fn split_extent(extent: u64, parts: u64) -> Vec<u64> {
    let parts = parts.min(extent).max(1);
    let base = extent / parts;
    let mut v = vec![base; parts as usize];
    *v.last_mut().expect("non-empty") += extent - base * parts;
    v
}

/// How an operator was placed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Placement {
    Partitioned {
        plan: Box<PartitionPlan>,
        shape: LogicalShape,
    },
    /// Attention head-tasks spread over PUs; the report of the `attn_qk`
    /// operator covers the whole attention block of its layer.
    HeadParallel,
    /// No partition mode was feasible; run on one PU.
    SinglePu { shape: LogicalShape, dataflow: Dataflow },
}

impl Placement {
    pub fn mode(&self) -> Option<Mode> {
        match self {
            Placement::Partitioned { plan, .. } => Some(plan.mode),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledOp {
    pub op: GemmOp,
    pub placement: Placement,
    pub report: CostReport,
}

/// Splits a PU's work over its cores by output column, so every core owns
/// disjoint outputs; the last core takes any remainder. Returns the distinct
/// core sub-operators as (op, instances, cores running it).
pub fn core_split(block: &GemmOp, instances: u64, cores: u64) -> Vec<(GemmOp, u64, u64)> {
    let mut out: Vec<(GemmOp, u64, u64)> = Vec::new();
    let mut push = |op: GemmOp, inst: u64| match out.iter_mut().find(|(o, i, _)| o.n == op.n && *i == inst) {
        Some(e) => e.2 += 1,
        None => out.push((op, inst, 1)),
    };
    if instances >= cores {
        for inst in split_extent(instances, cores) {
            push(block.clone(), inst);
        }
    } else {
        let per = cores / instances;
        for n in split_extent(block.n, per) {
            for _ in 0..instances {
                push(block.reshaped(block.m, n, block.k), 1);
            }
        }
    }
    out
}

/// Cost of `op` (all of its instances) on all PUs under `plan`.
fn plan_cost(op: &GemmOp, plan: &PartitionPlan, sys: &SystemConfig) -> Result<(LogicalShape, CostReport)> {
    let subs = core_split(&plan.block_op, plan.block_instances, sys.array.cores_per_pu);
    let active: u64 = subs.iter().map(|(_, _, c)| c).sum();
    let shape = select_logical_shape(plan.block_op.m, &sys.array);
    let dataflow = plan.mode.dataflow();
    let mut slowest = CostReport::default();
    let mut slowest_tiles = 0;
    let mut pu_dram = 0.0;
    for (sub, inst, cores) in &subs {
        let r = core_cost_instances(sub, shape, dataflow, sys, active, *inst)?;
        pu_dram += r.activity.dram_bytes * *cores as f64;
        if r.total_cycles >= slowest.total_cycles {
            slowest = r;
            let t_max = op_temporal_limit(sub, shape, dataflow, &sys.mem);
            slowest_tiles = tile_instances(sub, shape, dataflow, t_max, *inst).tiles_total;
        }
    }
    let pus = sys.array.num_pus;
    let coll = collective_cycles(plan, sys);
    let noc_bytes = plan.collectives.iter().map(|c| c.bytes_per_pu()).sum::<f64>() * pus as f64;
    let report = finish(
        op,
        sys,
        Stages {
            array: slowest.array_cycles,
            stall: slowest.stall_cycles,
            collective: coll,
            dram_bytes: pu_dram * pus as f64,
            noc_bytes,
            tiles: slowest_tiles,
        },
        dataflow,
    );
    Ok((shape, report))
}

/// Nonlinear cycles hidden behind the producing operator. Under OS each
/// finished output tile feeds the vector unit while later tiles compute;
/// under IS outputs complete only at the end.
pub fn overlap_credit(nonlinear: u64, tiles: u64, dataflow: Dataflow) -> u64 {
    match dataflow {
        Dataflow::Os if tiles > 0 => (nonlinear * (tiles - 1) / tiles).min(nonlinear),
        _ => 0,
    }
}

/// Linear-stage costs of one operator (all instances) before the
/// nonlinear stage is added.
struct Stages {
    array: u64,
    stall: u64,
    collective: u64,
    dram_bytes: f64,
    noc_bytes: f64,
    /// Output tiles of the slowest lane, in completion order.
    tiles: u64,
}

/// Adds reconfiguration, the following nonlinear stage and its overlap
/// credit to the linear stages of `op`.
fn finish(op: &GemmOp, sys: &SystemConfig, st: Stages, dataflow: Dataflow) -> CostReport {
    let out_elems = op.m * op.n;
    let nl_one = if op.nonlinear_follow == Nonlinear::None {
        0
    } else {
        vector_cycles(out_elems.div_ceil(sys.array.num_pus), sys.vector_per_pu())
    };
    let nl = nl_one * op.count;
    let linear = st.array + st.stall;
    let mut credit = overlap_credit(nl, st.tiles, dataflow);
    if dataflow == Dataflow::Is && op.count > 1 && op.class == OpClass::Expert {
        // Independent instances: each nonlinear stage hides behind the next
        // instance's linear stage.
        credit = nl_one * (op.count - 1);
    }
    let credit = credit.min(linear).min(nl);
    let mut r = CostReport {
        array_cycles: st.array,
        stall_cycles: st.stall,
        collective_cycles: st.collective,
        reconfig_cycles: 1,
        vector_cycles: nl,
        overlap_credit: credit,
        macs: op.macs() * op.count,
        pes: sys.total_pes(),
        dram_bytes: st.dram_bytes as u64,
        activity: Activity {
            macs: (op.macs() * op.count) as f64,
            vector_elems: if nl > 0 { (out_elems * op.count) as f64 } else { 0.0 },
            noc_bytes: st.noc_bytes,
            dram_bytes: st.dram_bytes,
            pe_cycles: 0.0,
        },
        ..Default::default()
    }
    .finalize();
    r.activity.pe_cycles = (r.total_cycles * sys.total_pes()) as f64;
    r.with_energy(&sys.energy)
}

fn single_pu_cost(op: &GemmOp, sys: &SystemConfig) -> Result<(Dataflow, LogicalShape, CostReport)> {
    let one = op.clone().with_count(1);
    let shape = select_logical_shape(one.m, &sys.array);
    let mut best: Option<(Dataflow, CostReport, u64)> = None;
    for df in [Dataflow::Os, Dataflow::Is] {
        let r = core_cost_instances(&one, shape, df, sys, 1, op.count)?;
        if best.as_ref().is_none_or(|(_, b, _)| r.total_cycles < b.total_cycles) {
            let tiles = tile_instances(&one, shape, df, op_temporal_limit(&one, shape, df, &sys.mem), op.count).tiles_total;
            best = Some((df, r, tiles));
        }
    }
    let (df, r, tiles) = best.expect("two candidates");
    let report = finish(
        op,
        sys,
        Stages {
            array: r.array_cycles,
            stall: r.stall_cycles,
            collective: 0,
            dram_bytes: r.activity.dram_bytes,
            noc_bytes: 0.0,
            tiles,
        },
        df,
    );
    Ok((df, shape, report))
}

/// Costs every feasible mode of `op`, in tie-break order.
pub fn evaluate_modes(op: &GemmOp, sys: &SystemConfig) -> Result<Vec<(PartitionPlan, LogicalShape, CostReport)>> {
    let mut out = Vec::new();
    for plan in partition_modes(op, sys.array.num_pus) {
        if !plan.feasible {
            debug!("{} infeasible for {}", plan.mode, op.tag);
            continue;
        }
        let (shape, report) = plan_cost(op, &plan, sys)?;
        out.push((plan, shape, report));
    }
    Ok(out)
}

/// Picks the cheapest feasible mode, or `forced` when it is feasible.
pub fn schedule_operator(op: &GemmOp, sys: &SystemConfig, forced: Option<Mode>) -> Result<ScheduledOp> {
    let options = evaluate_modes(op, sys)?;
    let forced_pick = forced.and_then(|m| options.iter().position(|(p, _, _)| p.mode == m));
    let best = forced_pick.or_else(|| {
        options
            .iter()
            .enumerate()
            .min_by_key(|(i, (_, _, r))| (r.total_cycles, *i))
            .map(|(i, _)| i)
    });
    match best {
        Some(i) => {
            let (plan, shape, report) = options[i].clone();
            Ok(ScheduledOp {
                op: op.clone(),
                placement: Placement::Partitioned { plan: Box::new(plan), shape },
                report,
            })
        }
        None => {
            warn!("no feasible partition for {} {}x{}x{}; single PU", op.tag, op.m, op.n, op.k);
            let (dataflow, shape, report) = single_pu_cost(op, sys)?;
            Ok(ScheduledOp {
                op: op.clone(),
                placement: Placement::SinglePu { shape, dataflow },
                report,
            })
        }
    }
}

/// One layer's attention: `batch` sequences of `seq_len` cached tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionTask {
    pub meta: AttentionMeta,
    pub batch: u64,
    pub seq_len: u64,
    pub elem_bytes: u64,
}

impl AttentionTask {
    pub fn from_graph(graph: &OperatorGraph) -> Option<Self> {
        graph.attention.map(|meta| AttentionTask {
            meta,
            batch: graph.batch,
            seq_len: graph.seq_len,
            elem_bytes: graph.elem_bytes,
        })
    }

    /// QK and AV GEMMs of one KV group: the group's query heads share the
    /// cached keys and values, so they are read once.
    pub fn group_ops(&self) -> (GemmOp, GemmOp) {
        let g = self.meta.group_size();
        let mut qk = GemmOp::new(g, self.seq_len, self.meta.head_dim)
            .with_tag("attn_qk")
            .with_follow(Nonlinear::Softmax);
        let mut av = GemmOp::new(g, self.meta.head_dim, self.seq_len).with_tag("attn_av");
        qk.elem_bytes = self.elem_bytes;
        av.elem_bytes = self.elem_bytes;
        (qk, av)
    }
}

/// Per-lane parameters for head-parallel attention.
pub struct HeadLayout {
    pub pus: u64,
    pub lanes_per_pu: u64,
    pub vector_per_lane: u64,
}

/// Cost of one KV group's linear stages and its softmax stage.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroupCost {
    pub qk: CostReport,
    pub av: CostReport,
    pub softmax: u64,
}

/// Head-parallel attention: KV-sharing groups are dealt contiguously to
/// PUs and then to lanes; within a lane the linear and softmax stages of
/// different groups interleave. `linear` costs one group's GEMM on one lane
/// while `active` lanes of its PU stream.
pub fn head_parallel<F>(task: &AttentionTask, layout: &HeadLayout, mut linear: F) -> Result<CostReport>
where
    F: FnMut(&GemmOp, u64) -> Result<CostReport>,
{
    let groups = task.batch * task.meta.kv_heads;
    if groups == 0 {
        return Ok(CostReport::default());
    }
    let mut per_pu: Vec<(u64, u64)> = Vec::new();
    for g in split_extent(groups, layout.pus) {
        match per_pu.iter_mut().find(|(x, _)| *x == g) {
            Some(e) => e.1 += 1,
            None => per_pu.push((g, 1)),
        }
    }
    let mut worst = CostReport::default();
    let mut activity = Activity::default();
    let (mut macs, mut dram) = (0, 0);
    for (g, pus) in per_pu {
        let lanes = split_extent(g, layout.lanes_per_pu);
        let busiest = *lanes.last().expect("non-empty");
        let gc = group_cost(task, &mut linear, lanes.len() as u64, layout.vector_per_lane)?;
        let lin = gc.qk.total_cycles + gc.av.total_cycles;
        let busy_linear = lin * busiest;
        let busy_vector = gc.softmax * busiest;
        let time = busy_linear.max(busy_vector) + lin.min(gc.softmax);
        // Interleaving hides whichever stage is shorter, bar one fill.
        let lane = CostReport {
            array_cycles: (gc.qk.array_cycles + gc.av.array_cycles) * busiest,
            stall_cycles: (gc.qk.stall_cycles + gc.av.stall_cycles) * busiest,
            vector_cycles: busy_vector,
            overlap_credit: (busy_linear + busy_vector).saturating_sub(time),
            ..Default::default()
        }
        .finalize();
        if lane.total_cycles >= worst.total_cycles {
            worst = lane;
        }
        let group_macs = gc.qk.macs + gc.av.macs;
        let group_dram = gc.qk.dram_bytes + gc.av.dram_bytes;
        macs += group_macs * g * pus;
        dram += group_dram * g * pus;
        activity.macs += (group_macs * g * pus) as f64;
        activity.vector_elems += (task.meta.group_size() * task.seq_len * g * pus) as f64;
        activity.dram_bytes += (group_dram * g * pus) as f64;
    }
    Ok(CostReport {
        macs,
        dram_bytes: dram,
        activity,
        ..worst
    }
    .finalize())
}

fn group_cost<F>(task: &AttentionTask, linear: &mut F, active: u64, vector_per_lane: u64) -> Result<GroupCost>
where
    F: FnMut(&GemmOp, u64) -> Result<CostReport>,
{
    let (qk_op, av_op) = task.group_ops();
    Ok(GroupCost {
        qk: linear(&qk_op, active)?,
        av: linear(&av_op, active)?,
        softmax: vector_cycles(qk_op.m * qk_op.n, vector_per_lane),
    })
}

/// Attention of one layer on the default fabric.
pub fn schedule_attention(task: &AttentionTask, sys: &SystemConfig) -> Result<CostReport> {
    let layout = HeadLayout {
        pus: sys.array.num_pus,
        lanes_per_pu: sys.array.cores_per_pu,
        vector_per_lane: sys.vector_per_core,
    };
    let r = head_parallel(task, &layout, |op, active| {
        select_core_dataflow(op, sys, active).map(|(_, _, r)| r)
    })?;
    let mut r = CostReport {
        pes: sys.total_pes(),
        reconfig_cycles: 1,
        ..r
    }
    .finalize();
    r.activity.pe_cycles = (r.total_cycles * sys.total_pes()) as f64;
    Ok(r.with_energy(&sys.energy))
}

/// Histogram of chosen partition modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModeHistogram {
    pub counts: [u64; 4],
}

impl ModeHistogram {
    pub fn add(&mut self, m: Mode) {
        self.counts[m.index()] += 1;
    }

    pub fn merge(&mut self, o: &ModeHistogram) {
        for i in 0..4 {
            self.counts[i] += o.counts[i];
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn count(&self, m: Mode) -> u64 {
        self.counts[m.index()]
    }

    pub fn fraction(&self, m: Mode) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            self.count(m) as f64 / t as f64
        }
    }

    /// Shannon entropy in bits.
    pub fn entropy(&self) -> f64 {
        let t = self.total() as f64;
        if t == 0.0 {
            return 0.0;
        }
        self.counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / t;
                -p * p.log2()
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSchedule {
    pub ops: Vec<ScheduledOp>,
    pub totals: CostReport,
    pub histogram: ModeHistogram,
    pub forced: Option<Mode>,
    /// Operators that fell back to a single PU.
    pub fallbacks: u64,
}

impl ModelSchedule {
    pub fn seconds(&self, freq_hz: f64) -> f64 {
        self.totals.seconds(freq_hz)
    }
}

type OpKey = (u64, u64, u64, u64, u64, Nonlinear, OpClass);

fn op_key(op: &GemmOp) -> OpKey {
    (op.m, op.n, op.k, op.count, op.elem_bytes, op.nonlinear_follow, op.class)
}

/// Schedules every operator of `graph` in order. With `forced`, each
/// partitioned operator uses that mode wherever it is feasible.
pub fn schedule_model(graph: &OperatorGraph, sys: &SystemConfig, forced: Option<Mode>) -> Result<ModelSchedule> {
    sys.validate()?;
    let mut ops = Vec::with_capacity(graph.ops.len());
    let mut hist = ModeHistogram::default();
    let mut totals = CostReport {
        pes: sys.total_pes(),
        ..Default::default()
    };
    let mut fallbacks = 0;
    let mut cache: HashMap<OpKey, ScheduledOp> = HashMap::new();
    let mut attention: Option<CostReport> = None;
    for op in &graph.ops {
        let scheduled = if op.is_attention() {
            let task = AttentionTask::from_graph(graph)
                .ok_or_else(|| Error::ShapeMismatch(format!("{} without attention metadata", op.tag)))?;
            let report = if op.class == OpClass::AttentionQk {
                match attention {
                    Some(r) => r,
                    None => {
                        let r = schedule_attention(&task, sys)?;
                        attention = Some(r);
                        r
                    }
                }
            } else {
                CostReport {
                    pes: sys.total_pes(),
                    ..Default::default()
                }
            };
            ScheduledOp {
                op: op.clone(),
                placement: Placement::HeadParallel,
                report,
            }
        } else {
            let key = op_key(op);
            let mut s = match cache.get(&key) {
                Some(s) => s.clone(),
                None => {
                    let s = schedule_operator(op, sys, forced)?;
                    cache.insert(key, s.clone());
                    s
                }
            };
            s.op = op.clone();
            match s.placement.mode() {
                Some(m) => hist.add(m),
                None => fallbacks += 1,
            }
            s
        };
        totals = totals.then(&scheduled.report);
        ops.push(scheduled);
    }
    Ok(ModelSchedule {
        ops,
        totals,
        histogram: hist,
        forced,
        fallbacks,
    })
}

/// Logical shapes whose row count fits `m` best, by chosen operator; used
/// for shape-demand tables.
pub fn shape_demand(sched: &ModelSchedule, sys: &SystemConfig) -> Vec<(LogicalShape, u64)> {
    let mut counts: Vec<(LogicalShape, u64)> = logical_shapes(&sys.array).into_iter().map(|s| (s, 0)).collect();
    for s in &sched.ops {
        let shape = match &s.placement {
            Placement::Partitioned { shape, .. } | Placement::SinglePu { shape, .. } => *shape,
            Placement::HeadParallel => select_logical_shape(s.op.m, &sys.array),
        };
        if let Some(e) = counts.iter_mut().find(|(x, _)| *x == shape) {
            e.1 += 1;
        }
    }
    counts
}

/// Decode cost of `graph` on MAC-tree PUs: projections split along N over
/// all PUs with an all-gather, attention head-parallel. Cycles are at the
/// tree clock.
pub fn schedule_mac_tree(graph: &OperatorGraph, sys: &SystemConfig, mt: &MacTreeConfig) -> Result<CostReport> {
    let pus = sys.array.num_pus;
    let tree_sys = SystemConfig {
        array: ArrayConfig {
            freq_hz: mt.freq_hz,
            cores_per_pu: 1,
            ..sys.array
        },
        vector_per_core: sys.vector_per_pu(),
        ..*sys
    };
    let mut total = CostReport::default();
    let mut cache: HashMap<OpKey, CostReport> = HashMap::new();
    let mut attention: Option<CostReport> = None;
    for op in &graph.ops {
        let r = if op.is_attention() {
            if op.class != OpClass::AttentionQk {
                continue;
            }
            match attention {
                Some(r) => r,
                None => {
                    let task = AttentionTask::from_graph(graph)
                        .ok_or_else(|| Error::ShapeMismatch(format!("{} without attention metadata", op.tag)))?;
                    let layout = HeadLayout {
                        pus,
                        lanes_per_pu: 1,
                        vector_per_lane: tree_sys.vector_per_core,
                    };
                    let r = head_parallel(&task, &layout, |g, _| Ok(mac_tree_cycles(g, &sys.mem, mt, pus)))?;
                    attention = Some(r);
                    r
                }
            }
        } else if let Some(r) = cache.get(&op_key(op)) {
            *r
        } else {
            let mut per_pu = op.clone().with_count(1);
            per_pu.n = op.n.div_ceil(pus);
            let lin = mac_tree_cycles(&per_pu, &sys.mem, mt, pus);
            let gather = Collective {
                kind: CollectiveKind::AllGather,
                ring_size: pus.min(op.n),
                payload_bytes: op.m * op.n * op.elem_bytes,
            };
            let coll = collectives_cycles(&[gather], sys.mem.noc_link_bw, mt.freq_hz);
            let r = finish(
                op,
                &tree_sys,
                Stages {
                    array: lin.array_cycles * op.count,
                    stall: lin.stall_cycles * op.count,
                    collective: coll * op.count,
                    dram_bytes: lin.activity.dram_bytes * (pus * op.count) as f64,
                    noc_bytes: gather.bytes_per_pu() * (pus * op.count) as f64,
                    tiles: per_pu.n.div_ceil(mt.tile_n) * op.count,
                },
                Dataflow::Os,
            );
            cache.insert(op_key(op), r);
            r
        };
        total = total.then(&r);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{decode_operators, preset};

    fn sys() -> SystemConfig {
        SystemConfig::default()
    }

    #[test]
    fn partition_examples() {
        let op = GemmOp::new(8, 28672, 8192);
        let plans = partition_modes(&op, 16);
        assert_eq!(plans.iter().map(|p| p.mode).collect::<Vec<_>>(), Mode::ALL);
        let is_s = &plans[0];
        assert_eq!((is_s.per_pu_op.m, is_s.per_pu_op.n, is_s.per_pu_op.k), (8, 28672, 512));
        assert_eq!(is_s.collectives[0].kind, CollectiveKind::AllReduce);
        assert_eq!(is_s.collectives[0].payload_bytes, 8 * 28672 * 2);
        assert_eq!(is_s.topology, Topology::Chain1x16);
        let os_st = &plans[3];
        assert_eq!((os_st.per_pu_op.n, os_st.per_pu_op.k), (7168, 8192));
        assert_eq!((os_st.block_op.n, os_st.block_op.k), (7168, 2048));
        assert_eq!(os_st.collectives[0].kind, CollectiveKind::AllGather);
        assert_eq!(os_st.topology, Topology::Mesh4x4);
        assert!(plans.iter().all(|p| p.feasible));

        let tiny = partition_modes(&GemmOp::new(8, 8, 8), 16);
        assert!(!tiny[1].feasible);
        assert!(!tiny[0].feasible);
        assert!(tiny[2].feasible && tiny[3].feasible);
    }

    #[test]
    fn collective_examples() {
        let mut plan = partition_modes(&GemmOp::new(8, 28672, 8192), 16).remove(0);
        assert_eq!(collective_cycles(&plan, &sys()), 10_752);
        plan.collectives[0].kind = CollectiveKind::AllGather;
        assert_eq!(collective_cycles(&plan, &sys()), 5_376);
        plan.collectives[0].payload_bytes = 0;
        assert_eq!(collective_cycles(&plan, &sys()), 0);
    }

    #[test]
    fn overlap_examples() {
        let nl = vector_cycles(8 * 28672, 64 * 4);
        assert_eq!(nl, 896);
        assert_eq!(overlap_credit(nl, 56, Dataflow::Os), 880);
        assert_eq!(overlap_credit(nl, 56, Dataflow::Is), 0);
        assert_eq!(overlap_credit(0, 56, Dataflow::Os), 0);
        assert_eq!(overlap_credit(nl, 1, Dataflow::Os), 0);
    }

    #[test]
    fn core_dataflow_examples() {
        let s = sys();
        let (df, shape, _) = select_core_dataflow(&GemmOp::new(8, 28672, 512), &s, 4).unwrap();
        assert_eq!(df, Dataflow::Is);
        assert_eq!((shape.rows, shape.cols), (8, 512));
        let (df, _, _) = select_core_dataflow(&GemmOp::new(8, 2048, 8192), &s, 4).unwrap();
        assert_eq!(df, Dataflow::Os);
        let (df, _, _) = select_core_dataflow(&GemmOp::new(8, 4096, 4096), &s, 4).unwrap();
        assert_eq!(df, Dataflow::Os);
    }

    #[test]
    fn split_helpers() {
        assert_eq!(split_extent(10, 4), vec![2, 2, 2, 4]);
        assert_eq!(split_extent(3, 4), vec![1, 1, 1]);
        assert_eq!(split_columns(64, 768, 16), (4, 768, 16));
        assert_eq!(split_columns(4, 768, 16), (1, 192, 16));
        assert_eq!(split_columns(1, 28672, 16), (1, 1792, 16));
        let cores = core_split(&GemmOp::new(8, 7168, 512), 1, 4);
        assert_eq!(cores.len(), 1);
        assert_eq!((cores[0].0.n, cores[0].2), (1792, 4));
    }

    #[test]
    fn argmin_dominates_fixed_modes() {
        let s = sys();
        for op in [GemmOp::new(8, 28672, 8192), GemmOp::new(64, 8192, 28672), GemmOp::new(1, 768, 2048).with_count(64)] {
            let best = schedule_operator(&op, &s, None).unwrap();
            for m in Mode::ALL {
                let fixed = schedule_operator(&op, &s, Some(m)).unwrap();
                assert!(best.report.total_cycles <= fixed.report.total_cycles);
                assert_eq!(fixed.placement.mode(), Some(m));
            }
        }
    }

    #[test]
    fn infeasible_op_falls_back() {
        let s = sys();
        let op = GemmOp::new(1, 1, 1);
        let r = schedule_operator(&op, &s, None).unwrap();
        assert!(matches!(r.placement, Placement::SinglePu { .. }));
        assert!(r.report.total_cycles > 0);
    }

    #[test]
    fn attention_examples() {
        let task = AttentionTask {
            meta: AttentionMeta { q_heads: 64, kv_heads: 64, head_dim: 128 },
            batch: 8,
            seq_len: 1024,
            elem_bytes: 2,
        };
        assert_eq!(split_extent(task.batch * task.meta.kv_heads, 16), vec![32; 16]);
        let r = schedule_attention(&task, &sys()).unwrap();
        assert!(r.total_cycles > 0);
        assert!(r.overlap_credit > 0);

        let one = AttentionTask {
            meta: AttentionMeta { q_heads: 1, kv_heads: 1, head_dim: 128 },
            batch: 1,
            ..task
        };
        let r = schedule_attention(&one, &sys()).unwrap();
        assert_eq!(r.overlap_credit, 0);
        assert_eq!(r.total_cycles, r.array_cycles + r.stall_cycles + r.vector_cycles + 1);
    }

    #[test]
    fn gqa_reads_kv_once_per_group() {
        let gqa = AttentionTask {
            meta: AttentionMeta { q_heads: 64, kv_heads: 8, head_dim: 128 },
            batch: 8,
            seq_len: 2048,
            elem_bytes: 2,
        };
        let mha = AttentionTask {
            meta: AttentionMeta { q_heads: 64, kv_heads: 64, head_dim: 128 },
            ..gqa
        };
        let g = schedule_attention(&gqa, &sys()).unwrap();
        let m = schedule_attention(&mha, &sys()).unwrap();
        let kv = (2 * 2048 * 128 * 2) as u64;
        assert!(g.dram_bytes >= 8 * 8 * kv);
        assert!(g.dram_bytes < m.dram_bytes / 4);
    }

    #[test]
    fn empty_graph_is_zero() {
        let g = OperatorGraph::empty(8, 1024);
        let s = schedule_model(&g, &sys(), None).unwrap();
        assert_eq!(s.totals.total_cycles, 0);
        assert_eq!(s.histogram.total(), 0);
    }

    #[test]
    fn model_totals_are_sum_of_ops() {
        let cfg = preset("llama3-70b").unwrap();
        let mut g = decode_operators(&cfg, 8, 1024).unwrap();
        g.ops.retain(|o| o.layer == 0);
        let s = schedule_model(&g, &sys(), None).unwrap();
        assert_eq!(s.ops.len(), g.ops.len());
        let sum: u64 = s.ops.iter().map(|o| o.report.total_cycles).sum();
        assert_eq!(s.totals.total_cycles, sum);
        assert_eq!(s.histogram.total() + s.fallbacks, g.ops.iter().filter(|o| !o.is_attention()).count() as u64);
        let again = schedule_model(&g, &sys(), None).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn histogram_entropy() {
        let mut h = ModeHistogram::default();
        assert_eq!(h.entropy(), 0.0);
        h.add(Mode::IsS);
        h.add(Mode::IsS);
        assert_eq!(h.entropy(), 0.0);
        h.add(Mode::OsS);
        h.add(Mode::OsS);
        assert!((h.entropy() - 1.0).abs() < 1e-12);
        for m in [Mode::IsSt, Mode::IsSt, Mode::OsSt, Mode::OsSt] {
            h.add(m);
        }
        assert!((h.entropy() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mode_labels_round_trip() {
        for m in Mode::ALL {
            assert_eq!(Mode::parse(m.label()), Some(m));
            assert_eq!(Mode::parse(&m.label().to_lowercase()), Some(m));
        }
        assert_eq!(Mode::parse("os_st"), Some(Mode::OsSt));
        assert_eq!(Mode::parse("ws"), None);
    }
}
