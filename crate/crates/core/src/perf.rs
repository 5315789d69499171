//! Analytic per-core cost model.
//!
//! A GEMM is tiled onto a logical array ([`tile_gemm`]), charged array cycles
//! with one fill/drain skew and one stationary preload per phase
//! ([`array_cycles`]), and charged the refill cycles that tile prefetching
//! fails to hide ([`stall_cycles`]). Totals compose serially:
//! `array + stall + collective + reconfig + vector - overlap_credit`.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::array::{select_logical_shape, ArrayConfig, Dataflow, LogicalShape};
use crate::error::{Error, Result};
use crate::system::{EnergyModel, MemorySystem, SystemConfig};
use crate::workload::GemmOp;

/// How a GEMM is cut into spatial tiles and temporal phases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub logical: LogicalShape,
    pub dataflow: Dataflow,
    pub m: u64,
    pub n: u64,
    pub k: u64,
    pub elem_bytes: u64,
    /// Tile counts along the row-mapped (M) and column-mapped dimensions.
    pub spatial_tiles: (u64, u64),
    /// Temporal depth of each phase; all but the last equal `per_tile_t`.
    pub phase_depths: Vec<u64>,
    pub per_tile_t: u64,
    /// Independent same-shape GEMMs issued back to back in each phase.
    pub instances: u64,
    pub tiles_total: u64,
}

/// One tile with its true extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    pub m: u64,
    pub n: u64,
    pub k: u64,
    /// Temporal depth (K under OS, N under IS).
    pub depth: u64,
    pub phase: usize,
    pub last_phase: bool,
    /// First tile issued in its phase; it carries the phase's fill/drain and
    /// preload cycles.
    pub opens_phase: bool,
}

impl TilePlan {
    /// Stationary preload cycles, one physical column height.
    pub fn preload(&self) -> u64 {
        self.logical.rows * self.logical.strips
    }

    pub fn phases(&self) -> u64 {
        self.phase_depths.len() as u64
    }

    /// Tiles in execution order: phases outermost, then instances, row
    /// tiles and column tiles.
    pub fn tiles(&self) -> Vec<Tile> {
        let (rows, cols) = (self.logical.rows, self.logical.cols);
        let spatial_extent = match self.dataflow {
            Dataflow::Os => self.n,
            Dataflow::Is => self.k,
        };
        let mut out = Vec::with_capacity(self.tiles_total as usize);
        let last = self.phase_depths.len() - 1;
        for (phase, &depth) in self.phase_depths.iter().enumerate() {
            for inst in 0..self.instances {
            for i in 0..self.spatial_tiles.0 {
                let m_t = rows.min(self.m - i * rows);
                for j in 0..self.spatial_tiles.1 {
                    let s_t = cols.min(spatial_extent - j * cols);
                    let (n, k) = match self.dataflow {
                        Dataflow::Os => (s_t, depth),
                        Dataflow::Is => (depth, s_t),
                    };
                    out.push(Tile {
                        m: m_t,
                        n,
                        k,
                        depth,
                        phase,
                        last_phase: phase == last,
                        opens_phase: inst == 0 && i == 0 && j == 0,
                    });
                }
            }
            }
        }
        out
    }
}

/// Longest temporal segment whose streamed tiles fit half of each buffer,
/// for tiles `rows` by `cols` wide.
pub fn temporal_limit_for(rows: u64, cols: u64, mem: &MemorySystem, elem_bytes: u64) -> u64 {
    let weight = mem.weight_buf_bytes / (2 * cols.max(1) * elem_bytes);
    let act = mem.act_buf_bytes / (2 * rows.max(1) * elem_bytes);
    weight.min(act).max(1)
}

/// Temporal limit for full-size tiles of `shape`.
pub fn temporal_limit(shape: LogicalShape, mem: &MemorySystem, elem_bytes: u64) -> u64 {
    temporal_limit_for(shape.rows, shape.cols, mem, elem_bytes)
}

/// Temporal limit for the tiles `op` actually occupies on `shape`.
pub fn op_temporal_limit(op: &GemmOp, shape: LogicalShape, dataflow: Dataflow, mem: &MemorySystem) -> u64 {
    let spatial = match dataflow {
        Dataflow::Os => op.n,
        Dataflow::Is => op.k,
    };
    temporal_limit_for(op.m.min(shape.rows), spatial.min(shape.cols), mem, op.elem_bytes)
}

/// Tiles `op` onto `shape`, splitting the temporal dimension into phases of
/// at most `t_max`.
pub fn tile_gemm(op: &GemmOp, shape: LogicalShape, dataflow: Dataflow, t_max: u64) -> TilePlan {
    tile_instances(op, shape, dataflow, t_max, 1)
}

/// Like [`tile_gemm`] for `instances` independent copies of `op` sharing
/// each phase's pipeline.
pub fn tile_instances(op: &GemmOp, shape: LogicalShape, dataflow: Dataflow, t_max: u64, instances: u64) -> TilePlan {
    let instances = instances.max(1);
    let (spatial, temporal) = match dataflow {
        Dataflow::Os => (op.n, op.k),
        Dataflow::Is => (op.k, op.n),
    };
    let t_max = t_max.max(1);
    let spatial_tiles = (op.m.div_ceil(shape.rows), spatial.div_ceil(shape.cols));
    let phases = temporal.div_ceil(t_max);
    let phase_depths: Vec<u64> = (0..phases).map(|p| t_max.min(temporal - p * t_max)).collect();
    TilePlan {
        logical: shape,
        dataflow,
        m: op.m,
        n: op.n,
        k: op.k,
        elem_bytes: op.elem_bytes,
        spatial_tiles,
        per_tile_t: phase_depths[0],
        instances,
        tiles_total: spatial_tiles.0 * spatial_tiles.1 * phases * instances,
        phase_depths,
    }
}

/// Fill/drain skew plus stationary preload, paid once per phase.
pub fn phase_overhead(plan: &TilePlan) -> u64 {
    plan.logical.rows + plan.logical.cols - 1 + plan.preload()
}

/// Array cycles: per phase the summed tile depths, one skew and one preload.
pub fn array_cycles(plan: &TilePlan) -> u64 {
    let per_phase = plan.spatial_tiles.0 * plan.spatial_tiles.1 * plan.instances;
    plan.phase_depths
        .iter()
        .map(|d| per_phase * d + phase_overhead(plan))
        .sum()
}

/// Array-busy cycles of each tile in execution order; they sum to
/// [`array_cycles`].
pub fn tile_busy_cycles(plan: &TilePlan) -> Vec<u64> {
    let overhead = phase_overhead(plan);
    plan.tiles()
        .iter()
        .map(|t| t.depth + if t.opens_phase { overhead } else { 0 })
        .collect()
}

/// DRAM traffic of one tile, split by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TileTraffic {
    pub weight: u64,
    pub input: u64,
    pub output: u64,
}

impl TileTraffic {
    pub fn total(&self, include_writeback: bool) -> u64 {
        self.weight + self.input + if include_writeback { self.output } else { 0 }
    }
}

/// Per-tile traffic. Under OS inputs and weights stream for `k_t` steps and
/// the finished outputs leave after the last phase. Under IS weights stream,
/// the stationary input is loaded once per spatial tile, and every tile
/// emits the partial sums of its `n_t` outputs.
pub fn tile_traffic(tile: &Tile, dataflow: Dataflow, elem_bytes: u64) -> TileTraffic {
    let eb = elem_bytes;
    match dataflow {
        Dataflow::Os => TileTraffic {
            weight: tile.n * tile.k * eb,
            input: tile.m * tile.k * eb,
            output: if tile.last_phase { tile.m * tile.n * eb } else { 0 },
        },
        Dataflow::Is => TileTraffic {
            weight: tile.k * tile.n * eb,
            input: if tile.phase == 0 { tile.m * tile.k * eb } else { 0 },
            output: tile.m * tile.n * eb,
        },
    }
}

/// Refill bytes of every tile in execution order.
pub fn refill_bytes(plan: &TilePlan, mem: &MemorySystem) -> Vec<u64> {
    plan.tiles()
        .iter()
        .map(|t| tile_traffic(t, plan.dataflow, plan.elem_bytes).total(mem.writeback_shares_bandwidth))
        .collect()
}

/// Cycles to move `bytes` at `bytes_per_cycle`.
pub fn transfer_cycles(bytes: u64, bytes_per_cycle: f64) -> u64 {
    if bytes == 0 || bytes_per_cycle.is_infinite() {
        return 0;
    }
    (bytes as f64 / bytes_per_cycle).ceil() as u64
}

/// Stall of a tile sequence with `slots` tile buffers. Tile `i` may start
/// loading once its predecessor has loaded and tile `i - slots` has left
/// the array; one slot serialises loads and compute, two give classic
/// double buffering.
pub fn pipeline_stall(compute: &[u64], refill: &[u64], bytes_per_cycle: f64, slots: u64) -> u64 {
    let slots = slots.max(1) as usize;
    let mut load_end = 0u64;
    let mut compute_end: Vec<u64> = Vec::with_capacity(compute.len());
    for (i, (&c, &bytes)) in compute.iter().zip(refill).enumerate() {
        let freed = if i >= slots { compute_end[i - slots] } else { 0 };
        load_end = load_end.max(freed) + transfer_cycles(bytes, bytes_per_cycle);
        let prev = compute_end.last().copied().unwrap_or(0);
        compute_end.push(prev.max(load_end) + c);
    }
    compute_end.last().copied().unwrap_or(0) - compute.iter().sum::<u64>()
}

/// Tile buffers available to `plan`: as many of its largest weight tile as
/// the weight buffer holds, at least two when double buffered.
pub fn buffer_slots(plan: &TilePlan, mem: &MemorySystem) -> u64 {
    if !mem.double_buffered {
        return 1;
    }
    let largest = plan
        .tiles()
        .iter()
        .map(|t| tile_traffic(t, plan.dataflow, plan.elem_bytes).weight)
        .max()
        .unwrap_or(0);
    if largest == 0 {
        return 2;
    }
    (mem.weight_buf_bytes / largest).max(2)
}

/// Refill stall cycles of `plan` on one of `active_cores` cores of a PU.
pub fn stall_cycles(plan: &TilePlan, mem: &MemorySystem, cfg: &ArrayConfig, active_cores: u64) -> Result<u64> {
    let tiles = plan.tiles();
    for t in &tiles {
        let traffic = tile_traffic(t, plan.dataflow, plan.elem_bytes);
        if traffic.weight > mem.weight_buf_bytes {
            return Err(Error::BufferCapacity {
                bytes: traffic.weight,
                capacity: mem.weight_buf_bytes,
            });
        }
    }
    let compute = tile_busy_cycles(plan);
    let refill = refill_bytes(plan, mem);
    Ok(pipeline_stall(
        &compute,
        &refill,
        mem.bytes_per_cycle(cfg, active_cores),
        buffer_slots(plan, mem),
    ))
}

/// Minimum double-buffered capacities for stall-free streaming of `plan`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferDemand {
    pub weight_buf_bytes: u64,
    /// Output buffer under IS, input buffer under OS.
    pub act_buf_bytes: u64,
}

pub fn min_buffers(shape: LogicalShape, dataflow: Dataflow, plan: &TilePlan) -> BufferDemand {
    let eb = plan.elem_bytes;
    let t = plan.per_tile_t;
    // Under both dataflows the streamed weight tile spans the logical columns
    // and the activation-side tile spans the logical rows.
    let _ = dataflow;
    BufferDemand {
        weight_buf_bytes: 2 * shape.cols * t * eb,
        act_buf_bytes: 2 * shape.rows * t * eb,
    }
}

/// Activity counts feeding the energy model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Activity {
    pub macs: f64,
    pub pe_cycles: f64,
    pub vector_elems: f64,
    pub noc_bytes: f64,
    pub dram_bytes: f64,
}

/// Energy per logic-die component plus DRAM, joules.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub matrix: f64,
    pub vector: f64,
    pub control: f64,
    pub noc: f64,
    pub dram: f64,
}

impl EnergyBreakdown {
    pub fn logic(&self) -> f64 {
        self.matrix + self.vector + self.control + self.noc
    }

    pub fn total(&self) -> f64 {
        self.logic() + self.dram
    }

    pub fn scaled(&self, f: f64) -> Self {
        EnergyBreakdown {
            matrix: self.matrix * f,
            vector: self.vector * f,
            control: self.control * f,
            noc: self.noc * f,
            dram: self.dram * f,
        }
    }
}

impl AddAssign for EnergyBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.matrix += o.matrix;
        self.vector += o.vector;
        self.control += o.control;
        self.noc += o.noc;
        self.dram += o.dram;
    }
}

pub fn energy(model: &EnergyModel, a: &Activity) -> EnergyBreakdown {
    EnergyBreakdown {
        matrix: model.per_mac * a.macs,
        vector: model.per_vector_elem * a.vector_elems,
        control: model.per_pe_cycle * a.pe_cycles,
        noc: model.per_noc_byte * a.noc_bytes,
        dram: model.per_dram_byte * a.dram_bytes,
    }
}

/// Cycle and energy accounting of one operator (or a sum of them).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostReport {
    pub array_cycles: u64,
    pub stall_cycles: u64,
    pub collective_cycles: u64,
    pub reconfig_cycles: u64,
    pub vector_cycles: u64,
    pub overlap_credit: u64,
    pub total_cycles: u64,
    /// Useful MACs over PE-cycles available to the covered resource.
    pub utilization: f64,
    pub macs: u64,
    /// PEs of the resource this report covers.
    pub pes: u64,
    pub dram_bytes: u64,
    pub activity: Activity,
    pub energy_j: EnergyBreakdown,
}

impl CostReport {
    /// Recomputes `total_cycles` and `utilization` from the components.
    pub fn finalize(mut self) -> Self {
        self.total_cycles = self.array_cycles
            + self.stall_cycles
            + self.collective_cycles
            + self.reconfig_cycles
            + self.vector_cycles
            - self.overlap_credit;
        self.utilization = if self.total_cycles == 0 || self.pes == 0 {
            0.0
        } else {
            (self.macs as f64 / (self.total_cycles as f64 * self.pes as f64)).min(1.0)
        };
        self
    }

    /// Applies an energy model to the recorded activity.
    pub fn with_energy(mut self, model: &EnergyModel) -> Self {
        self.energy_j = energy(model, &self.activity);
        self
    }

    /// `count` back-to-back repetitions.
    pub fn repeated(&self, count: u64) -> Self {
        let f = count as f64;
        CostReport {
            array_cycles: self.array_cycles * count,
            stall_cycles: self.stall_cycles * count,
            collective_cycles: self.collective_cycles * count,
            reconfig_cycles: self.reconfig_cycles * count,
            vector_cycles: self.vector_cycles * count,
            overlap_credit: self.overlap_credit * count,
            total_cycles: 0,
            utilization: 0.0,
            macs: self.macs * count,
            pes: self.pes,
            dram_bytes: self.dram_bytes * count,
            activity: Activity {
                macs: self.activity.macs * f,
                pe_cycles: self.activity.pe_cycles * f,
                vector_elems: self.activity.vector_elems * f,
                noc_bytes: self.activity.noc_bytes * f,
                dram_bytes: self.activity.dram_bytes * f,
            },
            energy_j: self.energy_j.scaled(f),
        }
        .finalize()
    }

    /// Serial composition of two reports on the same resource.
    pub fn then(&self, o: &CostReport) -> Self {
        let mut r = *self;
        r.array_cycles += o.array_cycles;
        r.stall_cycles += o.stall_cycles;
        r.collective_cycles += o.collective_cycles;
        r.reconfig_cycles += o.reconfig_cycles;
        r.vector_cycles += o.vector_cycles;
        r.overlap_credit += o.overlap_credit;
        r.macs += o.macs;
        r.pes = r.pes.max(o.pes);
        r.dram_bytes += o.dram_bytes;
        r.activity.macs += o.activity.macs;
        r.activity.pe_cycles += o.activity.pe_cycles;
        r.activity.vector_elems += o.activity.vector_elems;
        r.activity.noc_bytes += o.activity.noc_bytes;
        r.activity.dram_bytes += o.activity.dram_bytes;
        r.energy_j += o.energy_j;
        r.finalize()
    }

    /// Wall time at `freq_hz`.
    pub fn seconds(&self, freq_hz: f64) -> f64 {
        self.total_cycles as f64 / freq_hz
    }
}

/// Cost of `op` on one core with a given shape and dataflow, while
/// `active_cores` cores of the PU share its channel.
pub fn core_cost_with_shape(
    op: &GemmOp,
    shape: LogicalShape,
    dataflow: Dataflow,
    sys: &SystemConfig,
    active_cores: u64,
) -> Result<CostReport> {
    core_cost_instances(op, shape, dataflow, sys, active_cores, 1)
}

/// Cost of `instances` independent copies of `op` pipelined on one core.
pub fn core_cost_instances(
    op: &GemmOp,
    shape: LogicalShape,
    dataflow: Dataflow,
    sys: &SystemConfig,
    active_cores: u64,
    instances: u64,
) -> Result<CostReport> {
    let t_max = op_temporal_limit(op, shape, dataflow, &sys.mem);
    let plan = tile_instances(op, shape, dataflow, t_max, instances);
    let array = array_cycles(&plan);
    let stall = stall_cycles(&plan, &sys.mem, &sys.array, active_cores)?;
    let dram: u64 = refill_bytes(&plan, &MemorySystem {
        writeback_shares_bandwidth: true,
        ..sys.mem
    })
    .iter()
    .sum();
    let pes = sys.array.pes();
    let macs = op.m * op.n * op.k * plan.instances;
    let activity = Activity {
        macs: macs as f64,
        pe_cycles: (array * pes) as f64,
        dram_bytes: dram as f64,
        ..Default::default()
    };
    Ok(CostReport {
        array_cycles: array,
        stall_cycles: stall,
        macs,
        pes,
        dram_bytes: dram,
        activity,
        ..Default::default()
    }
    .finalize()
    .with_energy(&sys.energy))
}

/// Single-core cost using the shape selected for `op.m`.
pub fn core_cost(op: &GemmOp, dataflow: Dataflow, sys: &SystemConfig, active_cores: u64) -> Result<CostReport> {
    let shape = select_logical_shape(op.m, &sys.array);
    core_cost_with_shape(op, shape, dataflow, sys, active_cores)
}

/// MAC-tree comparator: one `m x n x k` block per cycle per PU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacTreeConfig {
    pub block_m: u64,
    pub block_n: u64,
    pub block_k: u64,
    pub freq_hz: f64,
    /// Throughput derating when the reduction dimension is not block-aligned.
    pub util_factor: f64,
    /// Output columns per refill tile.
    pub tile_n: u64,
}

impl Default for MacTreeConfig {
    fn default() -> Self {
        MacTreeConfig {
            block_m: 16,
            block_n: 16,
            block_k: 16,
            freq_hz: 1.0e9,
            util_factor: 0.85,
            tile_n: 256,
        }
    }
}

impl MacTreeConfig {
    pub fn macs_per_cycle(&self) -> u64 {
        self.block_m * self.block_n * self.block_k
    }

    fn compute(&self, m: u64, n: u64, k: u64) -> u64 {
        let blocks = m.div_ceil(self.block_m) * n.div_ceil(self.block_n) * k.div_ceil(self.block_k);
        if k.is_multiple_of(self.block_k) {
            blocks
        } else {
            (blocks as f64 / self.util_factor).ceil() as u64
        }
    }
}

/// Cost of `op` on one PU's MAC tree, cycles at the tree's own clock.
pub fn mac_tree_cycles(op: &GemmOp, mem: &MemorySystem, mt: &MacTreeConfig, num_pus: u64) -> CostReport {
    let eb = op.elem_bytes;
    let tiles = op.n.div_ceil(mt.tile_n);
    let mut compute = Vec::with_capacity(tiles as usize);
    let mut refill = Vec::with_capacity(tiles as usize);
    for j in 0..tiles {
        let n_t = mt.tile_n.min(op.n - j * mt.tile_n);
        compute.push(mt.compute(op.m, n_t, op.k));
        let wb = if mem.writeback_shares_bandwidth { op.m * n_t } else { 0 };
        refill.push((op.k * n_t + op.m * op.k + wb) * eb);
    }
    let bpc = mem.per_pu_bw(num_pus) / mt.freq_hz;
    let stall = pipeline_stall(&compute, &refill, bpc, if mem.double_buffered { 2 } else { 1 });
    let array: u64 = compute.iter().sum();
    let dram: u64 = (0..tiles)
        .map(|j| {
            let n_t = mt.tile_n.min(op.n - j * mt.tile_n);
            (op.k * n_t + op.m * op.k + op.m * n_t) * eb
        })
        .sum();
    let macs = op.macs();
    CostReport {
        array_cycles: array,
        stall_cycles: stall,
        macs,
        pes: mt.macs_per_cycle(),
        dram_bytes: dram,
        activity: Activity {
            macs: macs as f64,
            pe_cycles: (array * mt.macs_per_cycle()) as f64,
            dram_bytes: dram as f64,
            ..Default::default()
        },
        ..Default::default()
    }
    .finalize()
}
