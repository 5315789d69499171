//! Roofline analysis, operator intensity, the buffer/compute trade-off
//! sweep, schedule reports and the emulator oracle grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::{emulate, logical_shapes, select_logical_shape, snake_map, ArrayConfig, Dataflow, LogicalShape, Matrix};
use crate::error::{Error, Result};
use crate::perf::{array_cycles, tile_gemm, EnergyBreakdown};
use crate::scheduler::{schedule_model, select_core_dataflow, Mode, ModeHistogram, ModelSchedule};
use crate::system::SystemConfig;
use crate::workload::{GemmOp, OperatorGraph};

/// Peak compute against memory bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RooflineSpec {
    pub label: String,
    /// FLOP/s.
    pub peak_flops: f64,
    /// Bytes/s.
    pub bandwidth: f64,
    /// FLOP/byte.
    pub ridge: f64,
}

impl RooflineSpec {
    pub fn new(label: &str, peak_flops: f64, bandwidth: f64) -> Self {
        RooflineSpec {
            label: label.to_string(),
            peak_flops,
            bandwidth,
            ridge: peak_flops / bandwidth,
        }
    }

    /// Logic-PIM HBM comparator: 20.48 TFLOP/s over 2.56 TB/s.
    pub fn duplex() -> Self {
        Self::new("duplex", 20.48e12, 2.56e12)
    }

    /// Fixed 64x64 arrays, one per PU, at 1 GHz over 24 TB/s.
    pub fn stratum() -> Self {
        Self::new("stratum", 16.0 * 4096.0 * 2.0 * 1.0e9, 24.0e12)
    }

    /// `default`, `duplex` or `stratum`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(ridge_point(&SystemConfig::default())),
            "duplex" => Ok(Self::duplex()),
            "stratum" => Ok(Self::stratum()),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }
}

/// Roofline of a system: every PE retires one MAC (2 FLOP) per cycle.
pub fn ridge_point(sys: &SystemConfig) -> RooflineSpec {
    RooflineSpec::new("default", 2.0 * sys.array.peak_macs_per_s(), sys.mem.total_dram_bw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bound {
    #[serde(rename = "compute")]
    Compute,
    #[serde(rename = "memory")]
    Memory,
}

impl std::fmt::Display for Bound {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Bound::Compute => "compute",
            Bound::Memory => "memory",
        })
    }
}

/// FLOP per operand byte, each matrix counted once.
pub fn operator_intensity(op: &GemmOp) -> f64 {
    let (m, n, k) = (op.m as f64, op.n as f64, op.k as f64);
    2.0 * m * n * k / (op.elem_bytes as f64 * (m * k + k * n + m * n))
}

pub fn classify(intensity: f64, roof: &RooflineSpec) -> Bound {
    if intensity >= roof.ridge {
        Bound::Compute
    } else {
        Bound::Memory
    }
}

/// One operator placed on a roofline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityRow {
    pub tag: String,
    pub m: u64,
    pub n: u64,
    pub k: u64,
    pub count: u64,
    pub intensity: f64,
    pub bound: Bound,
}

/// Intensity of each distinct operator of the first layer.
pub fn intensity_table(graph: &OperatorGraph, roof: &RooflineSpec) -> Vec<IntensityRow> {
    let first = graph.ops.first().map_or(0, |o| o.layer);
    graph
        .ops
        .iter()
        .filter(|o| o.layer == first)
        .map(|o| {
            let intensity = operator_intensity(o);
            IntensityRow {
                tag: o.tag.clone(),
                m: o.m,
                n: o.n,
                k: o.k,
                count: o.count,
                intensity,
                bound: classify(intensity, roof),
            }
        })
        .collect()
}

/// Linear area model in arbitrary units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaModel {
    pub per_pe: f64,
    pub per_sram_byte: f64,
}

impl Default for AreaModel {
    fn default() -> Self {
        AreaModel {
            per_pe: 400.0,
            per_sram_byte: 1.0,
        }
    }
}

impl AreaModel {
    pub fn area(&self, pes: u64, buffer_bytes: u64) -> f64 {
        pes as f64 * self.per_pe + buffer_bytes as f64 * self.per_sram_byte
    }

    /// Weight buffer left for `pes` under `budget`, if any.
    pub fn buffer_for(&self, budget: f64, pes: u64) -> Option<u64> {
        let left = budget - pes as f64 * self.per_pe;
        (left >= self.per_sram_byte).then(|| (left / self.per_sram_byte).floor() as u64)
    }
}

/// A fixed-shape core with its weight buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepCandidate {
    pub rows: u64,
    pub cols: u64,
    pub weight_buf_bytes: u64,
}

/// Candidates `rows x cols` for each width, trading weight buffer for PEs
/// under the budget of `reference`.
pub fn iso_area_candidates(area: &AreaModel, reference: SweepCandidate, rows: u64, widths: &[u64]) -> Vec<SweepCandidate> {
    let budget = area.area(reference.rows * reference.cols, reference.weight_buf_bytes);
    widths
        .iter()
        .filter_map(|&cols| {
            area.buffer_for(budget, rows * cols).map(|weight_buf_bytes| SweepCandidate {
                rows,
                cols,
                weight_buf_bytes,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rows: u64,
    pub cols: u64,
    pub weight_buf_bytes: u64,
    pub array_cycles: u64,
    pub stall_cycles: u64,
    pub energy_j: f64,
    pub is_ops: u64,
    pub os_ops: u64,
}

/// Evaluates the linear operators of `graph` on one core of each candidate,
/// each operator in its cheaper dataflow.
pub fn buffer_compute_sweep(candidates: &[SweepCandidate], graph: &OperatorGraph, base: &SystemConfig) -> Result<Vec<SweepRow>> {
    candidates
        .iter()
        .map(|c| {
            let mut array = ArrayConfig::fixed(c.rows, c.cols, base.array.freq_hz);
            array.cores_per_pu = base.array.cores_per_pu;
            array.num_pus = base.array.num_pus;
            let mut sys = base.with_array(array);
            sys.mem.weight_buf_bytes = c.weight_buf_bytes;
            sys.validate()?;
            let mut row = SweepRow {
                rows: c.rows,
                cols: c.cols,
                weight_buf_bytes: c.weight_buf_bytes,
                array_cycles: 0,
                stall_cycles: 0,
                energy_j: 0.0,
                is_ops: 0,
                os_ops: 0,
            };
            let mut energy = EnergyBreakdown::default();
            for op in graph.ops.iter().filter(|o| !o.is_attention()) {
                let (df, _, r) = select_core_dataflow(op, &sys, array.cores_per_pu)?;
                let r = r.repeated(op.count);
                row.array_cycles += r.array_cycles;
                row.stall_cycles += r.stall_cycles;
                energy += r.energy_j;
                match df {
                    Dataflow::Is => row.is_ops += op.count,
                    Dataflow::Os => row.os_ops += op.count,
                }
            }
            row.energy_j = energy.total();
            Ok(row)
        })
        .collect()
}

/// Per-tile dataflow preference of one operator on a single core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRow {
    pub tag: String,
    pub m: u64,
    pub n: u64,
    pub k: u64,
    pub preferred: Dataflow,
    pub os_cycles: u64,
    pub is_cycles: u64,
    /// Tiles of the operator under its preferred dataflow.
    pub tiles: u64,
}

/// Single-core OS/IS comparison of each distinct linear operator, the core
/// drawing its share of a fully active PU channel.
pub fn dataflow_preference(graph: &OperatorGraph, sys: &SystemConfig) -> Result<Vec<PreferenceRow>> {
    let first = graph.ops.first().map_or(0, |o| o.layer);
    graph
        .ops
        .iter()
        .filter(|o| o.layer == first && !o.is_attention())
        .map(|op| {
            let shape = select_logical_shape(op.m, &sys.array);
            let cost = |df| crate::perf::core_cost_with_shape(op, shape, df, sys, sys.array.cores_per_pu);
            let (os, is) = (cost(Dataflow::Os)?, cost(Dataflow::Is)?);
            let preferred = if is.total_cycles < os.total_cycles { Dataflow::Is } else { Dataflow::Os };
            let t_max = crate::perf::op_temporal_limit(op, shape, preferred, &sys.mem);
            Ok(PreferenceRow {
                tag: op.tag.clone(),
                m: op.m,
                n: op.n,
                k: op.k,
                preferred,
                os_cycles: os.total_cycles,
                is_cycles: is.total_cycles,
                tiles: tile_gemm(op, shape, preferred, t_max).tiles_total * op.count,
            })
        })
        .collect()
}

/// Mode histogram of a flexible run and the slowdown of each fixed mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub histogram: ModeHistogram,
    pub entropy_bits: f64,
    pub flexible_cycles: u64,
    /// `(mode, fixed-mode cycles, slowdown)` in mode order.
    pub fixed: Vec<(Mode, u64, f64)>,
}

impl ScheduleReport {
    pub fn max_slowdown(&self) -> f64 {
        self.fixed.iter().map(|f| f.2).fold(1.0, f64::max)
    }
}

/// Summarises a flexible schedule against its fixed-mode reruns.
pub fn report_schedule(flexible: &ModelSchedule, fixed: &[ModelSchedule]) -> ScheduleReport {
    let base = flexible.totals.total_cycles;
    ScheduleReport {
        histogram: flexible.histogram,
        entropy_bits: flexible.histogram.entropy(),
        flexible_cycles: base,
        fixed: fixed
            .iter()
            .filter_map(|s| {
                let mode = s.forced?;
                let t = s.totals.total_cycles;
                let slowdown = if base == 0 { 1.0 } else { t as f64 / base as f64 };
                Some((mode, t, slowdown))
            })
            .collect(),
    }
}

/// Runs the flexible schedule and all four fixed-mode schedules.
pub fn schedule_with_fixed(graph: &OperatorGraph, sys: &SystemConfig) -> Result<(ModelSchedule, ScheduleReport)> {
    let flexible = schedule_model(graph, sys, None)?;
    let fixed = Mode::ALL
        .iter()
        .map(|&m| schedule_model(graph, sys, Some(m)))
        .collect::<Result<Vec<_>>>()?;
    let report = report_schedule(&flexible, &fixed);
    Ok((flexible, report))
}

/// Grid of the emulator-versus-reference check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulatorGrid {
    /// Physical `(rows, cols)` arrays; every logical shape of each is used.
    pub arrays: Vec<(u64, u64)>,
    pub gemms_per_case: u64,
    pub max_depth: u64,
    pub max_value: i64,
    pub seed: u64,
    /// Corrupts one emulated output, for exercising the failure path.
    pub inject_fault: bool,
}

impl Default for EmulatorGrid {
    fn default() -> Self {
        EmulatorGrid {
            arrays: vec![(4, 4), (8, 8)],
            gemms_per_case: 100,
            max_depth: 16,
            max_value: 100,
            seed: 0x5eed,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulatorCase {
    pub phys: (u64, u64),
    pub shape: LogicalShape,
    pub dataflow: Dataflow,
    pub gemms: u64,
    pub value_failures: u64,
    pub cycle_failures: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulatorCheck {
    pub cases: Vec<EmulatorCase>,
    pub first_failure: Option<String>,
}

impl EmulatorCheck {
    pub fn gemms(&self) -> u64 {
        self.cases.iter().map(|c| c.gemms).sum()
    }

    pub fn value_failures(&self) -> u64 {
        self.cases.iter().map(|c| c.value_failures).sum()
    }

    pub fn cycle_failures(&self) -> u64 {
        self.cases.iter().map(|c| c.cycle_failures).sum()
    }

    pub fn passed(&self) -> bool {
        self.value_failures() == 0 && self.cycle_failures() == 0
    }
}

/// Emulates random integer GEMMs on every shape and dataflow of each array
/// and compares against the triple-loop product and the analytic cycle count.
pub fn emulator_check(grid: &EmulatorGrid) -> Result<EmulatorCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(grid.seed);
    let mut cases = Vec::new();
    let mut first_failure = None;
    let mut fault_pending = grid.inject_fault;
    for &(pr, pc) in &grid.arrays {
        let cfg = ArrayConfig::toy(pr, pc, 1);
        cfg.validate()?;
        for shape in logical_shapes(&cfg) {
            for df in [Dataflow::Os, Dataflow::Is] {
                let plan = snake_map(&cfg, shape, df)?;
                let mut case = EmulatorCase {
                    phys: (pr, pc),
                    shape,
                    dataflow: df,
                    gemms: 0,
                    value_failures: 0,
                    cycle_failures: 0,
                };
                for _ in 0..grid.gemms_per_case {
                    let m = rng.gen_range(1..=shape.rows);
                    let spatial = rng.gen_range(1..=shape.cols);
                    let depth = rng.gen_range(1..=grid.max_depth.max(1));
                    let (n, k) = match df {
                        Dataflow::Os => (spatial, depth),
                        Dataflow::Is => (depth, spatial),
                    };
                    let v = grid.max_value;
                    let a = Matrix::from_fn(m as usize, k as usize, |_, _| rng.gen_range(-v..=v));
                    let b = Matrix::from_fn(k as usize, n as usize, |_, _| rng.gen_range(-v..=v));
                    let mut got = emulate(&plan, &a, &b)?;
                    if fault_pending {
                        got.c.data[0] += 1;
                        fault_pending = false;
                    }
                    let want = a.naive_product(&b);
                    let op = GemmOp::new(m, n, k);
                    let analytic = array_cycles(&tile_gemm(&op, shape, df, depth));
                    case.gemms += 1;
                    if got.c != want {
                        case.value_failures += 1;
                        first_failure.get_or_insert_with(|| {
                            format!("{pr}x{pc} as {shape} {df}: {m}x{n}x{k} output differs from reference")
                        });
                    }
                    if got.cycles != analytic {
                        case.cycle_failures += 1;
                        first_failure.get_or_insert_with(|| {
                            format!(
                                "{pr}x{pc} as {shape} {df}: {m}x{n}x{k} took {} cycles, model gives {analytic}",
                                got.cycles
                            )
                        });
                    }
                }
                cases.push(case);
            }
        }
    }
    Ok(EmulatorCheck { cases, first_failure })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{decode_operators, preset};

    #[test]
    fn ridge_examples() {
        let r = ridge_point(&SystemConfig::default());
        assert!((r.peak_flops - 4.194304e14).abs() < 1e6);
        assert!((r.ridge - 17.476).abs() < 1e-3);
        assert_eq!(RooflineSpec::duplex().ridge, 8.0);
        let s = RooflineSpec::stratum().ridge;
        assert!((3.7..=6.7).contains(&s));
        let mut sys = SystemConfig::default();
        sys.mem.total_dram_bw *= 2.0;
        assert!((ridge_point(&sys).ridge * 2.0 - r.ridge).abs() < 1e-12);
        assert!(RooflineSpec::preset("tpu").is_err());
    }

    #[test]
    fn intensity_examples() {
        let roof = ridge_point(&SystemConfig::default());
        let small = operator_intensity(&GemmOp::new(8, 8192, 8192));
        assert!((small - 7.99).abs() < 0.01, "{small}");
        assert_eq!(classify(small, &roof), Bound::Memory);
        let big = operator_intensity(&GemmOp::new(64, 8192, 8192));
        assert!((big - 63.0).abs() < 0.6, "{big}");
        assert_eq!(classify(big, &roof), Bound::Compute);
        assert_eq!(operator_intensity(&GemmOp::new(1, 1, 1)), 2.0 / 6.0);
    }

    #[test]
    fn intensity_asymptote() {
        for m in [1u64, 4, 8, 16] {
            let i = operator_intensity(&GemmOp::new(m, 1000 * m, 1000 * m));
            assert!((i - m as f64).abs() / m as f64 <= 0.05);
        }
    }

    #[test]
    fn area_candidates_share_budget() {
        let area = AreaModel::default();
        let reference = SweepCandidate { rows: 8, cols: 512, weight_buf_bytes: 1 << 20 };
        let c = iso_area_candidates(&area, reference, 8, &[128, 512, 768, 4096]);
        assert_eq!(c.len(), 3);
        assert_eq!(c[1], reference);
        assert_eq!(c[0].weight_buf_bytes, (1 << 20) + 400 * 8 * 384);
        assert_eq!(c[2].weight_buf_bytes, 229_376);
    }

    #[test]
    fn single_candidate_sweep() {
        let cfg = preset("opt-66b").unwrap();
        let mut g = decode_operators(&cfg, 8, 1024).unwrap();
        g.ops.retain(|o| o.layer == 0);
        let c = SweepCandidate { rows: 8, cols: 512, weight_buf_bytes: 1 << 20 };
        let rows = buffer_compute_sweep(&[c], &g, &SystemConfig::default()).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].array_cycles > 0 && rows[0].energy_j > 0.0);
        assert_eq!(rows, buffer_compute_sweep(&[c], &g, &SystemConfig::default()).unwrap());
    }

    #[test]
    fn single_mode_report() {
        let mut g = OperatorGraph::empty(8, 1);
        g.ops.push(GemmOp::new(8, 8192, 8192));
        let (flex, report) = schedule_with_fixed(&g, &SystemConfig::default()).unwrap();
        assert_eq!(report.histogram.total(), 1);
        assert_eq!(report.entropy_bits, 0.0);
        let chosen = flex.ops[0].placement.mode().unwrap();
        let (_, _, s) = report.fixed.iter().find(|f| f.0 == chosen).unwrap();
        assert_eq!(*s, 1.0);
        assert!(report.fixed.iter().all(|f| f.2 >= 1.0));
    }

    #[test]
    fn emulator_grid_small() {
        let grid = EmulatorGrid {
            arrays: vec![(4, 4)],
            gemms_per_case: 10,
            ..Default::default()
        };
        let r = emulator_check(&grid).unwrap();
        assert!(r.passed(), "{:?}", r.first_failure);
        assert_eq!(r.cases.len(), 6);
        assert_eq!(r, emulator_check(&grid).unwrap());
        let bad = emulator_check(&EmulatorGrid { inject_fault: true, ..grid }).unwrap();
        assert_eq!(bad.value_failures(), 1);
        assert!(bad.first_failure.is_some());
    }
}
