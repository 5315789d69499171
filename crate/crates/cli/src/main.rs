//! `nmpsim`: roofline, scheduling, sweep and emulator reports.

mod config;
mod output;

use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use nmp_core::analysis::{
    buffer_compute_sweep, emulator_check, intensity_table, iso_area_candidates, report_schedule, AreaModel,
    EmulatorGrid, RooflineSpec, SweepCandidate,
};
use nmp_core::array::{ArrayConfig, Dataflow};
use nmp_core::perf::{min_buffers, temporal_limit, tile_gemm, MacTreeConfig};
use nmp_core::scheduler::{schedule_mac_tree, schedule_model, shape_demand, Mode, ModelSchedule};
use nmp_core::workload::{decode_operators, GemmOp};
use nmp_core::{ModelConfig, SystemConfig};
use serde::Serialize;

use config::{load_model, parse_dims, parse_mode, require_nonempty, Comparator, OutputArgs, SystemArgs, WorkloadArgs};
use output::emit;

#[derive(Parser)]
#[command(name = "nmpsim", version, about = "Decode cost model for reconfigurable systolic near-memory accelerators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roofline and per-operator arithmetic intensity.
    Analyze {
        #[command(flatten)]
        workload: WorkloadArgs,
        /// Roofline to classify against: default, duplex or stratum.
        #[arg(long, default_value = "default")]
        system: String,
        #[command(flatten)]
        overrides: SystemArgs,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Full decode schedule with mode histogram, slowdowns and speedups.
    Schedule {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[command(flatten)]
        overrides: SystemArgs,
        /// Comparator substrates, comma separated.
        #[arg(long, value_enum, value_delimiter = ',')]
        compare: Vec<Comparator>,
        /// Force one partition mode wherever it is feasible.
        #[arg(long, value_parser = parse_mode)]
        fixed_mode: Option<Mode>,
        /// Emit one row per operator instead of one per batch.
        #[arg(long)]
        per_op: bool,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Trade-off sweeps.
    Sweep {
        #[command(subcommand)]
        kind: SweepKind,
    },
    /// Checks the functional emulator against a reference matmul.
    EmulateCheck {
        /// Physical arrays, comma separated `RxC`.
        #[arg(long, value_delimiter = ',', default_value = "4x4,8x8", value_parser = parse_dims)]
        arrays: Vec<(u64, u64)>,
        /// Random GEMMs per shape and dataflow.
        #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
        gemms: u64,
        #[arg(long, default_value_t = 0x5eed)]
        seed: u64,
        /// Corrupts one emulated result.
        #[arg(long, hide = true)]
        inject_fault: bool,
        #[command(flatten)]
        out: OutputArgs,
    },
}

#[derive(Subcommand)]
enum SweepKind {
    /// Iso-area buffer-versus-PE sweep of fixed-shape cores.
    Buffers {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[command(flatten)]
        overrides: SystemArgs,
        /// Array rows of every candidate.
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
        rows: u64,
        /// Candidate widths, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "128,256,384,512,640,768")]
        widths: Vec<u64>,
        /// Reference width whose PEs and weight buffer fix the area budget.
        #[arg(long, default_value_t = 512)]
        reference_width: u64,
        #[arg(long, default_value_t = 400.0)]
        area_per_pe: f64,
        #[arg(long, default_value_t = 1.0)]
        area_per_byte: f64,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Logical-shape demand of a schedule and per-shape minimum buffers.
    Shapes {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[command(flatten)]
        overrides: SystemArgs,
        #[command(flatten)]
        out: OutputArgs,
    },
}

/// Failure with its exit status.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let infeasible = err.chain().any(|e| {
            matches!(
                e.downcast_ref::<nmp_core::Error>(),
                Some(nmp_core::Error::BufferCapacity { .. } | nmp_core::Error::TileTooLarge { .. })
            )
        });
        Failure {
            code: if infeasible { 1 } else { 2 },
            err,
        }
    }
}

impl From<nmp_core::Error> for Failure {
    fn from(err: nmp_core::Error) -> Self {
        anyhow::Error::from(err).into()
    }
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    command: &'a str,
    model: Option<&'a ModelConfig>,
    batches: &'a [u64],
    seq_len: Option<u64>,
    system: &'a SystemConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    extra: Option<serde_json::Value>,
}

#[derive(Serialize)]
struct AnalyzeRow {
    system: String,
    peak_flops: f64,
    bandwidth: f64,
    ridge: f64,
    model: String,
    batch: u64,
    tag: String,
    m: u64,
    n: u64,
    k: u64,
    count: u64,
    intensity: f64,
    bound: String,
}

fn analyze(workload: &WorkloadArgs, system: &str, overrides: &SystemArgs, out: &OutputArgs) -> Result<(), Failure> {
    let sys = overrides.resolve()?;
    let roof = match system {
        "default" => nmp_core::analysis::ridge_point(&sys),
        other => RooflineSpec::preset(other)?,
    };
    let model = load_model(&workload.model)?;
    let mut rows = Vec::new();
    for &b in &workload.batch {
        let g = decode_operators(&model, b, workload.seq)?;
        for r in intensity_table(&g, &roof) {
            rows.push(AnalyzeRow {
                system: roof.label.clone(),
                peak_flops: roof.peak_flops,
                bandwidth: roof.bandwidth,
                ridge: roof.ridge,
                model: model.name.clone(),
                batch: b,
                tag: r.tag,
                m: r.m,
                n: r.n,
                k: r.k,
                count: r.count,
                intensity: r.intensity,
                bound: r.bound.to_string(),
            });
        }
    }
    let cfg = ResolvedConfig {
        command: "analyze",
        model: Some(&model),
        batches: &workload.batch,
        seq_len: Some(workload.seq),
        system: &sys,
        extra: Some(serde_json::to_value(&roof).map_err(anyhow::Error::from)?),
    };
    emit(out, &cfg, &rows)?;
    Ok(())
}

#[derive(Serialize)]
struct ScheduleRow {
    model: String,
    batch: u64,
    seq_len: u64,
    forced_mode: Option<String>,
    total_cycles: u64,
    seconds: f64,
    array_cycles: u64,
    stall_cycles: u64,
    collective_cycles: u64,
    reconfig_cycles: u64,
    vector_cycles: u64,
    overlap_credit: u64,
    energy_j: f64,
    utilization: f64,
    fallbacks: u64,
    ops_is_s: u64,
    ops_os_s: u64,
    ops_is_st: u64,
    ops_os_st: u64,
    entropy_bits: f64,
    slowdown_is_s: f64,
    slowdown_os_s: f64,
    slowdown_is_st: f64,
    slowdown_os_st: f64,
    /// Forced-mode run against the flexible run.
    forced_slowdown: Option<f64>,
    speedup_mac_tree: Option<f64>,
    speedup_fixed_48x48: Option<f64>,
    speedup_fixed_8x288: Option<f64>,
}

#[derive(Serialize)]
struct OpRow {
    model: String,
    batch: u64,
    layer: u64,
    tag: String,
    m: u64,
    n: u64,
    k: u64,
    count: u64,
    placement: String,
    mode: Option<String>,
    total_cycles: u64,
    array_cycles: u64,
    stall_cycles: u64,
    collective_cycles: u64,
    vector_cycles: u64,
    overlap_credit: u64,
    energy_j: f64,
}

fn op_rows(model: &str, batch: u64, sched: &ModelSchedule) -> Vec<OpRow> {
    sched
        .ops
        .iter()
        .map(|s| {
            let r = &s.report;
            OpRow {
                model: model.to_string(),
                batch,
                layer: s.op.layer,
                tag: s.op.tag.clone(),
                m: s.op.m,
                n: s.op.n,
                k: s.op.k,
                count: s.op.count,
                placement: match &s.placement {
                    nmp_core::scheduler::Placement::Partitioned { .. } => "partitioned",
                    nmp_core::scheduler::Placement::HeadParallel => "head-parallel",
                    nmp_core::scheduler::Placement::SinglePu { .. } => "single-pu",
                }
                .to_string(),
                mode: s.placement.mode().map(|m| m.label().to_string()),
                total_cycles: r.total_cycles,
                array_cycles: r.array_cycles,
                stall_cycles: r.stall_cycles,
                collective_cycles: r.collective_cycles,
                vector_cycles: r.vector_cycles,
                overlap_credit: r.overlap_credit,
                energy_j: r.energy_j.total(),
            }
        })
        .collect()
}

fn comparator_seconds(c: Comparator, g: &nmp_core::OperatorGraph, sys: &SystemConfig) -> nmp_core::Result<f64> {
    match c {
        Comparator::MacTree => {
            let mt = MacTreeConfig::default();
            Ok(schedule_mac_tree(g, sys, &mt)?.seconds(mt.freq_hz))
        }
        Comparator::Fixed48x48 | Comparator::Fixed8x288 => {
            let fixed = if c == Comparator::Fixed48x48 {
                ArrayConfig::fixed_48x48()
            } else {
                ArrayConfig::fixed_8x288()
            };
            let array = ArrayConfig {
                cores_per_pu: sys.array.cores_per_pu,
                num_pus: sys.array.num_pus,
                ..fixed
            };
            let other = sys.with_array(array);
            Ok(schedule_model(g, &other, None)?.seconds(array.freq_hz))
        }
    }
}

fn schedule(
    workload: &WorkloadArgs,
    overrides: &SystemArgs,
    compare: &[Comparator],
    fixed_mode: Option<Mode>,
    per_op: bool,
    out: &OutputArgs,
) -> Result<(), Failure> {
    let sys = overrides.resolve()?;
    let model = load_model(&workload.model)?;
    let mut rows = Vec::new();
    let mut ops = Vec::new();
    for &b in &workload.batch {
        let g = decode_operators(&model, b, workload.seq)?;
        let flexible = schedule_model(&g, &sys, None)?;
        let fixed = Mode::ALL
            .iter()
            .map(|&m| schedule_model(&g, &sys, Some(m)))
            .collect::<nmp_core::Result<Vec<_>>>()?;
        let report = report_schedule(&flexible, &fixed);
        let chosen = match fixed_mode {
            Some(m) => &fixed[m.index()],
            None => &flexible,
        };
        if per_op {
            ops.extend(op_rows(&model.name, b, chosen));
            continue;
        }
        let ours = chosen.seconds(sys.array.freq_hz);
        let mut speedup = [None; 3];
        for &c in compare {
            speedup[c as usize] = Some(comparator_seconds(c, &g, &sys)? / ours);
        }
        let t = &chosen.totals;
        let h = &report.histogram;
        let slow = |m: Mode| report.fixed[m.index()].2;
        rows.push(ScheduleRow {
            model: model.name.clone(),
            batch: b,
            seq_len: workload.seq,
            forced_mode: fixed_mode.map(|m| m.label().to_string()),
            total_cycles: t.total_cycles,
            seconds: ours,
            array_cycles: t.array_cycles,
            stall_cycles: t.stall_cycles,
            collective_cycles: t.collective_cycles,
            reconfig_cycles: t.reconfig_cycles,
            vector_cycles: t.vector_cycles,
            overlap_credit: t.overlap_credit,
            energy_j: t.energy_j.total(),
            utilization: t.utilization,
            fallbacks: chosen.fallbacks,
            ops_is_s: h.count(Mode::IsS),
            ops_os_s: h.count(Mode::OsS),
            ops_is_st: h.count(Mode::IsSt),
            ops_os_st: h.count(Mode::OsSt),
            entropy_bits: report.entropy_bits,
            slowdown_is_s: slow(Mode::IsS),
            slowdown_os_s: slow(Mode::OsS),
            slowdown_is_st: slow(Mode::IsSt),
            slowdown_os_st: slow(Mode::OsSt),
            forced_slowdown: fixed_mode.map(slow),
            speedup_mac_tree: speedup[Comparator::MacTree as usize],
            speedup_fixed_48x48: speedup[Comparator::Fixed48x48 as usize],
            speedup_fixed_8x288: speedup[Comparator::Fixed8x288 as usize],
        });
    }
    let cfg = ResolvedConfig {
        command: "schedule",
        model: Some(&model),
        batches: &workload.batch,
        seq_len: Some(workload.seq),
        system: &sys,
        extra: Some(serde_json::json!({
            "compare": compare,
            "fixed_mode": fixed_mode,
            "mac_tree": MacTreeConfig::default(),
        })),
    };
    if per_op {
        emit(out, &cfg, &ops)?;
    } else {
        emit(out, &cfg, &rows)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BufferRow {
    model: String,
    batch: u64,
    rows: u64,
    cols: u64,
    pes: u64,
    weight_buf_bytes: u64,
    array_cycles: u64,
    stall_cycles: u64,
    energy_j: f64,
    is_ops: u64,
    os_ops: u64,
}

#[allow(clippy::too_many_arguments)]
fn sweep_buffers(
    workload: &WorkloadArgs,
    overrides: &SystemArgs,
    rows: u64,
    widths: &[u64],
    reference_width: u64,
    area: AreaModel,
    out: &OutputArgs,
) -> Result<(), Failure> {
    require_nonempty(widths, "--widths")?;
    if widths.contains(&0) || reference_width == 0 {
        return Err(anyhow::anyhow!("widths must be positive").into());
    }
    if !(area.per_pe > 0.0 && area.per_sram_byte > 0.0) {
        return Err(anyhow::anyhow!("area constants must be positive").into());
    }
    let sys = overrides.resolve()?;
    let model = load_model(&workload.model)?;
    let reference = SweepCandidate {
        rows,
        cols: reference_width,
        weight_buf_bytes: sys.mem.weight_buf_bytes,
    };
    let candidates = iso_area_candidates(&area, reference, rows, widths);
    if candidates.len() < widths.len() {
        log::warn!("{} widths exceed the area budget", widths.len() - candidates.len());
    }
    let mut table = Vec::new();
    for &b in &workload.batch {
        let g = decode_operators(&model, b, workload.seq)?;
        for r in buffer_compute_sweep(&candidates, &g, &sys)? {
            table.push(BufferRow {
                model: model.name.clone(),
                batch: b,
                rows: r.rows,
                cols: r.cols,
                pes: r.rows * r.cols,
                weight_buf_bytes: r.weight_buf_bytes,
                array_cycles: r.array_cycles,
                stall_cycles: r.stall_cycles,
                energy_j: r.energy_j,
                is_ops: r.is_ops,
                os_ops: r.os_ops,
            });
        }
    }
    let cfg = ResolvedConfig {
        command: "sweep buffers",
        model: Some(&model),
        batches: &workload.batch,
        seq_len: Some(workload.seq),
        system: &sys,
        extra: Some(serde_json::json!({ "area": area, "reference": reference, "candidates": candidates })),
    };
    emit(out, &cfg, &table)?;
    Ok(())
}

#[derive(Serialize)]
struct ShapeRow {
    model: String,
    batch: u64,
    shape: String,
    rows: u64,
    cols: u64,
    ops: u64,
    share: f64,
    min_weight_buf_bytes: u64,
    min_act_buf_bytes: u64,
}

fn sweep_shapes(workload: &WorkloadArgs, overrides: &SystemArgs, out: &OutputArgs) -> Result<(), Failure> {
    let sys = overrides.resolve()?;
    let model = load_model(&workload.model)?;
    let mut table = Vec::new();
    for &b in &workload.batch {
        let g = decode_operators(&model, b, workload.seq)?;
        let sched = schedule_model(&g, &sys, None)?;
        let demand = shape_demand(&sched, &sys);
        let total: u64 = demand.iter().map(|d| d.1).sum();
        for (shape, ops) in demand {
            let t = temporal_limit(shape, &sys.mem, 2);
            let probe = GemmOp::new(shape.rows, t, shape.cols);
            let need = min_buffers(shape, Dataflow::Is, &tile_gemm(&probe, shape, Dataflow::Is, t));
            table.push(ShapeRow {
                model: model.name.clone(),
                batch: b,
                shape: shape.to_string(),
                rows: shape.rows,
                cols: shape.cols,
                ops,
                share: if total == 0 { 0.0 } else { ops as f64 / total as f64 },
                min_weight_buf_bytes: need.weight_buf_bytes,
                min_act_buf_bytes: need.act_buf_bytes,
            });
        }
    }
    let cfg = ResolvedConfig {
        command: "sweep shapes",
        model: Some(&model),
        batches: &workload.batch,
        seq_len: Some(workload.seq),
        system: &sys,
        extra: None,
    };
    emit(out, &cfg, &table)?;
    Ok(())
}

#[derive(Serialize)]
struct EmulateRow {
    physical: String,
    shape: String,
    dataflow: String,
    gemms: u64,
    value_failures: u64,
    cycle_failures: u64,
}

fn emulate_check(grid: EmulatorGrid, out: &OutputArgs) -> Result<(), Failure> {
    require_nonempty(&grid.arrays, "--arrays")?;
    let check = emulator_check(&grid)?;
    let rows: Vec<_> = check
        .cases
        .iter()
        .map(|c| EmulateRow {
            physical: format!("{}x{}", c.phys.0, c.phys.1),
            shape: c.shape.to_string(),
            dataflow: c.dataflow.to_string(),
            gemms: c.gemms,
            value_failures: c.value_failures,
            cycle_failures: c.cycle_failures,
        })
        .collect();
    let sys = SystemConfig::default();
    let cfg = ResolvedConfig {
        command: "emulate-check",
        model: None,
        batches: &[],
        seq_len: None,
        system: &sys,
        extra: Some(serde_json::to_value(&grid).map_err(anyhow::Error::from)?),
    };
    emit(out, &cfg, &rows)?;
    if check.passed() {
        eprintln!("all passed: {} GEMMs over {} cases", check.gemms(), check.cases.len());
        Ok(())
    } else {
        eprintln!(
            "FAILED: {} value and {} cycle mismatches over {} GEMMs",
            check.value_failures(),
            check.cycle_failures(),
            check.gemms()
        );
        if let Some(f) = &check.first_failure {
            eprintln!("first counterexample: {f}");
        }
        Err(Failure {
            code: 1,
            err: anyhow::anyhow!("emulator check failed"),
        })
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Analyze {
            workload,
            system,
            overrides,
            out,
        } => analyze(&workload, &system, &overrides, &out),
        Command::Schedule {
            workload,
            overrides,
            compare,
            fixed_mode,
            per_op,
            out,
        } => schedule(&workload, &overrides, &compare, fixed_mode, per_op, &out),
        Command::Sweep { kind } => match kind {
            SweepKind::Buffers {
                workload,
                overrides,
                rows,
                widths,
                reference_width,
                area_per_pe,
                area_per_byte,
                out,
            } => sweep_buffers(
                &workload,
                &overrides,
                rows,
                &widths,
                reference_width,
                AreaModel {
                    per_pe: area_per_pe,
                    per_sram_byte: area_per_byte,
                },
                &out,
            ),
            SweepKind::Shapes { workload, overrides, out } => sweep_shapes(&workload, &overrides, &out),
        },
        Command::EmulateCheck {
            arrays,
            gemms,
            seed,
            inject_fault,
            out,
        } => emulate_check(
            EmulatorGrid {
                arrays,
                gemms_per_case: gemms,
                seed,
                inject_fault,
                ..Default::default()
            },
            &out,
        ),
    }
}

fn broken_pipe(err: &anyhow::Error) -> bool {
    let pipe = |io: &std::io::Error| io.kind() == std::io::ErrorKind::BrokenPipe;
    err.chain().any(|e| {
        e.downcast_ref::<std::io::Error>().is_some_and(pipe)
            || e.downcast_ref::<csv::Error>()
                .is_some_and(|c| matches!(c.kind(), csv::ErrorKind::Io(io) if pipe(io)))
    })
}

/// The error chain, skipping causes already quoted by an outer message.
fn describe(err: &anyhow::Error) -> String {
    let mut text = err.to_string();
    for cause in err.chain().skip(1) {
        let c = cause.to_string();
        if !text.contains(&c) {
            text = format!("{text}: {c}");
        }
    }
    text
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) if broken_pipe(&f.err) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", describe(&f.err));
            ExitCode::from(f.code)
        }
    }
}
