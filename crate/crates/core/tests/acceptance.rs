use std::process::ExitCode;
use std::time::Instant;

use nmp_core::analysis::{
    buffer_compute_sweep, dataflow_preference, emulator_check, iso_area_candidates, ridge_point, schedule_with_fixed,
    AreaModel, EmulatorGrid, RooflineSpec, SweepCandidate,
};
use nmp_core::array::{logical_shapes, ArrayConfig, Dataflow};
use nmp_core::perf::{energy, min_buffers, temporal_limit, tile_gemm, Activity, MacTreeConfig};
use nmp_core::scheduler::{schedule_mac_tree, ModeHistogram};
use nmp_core::system::{CONTROL_POWER_W, MATRIX_POWER_W, NOC_POWER_W, VECTOR_POWER_W};
use nmp_core::workload::{decode_operators, preset, GemmOp};
use nmp_core::SystemConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODELS: [&str; 5] = ["llama3-70b", "opt-66b", "mixtral-8x22b", "qwen3-30b-a3b", "deepseek-236b"];
const BATCHES: [u64; 4] = [8, 16, 32, 64];
const SEQ: u64 = 8192;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn emulator_criteria() -> (Outcome, Outcome) {
    let start = Instant::now();
    let r = emulator_check(&EmulatorGrid::default()).expect("emulator grid runs");
    let secs = start.elapsed().as_secs_f64();
    let min_per_case = r.cases.iter().map(|c| c.gemms).min().unwrap_or(0);
    let shapes_ok = r.cases.len() == 2 * (3 + 4);
    let values = outcome(
        r.value_failures() == 0 && min_per_case >= 100 && shapes_ok && secs < 60.0,
        format!(
            "{} cases, {} GEMMs, {} value mismatches, {:.2}s",
            r.cases.len(),
            r.gemms(),
            r.value_failures(),
            secs
        ),
    );
    let cycles = outcome(
        r.cycle_failures() == 0 && r.gemms() > 0,
        format!("{} GEMMs, {} cycle mismatches", r.gemms(), r.cycle_failures()),
    );
    if let Some(f) = &r.first_failure {
        println!("    first failure: {f}");
    }
    (values, cycles)
}

fn ridge_criterion() -> Outcome {
    let ours = ridge_point(&SystemConfig::default()).ridge;
    let duplex = RooflineSpec::duplex().ridge;
    let stratum = RooflineSpec::stratum().ridge;
    outcome(
        (ours - 17.48).abs() <= 0.01 && duplex == 8.0 && (3.7..=6.7).contains(&stratum),
        format!("default {ours:.3}, duplex {duplex:.3}, stratum {stratum:.3} FLOP/B"),
    )
}

fn preference_criterion() -> Outcome {
    let g = decode_operators(&preset("opt-66b").unwrap(), 8, SEQ).unwrap();
    let rows = dataflow_preference(&g, &SystemConfig::default()).unwrap();
    let (mut agree, mut total) = (0u64, 0u64);
    for r in &rows {
        let want = if r.n > r.k { Dataflow::Is } else { Dataflow::Os };
        total += r.tiles;
        if r.preferred == want {
            agree += r.tiles;
        } else {
            println!(
                "    exception: {} {}x{}x{} prefers {} (OS {} / IS {} cycles, {} tiles)",
                r.tag, r.m, r.n, r.k, r.preferred, r.os_cycles, r.is_cycles, r.tiles
            );
        }
    }
    let frac = agree as f64 / total.max(1) as f64;
    let groups = |big: bool| {
        rows.iter()
            .filter(|r| (r.n > r.k) == big)
            .map(|r| format!("{}:{}", r.tag, r.preferred))
            .collect::<Vec<_>>()
            .join(" ")
    };
    outcome(
        frac >= 0.90 && rows.iter().any(|r| r.n > r.k) && rows.iter().any(|r| r.n <= r.k),
        format!(
            "{:.1}% of {total} tiles agree; N>K [{}] N<=K [{}]",
            100.0 * frac,
            groups(true),
            groups(false)
        ),
    )
}

fn sweep_criterion() -> Outcome {
    let g = decode_operators(&preset("opt-66b").unwrap(), 8, SEQ).unwrap();
    let reference = SweepCandidate {
        rows: 8,
        cols: 512,
        weight_buf_bytes: 1 << 20,
    };
    let widths = [128, 256, 384, 512, 640, 768];
    let c = iso_area_candidates(&AreaModel::default(), reference, 8, &widths);
    let rows = buffer_compute_sweep(&c, &g, &SystemConfig::default()).unwrap();
    if rows.len() != widths.len() {
        return outcome(false, format!("only {} of {} candidates fit the budget", rows.len(), widths.len()));
    }
    let at = |cols: u64| rows.iter().find(|r| r.cols == cols).unwrap();
    let falling = rows
        .windows(2)
        .filter(|w| w[1].cols <= 512)
        .all(|w| w[1].array_cycles < w[0].array_cycles);
    let rising = at(640).stall_cycles > at(512).stall_cycles && at(768).stall_cycles > at(512).stall_cycles;
    let table = rows
        .iter()
        .map(|r| format!("8x{}: {}/{}", r.cols, r.array_cycles, r.stall_cycles))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(falling && rising, format!("array/stall cycles {table}"))
}

struct ModelRuns {
    name: &'static str,
    histogram: ModeHistogram,
    max_slowdown: f64,
    dominance: bool,
    speedups: Vec<f64>,
    speedups_ideal_tree: Vec<f64>,
}

fn run_models() -> Vec<ModelRuns> {
    let sys = SystemConfig::default();
    let tree = MacTreeConfig::default();
    let ideal_tree = MacTreeConfig {
        util_factor: 1.0,
        ..tree
    };
    MODELS
        .iter()
        .map(|&name| {
            let cfg = preset(name).unwrap();
            let mut run = ModelRuns {
                name,
                histogram: ModeHistogram::default(),
                max_slowdown: 1.0,
                dominance: true,
                speedups: Vec::new(),
                speedups_ideal_tree: Vec::new(),
            };
            for b in BATCHES {
                let g = decode_operators(&cfg, b, SEQ).unwrap();
                let (flex, report) = schedule_with_fixed(&g, &sys).unwrap();
                run.histogram.merge(&report.histogram);
                run.max_slowdown = run.max_slowdown.max(report.max_slowdown());
                run.dominance &= report.fixed.len() == 4
                    && report
                        .fixed
                        .iter()
                        .all(|&(_, t, s)| flex.totals.total_cycles <= t && s >= 1.0);
                let ours = flex.seconds(sys.array.freq_hz);
                let base = schedule_mac_tree(&g, &sys, &tree).unwrap().seconds(tree.freq_hz);
                let ideal = schedule_mac_tree(&g, &sys, &ideal_tree).unwrap().seconds(tree.freq_hz);
                run.speedups.push(base / ours);
                run.speedups_ideal_tree.push(ideal / ours);
            }
            run
        })
        .collect()
}

fn geomean(v: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = v.fold((0.0, 0u32), |(s, n), x| (s + x.ln(), n + 1));
    (sum / n.max(1) as f64).exp()
}

fn dominance_criterion(runs: &[ModelRuns]) -> Outcome {
    let detail = runs
        .iter()
        .map(|r| format!("{} max {:.3}", r.name, r.max_slowdown))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(runs.iter().all(|r| r.dominance && r.max_slowdown >= 1.0), format!("fixed-mode slowdowns: {detail}"))
}

fn diversity_criterion(runs: &[ModelRuns]) -> Outcome {
    let find = |n: &str| runs.iter().find(|r| r.name == n).unwrap();
    let (qwen, llama) = (find("qwen3-30b-a3b"), find("llama3-70b"));
    let (hq, hl) = (qwen.histogram.entropy(), llama.histogram.entropy());
    outcome(
        hq > hl,
        format!(
            "entropy qwen3 {hq:.3} bits {:?} vs llama3 {hl:.3} bits {:?} [IS-S, OS-S, IS-ST, OS-ST]",
            qwen.histogram.counts, llama.histogram.counts
        ),
    )
}

fn comparator_criterion(runs: &[ModelRuns]) -> Outcome {
    let g = geomean(runs.iter().flat_map(|r| r.speedups.iter().copied()));
    let ideal = geomean(runs.iter().flat_map(|r| r.speedups_ideal_tree.iter().copied()));
    let per_model = runs
        .iter()
        .map(|r| format!("{} {:.2}", r.name, geomean(r.speedups.iter().copied())))
        .collect::<Vec<_>>()
        .join(", ");
    let peak_ratio = SystemConfig::default().array.peak_macs_per_s()
        / (MacTreeConfig::default().macs_per_cycle() as f64 * 16.0 * MacTreeConfig::default().freq_hz);
    outcome(
        (2.0..=3.2).contains(&g),
        format!(
            "geomean {g:.3}x (peak ratio {peak_ratio:.2}x; {per_model}); utilization-factor sensitivity: {ideal:.3}x with an ideal tree"
        ),
    )
}

fn buffer_criterion() -> Outcome {
    let sys = SystemConfig::default();
    let op = GemmOp::new(8, 28672, 8192);
    let shapes = logical_shapes(&sys.array);
    let demands: Vec<_> = shapes
        .iter()
        .map(|&s| {
            let t = temporal_limit(s, &sys.mem, op.elem_bytes);
            min_buffers(s, Dataflow::Is, &tile_gemm(&op, s, Dataflow::Is, t))
        })
        .collect();
    let ok = demands.windows(2).all(|w| {
        w[1].weight_buf_bytes <= w[0].weight_buf_bytes && w[1].act_buf_bytes >= w[0].act_buf_bytes
    });
    let table = shapes
        .iter()
        .zip(&demands)
        .map(|(s, d)| format!("{s}: {}/{}", d.weight_buf_bytes, d.act_buf_bytes))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(ok, format!("weight/activation bytes {table}"))
}

fn energy_criterion() -> Outcome {
    let sys = SystemConfig::default();
    let a = &sys.array;
    let peak_macs = a.peak_macs_per_s();
    let activity = Activity {
        macs: peak_macs,
        pe_cycles: peak_macs,
        vector_elems: (sys.vector_per_core * a.cores_per_pu * a.num_pus) as f64 * a.freq_hz,
        noc_bytes: a.num_pus as f64 * sys.mem.noc_link_bw,
        dram_bytes: 0.0,
    };
    let e = energy(&sys.energy, &activity);
    let close = |got: f64, want: f64| (got - want).abs() <= 0.01 * want;
    let ok = close(e.logic(), 61.8)
        && close(e.matrix, MATRIX_POWER_W)
        && close(e.vector, VECTOR_POWER_W)
        && close(e.control, CONTROL_POWER_W)
        && close(e.noc, NOC_POWER_W)
        && close(e.matrix, 38.5)
        && close(e.vector, 14.2)
        && close(e.control, 4.4)
        && close(e.noc, 4.8);
    outcome(
        ok,
        format!(
            "peak {:.2} W = matrix {:.2} + vector {:.2} + control {:.2} + NoC {:.2}",
            e.logic(),
            e.matrix,
            e.vector,
            e.control,
            e.noc
        ),
    )
}

fn conservation_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let shapes = logical_shapes(&ArrayConfig::default());
    let mut bad = 0;
    for _ in 0..1000 {
        let op = GemmOp::new(rng.gen_range(1..=128), rng.gen_range(1..=20000), rng.gen_range(1..=20000));
        let shape = shapes[rng.gen_range(0..shapes.len())];
        let df = if rng.gen_bool(0.5) { Dataflow::Os } else { Dataflow::Is };
        let t = rng.gen_range(1..=4096);
        let plan = tile_gemm(&op, shape, df, t);
        let volume: u64 = plan.tiles().iter().map(|t| t.m * t.n * t.k).sum();
        if volume != op.m * op.n * op.k {
            bad += 1;
        }
    }
    outcome(bad == 0, format!("1000 random triples, {bad} mismatches"))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let (c1, c2) = emulator_criteria();
    let mut results = vec![(1, c1), (2, c2), (3, ridge_criterion()), (4, preference_criterion()), (5, sweep_criterion())];
    let runs = run_models();
    results.push((6, dominance_criterion(&runs)));
    results.push((7, diversity_criterion(&runs)));
    results.push((8, comparator_criterion(&runs)));
    results.push((9, buffer_criterion()));
    results.push((10, energy_criterion()));
    results.push((11, conservation_criterion()));

    let mut failed = 0;
    for (id, o) in &results {
        if !o.pass {
            failed += 1;
        }
        println!("criterion {id:>2}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        results.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
