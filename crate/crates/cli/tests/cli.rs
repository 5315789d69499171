use std::process::{Command, Output};

fn nmpsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmpsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn csv_rows(out: &Output) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_reader(out.stdout.as_slice());
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect();
    (header, rows)
}

fn column<'a>(header: &[String], row: &'a [String], name: &str) -> &'a str {
    let i = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    &row[i]
}

#[test]
fn analyze_reports_default_ridge() {
    let out = nmpsim(&["analyze", "--model", "llama3-70b", "--batch", "8"]);
    assert!(out.status.success());
    let (h, rows) = csv_rows(&out);
    assert!(!rows.is_empty());
    let ridge: f64 = column(&h, &rows[0], "ridge").parse().unwrap();
    assert!((ridge - 17.48).abs() < 0.01);
    let q = rows.iter().find(|r| column(&h, r, "tag") == "q_proj").unwrap();
    assert_eq!(column(&h, q, "bound"), "memory");
}

#[test]
fn analyze_duplex_roofline() {
    let out = nmpsim(&["analyze", "--system", "duplex", "--format", "json"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["rows"][0]["ridge"], 8.0);
    assert_eq!(v["config"]["system"]["array"]["num_pus"], 16);
}

#[test]
fn missing_model_file_exits_two() {
    let out = nmpsim(&["analyze", "--model", "/no/such/model.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/model.json"));
}

#[test]
fn bad_arguments_exit_two() {
    assert_eq!(nmpsim(&["analyze", "--batch", "0"]).status.code(), Some(2));
    assert_eq!(nmpsim(&["analyze", "--batch", "2000"]).status.code(), Some(2));
    assert_eq!(nmpsim(&["schedule", "--dram-bw", "-1"]).status.code(), Some(2));
    assert_eq!(nmpsim(&["schedule", "--fixed-mode", "ws"]).status.code(), Some(2));
    assert_eq!(nmpsim(&["sweep"]).status.code(), Some(2));
    assert_eq!(nmpsim(&["sweep", "buffers", "--widths", ""]).status.code(), Some(2));
}

#[test]
fn schedule_batch_list_with_comparator() {
    let out = nmpsim(&["schedule", "--model", "llama3-70b", "--batch", "8,16", "--seq", "8192", "--compare", "mac-tree"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (h, rows) = csv_rows(&out);
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let s: f64 = column(&h, r, "speedup_mac_tree").parse().unwrap();
        assert!(s > 1.0 && s <= 3.2);
        assert_eq!(column(&h, r, "speedup_fixed_48x48"), "");
        for m in ["is_s", "os_s", "is_st", "os_st"] {
            let v: f64 = column(&h, r, &format!("slowdown_{m}")).parse().unwrap();
            assert!(v >= 1.0);
        }
    }
}

#[test]
fn fixed_mode_is_never_faster() {
    let flex = nmpsim(&["schedule", "--batch", "32"]);
    let fixed = nmpsim(&["schedule", "--batch", "32", "--fixed-mode", "os-st"]);
    let (h, f) = csv_rows(&flex);
    let (h2, x) = csv_rows(&fixed);
    let a: u64 = column(&h, &f[0], "total_cycles").parse().unwrap();
    let b: u64 = column(&h2, &x[0], "total_cycles").parse().unwrap();
    assert!(b >= a);
    assert_eq!(column(&h2, &x[0], "forced_mode"), "OS-ST");
    let s: f64 = column(&h2, &x[0], "forced_slowdown").parse().unwrap();
    assert!(s >= 1.0);

    let per_op = nmpsim(&["schedule", "--batch", "32", "--fixed-mode", "os-st", "--per-op"]);
    let (h, rows) = csv_rows(&per_op);
    let modes: Vec<_> = rows
        .iter()
        .filter(|r| column(&h, r, "placement") == "partitioned")
        .map(|r| column(&h, r, "mode").to_string())
        .collect();
    assert!(!modes.is_empty() && modes.iter().all(|m| m == "OS-ST"));
}

#[test]
fn buffer_sweep_table() {
    let out = nmpsim(&["sweep", "buffers", "--model", "opt-66b", "--batch", "8"]);
    assert!(out.status.success());
    let (h, rows) = csv_rows(&out);
    let cols: Vec<_> = rows.iter().map(|r| column(&h, r, "cols").to_string()).collect();
    assert_eq!(cols, ["128", "256", "384", "512", "640", "768"]);
    let one = nmpsim(&["sweep", "buffers", "--model", "opt-66b", "--widths", "512"]);
    assert_eq!(csv_rows(&one).1.len(), 1);
}

#[test]
fn shape_sweep_rows_per_batch() {
    let out = nmpsim(&["sweep", "shapes", "--model", "llama3-70b", "--batch", "8,64"]);
    assert!(out.status.success());
    let (h, rows) = csv_rows(&out);
    assert_eq!(rows.len(), 8);
    let busiest = |b: &str| {
        rows.iter()
            .filter(|r| column(&h, r, "batch") == b)
            .max_by_key(|r| column(&h, r, "ops").parse::<u64>().unwrap())
            .map(|r| column(&h, r, "shape").to_string())
            .unwrap()
    };
    assert_eq!(busiest("8"), "8x512");
    assert_eq!(busiest("64"), "64x64");
}

#[test]
fn emulate_check_passes_and_repeats() {
    let a = nmpsim(&["emulate-check"]);
    assert!(a.status.success());
    assert!(String::from_utf8_lossy(&a.stderr).contains("all passed: 1400 GEMMs over 14 cases"));
    let b = nmpsim(&["emulate-check"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn injected_fault_is_reported() {
    let out = nmpsim(&["emulate-check", "--arrays", "4x4", "--gemms", "5", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("first counterexample"));
}

#[test]
fn csv_file_gets_config_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("roof.csv");
    let out = nmpsim(&["analyze", "--output", path.to_str().unwrap(), "--dram-bw", "4.8e13"]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("system,peak_flops,bandwidth,ridge"));
    let side = std::fs::read_to_string(dir.path().join("roof.csv.config.json")).unwrap();
    let cfg: serde_json::Value = serde_json::from_str(&side).unwrap();
    assert_eq!(cfg["system"]["mem"]["total_dram_bw"], 4.8e13);
    assert_eq!(cfg["command"], "analyze");
}

#[test]
fn model_file_is_loaded() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.json");
    std::fs::write(
        &path,
        r#"{"name":"tiny","layers":2,"hidden":256,"ffn":512,"q_heads":4,"kv_heads":2,"attn_kind":"GQA"}"#,
    )
    .unwrap();
    let out = nmpsim(&["schedule", "--model", path.to_str().unwrap(), "--batch", "4", "--seq", "128"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (h, rows) = csv_rows(&out);
    assert_eq!(column(&h, &rows[0], "model"), "tiny");
    std::fs::write(&path, "{").unwrap();
    assert_eq!(nmpsim(&["analyze", "--model", path.to_str().unwrap()]).status.code(), Some(2));
}
