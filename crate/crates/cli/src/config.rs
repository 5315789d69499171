//! Command-line arguments resolved into model and system configurations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use nmp_core::scheduler::Mode;
use nmp_core::workload::{load_model_config, preset};
use nmp_core::{ModelConfig, SystemConfig};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Comparator {
    MacTree,
    #[value(name = "fixed-48x48")]
    #[serde(rename = "fixed-48x48")]
    Fixed48x48,
    #[value(name = "fixed-8x288")]
    #[serde(rename = "fixed-8x288")]
    Fixed8x288,
}

/// Model, batch and sequence selection.
#[derive(Debug, Clone, Args)]
pub struct WorkloadArgs {
    /// Preset name or path to a model JSON file.
    #[arg(long, default_value = "llama3-70b")]
    pub model: String,
    /// Batch sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "8", value_parser = clap::value_parser!(u64).range(1..=1024))]
    pub batch: Vec<u64>,
    /// KV-cache length in tokens.
    #[arg(long, default_value_t = 8192, value_parser = clap::value_parser!(u64).range(1..))]
    pub seq: u64,
}

/// Overrides of the default system.
#[derive(Debug, Clone, Default, Args)]
pub struct SystemArgs {
    /// Total DRAM bandwidth, bytes/s.
    #[arg(long, value_parser = positive_f64)]
    pub dram_bw: Option<f64>,
    /// Array clock, Hz.
    #[arg(long, value_parser = positive_f64)]
    pub freq: Option<f64>,
    /// Per-core weight buffer, bytes.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub weight_buf: Option<u64>,
    /// Per-core activation buffer, bytes.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub act_buf: Option<u64>,
    /// Inter-PU link bandwidth, bytes/s.
    #[arg(long, value_parser = positive_f64)]
    pub noc_bw: Option<f64>,
    /// Vector throughput per core, elements/cycle.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub vector_per_core: Option<u64>,
}

impl SystemArgs {
    pub fn resolve(&self) -> Result<SystemConfig> {
        let mut sys = SystemConfig::default();
        if let Some(v) = self.dram_bw {
            sys.mem.total_dram_bw = v;
        }
        if let Some(v) = self.freq {
            sys.array.freq_hz = v;
        }
        if let Some(v) = self.weight_buf {
            sys.mem.weight_buf_bytes = v;
        }
        if let Some(v) = self.act_buf {
            sys.mem.act_buf_bytes = v;
        }
        if let Some(v) = self.noc_bw {
            sys.mem.noc_link_bw = v;
        }
        if let Some(v) = self.vector_per_core {
            sys.vector_per_core = v;
        }
        sys.energy = nmp_core::system::EnergyModel::calibrated(&sys.array, sys.vector_per_core, sys.mem.noc_link_bw);
        sys.validate()?;
        Ok(sys)
    }
}

/// Where and how a report is written.
#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn positive_f64(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err("must be a positive finite number".into())
    }
}

pub fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| format!("unknown mode `{s}`, expected one of is-s, os-s, is-st, os-st"))
}

/// A preset name, else a path to a model file.
pub fn load_model(name: &str) -> Result<ModelConfig> {
    if let Ok(cfg) = preset(name) {
        return Ok(cfg);
    }
    let path = Path::new(name);
    if !path.exists() {
        bail!("model `{name}` is neither a preset nor an existing file");
    }
    load_model_config(path).with_context(|| format!("cannot load model `{}`", path.display()))
}

/// Parses `RxC` pairs such as `4x4`.
pub fn parse_dims(s: &str) -> std::result::Result<(u64, u64), String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected RxC, got `{s}`"))?;
    let r: u64 = r.trim().parse().map_err(|_| format!("bad row count in `{s}`"))?;
    let c: u64 = c.trim().parse().map_err(|_| format!("bad column count in `{s}`"))?;
    if r == 0 || c == 0 {
        return Err(format!("dimensions in `{s}` must be positive"));
    }
    Ok((r, c))
}

pub fn require_nonempty<T>(v: &[T], what: &str) -> Result<()> {
    if v.is_empty() {
        bail!("{what} must not be empty");
    }
    Ok(())
}
