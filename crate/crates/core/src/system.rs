//! System-level parameters shared by the cost model and scheduler.

use serde::{Deserialize, Serialize};

use crate::array::ArrayConfig;
use crate::error::{Error, Result};

/// DRAM, NoC and per-core buffer parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemorySystem {
    /// Effective DRAM bandwidth of the whole stack, bytes/s.
    pub total_dram_bw: f64,
    /// Bandwidth of one inter-PU NoC link, bytes/s.
    pub noc_link_bw: f64,
    pub weight_buf_bytes: u64,
    pub act_buf_bytes: u64,
    pub double_buffered: bool,
    /// Output writeback draws on the same per-core bandwidth as refills.
    pub writeback_shares_bandwidth: bool,
}

impl Default for MemorySystem {
    fn default() -> Self {
        MemorySystem {
            total_dram_bw: 24.0e12,
            noc_link_bw: 6.4e10,
            weight_buf_bytes: 1 << 20,
            act_buf_bytes: 256 << 10,
            double_buffered: true,
            writeback_shares_bandwidth: true,
        }
    }
}

impl MemorySystem {
    pub fn validate(&self) -> Result<()> {
        if self.total_dram_bw.is_nan() || self.total_dram_bw <= 0.0 {
            return Err(Error::invalid("total_dram_bw", "must be positive"));
        }
        if self.noc_link_bw.is_nan() || self.noc_link_bw <= 0.0 {
            return Err(Error::invalid("noc_link_bw", "must be positive"));
        }
        if self.weight_buf_bytes == 0 || self.act_buf_bytes == 0 {
            return Err(Error::invalid("weight_buf_bytes", "buffers must be non-empty"));
        }
        Ok(())
    }

    pub fn per_pu_bw(&self, num_pus: u64) -> f64 {
        self.total_dram_bw / num_pus as f64
    }

    /// Per-core share of the PU's channel when `active` cores stream.
    pub fn per_core_bw(&self, num_pus: u64, active: u64) -> f64 {
        self.per_pu_bw(num_pus) / active.max(1) as f64
    }

    /// Per-core refill bytes per array cycle.
    pub fn bytes_per_cycle(&self, cfg: &ArrayConfig, active: u64) -> f64 {
        self.per_core_bw(cfg.num_pus, active) / cfg.freq_hz
    }
}

/// Logic-die power split at full activity, watts.
pub const MATRIX_POWER_W: f64 = 38.5;
pub const VECTOR_POWER_W: f64 = 14.2;
pub const CONTROL_POWER_W: f64 = 4.4;
pub const NOC_POWER_W: f64 = 4.8;

/// Per-activity energy rates, joules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub per_mac: f64,
    /// Control energy per clocked PE-cycle, busy or idle.
    pub per_pe_cycle: f64,
    pub per_vector_elem: f64,
    pub per_noc_byte: f64,
    pub per_dram_byte: f64,
}

impl EnergyModel {
    /// Rates such that a fully busy `cfg` dissipates the reference power
    /// split. NoC peak is every PU driving one link at full rate.
    pub fn calibrated(cfg: &ArrayConfig, vector_per_core: u64, noc_link_bw: f64) -> Self {
        let peak_macs = cfg.peak_macs_per_s();
        let peak_vec = (vector_per_core * cfg.cores_per_pu * cfg.num_pus) as f64 * cfg.freq_hz;
        let peak_noc = cfg.num_pus as f64 * noc_link_bw;
        EnergyModel {
            per_mac: MATRIX_POWER_W / peak_macs,
            per_pe_cycle: CONTROL_POWER_W / peak_macs,
            per_vector_elem: VECTOR_POWER_W / peak_vec,
            per_noc_byte: NOC_POWER_W / peak_noc,
            per_dram_byte: 4.0e-12,
        }
    }
}

/// Full system description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub array: ArrayConfig,
    pub mem: MemorySystem,
    /// Vector-unit throughput per core, elements/cycle.
    pub vector_per_core: u64,
    pub energy: EnergyModel,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let array = ArrayConfig::default();
        let mem = MemorySystem::default();
        SystemConfig {
            array,
            mem,
            vector_per_core: 64,
            energy: EnergyModel::calibrated(&array, 64, mem.noc_link_bw),
        }
    }
}

impl SystemConfig {
    /// Same memory system and energy rates, different compute fabric.
    pub fn with_array(&self, array: ArrayConfig) -> Self {
        SystemConfig { array, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        self.array.validate()?;
        self.mem.validate()?;
        if self.vector_per_core == 0 {
            return Err(Error::invalid("vector_per_core", "must be positive"));
        }
        Ok(())
    }

    /// Vector throughput of one PU, elements/cycle.
    pub fn vector_per_pu(&self) -> u64 {
        self.vector_per_core * self.array.cores_per_pu
    }

    pub fn total_pes(&self) -> u64 {
        self.array.pes() * self.array.cores_per_pu * self.array.num_pus
    }
}
