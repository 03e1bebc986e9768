//! Overlay architecture parameters.
//!
//! An [`ArchConfig`] captures the compile-time shape of one overlay build:
//! the PE-array vector widths, on-chip memory capacities, the external
//! memory interface, and which auxiliary kernels the interconnect chains
//! after the PE array. It is loaded from JSON (strict: unknown fields are
//! rejected) and consumed by the partitioner, slicer, code generator and
//! performance model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Auxiliary kernels the interconnect can chain after the PE array, in the
/// order they may appear in `xbar_kernels`.
pub const XBAR_KERNEL_NAMES: [&str; 3] = ["pool", "lrn", "lstm_tail"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Output-width parallelism of the PE array.
    pub q_vec: usize,
    /// Output-height parallelism.
    pub p_vec: usize,
    /// Input-depth parallelism.
    pub c_vec: usize,
    /// Output-depth parallelism (one PE per lane).
    pub k_vec: usize,
    /// Filter-width parallelism; for 1x1 filters the lanes are repurposed to
    /// compute additional output pixels.
    pub s_vec: usize,
    /// Stream buffer capacity in bytes (activations).
    pub stream_buffer_bytes: usize,
    /// Filter cache capacity in bytes (weights + biases).
    pub filter_cache_bytes: usize,
    /// Bytes per tensor element in device memory.
    pub bytes_per_element: usize,
    /// Sustained external memory bandwidth, bytes per cycle.
    pub ext_bandwidth_bytes_per_cycle: f64,
    /// Clock frequency used to convert cycle counts to wall-clock rates.
    pub freq_mhz: f64,
    /// Auxiliary kernel chain after the PE array, in dataflow order.
    /// Kernels absent from this list are removed from the overlay build and
    /// graphs needing them are rejected at partition time.
    pub xbar_kernels: Vec<String>,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let vecs = [
            ("q_vec", self.q_vec),
            ("p_vec", self.p_vec),
            ("c_vec", self.c_vec),
            ("k_vec", self.k_vec),
            ("s_vec", self.s_vec),
        ];
        for (name, v) in vecs {
            if v == 0 {
                return Err(Error::ArchConfig(format!("{name} must be >= 1")));
            }
        }
        if self.stream_buffer_bytes == 0 || self.filter_cache_bytes == 0 {
            return Err(Error::ArchConfig("memory capacities must be positive".into()));
        }
        if self.bytes_per_element == 0 {
            return Err(Error::ArchConfig("bytes_per_element must be positive".into()));
        }
        if !(self.ext_bandwidth_bytes_per_cycle > 0.0) {
            return Err(Error::ArchConfig("ext_bandwidth_bytes_per_cycle must be positive".into()));
        }
        if !(self.freq_mhz > 0.0) {
            return Err(Error::ArchConfig("freq_mhz must be positive".into()));
        }
        let mut seen = Vec::new();
        for k in &self.xbar_kernels {
            if !XBAR_KERNEL_NAMES.contains(&k.as_str()) {
                return Err(Error::ArchConfig(format!(
                    "unknown xbar kernel `{k}` (valid: {})",
                    XBAR_KERNEL_NAMES.join(", ")
                )));
            }
            if seen.contains(&k.as_str()) {
                return Err(Error::ArchConfig(format!("duplicate xbar kernel `{k}`")));
            }
            seen.push(k.as_str());
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<ArchConfig> {
        let cfg: ArchConfig = serde_json::from_str(text)
            .map_err(|e| Error::ArchConfig(format!("invalid arch config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn has_kernel(&self, name: &str) -> bool {
        self.xbar_kernels.iter().any(|k| k == name)
    }

    /// Vector iterations to cover `n` lanes `vec` at a time.
    pub fn dim_iterations(n: usize, vec: usize) -> u64 {
        (n as u64).div_ceil(vec as u64)
    }

    /// Fraction of lane-cycles doing useful work when covering `n` lanes
    /// `vec` at a time: `n / (iterations * vec)`.
    pub fn dim_efficiency(n: usize, vec: usize) -> f64 {
        n as f64 / (Self::dim_iterations(n, vec) * vec as u64) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn small() -> ArchConfig {
        ArchConfig {
            q_vec: 4,
            p_vec: 2,
            c_vec: 4,
            k_vec: 8,
            s_vec: 1,
            stream_buffer_bytes: 1 << 16,
            filter_cache_bytes: 1 << 16,
            bytes_per_element: 4,
            ext_bandwidth_bytes_per_cycle: 16.0,
            freq_mhz: 300.0,
            xbar_kernels: vec!["pool".into(), "lrn".into(), "lstm_tail".into()],
        }
    }

    #[test]
    fn lane_iterations_and_efficiency() {
        // 96 output depths on 64 lanes: two passes, 96 of 128 lane-slots used.
        assert_eq!(ArchConfig::dim_iterations(96, 64), 2);
        assert!((ArchConfig::dim_efficiency(96, 64) - 0.75).abs() < 1e-12);
        // 32 lanes divide evenly: three passes at full utilization.
        assert_eq!(ArchConfig::dim_iterations(96, 32), 3);
        assert!((ArchConfig::dim_efficiency(96, 32) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_field_rejected() {
        let mut v = serde_json::to_value(small()).unwrap();
        v.as_object_mut().unwrap().insert("r_vec".into(), 4.into());
        let text = serde_json::to_string(&v).unwrap();
        assert!(ArchConfig::parse(&text).is_err());
    }

    #[test]
    fn zero_vec_rejected() {
        let mut cfg = small();
        cfg.c_vec = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_xbar_kernel_rejected() {
        let mut cfg = small();
        cfg.xbar_kernels.push("winograd".into());
        assert!(cfg.validate().is_err());
    }
}
