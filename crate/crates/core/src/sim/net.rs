use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Point-to-point transfer model: fixed one-way latency plus size over
/// achievable bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetPreset {
    pub name: String,
    /// One-way GPU-to-GPU latency in seconds, all stack overheads included.
    pub base_latency: f64,
    /// Sustained bytes/s for large messages.
    pub achievable_bw: f64,
}

impl NetPreset {
    pub fn new(name: &str, base_latency: f64, achievable_bw: f64) -> Result<Self> {
        if !(base_latency >= 0.0) || !(achievable_bw > 0.0) {
            return Err(Error::Invalid {
                what: "network preset",
                reason: format!("{name}: latency must be >= 0 and bandwidth > 0"),
            });
        }
        Ok(NetPreset {
            name: name.to_string(),
            base_latency,
            achievable_bw,
        })
    }

    /// Host-bypassed RDMA stack from the ping-pong benchmark: 33.0 us round
    /// trip, 45.7 GB/s (91.4% of a 400 Gb/s line).
    pub fn fhbn() -> Self {
        NetPreset {
            name: "fhbn".into(),
            base_latency: 16.5e-6,
            achievable_bw: 45.7e9,
        }
    }

    /// NCCL with GPUDirect RDMA: 66.6 us round trip, 35.5 GB/s.
    pub fn nccl() -> Self {
        NetPreset {
            name: "nccl".into(),
            base_latency: 33.3e-6,
            achievable_bw: 35.5e9,
        }
    }

    /// Zero latency, unbounded bandwidth.
    pub fn ideal() -> Self {
        NetPreset {
            name: "ideal".into(),
            base_latency: 0.0,
            achievable_bw: f64::INFINITY,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "fhbn" => Ok(Self::fhbn()),
            "nccl" | "nccl-gdr" => Ok(Self::nccl()),
            "ideal" | "none" => Ok(Self::ideal()),
            _ => Err(Error::UnknownEntry(name.to_string())),
        }
    }

    pub fn round_trip(&self, bytes: f64) -> f64 {
        2.0 * xfer_time(bytes, self)
    }
}

/// One-way time to move `bytes`.
pub fn xfer_time(bytes: f64, preset: &NetPreset) -> f64 {
    if bytes <= 0.0 {
        return preset.base_latency;
    }
    preset.base_latency + bytes / preset.achievable_bw
}
