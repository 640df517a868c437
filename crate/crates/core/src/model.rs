//! Shared domain types: model constants, device specs, cluster layouts, workload
//! points and trace records, plus the bundled catalog.
//!
//! Every type validates on construction and on deserialization, so a value that
//! exists is a value that satisfies its invariants.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Head dimension assumed when a model document omits `num_heads`.
pub const DEFAULT_HEAD_DIM: u64 = 128;

/// Model constants used by the performance analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LlmSpecDoc")]
pub struct LlmSpec {
    pub name: String,
    /// Parameter count (N).
    pub n_params: u64,
    /// Hidden dimension (d).
    pub hidden_dim: u64,
    /// Transformer layers (L).
    pub layers: u64,
    /// Query heads per KV head (G).
    pub gqa_group: u64,
    /// Bytes per stored element (e).
    pub bytes_per_elem: u64,
    /// Measured weight footprint; may differ slightly from N·e.
    pub weight_bytes: f64,
    pub num_heads: u64,
    /// Set when `num_heads` was filled in as `hidden_dim / 128`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub num_heads_assumed: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LlmSpecDoc {
    name: String,
    n_params: u64,
    hidden_dim: u64,
    layers: u64,
    gqa_group: u64,
    bytes_per_elem: u64,
    weight_bytes: f64,
    #[serde(default)]
    num_heads: Option<u64>,
    #[serde(default)]
    num_heads_assumed: bool,
}

impl TryFrom<LlmSpecDoc> for LlmSpec {
    type Error = Error;

    fn try_from(doc: LlmSpecDoc) -> Result<Self> {
        let (num_heads, num_heads_assumed) = match doc.num_heads {
            Some(h) => (h, doc.num_heads_assumed),
            None => (doc.hidden_dim / DEFAULT_HEAD_DIM, true),
        };
        let spec = LlmSpec {
            name: doc.name,
            n_params: doc.n_params,
            hidden_dim: doc.hidden_dim,
            layers: doc.layers,
            gqa_group: doc.gqa_group,
            bytes_per_elem: doc.bytes_per_elem,
            weight_bytes: doc.weight_bytes,
            num_heads,
            num_heads_assumed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl LlmSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(invalid("model spec", format!("{}: {reason}", self.name)));
        if self.n_params == 0 {
            return bad("n_params must be > 0".into());
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be > 0".into());
        }
        if self.layers == 0 {
            return bad("layers must be > 0".into());
        }
        if self.gqa_group == 0 {
            return bad("gqa_group must be >= 1".into());
        }
        if !matches!(self.bytes_per_elem, 1 | 2 | 4) {
            return bad(format!("bytes_per_elem {} not in {{1,2,4}}", self.bytes_per_elem));
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if !self.num_heads.is_multiple_of(self.gqa_group) {
            return bad(format!(
                "num_heads {} not divisible by gqa_group {}",
                self.num_heads, self.gqa_group
            ));
        }
        let nominal = self.n_params as f64 * self.bytes_per_elem as f64;
        if !(self.weight_bytes.is_finite() && self.weight_bytes > 0.0)
            || (self.weight_bytes - nominal).abs() > 0.10 * nominal
        {
            return bad(format!(
                "weight_bytes {:.4e} is not within 10% of n_params*bytes_per_elem {nominal:.4e}",
                self.weight_bytes
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> u64 {
        self.hidden_dim / self.num_heads
    }

    pub fn num_kv_heads(&self) -> u64 {
        self.num_heads / self.gqa_group
    }

    /// Per-layer parameter count, N / L.
    pub fn params_per_layer(&self) -> f64 {
        self.n_params as f64 / self.layers as f64
    }
}

/// Parse and validate a model document.
pub fn load_llm_spec(json: &str) -> Result<LlmSpec> {
    Ok(serde_json::from_str(json)?)
}

/// One accelerator type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DeviceSpecDoc")]
pub struct DeviceSpec {
    pub name: String,
    /// Dense 16-bit flop/s.
    pub peak_flops: f64,
    pub mem_bytes: f64,
    /// Memory bandwidth in bytes/s.
    pub mem_bw: f64,
    /// NIC line rate in bits/s.
    pub nic_bw: f64,
    pub price_per_hour: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price_note: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceSpecDoc {
    name: String,
    peak_flops: f64,
    mem_bytes: f64,
    mem_bw: f64,
    nic_bw: f64,
    price_per_hour: f64,
    #[serde(default)]
    power_w: Option<f64>,
    #[serde(default)]
    price_note: Option<String>,
}

impl TryFrom<DeviceSpecDoc> for DeviceSpec {
    type Error = Error;

    fn try_from(d: DeviceSpecDoc) -> Result<Self> {
        let spec = DeviceSpec {
            name: d.name,
            peak_flops: d.peak_flops,
            mem_bytes: d.mem_bytes,
            mem_bw: d.mem_bw,
            nic_bw: d.nic_bw,
            price_per_hour: d.price_per_hour,
            power_w: d.power_w,
            price_note: d.price_note,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl DeviceSpec {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("peak_flops", self.peak_flops),
            ("mem_bytes", self.mem_bytes),
            ("mem_bw", self.mem_bw),
            ("nic_bw", self.nic_bw),
            ("price_per_hour", self.price_per_hour),
        ];
        for (field, v) in fields.into_iter().chain(self.power_w.map(|p| ("power_w", p))) {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(
                    "device spec",
                    format!("{}: {field} must be positive, got {v}", self.name),
                ));
            }
        }
        Ok(())
    }
}

/// A homogeneous group of devices inside one pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DevicePoolDoc")]
pub struct DevicePool {
    pub device: DeviceSpec,
    pub count: u64,
}

/// In documents a pool's device may be written inline or as a catalog name.
#[derive(Deserialize)]
#[serde(untagged)]
enum DeviceRef {
    Name(String),
    Inline(DeviceSpec),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DevicePoolDoc {
    device: DeviceRef,
    count: u64,
}

impl TryFrom<DevicePoolDoc> for DevicePool {
    type Error = Error;

    fn try_from(doc: DevicePoolDoc) -> Result<Self> {
        let device = match doc.device {
            DeviceRef::Inline(d) => d,
            DeviceRef::Name(n) => builtin_catalog().device(&n)?.clone(),
        };
        Ok(DevicePool {
            device,
            count: doc.count,
        })
    }
}

impl DevicePool {
    pub fn new(device: DeviceSpec, count: u64) -> Self {
        DevicePool { device, count }
    }
}

/// Aggregate capability of a set of device pools.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolCapacity {
    pub count: u64,
    pub peak_flops: f64,
    pub mem_bytes: f64,
    pub mem_bw: f64,
    pub price_per_hour: f64,
}

impl PoolCapacity {
    pub fn of(device: &DeviceSpec, count: u64) -> Self {
        let c = count as f64;
        PoolCapacity {
            count,
            peak_flops: device.peak_flops * c,
            mem_bytes: device.mem_bytes * c,
            mem_bw: device.mem_bw * c,
            price_per_hour: device.price_per_hour * c,
        }
    }

    pub fn sum<'a>(pools: impl IntoIterator<Item = &'a DevicePool>) -> Self {
        pools.into_iter().fold(
            PoolCapacity {
                count: 0,
                peak_flops: 0.0,
                mem_bytes: 0.0,
                mem_bw: 0.0,
                price_per_hour: 0.0,
            },
            |acc, p| {
                let one = PoolCapacity::of(&p.device, p.count);
                PoolCapacity {
                    count: acc.count + one.count,
                    peak_flops: acc.peak_flops + one.peak_flops,
                    mem_bytes: acc.mem_bytes + one.mem_bytes,
                    mem_bw: acc.mem_bw + one.mem_bw,
                    price_per_hour: acc.price_per_hour + one.price_per_hour,
                }
            },
        )
    }

    /// Split evenly into `parts` identical sub-pools.
    pub fn split(&self, parts: u64) -> Self {
        let k = parts as f64;
        PoolCapacity {
            count: self.count / parts,
            peak_flops: self.peak_flops / k,
            mem_bytes: self.mem_bytes / k,
            mem_bw: self.mem_bw / k,
            price_per_hour: self.price_per_hour / k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterMode {
    Disaggregated,
    HomogeneousTp,
}

/// Device layout of one serving instance. `(a, b)` is the degree of
/// parallelism: `a` compute devices, `b` memory devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClusterConfigDoc")]
pub struct ClusterConfig {
    pub compute_devices: Vec<DevicePool>,
    #[serde(default)]
    pub memory_devices: Vec<DevicePool>,
    pub network: String,
    pub mode: ClusterMode,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterConfigDoc {
    compute_devices: Vec<DevicePool>,
    #[serde(default)]
    memory_devices: Vec<DevicePool>,
    network: String,
    mode: ClusterMode,
}

impl TryFrom<ClusterConfigDoc> for ClusterConfig {
    type Error = Error;

    fn try_from(d: ClusterConfigDoc) -> Result<Self> {
        let c = ClusterConfig {
            compute_devices: d.compute_devices,
            memory_devices: d.memory_devices,
            network: d.network,
            mode: d.mode,
        };
        c.validate()?;
        Ok(c)
    }
}

impl ClusterConfig {
    pub fn disaggregated(
        compute: &DeviceSpec,
        a: u64,
        memory: &DeviceSpec,
        b: u64,
        network: &str,
    ) -> Result<Self> {
        let c = ClusterConfig {
            compute_devices: vec![DevicePool::new(compute.clone(), a)],
            memory_devices: vec![DevicePool::new(memory.clone(), b)],
            network: network.to_string(),
            mode: ClusterMode::Disaggregated,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn homogeneous(device: &DeviceSpec, a: u64) -> Result<Self> {
        let c = ClusterConfig {
            compute_devices: vec![DevicePool::new(device.clone(), a)],
            memory_devices: Vec::new(),
            network: "none".to_string(),
            mode: ClusterMode::HomogeneousTp,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for p in self.compute_devices.iter().chain(&self.memory_devices) {
            p.device.validate()?;
        }
        let (a, b) = self.dop();
        match self.mode {
            ClusterMode::Disaggregated if a < 1 || b < 1 => Err(invalid(
                "cluster config",
                format!("disaggregated mode needs a >= 1 and b >= 1, got ({a}, {b})"),
            )),
            ClusterMode::HomogeneousTp if a < 1 || b != 0 => Err(invalid(
                "cluster config",
                format!("homogeneous mode needs a >= 1 and b = 0, got ({a}, {b})"),
            )),
            _ => Ok(()),
        }
    }

    /// The `(a, b)` device counts.
    pub fn dop(&self) -> (u64, u64) {
        let a = self.compute_devices.iter().map(|p| p.count).sum();
        let b = self.memory_devices.iter().map(|p| p.count).sum();
        (a, b)
    }

    pub fn compute_capacity(&self) -> PoolCapacity {
        PoolCapacity::sum(&self.compute_devices)
    }

    pub fn memory_capacity(&self) -> PoolCapacity {
        PoolCapacity::sum(&self.memory_devices)
    }

    /// Hourly price: the dot product of device counts and prices.
    pub fn cost_per_hour(&self) -> f64 {
        self.compute_devices
            .iter()
            .chain(&self.memory_devices)
            .map(|p| p.count as f64 * p.device.price_per_hour)
            .sum()
    }

    pub fn label(&self) -> String {
        let (a, b) = self.dop();
        let name = |pools: &[DevicePool]| {
            pools
                .first()
                .map(|p| p.device.name.clone())
                .unwrap_or_default()
        };
        match self.mode {
            ClusterMode::Disaggregated => format!(
                "DOP=({a},{b}) {}+{}",
                name(&self.compute_devices),
                name(&self.memory_devices)
            ),
            ClusterMode::HomogeneousTp => format!("{a}x{} TP", name(&self.compute_devices)),
        }
    }
}

/// A decode operating point: batch size B at context length l.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadPoint {
    pub batch: u64,
    pub seq_len: u64,
}

impl WorkloadPoint {
    pub fn new(batch: u64, seq_len: u64) -> Result<Self> {
        if batch < 1 || seq_len < 1 {
            return Err(invalid(
                "workload point",
                format!("batch and seq_len must be >= 1, got ({batch}, {seq_len})"),
            ));
        }
        Ok(WorkloadPoint { batch, seq_len })
    }
}

/// One request of a length-only trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub request_id: u64,
    pub arrival_s: f64,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

impl TraceRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.arrival_s.is_finite() && self.arrival_s >= 0.0) {
            return Err(invalid(
                "trace record",
                format!("request {}: arrival_s must be >= 0", self.request_id),
            ));
        }
        if self.prompt_tokens < 1 || self.output_tokens < 1 {
            return Err(invalid(
                "trace record",
                format!("request {}: token counts must be >= 1", self.request_id),
            ));
        }
        Ok(())
    }
}

/// Named devices and models.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    #[serde(default)]
    pub devices: BTreeMap<String, DeviceSpec>,
    #[serde(default)]
    pub models: BTreeMap<String, LlmSpec>,
}

impl Catalog {
    pub fn device(&self, name: &str) -> Result<&DeviceSpec> {
        lookup(&self.devices, name)
    }

    pub fn model(&self, name: &str) -> Result<&LlmSpec> {
        lookup(&self.models, name)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cat: Catalog = serde_json::from_str(&text)?;
        let builtin = builtin_catalog();
        for (k, v) in builtin.devices {
            cat.devices.entry(k).or_insert(v);
        }
        for (k, v) in builtin.models {
            cat.models.entry(k).or_insert(v);
        }
        Ok(cat)
    }
}

fn lookup<'a, T>(map: &'a BTreeMap<String, T>, name: &str) -> Result<&'a T> {
    map.get(name)
        .or_else(|| {
            map.iter()
                .find(|(k, _)| k.eq_ignore_ascii_case(name))
                .map(|(_, v)| v)
        })
        .ok_or_else(|| Error::UnknownEntry(name.to_string()))
}

fn llama(name: &str, n_params: f64, weight_gb: f64, d: u64, layers: u64, g: u64) -> LlmSpec {
    LlmSpec {
        name: name.to_string(),
        n_params: n_params as u64,
        hidden_dim: d,
        layers,
        gqa_group: g,
        bytes_per_elem: 2,
        weight_bytes: weight_gb * 1e9,
        num_heads: d / DEFAULT_HEAD_DIM,
        num_heads_assumed: true,
    }
}

/// Accelerators and models bundled with the tool.
pub fn builtin_catalog() -> Catalog {
    let devices = [
        DeviceSpec {
            name: "H100".into(),
            peak_flops: 989e12,
            mem_bytes: 80e9,
            mem_bw: 3.35e12,
            nic_bw: 400e9,
            price_per_hour: 11.06,
            power_w: Some(700.0),
            price_note: None,
        },
        DeviceSpec {
            name: "H20".into(),
            peak_flops: 148e12,
            mem_bytes: 96e9,
            mem_bw: 4.0e12,
            nic_bw: 400e9,
            price_per_hour: 4.63,
            power_w: Some(400.0),
            price_note: Some("estimated from relative complete-system cost".into()),
        },
        DeviceSpec {
            name: "TPU-v6e".into(),
            peak_flops: 918e12,
            mem_bytes: 32e9,
            mem_bw: 1.64e12,
            nic_bw: 200e9,
            price_per_hour: 2.70,
            power_w: None,
            price_note: None,
        },
    ];
    let models = [
        llama("llama-33b", 32.5e9, 64.7, 6656, 60, 1),
        llama("llama-65b", 65.2e9, 130.1, 8192, 80, 1),
        llama("llama3-70b", 70e9, 137.5, 8192, 80, 8),
    ];
    Catalog {
        devices: devices.into_iter().map(|d| (d.name.clone(), d)).collect(),
        models: models.into_iter().map(|m| (m.name.clone(), m)).collect(),
    }
}
