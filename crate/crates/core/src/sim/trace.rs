//! Length-only request traces: synthetic generation and CSV I/O.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::TraceRecord;

pub const DEFAULT_SIGMA: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceProfile {
    pub n_requests: u64,
    pub mean_prompt: f64,
    pub mean_output: f64,
    /// Poisson arrival rate, requests/s.
    pub arrival_rate: f64,
    pub seed: u64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}

impl TraceProfile {
    /// Length statistics of the named production trace (request count, mean
    /// prompt and output tokens); arrival rate and seed are the caller's.
    pub fn named(name: &str, arrival_rate: f64, seed: u64) -> Result<Self> {
        let (n, p, o) = match name.to_ascii_lowercase().as_str() {
            "azure-conv" => (19366, 1154.7, 211.1),
            "azure-code" => (8819, 2047.8, 27.9),
            "kimi-conv" => (12031, 12035.1, 342.6),
            "kimi-ta" => (23608, 8560.0, 182.1),
            other => return Err(crate::error::Error::UnknownEntry(other.to_string())),
        };
        Ok(TraceProfile {
            n_requests: n,
            mean_prompt: p,
            mean_output: o,
            arrival_rate,
            seed,
            sigma: DEFAULT_SIGMA,
        })
    }

    fn validate(&self) -> Result<()> {
        let ok = self.mean_prompt >= 1.0
            && self.mean_output >= 1.0
            && self.arrival_rate > 0.0
            && self.sigma >= 0.0
            && self.arrival_rate.is_finite();
        if !ok {
            return Err(invalid("trace profile", "means must be >= 1, rate > 0, sigma >= 0"));
        }
        Ok(())
    }
}

fn lognormal_with_mean(mean: f64, sigma: f64) -> LogNormal<f64> {
    LogNormal::new(mean.ln() - sigma * sigma / 2.0, sigma).expect("sigma >= 0")
}

/// Deterministic synthetic trace: lognormal lengths with the requested means,
/// Poisson arrivals starting at t = 0.
pub fn gen_trace(profile: &TraceProfile) -> Result<Vec<TraceRecord>> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let prompt = lognormal_with_mean(profile.mean_prompt, profile.sigma);
    let output = lognormal_with_mean(profile.mean_output, profile.sigma);
    let gap = Exp::new(profile.arrival_rate).expect("rate > 0");
    let mut t = 0.0;
    let mut out = Vec::with_capacity(profile.n_requests as usize);
    for id in 0..profile.n_requests {
        let p = prompt.sample(&mut rng).round().max(1.0) as u64;
        let o = output.sample(&mut rng).round().max(1.0) as u64;
        out.push(TraceRecord {
            request_id: id,
            arrival_s: t,
            prompt_tokens: p,
            output_tokens: o,
        });
        t += gap.sample(&mut rng);
    }
    Ok(out)
}

/// `request_id,arrival_s,prompt_tokens,output_tokens` with microsecond-rounded arrivals.
pub fn write_trace_csv<W: Write>(trace: &[TraceRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["request_id", "arrival_s", "prompt_tokens", "output_tokens"])?;
    for r in trace {
        out.write_record([
            r.request_id.to_string(),
            format!("{:.6}", r.arrival_s),
            r.prompt_tokens.to_string(),
            r.output_tokens.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(r: R) -> Result<Vec<TraceRecord>> {
    let mut reader = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let rec: TraceRecord = row?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}
