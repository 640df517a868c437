//! Reference attention, mergeable partial attention, and the head-level and
//! request-level partitioning of attention work across memory devices.
//!
//! A [`PartialAttention`] summarizes attention over a subset of the cached
//! tokens as a max-shifted (numerator, log-denominator) pair. Partials over
//! disjoint token sets merge associatively, so attention can be split across
//! devices or across "previous" and "new" tokens and recombined exactly.

use std::ops::Range;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::par;

/// One query head attending over `len` cached tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnInstance<T> {
    q: Vec<T>,
    keys: Vec<T>,
    values: Vec<T>,
    d_head: usize,
    scale: T,
}

impl<T: Float> AttnInstance<T> {
    /// Keys and values are row-major `len x d_head`; the scale is 1/sqrt(d_head).
    pub fn new(q: Vec<T>, keys: Vec<T>, values: Vec<T>) -> Result<Self> {
        let d = q.len();
        let scale = T::one() / T::from(d).unwrap().sqrt();
        Self::with_scale(q, keys, values, scale)
    }

    pub fn with_scale(q: Vec<T>, keys: Vec<T>, values: Vec<T>, scale: T) -> Result<Self> {
        let d_head = q.len();
        if d_head == 0 {
            return Err(invalid("attention instance", "d_head must be > 0"));
        }
        if !keys.len().is_multiple_of(d_head) || keys.len() != values.len() {
            return Err(invalid(
                "attention instance",
                format!(
                    "keys ({}) and values ({}) must both be len x {d_head}",
                    keys.len(),
                    values.len()
                ),
            ));
        }
        let finite = |v: &[T]| v.iter().all(|x| x.is_finite());
        if !(finite(&q) && finite(&keys) && finite(&values) && scale.is_finite()) {
            return Err(invalid("attention instance", "entries must be finite"));
        }
        Ok(AttnInstance {
            q,
            keys,
            values,
            d_head,
            scale,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.d_head
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn query(&self) -> &[T] {
        &self.q
    }

    pub fn key(&self, j: usize) -> &[T] {
        &self.keys[j * self.d_head..(j + 1) * self.d_head]
    }

    pub fn value(&self, j: usize) -> &[T] {
        &self.values[j * self.d_head..(j + 1) * self.d_head]
    }

    pub fn logit(&self, j: usize) -> T {
        let dot = self
            .q
            .iter()
            .zip(self.key(j))
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        dot * self.scale
    }
}

/// softmax(q·Kᵀ·scale)·V computed in one shot with max subtraction.
pub fn exact_attention<T: Float>(inst: &AttnInstance<T>) -> Result<Vec<T>> {
    if inst.is_empty() {
        return Err(Error::Precondition("attention over an empty key set".into()));
    }
    let logits: Vec<T> = (0..inst.len()).map(|j| inst.logit(j)).collect();
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let weights: Vec<T> = logits.iter().map(|&s| (s - max).exp()).collect();
    let total = weights.iter().copied().fold(T::zero(), |a, b| a + b);
    let mut out = vec![T::zero(); inst.d_head];
    for (j, &w) in weights.iter().enumerate() {
        let p = w / total;
        for (o, &v) in out.iter_mut().zip(inst.value(j)) {
            *o = *o + p * v;
        }
    }
    Ok(out)
}

/// Attention over a subset of tokens, kept in mergeable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialAttention<T> {
    /// Σ exp(s_j − max_logit)·v_j
    pub acc: Vec<T>,
    /// ln Σ exp(s_j − max_logit)
    pub log_denom: T,
    pub max_logit: T,
    pub token_count: usize,
}

impl<T: Float> PartialAttention<T> {
    /// The partial over the empty token set.
    pub fn identity(d_head: usize) -> Self {
        PartialAttention {
            acc: vec![T::zero(); d_head],
            log_denom: T::neg_infinity(),
            max_logit: T::neg_infinity(),
            token_count: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.token_count == 0
    }

    /// Combine partials over disjoint token sets of the same query.
    pub fn merge(&self, other: &Self) -> Self {
        if other.is_identity() {
            return self.clone();
        }
        if self.is_identity() {
            return other.clone();
        }
        let max = self.max_logit.max(other.max_logit);
        let wa = (self.max_logit - max).exp();
        let wb = (other.max_logit - max).exp();
        let acc = self
            .acc
            .iter()
            .zip(&other.acc)
            .map(|(&a, &b)| a * wa + b * wb)
            .collect();
        let denom = (self.log_denom + self.max_logit - max).exp()
            + (other.log_denom + other.max_logit - max).exp();
        PartialAttention {
            acc,
            log_denom: denom.ln(),
            max_logit: max,
            token_count: self.token_count + other.token_count,
        }
    }

    /// The normalized attention output over this partial's tokens.
    pub fn finalize(&self) -> Result<Vec<T>> {
        if self.is_identity() {
            return Err(Error::EmptyPartial);
        }
        let denom = self.log_denom.exp();
        Ok(self.acc.iter().map(|&a| a / denom).collect())
    }
}

/// Partial attention over the tokens listed in `indices`.
pub fn partial_attention<T: Float>(inst: &AttnInstance<T>, indices: &[usize]) -> PartialAttention<T> {
    if indices.is_empty() {
        return PartialAttention::identity(inst.d_head);
    }
    let logits: Vec<T> = indices.iter().map(|&j| inst.logit(j)).collect();
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut acc = vec![T::zero(); inst.d_head];
    let mut denom = T::zero();
    for (&j, &s) in indices.iter().zip(&logits) {
        let w = (s - max).exp();
        denom = denom + w;
        for (a, &v) in acc.iter_mut().zip(inst.value(j)) {
            *a = *a + w * v;
        }
    }
    PartialAttention {
        acc,
        log_denom: denom.ln(),
        max_logit: max,
        token_count: indices.len(),
    }
}

/// Partial attention over a contiguous token range.
pub fn partial_range<T: Float>(inst: &AttnInstance<T>, range: Range<usize>) -> PartialAttention<T> {
    let idx: Vec<usize> = range.collect();
    partial_attention(inst, &idx)
}

/// Split at `boundary` into partials over the previous tokens and the new ones.
pub fn split_prev_new<T: Float>(
    inst: &AttnInstance<T>,
    boundary: usize,
) -> Result<(PartialAttention<T>, PartialAttention<T>)> {
    if boundary > inst.len() {
        return Err(Error::Precondition(format!(
            "boundary {boundary} outside 0..={}",
            inst.len()
        )));
    }
    Ok((
        partial_range(inst, 0..boundary),
        partial_range(inst, boundary..inst.len()),
    ))
}

/// Contiguous token ranges for `parts` near-equal partitions.
pub fn even_ranges(len: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.max(1);
    (0..parts)
        .map(|p| (p * len / parts)..((p + 1) * len / parts))
        .collect()
}

/// Attention computed as `parts` independent partials (in parallel when
/// enabled), merged left to right.
pub fn partitioned_attention<T: Float + Send + Sync>(
    inst: &AttnInstance<T>,
    parts: usize,
) -> Result<Vec<T>> {
    let ranges = even_ranges(inst.len(), parts);
    let partials = par::map(&ranges, |r| partial_range(inst, r.clone()));
    partials
        .iter()
        .fold(PartialAttention::identity(inst.d_head), |acc, p| acc.merge(p))
        .finalize()
}

/// Grouped-query attention over all heads of one decode step.
///
/// `q` holds `num_kv_heads * group` query heads, each `d_head` wide. Query head
/// `h` reads KV head `h / group`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadInstance<T> {
    pub q: Vec<T>,
    pub keys: Vec<T>,
    pub values: Vec<T>,
    pub num_kv_heads: usize,
    pub group: usize,
    pub d_head: usize,
    pub len: usize,
}

impl<T: Float> MultiHeadInstance<T> {
    pub fn num_q_heads(&self) -> usize {
        self.num_kv_heads * self.group
    }

    /// The single-head instance seen by query head `h`.
    pub fn head(&self, h: usize) -> Result<AttnInstance<T>> {
        let kv = h / self.group;
        let block = self.len * self.d_head;
        AttnInstance::new(
            self.q[h * self.d_head..(h + 1) * self.d_head].to_vec(),
            self.keys[kv * block..(kv + 1) * block].to_vec(),
            self.values[kv * block..(kv + 1) * block].to_vec(),
        )
    }

    /// Concatenated outputs of the query heads served by `kv_heads`.
    pub fn attend_kv_heads(&self, kv_heads: Range<usize>) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(kv_heads.len() * self.group * self.d_head);
        for h in kv_heads.start * self.group..kv_heads.end * self.group {
            out.extend(exact_attention(&self.head(h)?)?);
        }
        Ok(out)
    }

    pub fn attend_all(&self) -> Result<Vec<T>> {
        self.attend_kv_heads(0..self.num_kv_heads)
    }

    /// Equivalent instance with every KV head replicated per query head.
    pub fn replicate_kv(&self) -> Self {
        let block = self.len * self.d_head;
        let mut keys = Vec::with_capacity(self.keys.len() * self.group);
        let mut values = Vec::with_capacity(self.values.len() * self.group);
        for kv in 0..self.num_kv_heads {
            for _ in 0..self.group {
                keys.extend_from_slice(&self.keys[kv * block..(kv + 1) * block]);
                values.extend_from_slice(&self.values[kv * block..(kv + 1) * block]);
            }
        }
        MultiHeadInstance {
            q: self.q.clone(),
            keys,
            values,
            num_kv_heads: self.num_q_heads(),
            group: 1,
            d_head: self.d_head,
            len: self.len,
        }
    }
}

/// Assign KV heads to devices as contiguous equal ranges.
pub fn head_partition(num_kv_heads: usize, num_devices: usize) -> Result<Vec<Range<usize>>> {
    if num_devices == 0 || !num_kv_heads.is_multiple_of(num_devices) {
        return Err(Error::HeadDivisibility {
            heads: num_kv_heads,
            devices: num_devices,
        });
    }
    let per = num_kv_heads / num_devices;
    Ok((0..num_devices).map(|d| d * per..(d + 1) * per).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestPartition {
    /// Device index per request, in input order.
    pub assignment: Vec<usize>,
    pub loads: Vec<u64>,
    /// max load / mean load
    pub imbalance: f64,
}

/// Greedy longest-first placement of whole requests onto devices.
pub fn request_partition(kv_sizes: &[u64], num_devices: usize) -> Result<RequestPartition> {
    if num_devices == 0 {
        return Err(Error::Precondition("num_devices must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..kv_sizes.len()).collect();
    order.sort_by(|&a, &b| kv_sizes[b].cmp(&kv_sizes[a]).then(a.cmp(&b)));
    let mut loads = vec![0u64; num_devices];
    let mut assignment = vec![0usize; kv_sizes.len()];
    for r in order {
        let (dev, _) = loads
            .iter()
            .enumerate()
            .min_by_key(|&(i, &l)| (l, i))
            .expect("num_devices >= 1");
        loads[dev] += kv_sizes[r];
        assignment[r] = dev;
    }
    let total: u64 = loads.iter().sum();
    let imbalance = if total == 0 {
        1.0
    } else {
        let mean = total as f64 / num_devices as f64;
        *loads.iter().max().unwrap() as f64 / mean
    };
    Ok(RequestPartition {
        assignment,
        loads,
        imbalance,
    })
}

/// Largest componentwise error relative to the reference's largest magnitude.
pub fn max_rel_error<T: Float>(got: &[T], reference: &[T]) -> f64 {
    let scale = reference
        .iter()
        .map(|x| x.abs().to_f64().unwrap())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    got.iter()
        .zip(reference)
        .map(|(a, b)| (a.to_f64().unwrap() - b.to_f64().unwrap()).abs() / scale)
        .fold(0.0, f64::max)
}

/// Random instance whose logits span exactly `[-max_abs_logit, max_abs_logit]`
/// in magnitude (largest |logit| equals `max_abs_logit`).
pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    d_head: usize,
    len: usize,
    max_abs_logit: f64,
) -> AttnInstance<f64> {
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let q = draw(d_head);
    let keys = draw(len * d_head);
    let values = draw(len * d_head);
    let raw = AttnInstance::with_scale(q.clone(), keys.clone(), values.clone(), 1.0)
        .expect("finite draws");
    let peak = (0..len).map(|j| raw.logit(j).abs()).fold(0.0, f64::max);
    let scale = if peak > 0.0 { max_abs_logit / peak } else { 1.0 };
    AttnInstance::with_scale(q, keys, values, scale).expect("finite draws")
}

/// Random GQA instance with entries uniform in [-1, 1].
pub fn random_multi_head<R: Rng + ?Sized>(
    rng: &mut R,
    num_kv_heads: usize,
    group: usize,
    d_head: usize,
    len: usize,
) -> MultiHeadInstance<f64> {
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    MultiHeadInstance {
        q: draw(num_kv_heads * group * d_head),
        keys: draw(num_kv_heads * len * d_head),
        values: draw(num_kv_heads * len * d_head),
        num_kv_heads,
        group,
        d_head,
        len,
    }
}

/// Convert an f64 instance to another float width.
pub fn cast_instance<T: Float>(inst: &AttnInstance<f64>) -> AttnInstance<T> {
    let c = |v: &[f64]| v.iter().map(|&x| T::from(x).unwrap()).collect::<Vec<T>>();
    AttnInstance::with_scale(
        c(&inst.q),
        c(&inst.keys),
        c(&inst.values),
        T::from(inst.scale).unwrap(),
    )
    .expect("finite")
}
