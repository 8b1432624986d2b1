//! Flat parameter vectors, SGD with momentum, categorical sampling, a
//! documented counter-based RNG and a central finite-difference oracle.
//!
//! Everything is 64-bit floating point; models in this crate are small enough
//! that precision matters more than throughput.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use crate::{Error, Result};

/// 64-bit FNV-1a. Used for split assignment, vocab hashes and stream naming,
/// so it must never change.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based 64-bit random stream.
///
/// The `k`-th draw (k = 0, 1, ...) is
///
/// ```text
/// x_k = mix64(seed + (k + 1) * 0x9E3779B97F4A7C15)      (wrapping arithmetic)
/// mix64(z): z = (z ^ z>>30) * 0xBF58476D1CE4E5B9
///           z = (z ^ z>>27) * 0x94D049BB133111EB
///           return z ^ z>>31
/// ```
///
/// i.e. SplitMix64 addressed by an explicit counter. Floats in `[0, 1)` take
/// the top 53 bits. Named sub-streams hash the name with FNV-1a and mix it into
/// the parent seed, so components seeded from one run seed never share draws.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent stream derived from this stream's seed and a name.
    /// Does not advance `self`.
    pub fn substream(&self, name: &str) -> RngStream {
        RngStream::new(mix64(self.seed ^ fnv1a64(name.as_bytes())))
    }

    /// Independent stream derived from this stream's seed and an index.
    pub fn fork(&self, index: u64) -> RngStream {
        RngStream::new(mix64(self.seed.wrapping_add(mix64(index ^ 0x5851_f42d_4c95_7f2d))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`, unbiased (rejection on the low product word).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = u128::from(self.next_u64()) * u128::from(n);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller (one value per two uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }
}

/// A named, contiguous slice of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Dense parameter vector with a named segment layout and a version counter
/// that advances on every mutable access.
#[derive(Debug, Clone)]
pub struct ParamVector {
    values: Vec<f64>,
    segments: Vec<Segment>,
    version: u64,
}

impl PartialEq for ParamVector {
    fn eq(&self, other: &Self) -> bool {
        self.segments == other.segments && self.values == other.values
    }
}

impl ParamVector {
    /// All-zero vector laid out as consecutive segments.
    pub fn zeros(layout: &[(&str, usize)]) -> Self {
        let mut segments = Vec::with_capacity(layout.len());
        let mut offset = 0;
        for &(name, len) in layout {
            segments.push(Segment { name: name.to_string(), offset, len });
            offset += len;
        }
        Self { values: vec![0.0; offset], segments, version: 0 }
    }

    pub fn from_parts(values: Vec<f64>, segments: Vec<Segment>) -> Result<Self> {
        let mut covered = 0;
        for seg in &segments {
            if seg.offset != covered {
                return Err(Error::Data(format!("segment {} is not contiguous", seg.name)));
            }
            covered += seg.len;
        }
        if covered != values.len() {
            return Err(Error::Shape { expected: covered, got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(Self { values, segments, version: 0 })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment_range(&self, name: &str) -> Range<usize> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("no segment named {name}"))
            .range()
    }

    pub fn segment(&self, name: &str) -> &[f64] {
        &self.values[self.segment_range(name)]
    }

    pub fn segment_mut(&mut self, name: &str) -> &mut [f64] {
        let range = self.segment_range(name);
        self.version += 1;
        &mut self.values[range]
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// True when every value is bit-identical (and the layouts agree).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.segments == other.segments
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// FNV-1a over the little-endian value bytes.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fnv1a64(&bytes)
    }

    /// Fill every segment with `N(0, scale^2)` draws; `scales` maps segment
    /// names to standard deviations, unlisted segments stay untouched.
    pub fn init_normal(&mut self, scales: &[(&str, f64)], rng: &mut RngStream) {
        for &(name, scale) in scales {
            for v in self.segment_mut(name) {
                *v = scale * rng.normal();
            }
        }
    }

    const MAGIC: &'static [u8; 8] = b"ATTPARAM";
    const FORMAT_VERSION: u32 = 1;

    /// Checkpoint encoding: magic, format version, segment table, then the
    /// values as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.values.len() * 8);
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.segments.len() as u32).to_le_bytes());
        for seg in &self.segments {
            out.extend_from_slice(&(seg.name.len() as u32).to_le_bytes());
            out.extend_from_slice(seg.name.as_bytes());
            out.extend_from_slice(&(seg.offset as u64).to_le_bytes());
            out.extend_from_slice(&(seg.len as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> std::result::Result<Self, String> {
        fn take<'a>(bytes: &mut &'a [u8], n: usize) -> std::result::Result<&'a [u8], String> {
            if bytes.len() < n {
                return Err("truncated checkpoint".into());
            }
            let (head, tail) = bytes.split_at(n);
            *bytes = tail;
            Ok(head)
        }
        let u32_at = |b: &mut &[u8]| take(b, 4).map(|s| u32::from_le_bytes(s.try_into().unwrap()));
        let u64_at = |b: &mut &[u8]| take(b, 8).map(|s| u64::from_le_bytes(s.try_into().unwrap()));

        if take(&mut bytes, 8)? != Self::MAGIC {
            return Err("bad magic".into());
        }
        let version = u32_at(&mut bytes)?;
        if version != Self::FORMAT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let nseg = u32_at(&mut bytes)? as usize;
        let mut segments = Vec::with_capacity(nseg);
        for _ in 0..nseg {
            let name_len = u32_at(&mut bytes)? as usize;
            let name = std::str::from_utf8(take(&mut bytes, name_len)?)
                .map_err(|e| format!("segment name: {e}"))?
                .to_string();
            let offset = u64_at(&mut bytes)? as usize;
            let len = u64_at(&mut bytes)? as usize;
            segments.push(Segment { name, offset, len });
        }
        let count = u64_at(&mut bytes)? as usize;
        let raw = take(&mut bytes, count.checked_mul(8).ok_or("value count overflow")?)?;
        if !bytes.is_empty() {
            return Err("trailing bytes after values".into());
        }
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ParamVector::from_parts(values, segments).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::Checkpoint { path: path.to_path_buf(), msg: e.to_string() })?;
        Self::from_bytes(&bytes).map_err(|msg| Error::Checkpoint { path: path.to_path_buf(), msg })
    }
}

/// Gradient with the same flat shape as the parameters it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
}

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|g| g.is_finite())
    }

    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        assert_eq!(self.len(), other.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    /// Rescale so the global L2 norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.l2_norm();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            self.values.iter_mut().for_each(|g| *g *= s);
        }
        norm
    }
}

/// Relative L2 error `|a - b| / max(|a|, |b|, tiny)`.
pub fn relative_l2_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

/// SGD with heavy-ball momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub velocity: Vec<f64>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64, len: usize) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self { learning_rate, momentum, velocity: vec![0.0; len] })
    }

    pub fn reset(&mut self) {
        self.velocity.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// `velocity <- momentum * velocity + grad; params <- params - lr * velocity`.
pub fn sgd_step(params: &mut ParamVector, grad: &Gradient, opt: &mut OptimizerState) -> Result<()> {
    if grad.len() != params.len() {
        return Err(Error::Shape { expected: params.len(), got: grad.len() });
    }
    if opt.velocity.len() != params.len() {
        return Err(Error::Shape { expected: params.len(), got: opt.velocity.len() });
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let lr = opt.learning_rate;
    let mu = opt.momentum;
    for ((p, v), g) in params.values_mut().iter_mut().zip(opt.velocity.iter_mut()).zip(&grad.values) {
        *v = mu * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Central differences `(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)`.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &[f64], epsilon: f64) -> Result<Gradient>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut probe = params.to_vec();
    let mut grad = Gradient::zeros(params.len());
    for i in 0..params.len() {
        probe[i] = params[i] + epsilon;
        let plus = loss_fn(&probe);
        probe[i] = params[i] - epsilon;
        let minus = loss_fn(&probe);
        probe[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("finite-difference probe"));
        }
        grad.values[i] = (plus - minus) / (2.0 * epsilon);
    }
    Ok(grad)
}

/// `p_v ∝ exp(logit_v / T)` with max subtraction.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, temperature, &mut out);
    Ok(out)
}

/// Unchecked softmax for hot loops; callers guarantee `temperature > 0` and
/// finite logits.
pub(crate) fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = ((l - max) / temperature).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|o| *o *= inv);
}

/// `log softmax(logits)[index]` at temperature 1.
pub fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits[index] - lse
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical(probs: &[f64], rng: &mut RngStream) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::Data("empty probability vector".into()));
    }
    if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::Data("negative or non-finite probability".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Data(format!("probabilities sum to {total}, not 1")));
    }
    Ok(sample_categorical_unchecked(probs, rng))
}

pub(crate) fn sample_categorical_unchecked(probs: &[f64], rng: &mut RngStream) -> usize {
    let u = rng.next_f64();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the final cumulative sum
    last_positive
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
