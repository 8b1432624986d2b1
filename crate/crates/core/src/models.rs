//! Generator and scorer contracts with tiny reference implementations.
//!
//! [`TinyCondLM`] is a conditional bigram-style language model: the next-token
//! logits depend on the previous token and on the mean embedding of the whole
//! context. [`TinyScorer`] is a one-hidden-layer network over a bag-of-words
//! feature vector plus three hand features (length, context overlap,
//! repetition). Both keep all parameters in one [`ParamVector`] and provide
//! exact analytic gradients.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::corpus::{Corpus, TokenId, Utterance, Vocab, BOS, EOS};
use crate::numerics::{
    argmax, log_softmax_at, sample_categorical_unchecked, sgd_step, softmax_into, Gradient, OptimizerState,
    ParamVector, RngStream,
};
use crate::{Error, Result};

/// Temperatures at or below this decode greedily.
pub const GREEDY_TEMPERATURE: f64 = 0.01;

/// Conditional token distribution `P(y | x, θ_G)`.
pub trait Generator {
    fn params(&self) -> &ParamVector;
    fn params_mut(&mut self) -> &mut ParamVector;
    fn vocab_size(&self) -> usize;
    fn max_len(&self) -> usize;

    /// Next-token logits given the context and the response prefix so far.
    fn token_logits(&self, context: &[Utterance], prefix: &[TokenId]) -> Vec<f64>;

    /// Returns `log P(response | context)` and adds `scale * ∂/∂θ log P` into
    /// `grad`.
    fn log_prob_grad(&self, context: &[Utterance], response: &Utterance, scale: f64, grad: &mut Gradient) -> f64;

    /// Sum of per-step log-probabilities, including the EOS step when the
    /// response is shorter than `max_len`.
    fn log_prob(&self, context: &[Utterance], response: &Utterance) -> f64 {
        let toks = response.tokens();
        let mut total = 0.0;
        for t in 0..toks.len() {
            total += log_softmax_at(&self.token_logits(context, &toks[..t]), toks[t] as usize);
        }
        if toks.len() < self.max_len() {
            total += log_softmax_at(&self.token_logits(context, toks), EOS as usize);
        }
        total
    }

    /// Ancestral sampling at temperature `temperature`; stops at EOS or
    /// `max_len`. Temperatures ≤ [`GREEDY_TEMPERATURE`] take the argmax.
    fn sample_response(&self, context: &[Utterance], temperature: f64, rng: &mut RngStream) -> Utterance {
        let mut out = Vec::new();
        let mut probs = vec![0.0; self.vocab_size()];
        while out.len() < self.max_len() {
            let logits = self.token_logits(context, &out);
            let tok = if temperature <= GREEDY_TEMPERATURE {
                argmax(&logits)
            } else {
                softmax_into(&logits, temperature, &mut probs);
                sample_categorical_unchecked(&probs, rng)
            } as TokenId;
            if tok == EOS {
                break;
            }
            out.push(tok);
        }
        Utterance(out)
    }
}

/// Scalar scorer `h(x, y; θ_D)`.
pub trait Scorer {
    fn params(&self) -> &ParamVector;
    fn params_mut(&mut self) -> &mut ParamVector;

    fn score_h(&self, context: &[Utterance], response: &Utterance) -> f64;

    /// Returns `h` and adds `scale * ∂h/∂θ` into `grad`.
    fn score_h_grad(&self, context: &[Utterance], response: &Utterance, scale: f64, grad: &mut Gradient) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelRole {
    Generator,
    HvM,
    HvR,
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelRole::Generator => "generator",
            ModelRole::HvM => "hvm",
            ModelRole::HvR => "hvr",
        })
    }
}

impl std::str::FromStr for ModelRole {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generator" => Ok(ModelRole::Generator),
            "hvm" => Ok(ModelRole::HvM),
            "hvr" => Ok(ModelRole::HvR),
            other => Err(Error::Data(format!("unknown model role {other:?}"))),
        }
    }
}

/// Sidecar text manifest written next to every checkpoint as
/// `<checkpoint>.manifest`, one `key=value` per line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelManifest {
    pub role: ModelRole,
    pub vocab_hash: u64,
    pub vocab_size: usize,
    pub dim: usize,
    pub hidden: usize,
    pub max_len: usize,
}

impl ModelManifest {
    pub fn path_for(checkpoint: &Path) -> PathBuf {
        let mut s = checkpoint.as_os_str().to_owned();
        s.push(".manifest");
        PathBuf::from(s)
    }

    pub fn to_text(&self) -> String {
        format!(
            "role={}\nvocab_hash={:016x}\nvocab_size={}\nd={}\nhidden={}\nmax_len={}\n",
            self.role, self.vocab_hash, self.vocab_size, self.dim, self.hidden, self.max_len
        )
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut role = None;
        let mut vocab_hash = None;
        let (mut vocab_size, mut dim, mut hidden, mut max_len) = (None, None, None, None);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| format!("bad manifest line {line:?}"))?;
            let num = || v.parse::<usize>().map_err(|e| format!("{k}: {e}"));
            match k {
                "role" => role = Some(v.parse::<ModelRole>().map_err(|e| e.to_string())?),
                "vocab_hash" => vocab_hash = Some(u64::from_str_radix(v, 16).map_err(|e| format!("{k}: {e}"))?),
                "vocab_size" => vocab_size = Some(num()?),
                "d" => dim = Some(num()?),
                "hidden" => hidden = Some(num()?),
                "max_len" => max_len = Some(num()?),
                other => return Err(format!("unknown manifest key {other:?}")),
            }
        }
        let missing = |k: &str| format!("manifest is missing {k}");
        Ok(ModelManifest {
            role: role.ok_or_else(|| missing("role"))?,
            vocab_hash: vocab_hash.ok_or_else(|| missing("vocab_hash"))?,
            vocab_size: vocab_size.ok_or_else(|| missing("vocab_size"))?,
            dim: dim.ok_or_else(|| missing("d"))?,
            hidden: hidden.ok_or_else(|| missing("hidden"))?,
            max_len: max_len.ok_or_else(|| missing("max_len"))?,
        })
    }

    pub fn load(checkpoint: &Path) -> Result<Self> {
        let path = Self::path_for(checkpoint);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Checkpoint { path: path.clone(), msg: e.to_string() })?;
        Self::parse(&text).map_err(|msg| Error::Checkpoint { path, msg })
    }

    pub fn check_vocab(&self, vocab: &Vocab, checkpoint: &Path) -> Result<()> {
        if self.vocab_hash != vocab.hash() || self.vocab_size != vocab.len() {
            return Err(Error::Checkpoint {
                path: checkpoint.to_path_buf(),
                msg: format!(
                    "vocab hash mismatch: checkpoint {:016x}, corpus {:016x}",
                    self.vocab_hash,
                    vocab.hash()
                ),
            });
        }
        Ok(())
    }
}

fn save_with_manifest(params: &ParamVector, manifest: &ModelManifest, path: &Path) -> Result<()> {
    params.save(path)?;
    std::fs::write(ModelManifest::path_for(path), manifest.to_text())?;
    Ok(())
}

fn load_checked(path: &Path, vocab: &Vocab, role: Option<ModelRole>) -> Result<(ParamVector, ModelManifest)> {
    let manifest = ModelManifest::load(path)?;
    manifest.check_vocab(vocab, path)?;
    if let Some(role) = role {
        let compatible = match role {
            ModelRole::Generator => manifest.role == ModelRole::Generator,
            _ => manifest.role != ModelRole::Generator,
        };
        if !compatible {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("expected a {role} checkpoint, manifest says {}", manifest.role),
            });
        }
    }
    Ok((ParamVector::load(path)?, manifest))
}

/// Reference generator.
///
/// `logits = U · [E(prev); mean_{t ∈ x} E(t)] + b` with `prev = BOS` at the
/// first step. Segments: `emb` (|V|×d), `out` (|V|×2d), `bias` (|V|).
#[derive(Debug, Clone)]
pub struct TinyCondLM {
    params: ParamVector,
    vocab_size: usize,
    dim: usize,
    max_len: usize,
}

impl TinyCondLM {
    pub const DEFAULT_DIM: usize = 16;

    pub fn zeros(vocab_size: usize, dim: usize, max_len: usize) -> Self {
        let params = ParamVector::zeros(&[("emb", vocab_size * dim), ("out", vocab_size * 2 * dim), ("bias", vocab_size)]);
        Self { params, vocab_size, dim, max_len }
    }

    /// Small random embeddings and output weights, zero bias.
    pub fn new(vocab_size: usize, dim: usize, max_len: usize, rng: &mut RngStream) -> Self {
        let mut m = Self::zeros(vocab_size, dim, max_len);
        m.params.init_normal(&[("emb", 0.1), ("out", 0.1)], rng);
        m
    }

    pub fn for_corpus(corpus: &Corpus, dim: usize, rng: &mut RngStream) -> Self {
        Self::new(corpus.vocab().len(), dim, corpus.max_len(), rng)
    }

    pub fn from_params(params: ParamVector, vocab_size: usize, dim: usize, max_len: usize) -> Result<Self> {
        let expected = vocab_size * dim + vocab_size * 2 * dim + vocab_size;
        if params.len() != expected {
            return Err(Error::Shape { expected, got: params.len() });
        }
        Ok(Self { params, vocab_size, dim, max_len })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn manifest(&self, vocab: &Vocab) -> ModelManifest {
        ModelManifest {
            role: ModelRole::Generator,
            vocab_hash: vocab.hash(),
            vocab_size: self.vocab_size,
            dim: self.dim,
            hidden: 0,
            max_len: self.max_len,
        }
    }

    pub fn save(&self, vocab: &Vocab, path: &Path) -> Result<()> {
        save_with_manifest(&self.params, &self.manifest(vocab), path)
    }

    pub fn load(path: &Path, vocab: &Vocab) -> Result<Self> {
        let (params, m) = load_checked(path, vocab, Some(ModelRole::Generator))?;
        Self::from_params(params, m.vocab_size, m.dim, m.max_len)
    }

    fn emb(&self) -> &[f64] {
        &self.params.values()[..self.vocab_size * self.dim]
    }

    fn out(&self) -> &[f64] {
        let start = self.vocab_size * self.dim;
        &self.params.values()[start..start + self.vocab_size * 2 * self.dim]
    }

    fn bias(&self) -> &[f64] {
        let start = self.vocab_size * 3 * self.dim;
        &self.params.values()[start..]
    }

    fn context_mean(&self, context: &[Utterance]) -> (Vec<f64>, usize) {
        let d = self.dim;
        let emb = self.emb();
        let mut mean = vec![0.0; d];
        let mut n = 0;
        for &t in context.iter().flat_map(|u| u.tokens()) {
            let row = &emb[t as usize * d..(t as usize + 1) * d];
            mean.iter_mut().zip(row).for_each(|(m, e)| *m += e);
            n += 1;
        }
        if n > 0 {
            let inv = 1.0 / n as f64;
            mean.iter_mut().for_each(|m| *m *= inv);
        }
        (mean, n)
    }

    /// `U[:, d..2d] · ctx_mean + b`, the part of the logits fixed by the context.
    fn context_logits(&self, ctx_mean: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let out = self.out();
        self.bias()
            .iter()
            .enumerate()
            .map(|(v, b)| b + dot(&out[v * 2 * d + d..(v + 1) * 2 * d], ctx_mean))
            .collect()
    }

    fn step_logits(&self, ctx_logits: &[f64], prev: TokenId, logits: &mut [f64]) {
        let d = self.dim;
        let out = self.out();
        let e_prev = &self.emb()[prev as usize * d..(prev as usize + 1) * d];
        for (v, l) in logits.iter_mut().enumerate() {
            *l = ctx_logits[v] + dot(&out[v * 2 * d..v * 2 * d + d], e_prev);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Generator for TinyCondLM {
    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn token_logits(&self, context: &[Utterance], prefix: &[TokenId]) -> Vec<f64> {
        let (mean, _) = self.context_mean(context);
        let ctx = self.context_logits(&mean);
        let mut logits = vec![0.0; self.vocab_size];
        self.step_logits(&ctx, prefix.last().copied().unwrap_or(BOS), &mut logits);
        logits
    }

    fn log_prob(&self, context: &[Utterance], response: &Utterance) -> f64 {
        let (mean, _) = self.context_mean(context);
        let ctx = self.context_logits(&mean);
        let mut logits = vec![0.0; self.vocab_size];
        let mut prev = BOS;
        let mut total = 0.0;
        let with_eos = response.len() < self.max_len;
        let targets = response.tokens().iter().copied().chain(with_eos.then_some(EOS));
        for target in targets {
            self.step_logits(&ctx, prev, &mut logits);
            total += log_softmax_at(&logits, target as usize);
            prev = target;
        }
        total
    }

    fn log_prob_grad(&self, context: &[Utterance], response: &Utterance, scale: f64, grad: &mut Gradient) -> f64 {
        let d = self.dim;
        let v_size = self.vocab_size;
        let (mean, n_ctx) = self.context_mean(context);
        let ctx = self.context_logits(&mean);
        let out = self.out();
        let emb = self.emb();
        let emb_off = 0;
        let out_off = v_size * d;
        let bias_off = v_size * 3 * d;

        let mut logits = vec![0.0; v_size];
        let mut probs = vec![0.0; v_size];
        let mut dh = vec![0.0; 2 * d];
        let mut d_ctx = vec![0.0; d];
        let mut prev = BOS;
        let mut total = 0.0;
        let with_eos = response.len() < self.max_len;
        let targets = response.tokens().iter().copied().chain(with_eos.then_some(EOS));
        for target in targets {
            self.step_logits(&ctx, prev, &mut logits);
            total += log_softmax_at(&logits, target as usize);
            softmax_into(&logits, 1.0, &mut probs);
            let e_prev = &emb[prev as usize * d..(prev as usize + 1) * d];
            dh.iter_mut().for_each(|x| *x = 0.0);
            for v in 0..v_size {
                let dl = scale * ((v == target as usize) as u8 as f64 - probs[v]);
                grad.values[bias_off + v] += dl;
                let row = &out[v * 2 * d..(v + 1) * 2 * d];
                let g_row = &mut grad.values[out_off + v * 2 * d..out_off + (v + 1) * 2 * d];
                for k in 0..d {
                    g_row[k] += dl * e_prev[k];
                    g_row[d + k] += dl * mean[k];
                }
                for k in 0..2 * d {
                    dh[k] += dl * row[k];
                }
            }
            let g_prev = &mut grad.values[emb_off + prev as usize * d..emb_off + (prev as usize + 1) * d];
            for k in 0..d {
                g_prev[k] += dh[k];
                d_ctx[k] += dh[d + k];
            }
            prev = target;
        }
        if n_ctx > 0 {
            let inv = 1.0 / n_ctx as f64;
            for &t in context.iter().flat_map(|u| u.tokens()) {
                let g = &mut grad.values[emb_off + t as usize * d..emb_off + (t as usize + 1) * d];
                for k in 0..d {
                    g[k] += d_ctx[k] * inv;
                }
            }
        }
        total
    }

    fn sample_response(&self, context: &[Utterance], temperature: f64, rng: &mut RngStream) -> Utterance {
        let (mean, _) = self.context_mean(context);
        let ctx = self.context_logits(&mean);
        let mut logits = vec![0.0; self.vocab_size];
        let mut probs = vec![0.0; self.vocab_size];
        let mut out = Vec::new();
        let mut prev = BOS;
        while out.len() < self.max_len {
            self.step_logits(&ctx, prev, &mut logits);
            let tok = if temperature <= GREEDY_TEMPERATURE {
                argmax(&logits)
            } else {
                softmax_into(&logits, temperature, &mut probs);
                sample_categorical_unchecked(&probs, rng)
            } as TokenId;
            if tok == EOS {
                break;
            }
            out.push(tok);
            prev = tok;
        }
        Utterance(out)
    }
}

/// Number of hand features appended to the two mean embeddings.
pub const HAND_FEATURES: usize = 3;

/// Reference scorer.
///
/// `φ(x, y) = [mean E(x); mean E(y); |y| / L_max; jaccard(x, y); repeat(y)]`,
/// `h = w2 · tanh(W1 φ + b1) + b2`. Segments: `emb` (|V|×d), `w1`
/// (H×(2d+3)), `b1` (H), `w2` (H), `b2` (1).
#[derive(Debug, Clone)]
pub struct TinyScorer {
    params: ParamVector,
    vocab_size: usize,
    dim: usize,
    hidden: usize,
    max_len: usize,
}

impl TinyScorer {
    pub const DEFAULT_HIDDEN: usize = 32;

    pub fn zeros(vocab_size: usize, dim: usize, hidden: usize, max_len: usize) -> Self {
        let f = 2 * dim + HAND_FEATURES;
        let params = ParamVector::zeros(&[
            ("emb", vocab_size * dim),
            ("w1", hidden * f),
            ("b1", hidden),
            ("w2", hidden),
            ("b2", 1),
        ]);
        Self { params, vocab_size, dim, hidden, max_len }
    }

    pub fn new(vocab_size: usize, dim: usize, hidden: usize, max_len: usize, rng: &mut RngStream) -> Self {
        let mut s = Self::zeros(vocab_size, dim, hidden, max_len);
        let f = (2 * dim + HAND_FEATURES) as f64;
        s.params.init_normal(
            &[("emb", 0.3), ("w1", 1.0 / f.sqrt()), ("w2", 1.0 / (hidden as f64).sqrt())],
            rng,
        );
        s
    }

    pub fn for_corpus(corpus: &Corpus, dim: usize, hidden: usize, rng: &mut RngStream) -> Self {
        Self::new(corpus.vocab().len(), dim, hidden, corpus.max_len(), rng)
    }

    pub fn from_params(params: ParamVector, vocab_size: usize, dim: usize, hidden: usize, max_len: usize) -> Result<Self> {
        let expected = vocab_size * dim + hidden * (2 * dim + HAND_FEATURES) + 2 * hidden + 1;
        if params.len() != expected {
            return Err(Error::Shape { expected, got: params.len() });
        }
        Ok(Self { params, vocab_size, dim, hidden, max_len })
    }

    pub fn manifest(&self, role: ModelRole, vocab: &Vocab) -> ModelManifest {
        ModelManifest {
            role,
            vocab_hash: vocab.hash(),
            vocab_size: self.vocab_size,
            dim: self.dim,
            hidden: self.hidden,
            max_len: self.max_len,
        }
    }

    pub fn save(&self, role: ModelRole, vocab: &Vocab, path: &Path) -> Result<()> {
        save_with_manifest(&self.params, &self.manifest(role, vocab), path)
    }

    pub fn load(path: &Path, vocab: &Vocab) -> Result<(Self, ModelRole)> {
        let (params, m) = load_checked(path, vocab, Some(ModelRole::HvM))?;
        Ok((Self::from_params(params, m.vocab_size, m.dim, m.hidden, m.max_len)?, m.role))
    }

    pub fn feature_len(&self) -> usize {
        2 * self.dim + HAND_FEATURES
    }

    /// The feature vector φ(x, y).
    pub fn features(&self, context: &[Utterance], response: &Utterance) -> Vec<f64> {
        let d = self.dim;
        let emb = &self.params.values()[..self.vocab_size * d];
        let mut phi = vec![0.0; self.feature_len()];
        let mean_into = |tokens: &mut dyn Iterator<Item = TokenId>, dst: &mut [f64]| {
            let mut n = 0usize;
            for t in tokens {
                let row = &emb[t as usize * d..(t as usize + 1) * d];
                dst.iter_mut().zip(row).for_each(|(m, e)| *m += e);
                n += 1;
            }
            if n > 0 {
                dst.iter_mut().for_each(|m| *m /= n as f64);
            }
        };
        let (x_part, rest) = phi.split_at_mut(d);
        mean_into(&mut context.iter().flat_map(|u| u.tokens().iter().copied()), x_part);
        mean_into(&mut response.tokens().iter().copied(), &mut rest[..d]);
        let hand = hand_features(context, response, self.max_len);
        phi[2 * d..].copy_from_slice(&hand);
        phi
    }

    pub fn forward(&self, phi: &[f64]) -> (f64, Vec<f64>) {
        let f = self.feature_len();
        let h = self.hidden;
        let base = self.vocab_size * self.dim;
        let vals = self.params.values();
        let w1 = &vals[base..base + h * f];
        let b1 = &vals[base + h * f..base + h * f + h];
        let w2 = &vals[base + h * f + h..base + h * f + 2 * h];
        let b2 = vals[base + h * f + 2 * h];
        let act: Vec<f64> = (0..h).map(|j| (dot(&w1[j * f..(j + 1) * f], phi) + b1[j]).tanh()).collect();
        (dot(w2, &act) + b2, act)
    }
}

/// `[|y| / L_max, jaccard(x, y), 1 - distinct(y) / |y|]`.
pub fn hand_features(context: &[Utterance], response: &Utterance, max_len: usize) -> [f64; HAND_FEATURES] {
    let y = response.tokens();
    let len_feat = y.len() as f64 / max_len as f64;
    let xs: HashSet<TokenId> = context.iter().flat_map(|u| u.tokens().iter().copied()).collect();
    let ys: HashSet<TokenId> = y.iter().copied().collect();
    let inter = xs.intersection(&ys).count();
    let union = xs.len() + ys.len() - inter;
    let jaccard = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
    let repeat = if y.is_empty() { 0.0 } else { 1.0 - ys.len() as f64 / y.len() as f64 };
    [len_feat, jaccard, repeat]
}

impl Scorer for TinyScorer {
    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    fn score_h(&self, context: &[Utterance], response: &Utterance) -> f64 {
        self.forward(&self.features(context, response)).0
    }

    fn score_h_grad(&self, context: &[Utterance], response: &Utterance, scale: f64, grad: &mut Gradient) -> f64 {
        let d = self.dim;
        let f = self.feature_len();
        let h = self.hidden;
        let base = self.vocab_size * d;
        let phi = self.features(context, response);
        let (out, act) = self.forward(&phi);
        let vals = self.params.values();
        let w1 = &vals[base..base + h * f];
        let w2 = &vals[base + h * f + h..base + h * f + 2 * h];

        let g = &mut grad.values;
        g[base + h * f + 2 * h] += scale;
        let mut d_phi = vec![0.0; f];
        for j in 0..h {
            g[base + h * f + h + j] += scale * act[j];
            let dz = scale * w2[j] * (1.0 - act[j] * act[j]);
            g[base + h * f + j] += dz;
            let g_row = &mut g[base + j * f..base + (j + 1) * f];
            let w_row = &w1[j * f..(j + 1) * f];
            for k in 0..f {
                g_row[k] += dz * phi[k];
                d_phi[k] += dz * w_row[k];
            }
        }
        let mut spread = |tokens: &mut dyn Iterator<Item = TokenId>, n: usize, part: &[f64]| {
            if n == 0 {
                return;
            }
            let inv = 1.0 / n as f64;
            for t in tokens {
                let gr = &mut g[t as usize * d..(t as usize + 1) * d];
                gr.iter_mut().zip(part).for_each(|(a, b)| *a += b * inv);
            }
        };
        let n_x: usize = context.iter().map(Utterance::len).sum();
        spread(&mut context.iter().flat_map(|u| u.tokens().iter().copied()), n_x, &d_phi[..d]);
        spread(&mut response.tokens().iter().copied(), response.len(), &d_phi[d..2 * d]);
        out
    }
}

/// Per-epoch trace of an MLE pre-training run.
#[derive(Debug, Clone, PartialEq)]
pub struct MleReport {
    /// Mean NLL per token over the train split: entry 0 before training,
    /// entry `k` after epoch `k`.
    pub nll_per_token: Vec<f64>,
}

/// Mean negative log-likelihood per predicted token (EOS steps included).
pub fn nll_per_token<G: Generator + ?Sized>(gen: &G, corpus: &Corpus, indices: &[usize]) -> f64 {
    let mut nll = 0.0;
    let mut steps = 0usize;
    for &i in indices {
        let d = &corpus.dialogues()[i];
        nll -= gen.log_prob(&d.context, &d.human_response);
        steps += d.human_response.len() + (d.human_response.len() < gen.max_len()) as usize;
    }
    nll / steps.max(1) as f64
}

/// Maximum-likelihood training on the train split's human responses with
/// shuffled minibatches. Gradients are per-token means, clipped to
/// `clip_norm` before each step.
pub fn mle_pretrain<G: Generator + ?Sized>(
    gen: &mut G,
    corpus: &Corpus,
    epochs: usize,
    batch_size: usize,
    clip_norm: f64,
    opt: &mut OptimizerState,
    rng: &mut RngStream,
) -> Result<MleReport> {
    let mut order = corpus.split_indices(crate::corpus::Split::Train);
    if order.is_empty() {
        return Err(Error::Data("MLE pre-training needs a non-empty train split".into()));
    }
    let batch_size = batch_size.max(1);
    let mut trace = vec![nll_per_token(gen, corpus, &order)];
    for _ in 0..epochs {
        shuffle(&mut order, rng);
        for batch in order.chunks(batch_size) {
            let mut grad = Gradient::zeros(gen.params().len());
            let steps: usize = batch
                .iter()
                .map(|&i| {
                    let r = &corpus.dialogues()[i].human_response;
                    r.len() + (r.len() < gen.max_len()) as usize
                })
                .sum();
            let scale = -1.0 / steps as f64;
            for &i in batch {
                let d = &corpus.dialogues()[i];
                gen.log_prob_grad(&d.context, &d.human_response, scale, &mut grad);
            }
            grad.clip_global_norm(clip_norm);
            sgd_step(gen.params_mut(), &grad, opt)?;
        }
        trace.push(nll_per_token(gen, corpus, &order));
    }
    Ok(MleReport { nll_per_token: trace })
}

/// Fisher-Yates.
pub fn shuffle<T>(items: &mut [T], rng: &mut RngStream) {
    for i in (1..items.len()).rev() {
        let j = rng.below(i + 1);
        items.swap(i, j);
    }
}
