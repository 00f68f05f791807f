//! Desk-scale decode simulator.
//!
//! Generates heads with synthetic outlier key channels, streams tokens
//! through the key and query projections, stores keys in a BFP cache and
//! measures the resulting error in the cache and in the attention logits.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bfp::{dequantize, quantize_block, BfpBlock, BfpFormat, BfpTensor};
use crate::error::{Error, Result};
use crate::ksort::{remap_rope_tables, HeadWeights, PermutationPlan};
use crate::rope::{rope_apply, RopeTables};
use crate::tensor::{dot, norm, Matrix, Tensor};

/// Stream of the seeded generator that draws weights; activations use another.
const WEIGHT_STREAM: u64 = 0;
const ACTIVATION_STREAM: u64 = 1;

/// Synthetic head with a few high-norm key channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    pub n_outlier_channels: usize,
    pub outlier_scale: f64,
    pub base_std: f64,
    pub seed: u64,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Gaussian `W_k` and `W_q`; `n_outlier_channels` random rows of `W_k` are
/// multiplied by `outlier_scale`.
pub fn gen_outlier_head(
    head_dim: usize,
    model_dim: usize,
    spec: &OutlierSpec,
) -> Result<HeadWeights> {
    if spec.n_outlier_channels > head_dim {
        return Err(Error::InvalidConfig(format!(
            "{} outlier channels in a head of {head_dim}",
            spec.n_outlier_channels
        )));
    }
    if !(spec.outlier_scale.is_finite() && spec.outlier_scale >= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "outlier scale must be finite and >= 1, got {}",
            spec.outlier_scale
        )));
    }
    let normal = Normal::new(0.0, spec.base_std)
        .ok()
        .filter(|_| spec.base_std > 0.0)
        .ok_or_else(|| Error::InvalidConfig(format!("invalid base std {}", spec.base_std)))?;
    let mut rng = rng_for(spec.seed, WEIGHT_STREAM);
    let mut wk: Vec<f64> = (0..head_dim * model_dim)
        .map(|_| normal.sample(&mut rng))
        .collect();
    let wq: Vec<f64> = (0..head_dim * model_dim)
        .map(|_| normal.sample(&mut rng))
        .collect();
    let mut outliers = sample(&mut rng, head_dim, spec.n_outlier_channels).into_vec();
    outliers.sort_unstable();
    for row in outliers {
        for w in &mut wk[row * model_dim..(row + 1) * model_dim] {
            *w *= spec.outlier_scale;
        }
    }
    HeadWeights::new(
        Matrix::new(head_dim, model_dim, wk)?,
        Matrix::new(head_dim, model_dim, wq)?,
    )
}

/// Standard Gaussian token activations, `tokens × model_dim`.
pub fn gen_activations(tokens: usize, model_dim: usize, seed: u64) -> Matrix {
    let mut rng = rng_for(seed, ACTIVATION_STREAM);
    Matrix::from_fn(tokens, model_dim, |_, _| rng.sample(StandardNormal))
}

/// Storage format of a cached vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CacheFormat {
    /// Unquantized double precision.
    Float,
    Bfp(BfpFormat),
}

impl CacheFormat {
    pub const LOSSLESS_NAME: &'static str = "FP-lossless";

    pub fn bits_per_element(&self) -> f64 {
        match self {
            CacheFormat::Float => 64.0,
            CacheFormat::Bfp(f) => f.bits_per_element(),
        }
    }

    pub fn block_size(&self) -> Option<usize> {
        match self {
            CacheFormat::Float => None,
            CacheFormat::Bfp(f) => Some(f.block_size()),
        }
    }
}

impl fmt::Display for CacheFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CacheFormat::Float => f.write_str(Self::LOSSLESS_NAME),
            CacheFormat::Bfp(b) => b.fmt(f),
        }
    }
}

impl FromStr for CacheFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == Self::LOSSLESS_NAME {
            Ok(CacheFormat::Float)
        } else {
            s.parse().map(CacheFormat::Bfp)
        }
    }
}

impl Serialize for CacheFormat {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CacheFormat {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Append-only key cache; each token's key is quantized once on arrival.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyCache {
    format: CacheFormat,
    head_dim: usize,
    values: Vec<f64>,
    blocks: Vec<BfpBlock>,
}

impl KeyCache {
    pub fn new(format: CacheFormat, head_dim: usize) -> Self {
        Self {
            format,
            head_dim,
            values: Vec::new(),
            blocks: Vec::new(),
        }
    }

    pub fn append(&mut self, key: &[f64]) -> Result<()> {
        if key.len() != self.head_dim {
            return Err(Error::ShapeMismatch(format!(
                "key of length {} for a cache of width {}",
                key.len(),
                self.head_dim
            )));
        }
        match self.format {
            CacheFormat::Float => self.values.extend_from_slice(key),
            CacheFormat::Bfp(fmt) => {
                let row = self.len();
                for (block, chunk) in key.chunks(fmt.block_size()).enumerate() {
                    let b = quantize_block(chunk, &fmt).map_err(|e| Error::AtBlock {
                        row,
                        block,
                        source: Box::new(e),
                    })?;
                    self.values.extend((0..chunk.len()).map(|i| b.decode(i)));
                    self.blocks.push(b);
                }
            }
        }
        Ok(())
    }

    /// Cached tokens.
    pub fn len(&self) -> usize {
        self.values.len().checked_div(self.head_dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn format(&self) -> CacheFormat {
        self.format
    }

    /// Decoded key of token `t`.
    pub fn key(&self, t: usize) -> &[f64] {
        &self.values[t * self.head_dim..(t + 1) * self.head_dim]
    }

    /// Decoded cache, `tokens × head_dim`.
    pub fn values(&self) -> Matrix {
        Matrix::new(self.len(), self.head_dim, self.values.clone()).expect("whole rows")
    }

    /// The cache as one tensor blocked along the channel axis.
    pub fn to_bfp_tensor(&self) -> Option<BfpTensor> {
        match self.format {
            CacheFormat::Float => None,
            CacheFormat::Bfp(fmt) => Some(
                BfpTensor::from_parts(fmt, vec![self.len(), self.head_dim], 1, self.blocks.clone())
                    .expect("blocks produced by quantize_block"),
            ),
        }
    }
}

/// Everything recorded while decoding one sequence through one head.
#[derive(Debug, Clone)]
pub struct DecodeTrace {
    /// Unquantized post-rotation keys, `tokens × head_dim`.
    pub keys: Matrix,
    /// Unquantized post-rotation queries.
    pub queries: Matrix,
    pub cache: KeyCache,
    /// Decoded queries as used for the scores.
    pub quantized_queries: Matrix,
    /// `scores[t][s] = q̂_t · k̂_s` for `s <= t`.
    pub scores: Vec<Vec<f64>>,
    /// Same logits from the unquantized vectors.
    pub reference_scores: Vec<Vec<f64>>,
}

impl DecodeTrace {
    pub fn logits_max_abs_err(&self) -> f64 {
        self.scores
            .iter()
            .flatten()
            .zip(self.reference_scores.iter().flatten())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

fn quantize_vector(v: &[f64], format: CacheFormat) -> Result<Vec<f64>> {
    match format {
        CacheFormat::Float => Ok(v.to_vec()),
        CacheFormat::Bfp(fmt) => {
            let mut out = Vec::with_capacity(v.len());
            for chunk in v.chunks(fmt.block_size()) {
                let b = quantize_block(chunk, &fmt)?;
                out.extend((0..chunk.len()).map(|i| b.decode(i)));
            }
            Ok(out)
        }
    }
}

fn check_plan(
    weights: &HeadWeights,
    rope: Option<&RopeTables>,
    plan: &PermutationPlan,
) -> Result<()> {
    let perm = plan.perm();
    let pw = plan.weights();
    if perm.len() != weights.head_dim() || pw.model_dim() != weights.model_dim() {
        return Err(Error::PlanMismatch(format!(
            "plan for a {}x{} head, weights are {}x{}",
            perm.len(),
            pw.model_dim(),
            weights.head_dim(),
            weights.model_dim()
        )));
    }
    if pw != &weights.permuted(perm)? {
        return Err(Error::PlanMismatch(
            "permuted weights are not the plan's permutation of these weights".into(),
        ));
    }
    let expected = rope.map(|t| remap_rope_tables(t, perm)).transpose()?;
    if expected.as_ref() != plan.rope() {
        return Err(Error::PlanMismatch(
            "rope tables do not match the plan".into(),
        ));
    }
    Ok(())
}

/// Runs `x.rows()` decode steps; token `t` sits at rotary position `t`.
///
/// With a plan, the plan's permuted weights and remapped tables replace the
/// originals, so every vector lives in the sorted channel order.
pub fn simulate_decode(
    weights: &HeadWeights,
    rope: Option<&RopeTables>,
    x: &Matrix,
    fmt_k: CacheFormat,
    fmt_q: CacheFormat,
    plan: Option<&PermutationPlan>,
) -> Result<DecodeTrace> {
    if x.cols() != weights.model_dim() {
        return Err(Error::ShapeMismatch(format!(
            "activations of width {} for a model of width {}",
            x.cols(),
            weights.model_dim()
        )));
    }
    if let Some(t) = rope {
        if t.dim() != weights.head_dim() {
            return Err(Error::ShapeMismatch(format!(
                "rope tables of dimension {} for head dimension {}",
                t.dim(),
                weights.head_dim()
            )));
        }
    }
    let (w, tables) = match plan {
        Some(p) => {
            check_plan(weights, rope, p)?;
            (p.weights(), p.rope())
        }
        None => (weights, rope),
    };
    let d = w.head_dim();
    let tokens = x.rows();
    let mut keys = Vec::with_capacity(tokens * d);
    let mut queries = Vec::with_capacity(tokens * d);
    let mut quantized_queries = Vec::with_capacity(tokens * d);
    let mut cache = KeyCache::new(fmt_k, d);
    let mut scores = Vec::with_capacity(tokens);
    let mut reference_scores = Vec::with_capacity(tokens);
    for (t, xt) in x.iter_rows().enumerate() {
        let mut k = w.key(xt)?;
        let mut q = w.query(xt)?;
        if let Some(tables) = tables {
            k = rope_apply(tables, &k, t as u64)?;
            q = rope_apply(tables, &q, t as u64)?;
        }
        cache.append(&k)?;
        keys.extend_from_slice(&k);
        let q_hat = quantize_vector(&q, fmt_q)?;
        scores.push((0..=t).map(|s| dot(&q_hat, cache.key(s))).collect());
        reference_scores.push(
            (0..=t)
                .map(|s| dot(&q, &keys[s * d..(s + 1) * d]))
                .collect(),
        );
        queries.extend_from_slice(&q);
        quantized_queries.extend_from_slice(&q_hat);
    }
    Ok(DecodeTrace {
        keys: Matrix::new(tokens, d, keys)?,
        queries: Matrix::new(tokens, d, queries)?,
        cache,
        quantized_queries: Matrix::new(tokens, d, quantized_queries)?,
        scores,
        reference_scores,
    })
}

/// Largest deviation between original and permuted logits over all causal
/// pairs, relative to `‖q‖·‖k‖`.
///
/// Both sides are computed in unquantized double precision.
pub fn exactness_check(
    weights: &HeadWeights,
    plan: &PermutationPlan,
    rope: Option<&RopeTables>,
    x: &Matrix,
) -> Result<f64> {
    if rope.is_some() != plan.rope().is_some() {
        return Err(Error::PlanMismatch(
            "rope tables present on only one side".into(),
        ));
    }
    let rotate = |tables: Option<&RopeTables>, v: Vec<f64>, t: usize| match tables {
        Some(tables) => rope_apply(tables, &v, t as u64),
        None => Ok(v),
    };
    let mut original = Vec::with_capacity(x.rows());
    let mut permuted = Vec::with_capacity(x.rows());
    for (t, xt) in x.iter_rows().enumerate() {
        original.push((
            rotate(rope, weights.query(xt)?, t)?,
            rotate(rope, weights.key(xt)?, t)?,
        ));
        permuted.push((
            rotate(plan.rope(), plan.weights().query(xt)?, t)?,
            rotate(plan.rope(), plan.weights().key(xt)?, t)?,
        ));
    }
    let mut worst = 0.0f64;
    for t in 0..original.len() {
        for s in 0..=t {
            let (q, _) = &original[t];
            let (_, k) = &original[s];
            let a = dot(q, k);
            let b = dot(&permuted[t].0, &permuted[s].1);
            let scale = norm(q) * norm(k);
            let dev = if a == b {
                0.0
            } else if scale > 0.0 {
                (a - b).abs() / scale
            } else {
                f64::INFINITY
            };
            worst = worst.max(dev);
        }
    }
    Ok(worst)
}

/// Error of a quantized tensor against its reference, over logical elements only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorMetrics {
    pub mse: f64,
    /// `10·log10(signal power / noise power)`; `+inf` when lossless, NaN when
    /// the reference is all zero.
    #[serde(serialize_with = "serialize_extended_f64")]
    pub sqnr_db: f64,
    pub sqnr_defined: bool,
    pub max_abs_err: f64,
    pub bits_per_element: f64,
    pub elements: usize,
}

/// Writes non-finite values as the strings `"inf"`, `"-inf"` and `"NaN"`.
pub(crate) fn serialize_extended_f64<S: serde::Serializer>(
    v: &f64,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.collect_str(v)
    }
}

/// Sum of the values sorted ascending, so the result depends only on the multiset.
fn order_free_sum(mut v: Vec<f64>) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    v.into_iter().sum()
}

/// Metrics for dense vectors; sums run over sorted terms so that any
/// permutation of the elements yields bit-identical metrics.
pub fn error_metrics_dense(
    reference: &[f64],
    approx: &[f64],
    bits_per_element: f64,
) -> Result<ErrorMetrics> {
    if reference.len() != approx.len() {
        return Err(Error::ShapeMismatch(format!(
            "reference of {} elements against {}",
            reference.len(),
            approx.len()
        )));
    }
    let n = reference.len();
    let errs: Vec<f64> = reference.iter().zip(approx).map(|(r, a)| r - a).collect();
    let max_abs_err = errs.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let noise = order_free_sum(errs.iter().map(|e| e * e).collect());
    let signal = order_free_sum(reference.iter().map(|r| r * r).collect());
    let mse = if n == 0 { 0.0 } else { noise / n as f64 };
    let (sqnr_db, sqnr_defined) = if signal == 0.0 {
        (f64::NAN, false)
    } else if noise == 0.0 {
        (f64::INFINITY, true)
    } else {
        (10.0 * (signal / noise).log10(), true)
    };
    Ok(ErrorMetrics {
        mse,
        sqnr_db,
        sqnr_defined,
        max_abs_err,
        bits_per_element,
        elements: n,
    })
}

/// Metrics of `quantized` against `reference`; padding never enters.
pub fn error_metrics(reference: &Tensor, quantized: &BfpTensor) -> Result<ErrorMetrics> {
    if reference.shape() != quantized.shape() {
        return Err(Error::ShapeMismatch(format!(
            "reference {:?} against quantized {:?}",
            reference.shape(),
            quantized.shape()
        )));
    }
    let decoded = dequantize(quantized);
    error_metrics_dense(
        reference.data(),
        decoded.data(),
        quantized.format().bits_per_element(),
    )
}

/// Metrics of a trace's key cache against its unquantized keys.
pub fn cache_metrics(trace: &DecodeTrace) -> Result<ErrorMetrics> {
    let bits = trace.cache.format().bits_per_element();
    error_metrics_dense(trace.keys.data(), trace.cache.values().data(), bits)
}

/// Packed bytes of one head's key cache: `T · ceil(d_h/n) · ceil((n·p + b)/8)`.
pub fn footprint(tokens: usize, head_dim: usize, fmt: &BfpFormat) -> u64 {
    tokens as u64 * head_dim.div_ceil(fmt.block_size()) as u64 * fmt.block_bytes() as u64
}
