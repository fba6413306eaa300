//! Single-query multi-head attention over a span-enhanced sequence, the
//! per-span sentiment projection, and pooling across spans.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Graph, Var};

/// Query transform and attention projections, shared by every span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w2: ParamId,
    pub b2: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wh: ParamId,
    pub heads: usize,
}

impl AttentionParams {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        let mut w = |name: &str, store: &mut ParamStore| store.add(format!("attention.{name}"), &[d, d], Init::GlorotUniform, true, rng);
        let w2 = w("w2", store);
        let wq = w("wq", store);
        let wk = w("wk", store);
        let wv = w("wv", store);
        let wh = w("wh", store);
        let mut b = |name: &str| store.add(format!("attention.{name}"), &[d], Init::Zeros, true, rng);
        Ok(AttentionParams {
            w2,
            b2: b("b2"),
            wq,
            bq: b("bq"),
            wk,
            bk: b("bk"),
            wv,
            bv: b("bv"),
            wh,
            heads,
        })
    }
}

/// `W3 ∈ R^{3×d}`, `b3 ∈ R^3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentimentProjParams {
    pub w3: ParamId,
    pub b3: ParamId,
}

impl SentimentProjParams {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        SentimentProjParams {
            w3: store.add("projection.w3", &[3, d], Init::GlorotUniform, true, rng),
            b3: store.add("projection.b3", &[3], Init::Zeros, true, rng),
        }
    }
}

/// Attention weights recorded for one span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanTrace {
    pub span: usize,
    /// One weight vector over the rows per head.
    pub heads: Vec<Vec<f64>>,
    /// Head-averaged weights.
    pub mean: Vec<f64>,
}

impl SpanTrace {
    pub fn from_heads(span: usize, heads: Vec<Vec<f64>>) -> Self {
        let rows = heads.first().map_or(0, Vec::len);
        let k = heads.len() as f64;
        let mean = (0..rows)
            .map(|j| heads.iter().map(|h| h[j]).sum::<f64>() / k)
            .collect();
        SpanTrace { span, heads, mean }
    }
}

/// `C = tanh(W2 h_cls + b2)` with `h_cls` the first row of `h_enhanced`.
pub fn cls_query(g: &mut Graph, p: &Bound, params: &AttentionParams, h_enhanced: Var) -> Result<Var> {
    let cls = g.row(h_enhanced, 0)?;
    let z = g.linear(cls, p.var(params.w2), Some(p.var(params.b2)))?;
    Ok(g.tanh(z))
}

/// Mean of rows `start..start+len`, the aspect-average query.
pub fn mean_rows(g: &mut Graph, h: Var, start: usize, len: usize) -> Result<Var> {
    let rows = g.slice_rows(h, start, len)?;
    Ok(g.mean_axis(rows, 0)?)
}

/// Multi-head scaled dot-product attention with a single query vector.
///
/// Returns the `d`-vector `W_h [head_1; …; head_h]` and, when `trace` is set,
/// the per-head weights over the rows of `keys`.
pub fn attend(
    g: &mut Graph,
    p: &Bound,
    params: &AttentionParams,
    query: Var,
    keys: Var,
    valid: &[bool],
    trace: bool,
) -> Result<(Var, Option<Vec<Vec<f64>>>)> {
    let d = g.shape(query)[0];
    let h = params.heads;
    let dk = d / h;
    let q = g.linear(query, p.var(params.wq), Some(p.var(params.bq)))?;
    let k = g.linear(keys, p.var(params.wk), Some(p.var(params.bk)))?;
    let v = g.linear(keys, p.var(params.wv), Some(p.var(params.bv)))?;
    let rows = g.shape(keys)[0];
    let scale = 1.0 / (dk as f64).sqrt();
    let mut weights_out = trace.then(Vec::new);
    let mut cat: Option<Var> = None;
    for i in 0..h {
        let qi = g.slice_last(q, i * dk, dk)?;
        let qi = g.reshape(qi, &[dk, 1])?;
        let ki = g.slice_last(k, i * dk, dk)?;
        let vi = g.slice_last(v, i * dk, dk)?;
        let scores = g.matmul(ki, qi)?;
        let scores = g.reshape(scores, &[rows])?;
        let scores = g.scale(scores, scale);
        let w = g.softmax_masked(scores, valid)?;
        if let Some(out) = weights_out.as_mut() {
            out.push(g.value(w).data().to_vec());
        }
        let w = g.reshape(w, &[1, rows])?;
        let head = g.matmul(w, vi)?;
        let head = g.reshape(head, &[dk])?;
        cat = Some(match cat {
            Some(acc) => g.concat_last(acc, head)?,
            None => head,
        });
    }
    let cat = cat.ok_or_else(|| Error::Config("attention needs at least one head".into()))?;
    let y = g.linear(cat, p.var(params.wh), None)?;
    Ok((y, weights_out))
}

/// `y_s = W3 y_a + b3`.
pub fn sentiment_proj(g: &mut Graph, p: &Bound, params: &SentimentProjParams, y_a: Var) -> Result<Var> {
    Ok(g.linear(y_a, p.var(params.w3), Some(p.var(params.b3)))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Avg,
    Max,
}

/// Pools per-span sentiment vectors column-wise.
pub fn pool(g: &mut Graph, spans: &[Var], mode: Pooling) -> Result<Var> {
    if spans.is_empty() {
        return Err(Error::Config("cannot pool zero spans".into()));
    }
    let stacked = g.stack(spans)?;
    Ok(match mode {
        Pooling::Avg => g.mean_axis(stacked, 0)?,
        Pooling::Max => g.max_axis(stacked, 0)?,
    })
}
