//! Neighboring spans around the aspect: relative distances, moving masks and
//! span-enhanced representations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Graph, Var};

/// Distance of every row (class token at 0, sentence tokens at `1..=n`) to the
/// aspect span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceVector {
    pub d: Vec<usize>,
    pub aspect_start: usize,
    pub aspect_len: usize,
}

impl DistanceVector {
    pub fn max(&self) -> usize {
        self.d.iter().copied().max().unwrap_or(0)
    }
}

/// Distances with positions equal to row indices:
///
/// * rows before the aspect: `start - i`
/// * aspect rows: `0`
/// * rows after the aspect: `i - (start + len)`
///
/// The right-hand rule is applied as written, so the first token after the
/// aspect is at distance 0 while the token just before it is at distance 1.
pub fn relative_distances(n: usize, aspect_start: usize, aspect_len: usize) -> Result<DistanceVector> {
    if aspect_start < 1 || aspect_len < 1 || aspect_start + aspect_len - 1 > n {
        return Err(Error::Span {
            start: aspect_start,
            len: aspect_len,
            n,
        });
    }
    let last = aspect_start + aspect_len - 1;
    let d = (0..=n)
        .map(|i| {
            if i < aspect_start {
                aspect_start - i
            } else if i <= last {
                0
            } else {
                i - (aspect_start + aspect_len)
            }
        })
        .collect();
    Ok(DistanceVector {
        d,
        aspect_start,
        aspect_len,
    })
}

/// Masks `M^0..M^L`, one on/off flag per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanMaskSet {
    masks: Vec<Vec<bool>>,
}

impl SpanMaskSet {
    /// Mask for span size `l`.
    pub fn mask(&self, l: usize) -> &[bool] {
        &self.masks[l]
    }

    pub fn threshold(&self) -> usize {
        self.masks.len() - 1
    }

    pub fn iter(&self) -> impl Iterator<Item = &[bool]> {
        self.masks.iter().map(Vec::as_slice)
    }
}

/// Row `i` of mask `l` is on iff `d_i <= l`.
pub fn build_masks(dv: &DistanceVector, threshold: usize) -> SpanMaskSet {
    let masks = (0..=threshold)
        .map(|l| dv.d.iter().map(|&di| di <= l).collect())
        .collect();
    SpanMaskSet { masks }
}

/// `H_span = M ⋅ H` as row selection: rows with the mask off become exact zeros.
pub fn apply_mask(g: &mut Graph, h: Var, mask: &[bool]) -> Result<Var> {
    Ok(g.mask_rows(h, mask)?)
}

/// Shared affine map `W1 ∈ R^{d×2d}`, `b1 ∈ R^d` used for every span size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanEnhanceParams {
    pub w1: ParamId,
    pub b1: ParamId,
}

impl SpanEnhanceParams {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        SpanEnhanceParams {
            w1: store.add("span.w1", &[d, 2 * d], Init::GlorotUniform, true, rng),
            b1: store.add("span.b1", &[d], Init::Zeros, true, rng),
        }
    }
}

/// `W1 [H_span ; H] + b1`, concatenating along the feature axis.
pub fn enhance(g: &mut Graph, p: &Bound, params: &SpanEnhanceParams, h_span: Var, h: Var) -> Result<Var> {
    let cat = g.concat_last(h_span, h)?;
    Ok(g.linear(cat, p.var(params.w1), Some(p.var(params.b1)))?)
}
