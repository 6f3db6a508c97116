//! Dense numeric kernels shared by the model, the mask builders and the
//! decoding loop.
//!
//! Everything is stored as `f32`. Reductions that feed a probability
//! normalization (softmax sums, dot products for cosine similarity, KL sums)
//! accumulate in `f64` so that a distribution over a few hundred tokens still
//! sums to one within `1e-6`.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CmgError, Result};

/// Tolerance used when validating that a [`Distribution`] sums to one.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

/// Row-major dense matrix of `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(CmgError::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows.saturating_mul(cols),
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f32) {
        self.data[r * self.cols + c] = value;
    }

    /// Appends one row; `row.len()` must equal `cols`.
    pub fn push_row(&mut self, row: &[f32]) {
        assert_eq!(row.len(), self.cols, "row width");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }
}

/// `out = x · w` for a row vector `x` of length `w.rows()`.
pub fn vec_mat(x: &[f32], w: &Matrix) -> Vec<f32> {
    debug_assert_eq!(x.len(), w.rows());
    let mut out = vec![0.0f32; w.cols()];
    for (xi, wrow) in x.iter().zip(w.iter_rows()) {
        if *xi == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(wrow) {
            *o += xi * wv;
        }
    }
    out
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A probability vector over a vocabulary (or over attention keys).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Distribution(Vec<f32>);

impl Distribution {
    /// Validates non-negativity and unit mass.
    pub fn new(probs: Vec<f32>) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(CmgError::InvalidParams(
                "distribution entries must be finite and non-negative".into(),
            ));
        }
        let total: f64 = probs.iter().map(|&p| p as f64).sum();
        if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(CmgError::InvalidParams(format!(
                "distribution sums to {total}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }
}

/// Softmax over the positions not listed in `excluded`.
///
/// Excluded positions are removed from the normalization support, so they
/// get probability exactly zero regardless of their score.
pub fn masked_softmax(scores: &[f32], excluded: &[usize]) -> Result<Distribution> {
    let mut keep = vec![true; scores.len()];
    for &i in excluded {
        if let Some(k) = keep.get_mut(i) {
            *k = false;
        }
    }
    softmax_where(scores, &keep).map(Distribution)
}

pub fn softmax(scores: &[f32]) -> Result<Distribution> {
    masked_softmax(scores, &[])
}

/// Softmax restricted to `keep[i] == true`; other entries are `0.0`.
pub(crate) fn softmax_where(scores: &[f32], keep: &[bool]) -> Result<Vec<f32>> {
    debug_assert_eq!(scores.len(), keep.len());
    let max = scores
        .iter()
        .zip(keep)
        .filter(|(_, k)| **k)
        .map(|(s, _)| *s)
        .fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return Err(CmgError::EmptySupport);
    }
    let mut exps = vec![0.0f64; scores.len()];
    let mut total = 0.0f64;
    for ((e, s), k) in exps.iter_mut().zip(scores).zip(keep) {
        if *k {
            *e = ((*s - max) as f64).exp();
            total += *e;
        }
    }
    Ok(exps.into_iter().map(|e| (e / total) as f32).collect())
}

/// Natural-log softmax in `f64`.
pub fn log_softmax(scores: &[f32]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = scores.iter().map(|&s| (s as f64 - max).exp()).sum::<f64>().ln() + max;
    scores.iter().map(|&s| s as f64 - lse).collect()
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(CmgError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(CmgError::DegenerateVector);
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0) as f32)
}

/// `KL(p ‖ q)` in nats. Returns `f64::INFINITY` when `p` puts mass where `q`
/// has none.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64> {
    kl_divergence_slices(p.probs(), q.probs())
}

pub(crate) fn kl_divergence_slices(p: &[f32], q: &[f32]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(CmgError::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let mut total = 0.0f64;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi <= 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Ok(f64::INFINITY);
        }
        let (pi, qi) = (pi as f64, qi as f64);
        total += pi * (pi / qi).ln();
    }
    // Rounding can leave tiny negative totals for p ≈ q.
    Ok(total.max(0.0))
}

/// `KL(softmax(p) ‖ softmax(q))` in nats, computed from logits in `f64` so
/// underflowed probabilities never produce an infinite result.
pub fn kl_from_logits(p_logits: &[f32], q_logits: &[f32]) -> Result<f64> {
    if p_logits.len() != q_logits.len() {
        return Err(CmgError::LengthMismatch {
            left: p_logits.len(),
            right: q_logits.len(),
        });
    }
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let total: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    Ok(total.max(0.0))
}

/// Indices of the `k` largest values, largest first; equal values keep the
/// lower index first.
pub fn top_k_indices(values: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| descending(values[a], values[b]).then(a.cmp(&b)));
    order.truncate(k.min(values.len()));
    order
}

fn descending(a: f32, b: f32) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// First index of the maximum value.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Nucleus sampling with temperature.
///
/// Temperature divides the log-probabilities; the support is then the
/// shortest prefix of tokens, by descending tempered probability, whose mass
/// reaches `top_p`. One uniform draw is consumed per call.
pub fn sample_top_p<R: Rng + ?Sized>(dist: &Distribution, top_p: f32, temperature: f32, rng: &mut R) -> Result<usize> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(CmgError::InvalidParams(format!("top_p {top_p} not in (0, 1]")));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(CmgError::InvalidParams(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let probs = dist.probs();
    let inv_t = 1.0 / temperature as f64;
    let logs: Vec<f64> = probs
        .iter()
        .map(|&p| {
            if p > 0.0 {
                (p as f64).ln() * inv_t
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();

    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut support = Vec::new();
    let mut mass = 0.0f64;
    for &i in &order {
        if weights[i] <= 0.0 {
            break;
        }
        support.push(i);
        mass += weights[i] / total;
        if mass >= top_p as f64 {
            break;
        }
    }

    let u: f64 = rng.random::<f64>() * mass;
    let mut acc = 0.0f64;
    for &i in &support {
        acc += weights[i] / total;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(*support.last().unwrap_or(&order[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f32, b: f32, tol: f32) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn masked_softmax_excludes_and_renormalizes() {
        // e / (e + 1) = 0.731059, 1 / (e + 1) = 0.268941
        let d = masked_softmax(&[1.0, 123.0, 0.0], &[1]).unwrap();
        assert!(close(d.probs()[0], 0.7311, 1e-4));
        assert_eq!(d.probs()[1], 0.0);
        assert!(close(d.probs()[2], 0.2689, 1e-4));
    }

    #[test]
    fn masked_softmax_uniform_and_empty() {
        let d = masked_softmax(&[2.5, 2.5, 2.5], &[]).unwrap();
        for p in d.probs() {
            assert!(close(*p, 1.0 / 3.0, 1e-7));
        }
        assert!(matches!(
            masked_softmax(&[1.0, 2.0], &[0, 1]),
            Err(CmgError::EmptySupport)
        ));
    }

    #[test]
    fn cosine_examples() {
        assert!(close(cosine_similarity(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 1.0, 1e-6));
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
        assert!(close(
            cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap(),
            std::f32::consts::FRAC_1_SQRT_2,
            1e-6
        ));
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]),
            Err(CmgError::DegenerateVector)
        ));
    }

    #[test]
    fn kl_examples() {
        let p = Distribution::new(vec![0.5, 0.5]).unwrap();
        let q = Distribution::new(vec![0.9, 0.1]).unwrap();
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        // 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1) = 0.510826
        assert!((kl_divergence(&p, &q).unwrap() - 0.5108).abs() < 1e-3);
        let a = Distribution::new(vec![1.0, 0.0]).unwrap();
        let b = Distribution::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(kl_divergence(&a, &b).unwrap(), f64::INFINITY);
    }

    #[test]
    fn kl_from_logits_matches_probability_form() {
        // ln-odds of [0.5, 0.5] and [0.9, 0.1]
        let kl = kl_from_logits(&[0.0, 0.0], &[9f32.ln(), 0.0]).unwrap();
        assert!((kl - 0.510826).abs() < 1e-5);
        assert_eq!(kl_from_logits(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(kl_from_logits(&[0.0, -200.0], &[-200.0, 0.0]).unwrap().is_finite());
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_indices(&[0.5, 0.3, 0.2], 1), vec![0]);
        assert!(top_k_indices(&[0.5, 0.3, 0.2], 0).is_empty());
        assert_eq!(top_k_indices(&[0.4, 0.4, 0.1], 1), vec![0]);
    }

    #[test]
    fn top_p_examples() {
        let d = Distribution::new(vec![0.1, 0.6, 0.3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            assert_eq!(sample_top_p(&d, 1.0, 1e-4, &mut rng).unwrap(), 1);
        }
        let d = Distribution::new(vec![0.95, 0.04, 0.01]).unwrap();
        for _ in 0..200 {
            assert_eq!(sample_top_p(&d, 0.9, 1.0, &mut rng).unwrap(), 0);
        }
        let d = Distribution::new(vec![0.25, 0.25, 0.3, 0.2]).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| sample_top_p(&d, 0.9, 0.7, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
    }

    #[test]
    fn top_p_rejects_bad_params() {
        let d = Distribution::new(vec![1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_top_p(&d, 0.0, 1.0, &mut rng).is_err());
        assert!(sample_top_p(&d, 0.5, 0.0, &mut rng).is_err());
    }

    fn random_dist(raw: &[f32]) -> Distribution {
        softmax(raw).unwrap()
    }

    proptest! {
        #[test]
        fn masked_softmax_mass_and_zeros(
            scores in prop::collection::vec(-20.0f32..20.0, 1..64),
            mask_bits in prop::collection::vec(any::<bool>(), 64),
        ) {
            let excluded: Vec<usize> = (0..scores.len()).filter(|&i| mask_bits[i]).collect();
            if excluded.len() == scores.len() {
                prop_assert!(masked_softmax(&scores, &excluded).is_err());
            } else {
                let d = masked_softmax(&scores, &excluded).unwrap();
                let total: f64 = d.probs().iter().map(|&p| p as f64).sum();
                prop_assert!((total - 1.0).abs() <= 1e-6);
                for &i in &excluded {
                    prop_assert_eq!(d.probs()[i], 0.0);
                }
            }
        }

        #[test]
        fn cosine_scale_invariant(
            a in prop::collection::vec(-5.0f32..5.0, 2..32),
            c in 0.01f32..100.0,
        ) {
            prop_assume!(a.iter().any(|x| x.abs() > 1e-3));
            let scaled: Vec<f32> = a.iter().map(|x| x * c).collect();
            let s = cosine_similarity(&scaled, &a).unwrap();
            prop_assert!((s - 1.0).abs() <= 1e-5);
        }

        #[test]
        fn kl_nonnegative_and_zero_on_identity(
            a in prop::collection::vec(-6.0f32..6.0, 2..32),
            b in prop::collection::vec(-6.0f32..6.0, 32),
        ) {
            let p = random_dist(&a);
            let q = random_dist(&b[..a.len()]);
            prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
            prop_assert!(kl_divergence(&p, &p).unwrap() <= 1e-9);
        }

        #[test]
        fn top_k_matches_sort_oracle(
            values in prop::collection::vec(-3i8..3, 0..64),
            k_frac in 0.0f64..=1.0,
        ) {
            // Small integer range forces plenty of ties.
            let values: Vec<f32> = values.into_iter().map(f32::from).collect();
            let k = ((values.len() as f64) * k_frac).round() as usize;
            let mut pairs: Vec<(f32, usize)> = values.iter().copied().zip(0..).collect();
            pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
            let oracle: Vec<usize> = pairs.into_iter().take(k).map(|p| p.1).collect();
            prop_assert_eq!(top_k_indices(&values, k), oracle);
        }
    }
}
