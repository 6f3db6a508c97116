//! The guided decode loop.
//!
//! One request runs an expert prefill, scores every layer by how little it
//! rotates the residual stream, and masks the lowest-scoring layers in a
//! separate amateur pass. Both passes keep their own cache. Each step fuses
//! the two next-token rows as `expert + α·(expert − amateur)`, which is the
//! logit form of `q·(q/q_M)^α`, and samples from the result.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{EmptyRowPolicy, GammaMasker, GuidanceMask, MaskPlan, RowMasker};
use crate::error::{CmgError, Result};
use crate::layout::{ModalityLayout, SpanRole};
use crate::model::{DecodeCache, ForwardTrace, ModelWeights, PassKind, TraceOptions};
use crate::numerics::{argmax, cosine_similarity, kl_from_logits, log_softmax, sample_top_p, softmax, top_k_indices};

/// Full logit rows are written to step records only up to this vocabulary
/// size; top entries are always written.
pub const INLINE_LOGITS_LIMIT: usize = 4096;

/// Number of top entries kept per logit row in a step record.
pub const TOP_ENTRIES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler {
    Greedy,
    TopP { top_p: f32, temperature: f32 },
    Beam { width: usize },
}

/// How the amateur pass degrades the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmateurMode {
    /// γ-masks at the selected layers.
    #[default]
    Gamma,
    /// Every visual-related position dropped at every layer.
    FullRemoval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub alpha: f32,
    pub gamma: f32,
    pub tau: f64,
    /// Cap on dropped positions per amateur forward invocation.
    pub n0: Option<usize>,
    pub sampler: Sampler,
    pub seed: u64,
    pub max_new_tokens: usize,
    /// Masked layers, bypassing selection by `tau`.
    pub layers: Option<BTreeSet<usize>>,
    pub eos_token: Option<u32>,
    pub amateur: AmateurMode,
}

impl Default for DecodeParams {
    /// α = 0.3, γ = 0.5, τ = 0.5, greedy.
    fn default() -> Self {
        Self {
            alpha: 0.3,
            gamma: 0.5,
            tau: 0.5,
            n0: None,
            sampler: Sampler::Greedy,
            seed: 0,
            max_new_tokens: 16,
            layers: None,
            eos_token: None,
            amateur: AmateurMode::Gamma,
        }
    }
}

impl DecodeParams {
    /// α = 0.1, γ = 0.5, τ = 0.1.
    pub fn mme_profile() -> Self {
        Self {
            alpha: 0.1,
            tau: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let bad = |msg: String| Err(CmgError::InvalidParams(msg));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha {} must be finite and >= 0", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} not in [0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} not in [0, 1]", self.tau));
        }
        match self.sampler {
            Sampler::Greedy => {}
            Sampler::TopP { top_p, temperature } => {
                if !(top_p > 0.0 && top_p <= 1.0) {
                    return bad(format!("top_p {top_p} not in (0, 1]"));
                }
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return bad(format!("temperature {temperature} must be positive"));
                }
            }
            Sampler::Beam { width } => {
                if width == 0 {
                    return bad("beam width must be at least 1".into());
                }
            }
        }
        if let Some(&l) = self.layers.as_ref().and_then(|s| s.iter().find(|&&l| l >= num_layers)) {
            return bad(format!("layer {l} out of range for {num_layers} layers"));
        }
        Ok(())
    }
}

/// Layer scores and the masked set derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    /// Mean input/output cosine similarity per layer.
    pub scores: Vec<f32>,
    /// Largest selected score; `None` when nothing is selected.
    pub threshold: Option<f32>,
    pub selected: BTreeSet<usize>,
}

impl LayerSelection {
    /// A selection fixed by the caller; scores are kept for reporting.
    pub fn explicit(scores: Vec<f32>, selected: BTreeSet<usize>) -> Self {
        let threshold = selected
            .iter()
            .filter_map(|&l| scores.get(l).copied())
            .fold(None, |acc: Option<f32>, s| Some(acc.map_or(s, |a| a.max(s))));
        Self {
            scores,
            threshold,
            selected,
        }
    }
}

/// Mean over positions of `cos(X_i[pos], Y_i[pos])` for every layer.
pub fn score_layers(trace: &ForwardTrace) -> Result<Vec<f32>> {
    if trace.hidden_in.is_empty() {
        return Err(CmgError::ShapeMismatch("trace has no hidden states".into()));
    }
    trace
        .hidden_in
        .iter()
        .zip(&trace.hidden_out)
        .map(|(x, y)| {
            if x.rows() == 0 {
                return Err(CmgError::ShapeMismatch("trace has no positions".into()));
            }
            let mut total = 0.0f64;
            for (a, b) in x.iter_rows().zip(y.iter_rows()) {
                total += cosine_similarity(a, b)? as f64;
            }
            Ok((total / x.rows() as f64) as f32)
        })
        .collect()
}

/// Number of layers selected out of `n` at proportion `tau`.
pub fn selection_size(tau: f64, n: usize) -> usize {
    if tau <= 0.0 || n == 0 {
        return 0;
    }
    // The epsilon keeps grid values such as 0.35 · 20 from flooring to 6.
    let k = (tau * n as f64 + 1e-9).floor() as usize;
    k.clamp(1, n)
}

/// The `max(1, ⌊τ·n⌋)` lowest-scoring layers (none for τ = 0); ties go to
/// the lower layer index.
pub fn select_layers(scores: &[f32], tau: f64) -> LayerSelection {
    let k = selection_size(tau, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let selected: BTreeSet<usize> = order[..k].iter().copied().collect();
    LayerSelection {
        scores: scores.to_vec(),
        threshold: k.checked_sub(1).map(|i| scores[order[i]]),
        selected,
    }
}

/// `(1+α)·expert − α·amateur`, computed as `expert + α·(expert − amateur)`
/// so that equal rows come back unchanged.
pub fn fuse_logits(expert: &[f32], amateur: &[f32], alpha: f32) -> Result<Vec<f32>> {
    if expert.len() != amateur.len() {
        return Err(CmgError::LengthMismatch {
            left: expert.len(),
            right: amateur.len(),
        });
    }
    Ok(expert.iter().zip(amateur).map(|(&e, &a)| e + alpha * (e - a)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenLogit {
    pub token: u32,
    pub logit: f32,
}

fn top_entries(logits: &[f32]) -> Vec<TokenLogit> {
    top_k_indices(logits, TOP_ENTRIES)
        .into_iter()
        .map(|i| TokenLogit {
            token: i as u32,
            logit: logits[i],
        })
        .collect()
}

/// Attention mass of one query row on each span, averaged over heads.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RoleMass {
    pub system: f32,
    pub image: f32,
    pub question: f32,
    pub generated: f32,
}

impl RoleMass {
    pub fn get(&self, role: SpanRole) -> f32 {
        match role {
            SpanRole::System => self.system,
            SpanRole::Image => self.image,
            SpanRole::Question => self.question,
            SpanRole::Generated => self.generated,
        }
    }

    pub fn total(&self) -> f32 {
        self.system + self.image + self.question + self.generated
    }

    /// Mean over rows of the mass each row places on each span. Rows that
    /// attend to nothing, because a mask emptied them, are left out.
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a [f32]>, layout: &ModalityLayout) -> Self {
        let mut sums = [0.0f64; 4];
        let mut count = 0usize;
        for row in rows {
            if row.iter().all(|&w| w == 0.0) {
                continue;
            }
            count += 1;
            for span in layout.spans() {
                let end = span.end().min(row.len());
                if span.start < end {
                    sums[span.role.index()] += row[span.start..end].iter().map(|&w| w as f64).sum::<f64>();
                }
            }
        }
        let n = count.max(1) as f64;
        Self {
            system: (sums[0] / n) as f32,
            image: (sums[1] / n) as f32,
            question: (sums[2] / n) as f32,
            generated: (sums[3] / n) as f32,
        }
    }
}

/// Diagnostics for one generated token. Written as one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Sequence position of the query row whose logits chose `token`.
    pub position: usize,
    pub token: u32,
    /// Layout of the positions processed when `token` was chosen.
    pub layout: ModalityLayout,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_logits: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amateur_logits: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused_logits: Option<Vec<f32>>,
    pub expert_top: Vec<TokenLogit>,
    pub amateur_top: Vec<TokenLogit>,
    pub fused_top: Vec<TokenLogit>,
    /// Expert attention of the query row, per layer.
    pub attention_mass: Vec<RoleMass>,
    /// `KL(amateur ‖ expert)` of the next-token distributions, nats.
    pub kl: f64,
    /// The same divergence read out from each layer's output through the
    /// final norm and output head.
    pub kl_per_layer: Vec<f64>,
    /// Amateur-pass drops made while computing this step's logits.
    pub mask: GuidanceMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    /// Generated tokens, excluding the prompt.
    pub tokens: Vec<u32>,
    pub records: Vec<StepRecord>,
    pub selection: LayerSelection,
    /// Sum of fused log-probabilities of the generated tokens.
    pub log_prob: f64,
}

/// Everything one stream exposes after processing its newest position.
#[derive(Debug, Clone)]
struct RowView {
    logits: Vec<f32>,
    attention: Vec<Vec<Vec<f32>>>,
    hidden_out: Vec<Vec<f32>>,
    mask: GuidanceMask,
}

impl RowView {
    fn from_trace(trace: &ForwardTrace) -> Self {
        let last = trace.seq_len() - 1;
        Self {
            logits: trace.last_logits().expect("prefill logits").to_vec(),
            attention: trace
                .attention
                .iter()
                .map(|heads| heads.iter().map(|m| m.row(last).to_vec()).collect())
                .collect(),
            hidden_out: trace.hidden_out.iter().map(|m| m.row(last).to_vec()).collect(),
            mask: trace.mask.clone(),
        }
    }
}

/// Expert and amateur streams of one hypothesis.
#[derive(Debug, Clone)]
struct Streams {
    expert: DecodeCache,
    /// `None` when the amateur is identical to the expert.
    amateur: Option<DecodeCache>,
    expert_row: RowView,
    amateur_row: Option<RowView>,
}

/// Settings that stay fixed for a whole request.
struct Session<'a> {
    weights: &'a ModelWeights,
    params: &'a DecodeParams,
    layers: BTreeSet<usize>,
    masker: &'a dyn RowMasker,
}

impl Session<'_> {
    fn plan(&self) -> MaskPlan<'_> {
        let empty_rows = if self.masker.gamma().is_some_and(|g| g >= 1.0) {
            EmptyRowPolicy::ZeroOutput
        } else {
            EmptyRowPolicy::Error
        };
        MaskPlan::new(&self.layers, self.masker)
            .with_n0(self.params.n0)
            .with_empty_rows(empty_rows)
    }

    fn amateur_prefill(&self, prompt: &[u32], layout: &ModalityLayout) -> Result<(DecodeCache, RowView)> {
        let plan = self.plan();
        let (trace, cache) =
            self.weights
                .prefill(prompt, layout, Some(&plan), TraceOptions::default(), PassKind::Amateur)?;
        Ok((cache, RowView::from_trace(&trace)))
    }

    fn advance(&self, streams: &mut Streams, token: u32) -> Result<()> {
        let step = self.weights.forward_step(token, &mut streams.expert, None)?;
        streams.expert_row = RowView {
            logits: step.logits,
            attention: step.attention,
            hidden_out: step.hidden_out,
            mask: step.mask,
        };
        if let Some(cache) = streams.amateur.as_mut() {
            let plan = self.plan();
            let step = self.weights.forward_step(token, cache, Some(&plan))?;
            streams.amateur_row = Some(RowView {
                logits: step.logits,
                attention: step.attention,
                hidden_out: step.hidden_out,
                mask: step.mask,
            });
        }
        Ok(())
    }

    fn fused(&self, streams: &Streams) -> Result<Vec<f32>> {
        let amateur = streams.amateur_row.as_ref().unwrap_or(&streams.expert_row);
        fuse_logits(&streams.expert_row.logits, &amateur.logits, self.params.alpha)
    }

    fn record(&self, streams: &Streams, fused: &[f32], step: usize, token: u32) -> Result<StepRecord> {
        let e = &streams.expert_row;
        let a = streams.amateur_row.as_ref().unwrap_or(e);
        let layout = streams.expert.layout().clone();
        let inline = e.logits.len() <= INLINE_LOGITS_LIMIT;
        let kl_per_layer = e
            .hidden_out
            .iter()
            .zip(&a.hidden_out)
            .map(|(he, ha)| {
                if streams.amateur_row.is_none() {
                    return Ok(0.0);
                }
                kl_from_logits(&self.weights.readout(ha), &self.weights.readout(he))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(StepRecord {
            step,
            position: layout.len() - 1,
            token,
            expert_logits: inline.then(|| e.logits.clone()),
            amateur_logits: inline.then(|| a.logits.clone()),
            fused_logits: inline.then(|| fused.to_vec()),
            expert_top: top_entries(&e.logits),
            amateur_top: top_entries(&a.logits),
            fused_top: top_entries(fused),
            attention_mass: e
                .attention
                .iter()
                .map(|heads| RoleMass::from_rows(heads.iter().map(Vec::as_slice), &layout))
                .collect(),
            kl: kl_from_logits(&a.logits, &e.logits)?,
            kl_per_layer,
            mask: a.mask.clone(),
            layout,
        })
    }
}

fn check_prompt(weights: &ModelWeights, prompt: &[u32], layout: &ModalityLayout, params: &DecodeParams) -> Result<()> {
    let c = weights.config();
    params.validate(c.num_layers)?;
    layout.check_token_count(prompt.len())?;
    if layout.generated_len() != 0 {
        return Err(CmgError::InvalidLayout(
            "prompt layout already has generated tokens".into(),
        ));
    }
    if prompt.is_empty() {
        return Err(CmgError::InvalidLayout("empty prompt".into()));
    }
    let needed = prompt.len() + params.max_new_tokens;
    if needed > c.max_seq_len {
        return Err(CmgError::SequenceTooLong {
            len: needed,
            max: c.max_seq_len,
        });
    }
    Ok(())
}

/// Guided decoding. Dispatches to [`decode_beam`] for the beam sampler.
pub fn decode(
    weights: &ModelWeights,
    prompt: &[u32],
    layout: &ModalityLayout,
    params: &DecodeParams,
) -> Result<DecodeOutput> {
    run(weights, prompt, layout, params, true, None)
}

/// Guided decoding with a caller-supplied rule choosing the amateur's
/// dropped keys at the masked layers, in place of the γ-mask.
pub fn decode_with_masker(
    weights: &ModelWeights,
    prompt: &[u32],
    layout: &ModalityLayout,
    params: &DecodeParams,
    masker: &dyn RowMasker,
) -> Result<DecodeOutput> {
    run(weights, prompt, layout, params, true, Some(masker))
}

/// Expert-only decoding with the same sampler, seed and records; the
/// amateur columns repeat the expert.
pub fn decode_baseline(
    weights: &ModelWeights,
    prompt: &[u32],
    layout: &ModalityLayout,
    params: &DecodeParams,
) -> Result<DecodeOutput> {
    run(weights, prompt, layout, params, false, None)
}

/// Beam search over accumulated fused log-probabilities.
pub fn decode_beam(
    weights: &ModelWeights,
    prompt: &[u32],
    layout: &ModalityLayout,
    params: &DecodeParams,
) -> Result<DecodeOutput> {
    if !matches!(params.sampler, Sampler::Beam { .. }) {
        return Err(CmgError::InvalidParams("decode_beam needs the beam sampler".into()));
    }
    decode(weights, prompt, layout, params)
}

fn run(
    weights: &ModelWeights,
    prompt: &[u32],
    layout: &ModalityLayout,
    params: &DecodeParams,
    guided: bool,
    masker: Option<&dyn RowMasker>,
) -> Result<DecodeOutput> {
    check_prompt(weights, prompt, layout, params)?;
    let num_layers = weights.config().num_layers;
    let (expert_trace, expert_cache) =
        weights.prefill(prompt, layout, None, TraceOptions::default(), PassKind::Expert)?;
    let scores = score_layers(&expert_trace)?;
    let selection = match &params.layers {
        Some(layers) => LayerSelection::explicit(scores, layers.clone()),
        None => select_layers(&scores, params.tau),
    };
    let (layers, gamma) = match params.amateur {
        AmateurMode::Gamma => (selection.selected.clone(), params.gamma),
        AmateurMode::FullRemoval => ((0..num_layers).collect(), 1.0),
    };
    let guided = guided && !layers.is_empty();
    log::debug!(
        "layer scores {:?}, masked layers {:?}, guided {guided}",
        selection.scores,
        layers
    );
    let gamma_masker = GammaMasker { gamma };
    let session = Session {
        weights,
        params,
        layers,
        masker: masker.unwrap_or(&gamma_masker),
    };
    let (amateur, amateur_row) = if guided {
        let (cache, row) = session.amateur_prefill(prompt, layout)?;
        (Some(cache), Some(row))
    } else {
        (None, None)
    };
    let streams = Streams {
        expert_row: RowView::from_trace(&expert_trace),
        expert: expert_cache,
        amateur,
        amateur_row,
    };
    let (tokens, records, log_prob) = match params.sampler {
        Sampler::Beam { width } => beam_loop(&session, streams, width)?,
        _ => sample_loop(&session, streams)?,
    };
    Ok(DecodeOutput {
        tokens,
        records,
        selection,
        log_prob,
    })
}

fn sample_loop(session: &Session<'_>, mut streams: Streams) -> Result<(Vec<u32>, Vec<StepRecord>, f64)> {
    let params = session.params;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut tokens = Vec::with_capacity(params.max_new_tokens);
    let mut records = Vec::with_capacity(params.max_new_tokens);
    let mut log_prob = 0.0;
    for step in 0..params.max_new_tokens {
        let fused = session.fused(&streams)?;
        let token = match params.sampler {
            Sampler::TopP { top_p, temperature } => {
                sample_top_p(&softmax(&fused)?, top_p, temperature, &mut rng)? as u32
            }
            _ => argmax(&fused) as u32,
        };
        log_prob += log_softmax(&fused)[token as usize];
        records.push(session.record(&streams, &fused, step, token)?);
        tokens.push(token);
        if Some(token) == params.eos_token || step + 1 == params.max_new_tokens {
            break;
        }
        session.advance(&mut streams, token)?;
    }
    Ok((tokens, records, log_prob))
}

struct Beam {
    streams: Streams,
    tokens: Vec<u32>,
    records: Vec<StepRecord>,
    log_prob: f64,
    finished: bool,
}

/// Each step, every live beam proposes its `width` best continuations and
/// finished beams propose themselves; the `width` best proposals survive.
/// Ties keep the earlier beam, then the lower token id.
fn beam_loop(session: &Session<'_>, streams: Streams, width: usize) -> Result<(Vec<u32>, Vec<StepRecord>, f64)> {
    let params = session.params;
    let mut beams = vec![Beam {
        streams,
        tokens: Vec::new(),
        records: Vec::new(),
        log_prob: 0.0,
        finished: params.max_new_tokens == 0,
    }];
    while beams.iter().any(|b| !b.finished) {
        // (score, beam index, token or None for a finished beam)
        let mut proposals: Vec<(f64, usize, Option<u32>)> = Vec::new();
        let mut fused_rows = Vec::with_capacity(beams.len());
        for (bi, beam) in beams.iter().enumerate() {
            if beam.finished {
                proposals.push((beam.log_prob, bi, None));
                fused_rows.push(Vec::new());
                continue;
            }
            let fused = session.fused(&beam.streams)?;
            let lp = log_softmax(&fused);
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| {
                lp[b]
                    .partial_cmp(&lp[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            for &t in &order[..width.min(lp.len())] {
                proposals.push((beam.log_prob + lp[t], bi, Some(t as u32)));
            }
            fused_rows.push(fused);
        }
        proposals.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        proposals.truncate(width);

        let mut next = Vec::with_capacity(width);
        for (score, bi, token) in proposals {
            let parent = &beams[bi];
            let Some(token) = token else {
                next.push(Beam {
                    streams: parent.streams.clone(),
                    tokens: parent.tokens.clone(),
                    records: parent.records.clone(),
                    log_prob: score,
                    finished: true,
                });
                continue;
            };
            let step = parent.tokens.len();
            let mut records = parent.records.clone();
            records.push(session.record(&parent.streams, &fused_rows[bi], step, token)?);
            let mut tokens = parent.tokens.clone();
            tokens.push(token);
            let finished = Some(token) == params.eos_token || tokens.len() == params.max_new_tokens;
            let mut streams = parent.streams.clone();
            if !finished {
                session.advance(&mut streams, token)?;
            }
            next.push(Beam {
                streams,
                tokens,
                records,
                log_prob: score,
                finished,
            });
        }
        beams = next;
    }
    // Beams are kept sorted, so the first is the best.
    let best = beams.swap_remove(0);
    Ok((best.tokens, best.records, best.log_prob))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, ModelConfig};
    use crate::numerics::{softmax, Matrix};

    fn tiny() -> (ModelWeights, Vec<u32>, ModalityLayout) {
        let w = init_weights(&ModelConfig::tiny(), 11).unwrap();
        (w, vec![1, 2, 8, 9, 10, 11, 3, 4, 5], ModalityLayout::new(2, 4, 3))
    }

    #[test]
    fn select_layers_examples() {
        let s = select_layers(&[0.9, 0.2, 0.7, 0.4], 0.5);
        assert_eq!(s.selected, [1, 3].into());
        assert_eq!(s.threshold, Some(0.4));
        let s = select_layers(&[0.9, 0.2, 0.7, 0.4], 0.0);
        assert!(s.selected.is_empty());
        assert_eq!(s.threshold, None);
        assert_eq!(selection_size(0.1, 32), 3);
        assert_eq!(selection_size(0.1, 4), 1);
        assert_eq!(selection_size(0.35, 20), 7);
    }

    #[test]
    fn select_layers_breaks_ties_by_index() {
        let s = select_layers(&[0.5, 0.5, 0.5], 0.5);
        assert_eq!(s.selected, [0].into());
    }

    #[test]
    fn fuse_examples() {
        assert_eq!(fuse_logits(&[2.0, 0.0], &[1.0, 0.0], 0.3).unwrap(), vec![2.3, 0.0]);
        let e = [0.3, -1.2, 4.0];
        assert_eq!(fuse_logits(&e, &[9.0, 9.0, 9.0], 0.0).unwrap(), e.to_vec());
        assert_eq!(fuse_logits(&e, &e, 0.7).unwrap(), e.to_vec());
    }

    #[test]
    fn score_layers_identity_and_antipodal() {
        let x = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f32 + 1.0);
        let neg = Matrix::from_fn(3, 4, |r, c| -x.get(r, c));
        let trace = ForwardTrace {
            layout: ModalityLayout::new(1, 1, 1),
            tokens: vec![0, 0, 0],
            hidden_in: vec![x.clone(), x.clone()],
            hidden_out: vec![x.clone(), neg],
            attention: Vec::new(),
            raw_scores: None,
            logits: None,
            mask: GuidanceMask::default(),
        };
        let s = score_layers(&trace).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-6);
        assert!((s[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn params_validation() {
        let n = 4;
        assert!(DecodeParams::default().validate(n).is_ok());
        let bad = [
            DecodeParams {
                gamma: 1.5,
                ..Default::default()
            },
            DecodeParams {
                tau: -0.1,
                ..Default::default()
            },
            DecodeParams {
                alpha: -1.0,
                ..Default::default()
            },
            DecodeParams {
                sampler: Sampler::Beam { width: 0 },
                ..Default::default()
            },
            DecodeParams {
                sampler: Sampler::TopP {
                    top_p: 0.0,
                    temperature: 0.7,
                },
                ..Default::default()
            },
            DecodeParams {
                layers: Some([4].into()),
                ..Default::default()
            },
        ];
        for p in bad {
            assert!(p.validate(n).is_err(), "{p:?}");
        }
    }

    #[test]
    fn alpha_zero_matches_baseline() {
        let (w, prompt, layout) = tiny();
        let params = DecodeParams {
            alpha: 0.0,
            max_new_tokens: 6,
            ..Default::default()
        };
        let guided = decode(&w, &prompt, &layout, &params).unwrap();
        let base = decode_baseline(&w, &prompt, &layout, &params).unwrap();
        assert_eq!(guided.tokens, base.tokens);
        assert_eq!(guided.tokens.len(), 6);
        assert!(guided.records.iter().any(|r| r.kl > 0.0));
    }

    #[test]
    fn tau_zero_makes_amateur_equal_expert() {
        let (w, prompt, layout) = tiny();
        let params = DecodeParams {
            tau: 0.0,
            alpha: 1.0,
            max_new_tokens: 4,
            ..Default::default()
        };
        let out = decode(&w, &prompt, &layout, &params).unwrap();
        for r in &out.records {
            assert_eq!(r.expert_logits, r.fused_logits);
            assert_eq!(r.kl, 0.0);
            assert!(r.mask.rows.is_empty());
        }
    }

    #[test]
    fn fused_record_follows_formula() {
        let (w, prompt, layout) = tiny();
        let params = DecodeParams {
            max_new_tokens: 3,
            ..Default::default()
        };
        let out = decode(&w, &prompt, &layout, &params).unwrap();
        for r in &out.records {
            let e = r.expert_logits.as_ref().unwrap();
            let a = r.amateur_logits.as_ref().unwrap();
            let f = r.fused_logits.as_ref().unwrap();
            for i in 0..e.len() {
                assert!((f[i] - (1.3 * e[i] - 0.3 * a[i])).abs() < 1e-5);
            }
            assert_eq!(r.fused_top[0].token, argmax(f) as u32);
            let total: f32 = r.attention_mass.iter().map(RoleMass::total).sum::<f32>() / r.attention_mass.len() as f32;
            assert!((total - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn eos_stops_generation() {
        let (w, prompt, layout) = tiny();
        let free = decode(
            &w,
            &prompt,
            &layout,
            &DecodeParams {
                max_new_tokens: 5,
                ..Default::default()
            },
        )
        .unwrap();
        let eos = free.tokens[1];
        let params = DecodeParams {
            max_new_tokens: 5,
            eos_token: Some(eos),
            ..Default::default()
        };
        let out = decode(&w, &prompt, &layout, &params).unwrap();
        let stop = free.tokens.iter().position(|&t| t == eos).unwrap();
        assert_eq!(out.tokens, free.tokens[..=stop].to_vec());
    }

    #[test]
    fn top_p_is_seed_deterministic() {
        let (w, prompt, layout) = tiny();
        let params = DecodeParams {
            sampler: Sampler::TopP {
                top_p: 0.9,
                temperature: 0.7,
            },
            seed: 7,
            max_new_tokens: 8,
            ..Default::default()
        };
        let a = decode(&w, &prompt, &layout, &params).unwrap();
        let b = decode(&w, &prompt, &layout, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn beam_width_one_is_greedy() {
        let (w, prompt, layout) = tiny();
        let greedy = DecodeParams {
            max_new_tokens: 5,
            ..Default::default()
        };
        let beam = DecodeParams {
            sampler: Sampler::Beam { width: 1 },
            ..greedy.clone()
        };
        let g = decode(&w, &prompt, &layout, &greedy).unwrap();
        let b = decode_beam(&w, &prompt, &layout, &beam).unwrap();
        assert_eq!(g.tokens, b.tokens);
        assert!((g.log_prob - b.log_prob).abs() < 1e-9);
    }

    #[test]
    fn full_removal_masks_every_layer() {
        let (w, prompt, layout) = tiny();
        let params = DecodeParams {
            amateur: AmateurMode::FullRemoval,
            max_new_tokens: 2,
            ..Default::default()
        };
        let out = decode(&w, &prompt, &layout, &params).unwrap();
        let mask = &out.records[0].mask;
        assert_eq!(mask.layers(), [0, 1].into());
        assert!(mask.rows.iter().all(|r| r.dropped.len() == r.candidates));
    }

    #[test]
    fn prompt_must_leave_room() {
        let (w, prompt, layout) = tiny();
        let params = DecodeParams {
            max_new_tokens: 30,
            ..Default::default()
        };
        assert!(matches!(
            decode(&w, &prompt, &layout, &params),
            Err(CmgError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn fusion_is_probability_space_pmi() {
        let e = [1.0f32, -0.5, 2.0, 0.1];
        let a = [0.3f32, 0.2, 2.5, -1.0];
        let alpha = 0.3f32;
        let fused = softmax(&fuse_logits(&e, &a, alpha).unwrap()).unwrap();
        let q = softmax(&e).unwrap();
        let qm = softmax(&a).unwrap();
        let raw: Vec<f64> = q
            .probs()
            .iter()
            .zip(qm.probs())
            .map(|(&q, &m)| q as f64 * (q as f64 / m as f64).powf(alpha as f64))
            .collect();
        let z: f64 = raw.iter().sum();
        for (f, r) in fused.probs().iter().zip(&raw) {
            assert!((*f as f64 - r / z).abs() < 1e-6);
        }
    }
}
