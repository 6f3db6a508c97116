//! Attention regions and guidance masks.
//!
//! Every (query, key) pair falls in exactly one [`Region`]. The amateur pass
//! drops keys from the visual-related regions only (inter-visual and
//! cross-modal); inter-textual attention is never touched. A dropped key is
//! removed from the row's softmax support.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layout::ModalityLayout;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    InterVisual,
    InterTextual,
    CrossModal,
    CausallyHidden,
}

impl Region {
    pub fn is_visual_related(self) -> bool {
        matches!(self, Region::InterVisual | Region::CrossModal)
    }
}

pub fn region_of(query: usize, key: usize, layout: &ModalityLayout) -> Region {
    if key > query {
        return Region::CausallyHidden;
    }
    match (layout.is_image(query), layout.is_image(key)) {
        (true, true) => Region::InterVisual,
        (false, false) => Region::InterTextual,
        _ => Region::CrossModal,
    }
}

/// Keys a row may drop: causally visible and visual-related, ascending.
pub fn visual_candidates(query: usize, layout: &ModalityLayout) -> Vec<usize> {
    let image = layout.image();
    if image.len == 0 {
        return Vec::new();
    }
    if layout.is_image(query) {
        // Everything visible is either text before the image or image itself.
        (0..=query).collect()
    } else if query >= image.end() {
        (image.start..image.end()).collect()
    } else {
        Vec::new()
    }
}

/// Number of keys dropped from a row with `candidates` visual keys.
pub fn gamma_budget(gamma: f32, candidates: usize) -> usize {
    ((gamma as f64) * (candidates as f64)).floor() as usize
}

/// The `⌊γ·k⌋` visual keys of this row with the largest raw scores.
///
/// `raw_scores[key]` is the pre-softmax score of `key` for this query; only
/// entries `0..=query` are read. Ties go to the lower key index. The result is
/// sorted ascending.
pub fn build_gamma_mask(raw_scores: &[f32], query: usize, layout: &ModalityLayout, gamma: f32) -> Vec<usize> {
    let candidates = visual_candidates(query, layout);
    let budget = gamma_budget(gamma, candidates.len());
    select_largest(raw_scores, &candidates, budget)
}

fn select_largest(raw_scores: &[f32], candidates: &[usize], budget: usize) -> Vec<usize> {
    if budget == 0 {
        return Vec::new();
    }
    let values: Vec<f32> = candidates.iter().map(|&k| raw_scores[k]).collect();
    let mut picked: Vec<usize> = crate::numerics::top_k_indices(&values, budget)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Everything a masker can see when deciding one attention row.
#[derive(Debug, Clone, Copy)]
pub struct RowContext<'a> {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    /// Pre-softmax scores for keys `0..=query`.
    pub raw_scores: &'a [f32],
    pub layout: &'a ModalityLayout,
}

/// Chooses the keys to drop from one attention row, inside the pass that
/// applies the mask.
pub trait RowMasker: Sync {
    fn dropped_keys(&self, row: &RowContext<'_>) -> Vec<usize>;

    /// Recorded in mask metadata.
    fn gamma(&self) -> Option<f32> {
        None
    }
}

/// Drops the largest γ-portion of each row's visual-related scores.
#[derive(Debug, Clone, Copy)]
pub struct GammaMasker {
    pub gamma: f32,
}

impl RowMasker for GammaMasker {
    fn dropped_keys(&self, row: &RowContext<'_>) -> Vec<usize> {
        build_gamma_mask(row.raw_scores, row.query, row.layout, self.gamma)
    }

    fn gamma(&self) -> Option<f32> {
        Some(self.gamma)
    }
}

/// Same per-row budget as [`GammaMasker`] but keys chosen uniformly at
/// random. Each row draws from its own seeded stream, so the choice does not
/// depend on evaluation order.
#[derive(Debug, Clone, Copy)]
pub struct RandomMasker {
    pub gamma: f32,
    pub seed: u64,
}

impl RowMasker for RandomMasker {
    fn dropped_keys(&self, row: &RowContext<'_>) -> Vec<usize> {
        let candidates = visual_candidates(row.query, row.layout);
        let budget = gamma_budget(self.gamma, candidates.len());
        if budget == 0 {
            return Vec::new();
        }
        let stream = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((row.layer as u64) << 40)
            .wrapping_add((row.head as u64) << 24)
            .wrapping_add(row.query as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let mut picked: Vec<usize> = sample(&mut rng, candidates.len(), budget)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        picked.sort_unstable();
        picked
    }

    fn gamma(&self) -> Option<f32> {
        Some(self.gamma)
    }
}

/// Replays a precomputed [`GuidanceMask`]; rows it does not mention drop
/// nothing.
#[derive(Debug, Clone)]
pub struct StaticMasker {
    rows: HashMap<(usize, usize, usize), Vec<usize>>,
    gamma: Option<f32>,
}

impl StaticMasker {
    pub fn new(mask: &GuidanceMask) -> Self {
        let rows = mask
            .rows
            .iter()
            .map(|r| ((r.layer, r.head, r.query), r.dropped.clone()))
            .collect();
        Self {
            rows,
            gamma: mask.gamma,
        }
    }
}

impl RowMasker for StaticMasker {
    fn dropped_keys(&self, row: &RowContext<'_>) -> Vec<usize> {
        self.rows
            .get(&(row.layer, row.head, row.query))
            .cloned()
            .unwrap_or_default()
    }

    fn gamma(&self) -> Option<f32> {
        self.gamma
    }
}

/// What a forward pass does when a mask removes a row's whole support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyRowPolicy {
    /// Fail with `EmptyAttentionRow`.
    #[default]
    Error,
    /// The row attends to nothing: zero weights, zero attention output.
    ZeroOutput,
}

/// Which layers are masked, by what rule, under which cap.
#[derive(Clone, Copy)]
pub struct MaskPlan<'a> {
    pub layers: &'a BTreeSet<usize>,
    pub masker: &'a dyn RowMasker,
    /// Cap on dropped positions per forward invocation; `None` means no cap.
    pub n0: Option<usize>,
    pub empty_rows: EmptyRowPolicy,
}

impl<'a> MaskPlan<'a> {
    pub fn new(layers: &'a BTreeSet<usize>, masker: &'a dyn RowMasker) -> Self {
        Self {
            layers,
            masker,
            n0: None,
            empty_rows: EmptyRowPolicy::Error,
        }
    }

    pub fn with_n0(mut self, n0: Option<usize>) -> Self {
        self.n0 = n0;
        self
    }

    pub fn with_empty_rows(mut self, policy: EmptyRowPolicy) -> Self {
        self.empty_rows = policy;
        self
    }

    pub fn masks_layer(&self, layer: usize) -> bool {
        self.layers.contains(&layer)
    }
}

impl std::fmt::Debug for MaskPlan<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MaskPlan")
            .field("layers", &self.layers)
            .field("gamma", &self.masker.gamma())
            .field("n0", &self.n0)
            .field("empty_rows", &self.empty_rows)
            .finish()
    }
}

/// Dropped keys for one (layer, head, query) row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRow {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    /// Visual-related keys visible to this row.
    pub candidates: usize,
    pub dropped: Vec<usize>,
}

/// Dropped attention positions of one pass, per (layer, head, query).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidanceMask {
    pub gamma: Option<f32>,
    pub n0: Option<usize>,
    pub rows: Vec<MaskRow>,
}

impl GuidanceMask {
    pub fn total_dropped(&self) -> usize {
        self.rows.iter().map(|r| r.dropped.len()).sum()
    }

    pub fn per_layer_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.rows {
            *counts.entry(r.layer).or_insert(0) += r.dropped.len();
        }
        counts
    }

    pub fn is_empty(&self) -> bool {
        self.total_dropped() == 0
    }

    /// Every dropped `(layer, head, query, key)`.
    pub fn positions(&self) -> BTreeSet<(usize, usize, usize, usize)> {
        self.rows
            .iter()
            .flat_map(|r| r.dropped.iter().map(move |&k| (r.layer, r.head, r.query, k)))
            .collect()
    }

    pub fn layers(&self) -> BTreeSet<usize> {
        self.rows.iter().map(|r| r.layer).collect()
    }

    /// Flat records `{layer, head, query, dropped_keys, gamma, n0}`.
    pub fn dump(&self) -> Vec<MaskDumpEntry> {
        self.rows
            .iter()
            .map(|r| MaskDumpEntry {
                layer: r.layer,
                head: r.head,
                query: r.query,
                dropped_keys: r.dropped.clone(),
                gamma: self.gamma,
                n0: self.n0,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskDumpEntry {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    pub dropped_keys: Vec<usize>,
    pub gamma: Option<f32>,
    pub n0: Option<usize>,
}

/// Drops every visual-related position at every layer, head and row.
pub fn build_full_removal_mask(layout: &ModalityLayout, config: &ModelConfig) -> GuidanceMask {
    let mut rows = Vec::new();
    for layer in 0..config.num_layers {
        for head in 0..config.num_heads {
            for query in 0..layout.len() {
                let candidates = visual_candidates(query, layout);
                rows.push(MaskRow {
                    layer,
                    head,
                    query,
                    candidates: candidates.len(),
                    dropped: candidates,
                });
            }
        }
    }
    GuidanceMask {
        gamma: Some(1.0),
        n0: None,
        rows,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub within_budget: bool,
    pub total_dropped: usize,
    pub n0: usize,
    pub per_layer: BTreeMap<usize, usize>,
}

pub fn mask_budget_check(mask: &GuidanceMask, n0: usize) -> BudgetReport {
    let total = mask.total_dropped();
    BudgetReport {
        within_budget: total <= n0,
        total_dropped: total,
        n0,
        per_layer: mask.per_layer_counts(),
    }
}

/// Number of visual-related positions in one head of one layer; the default
/// `n0` is this times layers times heads, which never binds.
pub fn visual_position_count(layout: &ModalityLayout) -> usize {
    (0..layout.len()).map(|q| visual_candidates(q, layout).len()).sum()
}

/// Applies the `n0` cap to one layer's proposed drops, keeping the highest
/// raw scores. `proposed` holds `(head, query, key, raw_score)`.
pub(crate) fn truncate_to_budget(proposed: &mut Vec<(usize, usize, usize, f32)>, remaining: usize) {
    if proposed.len() <= remaining {
        return;
    }
    proposed.sort_by(|a, b| {
        b.3.partial_cmp(&a.3)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)))
    });
    proposed.truncate(remaining);
}
