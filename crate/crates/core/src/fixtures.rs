//! Fixture models and workloads.
//!
//! The bias model is a handcrafted two-layer network that answers an
//! existence question ("is there an object of class c?") from two sources:
//! visual evidence gathered by attending to matching image patches, and a
//! language prior carried by a phrase token. Its answer margin has a closed
//! form, so the effect of guidance can be predicted before decoding.
//!
//! Random fixtures are seeded small models with a system/image/question
//! prompt.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::gamma_budget;
use crate::error::{CmgError, Result};
use crate::guidance::{decode, decode_baseline, DecodeParams, Sampler};
use crate::layout::ModalityLayout;
use crate::model::{init_weights, LayerWeights, ModelConfig, ModelWeights, Norm, NormKind};
use crate::numerics::Matrix;

/// Token ids of the bias model's vocabulary.
pub mod vocab {
    pub const SYSTEM: u32 = 0;
    pub const YES: u32 = 1;
    pub const NO: u32 = 2;
    pub const EOS: u32 = 3;
    pub const BACKGROUND: u32 = 4;
    /// Object patch of class `c` is `OBJECT + c`.
    pub const OBJECT: u32 = 8;
    /// Question about class `c` is `QUESTION + c`.
    pub const QUESTION: u32 = 16;
    /// Phrase leaning towards "yes" with strength `j · LEVEL_STEP` is
    /// `YES_PHRASE + j - 1`, for `j` in `1..=LEVELS`.
    pub const YES_PHRASE: u32 = 32;
    pub const NO_PHRASE: u32 = 128;
    pub const LEVELS: u32 = 96;
    pub const LEVEL_STEP: f64 = 0.25;
    pub const CLASSES: usize = 4;
}

/// Residual channels of the bias model.
mod channel {
    /// `0..4`: object class key.
    pub const SYSTEM_KEY: usize = 4;
    pub const PHRASE_KEY: usize = 5;
    /// +1 on object patches, minus the background penalty elsewhere.
    pub const OBJECT_FLAG: usize = 6;
    pub const PRIOR: usize = 7;
    pub const EVIDENCE_SUM: usize = 8;
    pub const PRIOR_SUM: usize = 9;
    pub const IS_QUESTION: usize = 10;
    pub const ANSWER_BIAS: usize = 11;
    /// `12..16`: queried class.
    pub const QUERY_CLASS: usize = 12;
}

/// Constants of the handcrafted bias model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasModelSpec {
    /// Score of a patch whose class matches the question.
    pub match_score: f64,
    /// Score of the system token.
    pub system_score: f64,
    /// Score of the phrase token.
    pub phrase_score: f64,
    /// Flag value subtracted for background patches.
    pub background_penalty: f64,
    pub evidence_weight: f64,
    pub prior_weight: f64,
    /// Logit offset that keeps the two answer tokens ahead of the rest.
    pub answer_bias: f64,
}

impl Default for BiasModelSpec {
    fn default() -> Self {
        Self {
            match_score: 3.0,
            system_score: 1.0,
            phrase_score: 2.0,
            background_penalty: 1.0,
            evidence_weight: 1.0,
            prior_weight: 1.0,
            answer_bias: 64.0,
        }
    }
}

pub const BIAS_IMAGE_GRID: (usize, usize) = (4, 4);

pub fn bias_model_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        num_heads: 1,
        model_dim: 16,
        head_dim: 16,
        ffn_dim: 4,
        vocab_size: 256,
        max_seq_len: 32,
        image_grid: BIAS_IMAGE_GRID,
        norm: NormKind::Identity,
        norm_eps: 1e-5,
    }
}

/// Builds the bias model. Block 0 does all the work; block 1 is zero so that
/// it leaves the residual stream unchanged and layer selection picks block 0.
pub fn bias_model(spec: &BiasModelSpec) -> ModelWeights {
    use channel::*;
    let config = bias_model_config();
    let d = config.model_dim;
    let v = config.vocab_size;
    let sqrt_d = (config.head_dim as f64).sqrt();

    let mut embed = Matrix::zeros(v, d);
    // Unused ids carry only the answer bias so every embedding is non-zero.
    for t in 0..v {
        embed.set(t, ANSWER_BIAS, 1.0);
    }
    let mut set_row = |t: u32, entries: &[(usize, f64)]| {
        let row = embed.row_mut(t as usize);
        row.fill(0.0);
        for &(c, x) in entries {
            row[c] = x as f32;
        }
    };
    set_row(vocab::SYSTEM, &[(SYSTEM_KEY, 1.0)]);
    set_row(vocab::BACKGROUND, &[(OBJECT_FLAG, -spec.background_penalty)]);
    for c in 0..vocab::CLASSES {
        set_row(vocab::OBJECT + c as u32, &[(c, 1.0), (OBJECT_FLAG, 1.0)]);
        set_row(
            vocab::QUESTION + c as u32,
            &[(IS_QUESTION, 1.0), (ANSWER_BIAS, 1.0), (QUERY_CLASS + c, 1.0)],
        );
    }
    for j in 1..=vocab::LEVELS {
        let level = j as f64 * vocab::LEVEL_STEP;
        set_row(vocab::YES_PHRASE + j - 1, &[(PHRASE_KEY, 1.0), (PRIOR, level)]);
        set_row(vocab::NO_PHRASE + j - 1, &[(PHRASE_KEY, 1.0), (PRIOR, -level)]);
    }

    let mut wq = Matrix::zeros(d, d);
    for c in 0..vocab::CLASSES {
        wq.set(QUERY_CLASS + c, c, (spec.match_score * sqrt_d) as f32);
    }
    wq.set(IS_QUESTION, SYSTEM_KEY, (spec.system_score * sqrt_d) as f32);
    wq.set(IS_QUESTION, PHRASE_KEY, (spec.phrase_score * sqrt_d) as f32);
    let mut wk = Matrix::zeros(d, d);
    for c in 0..=PHRASE_KEY {
        wk.set(c, c, 1.0);
    }
    let mut wv = Matrix::zeros(d, d);
    wv.set(OBJECT_FLAG, EVIDENCE_SUM, spec.evidence_weight as f32);
    wv.set(PRIOR, PRIOR_SUM, spec.prior_weight as f32);
    let wo = Matrix::from_fn(d, d, |r, c| if r == c { 1.0 } else { 0.0 });

    let zero_block = |wq, wk, wv, wo| LayerWeights {
        attn_norm: Norm::unit(d),
        wq,
        wk,
        wv,
        wo,
        ffn_norm: Norm::unit(d),
        w1: Matrix::zeros(d, config.ffn_dim),
        b1: vec![0.0; config.ffn_dim],
        w2: Matrix::zeros(config.ffn_dim, d),
        b2: vec![0.0; d],
    };
    let layers = vec![
        zero_block(wq, wk, wv, wo),
        zero_block(
            Matrix::zeros(d, d),
            Matrix::zeros(d, d),
            Matrix::zeros(d, d),
            Matrix::zeros(d, d),
        ),
    ];

    let bias = spec.answer_bias as f32;
    let mut head = Matrix::zeros(d, v);
    for (token, sign) in [(vocab::YES, 1.0f32), (vocab::NO, -1.0)] {
        head.set(EVIDENCE_SUM, token as usize, sign);
        head.set(PRIOR_SUM, token as usize, sign);
        head.set(ANSWER_BIAS, token as usize, bias);
    }

    ModelWeights::assemble(
        config.clone(),
        embed,
        Matrix::zeros(config.max_seq_len, d),
        layers,
        Norm::unit(d),
        head,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseFamily {
    /// The phrase prior agrees with the image.
    Clean,
    /// The phrase prior contradicts the image and outweighs it.
    Conflict,
}

impl CaseFamily {
    pub fn name(self) -> &'static str {
        match self {
            CaseFamily::Clean => "clean",
            CaseFamily::Conflict => "conflict",
        }
    }
}

/// Closed-form answer margins, `logit(YES) − logit(NO)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub expert: f64,
    pub amateur: f64,
    pub fused: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCase {
    pub id: usize,
    pub family: CaseFamily,
    /// Class asked about.
    pub class: usize,
    /// Class of the object patches in the image.
    pub image_class: usize,
    /// Patch indices holding an object; the rest are background.
    pub object_patches: Vec<usize>,
    /// Signed prior strength; positive leans "yes".
    pub prior: f64,
    pub tokens: Vec<u32>,
    pub layout: ModalityLayout,
    /// Visually correct answer.
    pub answer: u32,
    /// Margins under the suite's guidance settings.
    pub margins: Margins,
    /// The fused margin has the sign of the correct answer.
    pub flip_expected: bool,
}

impl BiasCase {
    pub fn object_present(&self) -> bool {
        self.class == self.image_class
    }
}

/// Cases for the bias model plus the guidance settings their margins were
/// computed for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSuite {
    pub spec: BiasModelSpec,
    pub alpha: f64,
    pub gamma: f64,
    pub seed: u64,
    pub cases: Vec<BiasCase>,
}

/// Margin contributions of one image, per unit of prior strength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginParts {
    /// Evidence term of the margin.
    pub evidence: f64,
    /// Prior term for a prior of strength 1.
    pub prior_unit: f64,
}

/// The answering row attends to the system token, all patches, the phrase
/// token and itself; `dropped` patches are removed from its support. The
/// margin is twice the sum of the two accumulator channels.
pub fn margin_parts(spec: &BiasModelSpec, image_scores: &[f64], flags: &[f64], dropped: &[usize]) -> MarginParts {
    let e_system = spec.system_score.exp();
    let e_phrase = spec.phrase_score.exp();
    let mut z = e_system + e_phrase + 1.0;
    let mut evidence = 0.0;
    for (i, (&s, &f)) in image_scores.iter().zip(flags).enumerate() {
        if dropped.contains(&i) {
            continue;
        }
        z += s.exp();
        evidence += s.exp() * f;
    }
    MarginParts {
        evidence: 2.0 * spec.evidence_weight * evidence / z,
        prior_unit: 2.0 * spec.prior_weight * e_phrase / z,
    }
}

/// Patch scores and flags of an image as seen by a question about `class`.
fn image_view(
    spec: &BiasModelSpec,
    class: usize,
    image_class: usize,
    objects: &[usize],
    patches: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut scores = vec![0.0; patches];
    let mut flags = vec![-spec.background_penalty; patches];
    for &p in objects {
        flags[p] = 1.0;
        if class == image_class {
            scores[p] = spec.match_score;
        }
    }
    (scores, flags)
}

/// The `⌊γ·n⌋` highest-scoring patches, ties to the lower index.
fn top_patches(scores: &[f64], gamma: f64) -> Vec<usize> {
    let k = gamma_budget(gamma as f32, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Expert, amateur and fused margins for an image and a signed prior.
pub fn analytic_margins(
    spec: &BiasModelSpec,
    class: usize,
    image_class: usize,
    objects: &[usize],
    prior: f64,
    alpha: f64,
    gamma: f64,
) -> Margins {
    let patches = BIAS_IMAGE_GRID.0 * BIAS_IMAGE_GRID.1;
    let (scores, flags) = image_view(spec, class, image_class, objects, patches);
    let e = margin_parts(spec, &scores, &flags, &[]);
    let a = margin_parts(spec, &scores, &flags, &top_patches(&scores, gamma));
    let expert = e.evidence + prior * e.prior_unit;
    let amateur = a.evidence + prior * a.prior_unit;
    Margins {
        expert,
        amateur,
        fused: (1.0 + alpha) * expert - alpha * amateur,
    }
}

fn phrase_token(prior: f64) -> u32 {
    let j = (prior.abs() / vocab::LEVEL_STEP).round() as u32;
    debug_assert!((1..=vocab::LEVELS).contains(&j));
    if prior > 0.0 {
        vocab::YES_PHRASE + j - 1
    } else {
        vocab::NO_PHRASE + j - 1
    }
}

/// `[SYSTEM] [16 patches] [phrase] [question]`.
pub fn bias_prompt(class: usize, image_class: usize, objects: &[usize], prior: f64) -> (Vec<u32>, ModalityLayout) {
    let patches = BIAS_IMAGE_GRID.0 * BIAS_IMAGE_GRID.1;
    let mut tokens = vec![vocab::SYSTEM];
    for p in 0..patches {
        tokens.push(if objects.contains(&p) {
            vocab::OBJECT + image_class as u32
        } else {
            vocab::BACKGROUND
        });
    }
    tokens.push(phrase_token(prior));
    tokens.push(vocab::QUESTION + class as u32);
    (tokens, ModalityLayout::new(1, patches, 2))
}

/// Conflict priors overshoot the visual margin by these fractions before
/// rounding up to the level grid.
pub const CONFLICT_OVERSHOOT: [f64; 6] = [0.02, 0.05, 0.1, 0.2, 0.3, 0.5];

/// The bias model as a weights file.
pub fn bias_model_file(spec: &BiasModelSpec) -> Result<Vec<u8>> {
    let mut container = bias_model(spec).to_container("bias-model");
    container.metadata["spec"] = serde_json::to_value(spec).expect("spec serializes");
    Ok(crate::trace_io::write_trace(&container)?)
}

/// Pretty JSON with a trailing newline.
pub fn bias_suite_json(suite: &BiasSuite) -> String {
    let mut out = serde_json::to_string_pretty(suite).expect("suite serializes");
    out.push('\n');
    out
}

/// Prior strengths used for clean cases.
pub const CLEAN_LEVELS: [f64; 5] = [0.25, 1.0, 4.0, 12.0, 24.0];

/// Margins closer to zero than this are treated as undecided and the case is
/// not generated.
pub const MARGIN_FLOOR: f64 = 1e-3;

/// Generates the existence-question suite. For each image (1–3 objects,
/// present or absent, 8 trials each) it emits clean cases at
/// [`CLEAN_LEVELS`] and conflict cases whose prior exceeds the visual
/// margin by each of [`CONFLICT_OVERSHOOT`].
pub fn bias_suite(spec: &BiasModelSpec, alpha: f64, gamma: f64, seed: u64) -> BiasSuite {
    let patches = BIAS_IMAGE_GRID.0 * BIAS_IMAGE_GRID.1;
    let max_level = vocab::LEVELS as f64 * vocab::LEVEL_STEP;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for present in [true, false] {
        for objects in 1..=3 {
            for trial in 0..8 {
                let class = trial % vocab::CLASSES;
                let image_class = if present {
                    class
                } else {
                    (class + rng.random_range(1..vocab::CLASSES)) % vocab::CLASSES
                };
                let mut positions: Vec<usize> = sample(&mut rng, patches, objects).into_vec();
                positions.sort_unstable();
                let truth = if present { 1.0 } else { -1.0 };
                let (scores, flags) = image_view(spec, class, image_class, &positions, patches);
                let parts = margin_parts(spec, &scores, &flags, &[]);

                let mut priors: Vec<(CaseFamily, f64)> =
                    CLEAN_LEVELS.iter().map(|&l| (CaseFamily::Clean, truth * l)).collect();
                for over in CONFLICT_OVERSHOOT {
                    let needed = parts.evidence.abs() / parts.prior_unit * (1.0 + over);
                    let level = ((needed / vocab::LEVEL_STEP).floor() + 1.0) * vocab::LEVEL_STEP;
                    if level <= max_level && !priors.contains(&(CaseFamily::Conflict, -truth * level)) {
                        priors.push((CaseFamily::Conflict, -truth * level));
                    }
                }
                for (family, prior) in priors {
                    let margins = analytic_margins(spec, class, image_class, &positions, prior, alpha, gamma);
                    if margins.expert.abs() < MARGIN_FLOOR || margins.fused.abs() < MARGIN_FLOOR {
                        continue;
                    }
                    let (tokens, layout) = bias_prompt(class, image_class, &positions, prior);
                    cases.push(BiasCase {
                        id: cases.len(),
                        family,
                        class,
                        image_class,
                        object_patches: positions.clone(),
                        prior,
                        tokens,
                        layout,
                        answer: if present { vocab::YES } else { vocab::NO },
                        flip_expected: margins.fused * truth > 0.0,
                        margins,
                    });
                }
            }
        }
    }
    BiasSuite {
        spec: *spec,
        alpha,
        gamma,
        seed,
        cases,
    }
}

/// The committed suite: default spec, α = 0.3, γ = 0.5, seed 0.
pub fn default_bias_suite() -> BiasSuite {
    bias_suite(&BiasModelSpec::default(), 0.3, 0.5, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub id: usize,
    pub family: CaseFamily,
    pub answer: u32,
    pub baseline: u32,
    pub guided: u32,
    pub flip_expected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySummary {
    pub family: CaseFamily,
    pub cases: usize,
    pub baseline_correct: usize,
    pub guided_correct: usize,
    pub baseline_accuracy: f64,
    pub guided_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub params: DecodeParams,
    pub families: Vec<FamilySummary>,
    /// Conflict cases whose analytic margins predict a flip.
    pub flips_expected: usize,
    /// Of those, cases the guided run answered correctly.
    pub flips_achieved: usize,
    pub cases: Vec<CaseResult>,
}

impl BenchReport {
    pub fn family(&self, family: CaseFamily) -> Option<&FamilySummary> {
        self.families.iter().find(|f| f.family == family)
    }

    /// Columns `id,family,answer,baseline,guided,flip_expected`.
    pub fn cases_csv(&self) -> String {
        let mut out = String::from("id,family,answer,baseline,guided,flip_expected\n");
        for c in &self.cases {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.id,
                c.family.name(),
                c.answer,
                c.baseline,
                c.guided,
                c.flip_expected
            ));
        }
        out
    }
}

/// Answers every case with baseline and guided decoding, one token each.
pub fn run_bench(weights: &ModelWeights, suite: &BiasSuite, params: &DecodeParams) -> Result<BenchReport> {
    if suite.cases.is_empty() {
        return Err(CmgError::InvalidParams("fixture suite has no cases".into()));
    }
    let params = DecodeParams {
        max_new_tokens: 1,
        sampler: match params.sampler {
            Sampler::Beam { .. } => params.sampler,
            _ => Sampler::Greedy,
        },
        ..params.clone()
    };
    let cases = suite
        .cases
        .par_iter()
        .map(|case| {
            let base = decode_baseline(weights, &case.tokens, &case.layout, &params)?;
            let guided = decode(weights, &case.tokens, &case.layout, &params)?;
            Ok(CaseResult {
                id: case.id,
                family: case.family,
                answer: case.answer,
                baseline: base.tokens[0],
                guided: guided.tokens[0],
                flip_expected: case.family == CaseFamily::Conflict && case.flip_expected,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let families = [CaseFamily::Clean, CaseFamily::Conflict]
        .into_iter()
        .map(|family| {
            let members: Vec<&CaseResult> = cases.iter().filter(|c| c.family == family).collect();
            let n = members.len();
            let baseline_correct = members.iter().filter(|c| c.baseline == c.answer).count();
            let guided_correct = members.iter().filter(|c| c.guided == c.answer).count();
            let ratio = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
            FamilySummary {
                family,
                cases: n,
                baseline_correct,
                guided_correct,
                baseline_accuracy: ratio(baseline_correct),
                guided_accuracy: ratio(guided_correct),
            }
        })
        .collect();
    let flips_expected = cases.iter().filter(|c| c.flip_expected).count();
    let flips_achieved = cases.iter().filter(|c| c.flip_expected && c.guided == c.answer).count();
    Ok(BenchReport {
        params,
        families,
        flips_expected,
        flips_achieved,
        cases,
    })
}

/// A seeded model with a `system | image | question` prompt.
#[derive(Debug, Clone)]
pub struct RandomFixture {
    pub weights: ModelWeights,
    pub prompt: Vec<u32>,
    pub layout: ModalityLayout,
}

/// Share of an image token's embedding that lies along the common visual
/// direction in [`random_fixture`].
pub const MODALITY_SHARE: f32 = 0.5;

/// Random weights for `config` with the upper half of the vocabulary used as
/// a visual codebook. Codebook embeddings share one random direction, so
/// image tokens form a modality of their own rather than being
/// indistinguishable from text. The prompt is 2 system tokens, a full image
/// grid and 3 question tokens.
pub fn random_fixture(config: &ModelConfig, seed: u64) -> Result<RandomFixture> {
    random_fixture_with(config, seed, MODALITY_SHARE)
}

/// [`random_fixture`] with an explicit modality share in `[0, 1]`; 0 gives
/// i.i.d. embeddings for all tokens.
pub fn random_fixture_with(config: &ModelConfig, seed: u64, modality_share: f32) -> Result<RandomFixture> {
    if config.vocab_size < 2 {
        return Err(CmgError::InvalidConfig("random fixtures need at least 2 tokens".into()));
    }
    if !(0.0..=1.0).contains(&modality_share) {
        return Err(CmgError::InvalidParams(format!(
            "modality share {modality_share} not in [0, 1]"
        )));
    }
    let (config, mut embed, pos, layers, norm, head) = init_weights(config, seed)?.into_parts();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_F1C7_0000_0000);
    let d = config.model_dim;
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut direction: Vec<f32> = (0..d).map(|_| normal.sample(&mut rng)).collect();
    let norm_dir = direction.iter().map(|x| x * x).sum::<f32>().sqrt();
    // Scaled to the expected norm of an i.i.d. embedding row.
    direction.iter_mut().for_each(|x| *x *= (d as f32).sqrt() / norm_dir);
    let codebook = config.vocab_size as u32 / 2;
    let keep = (1.0 - modality_share * modality_share).sqrt();
    for t in codebook as usize..config.vocab_size {
        for (e, u) in embed.row_mut(t).iter_mut().zip(&direction) {
            *e = modality_share * u + keep * *e;
        }
    }
    let weights = ModelWeights::from_parts(config.clone(), embed, pos, layers, norm, head)?;
    let layout = ModalityLayout::new(2, config.image_tokens(), 3);
    let image = layout.image();
    let prompt = (0..layout.len())
        .map(|p| {
            if image.contains(p) {
                rng.random_range(codebook..config.vocab_size as u32)
            } else {
                rng.random_range(0..codebook)
            }
        })
        .collect();
    Ok(RandomFixture {
        weights,
        prompt,
        layout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_families_behave_as_constructed() {
        let suite = default_bias_suite();
        let conflicts = suite.cases.iter().filter(|c| c.family == CaseFamily::Conflict).count();
        assert!(conflicts > 100);
        for c in &suite.cases {
            let truth = if c.object_present() { 1.0 } else { -1.0 };
            match c.family {
                CaseFamily::Clean => {
                    assert!(c.margins.expert * truth > 0.0);
                    assert!(c.margins.fused * truth > 0.0);
                }
                CaseFamily::Conflict => assert!(c.margins.expert * truth < 0.0),
            }
        }
        let flips = suite
            .cases
            .iter()
            .filter(|c| c.family == CaseFamily::Conflict && c.flip_expected)
            .count();
        assert!(flips * 2 > conflicts, "{flips} of {conflicts}");
    }

    #[test]
    fn suite_is_deterministic() {
        assert_eq!(default_bias_suite(), default_bias_suite());
    }

    #[test]
    fn phrase_tokens_round_trip_levels() {
        assert_eq!(phrase_token(0.25), vocab::YES_PHRASE);
        assert_eq!(phrase_token(-24.0), vocab::NO_PHRASE + 95);
    }

    #[test]
    fn random_fixture_is_seeded() {
        let c = ModelConfig::tiny();
        let a = random_fixture(&c, 3).unwrap();
        let b = random_fixture(&c, 3).unwrap();
        assert_eq!(a.prompt, b.prompt);
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.prompt.len(), a.layout.len());
    }

    #[test]
    fn model_margins_match_closed_form() {
        let spec = BiasModelSpec::default();
        let w = bias_model(&spec);
        let suite = default_bias_suite();
        for case in suite.cases.iter().step_by(7) {
            let t = w.forward(&case.tokens, &case.layout, None).unwrap();
            let logits = t.last_logits().unwrap();
            let margin = (logits[vocab::YES as usize] - logits[vocab::NO as usize]) as f64;
            assert!(
                (margin - case.margins.expert).abs() < 1e-4,
                "{margin} vs {:?}",
                case.margins
            );
        }
    }

    #[test]
    fn bench_flips_expected_conflicts() {
        let w = bias_model(&BiasModelSpec::default());
        let suite = default_bias_suite();
        let report = run_bench(&w, &suite, &DecodeParams::default()).unwrap();
        let clean = report.family(CaseFamily::Clean).unwrap();
        assert_eq!(clean.baseline_correct, clean.cases);
        assert_eq!(clean.guided_correct, clean.cases);
        let conflict = report.family(CaseFamily::Conflict).unwrap();
        assert_eq!(conflict.baseline_correct, 0);
        assert_eq!(report.flips_achieved, report.flips_expected);
    }
}
