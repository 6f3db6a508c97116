//! Library results against straight-line reference implementations.

use std::collections::BTreeSet;

use cmg::analysis::{attention_proportions_by_layer, mask_patch_grid, RowSelection};
use cmg::attention::{GammaMasker, MaskPlan};
use cmg::fixtures::{random_fixture, RandomFixture};
use cmg::guidance::{decode, score_layers, select_layers, DecodeParams, Sampler};
use cmg::layout::{ModalityLayout, SpanRole};
use cmg::model::{ModelConfig, ModelWeights, NormKind};
use cmg::numerics::Matrix;

fn matvec(x: &[f64], w: &Matrix) -> Vec<f64> {
    (0..w.cols())
        .map(|j| (0..w.rows()).map(|i| x[i] * w.get(i, j) as f64).sum())
        .collect()
}

fn layer_norm(x: &[f64], gain: &[f32], bias: &[f32], kind: NormKind, eps: f32) -> Vec<f64> {
    if kind == NormKind::Identity {
        return x.to_vec();
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + eps as f64).sqrt() * gain[i] as f64 + bias[i] as f64)
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

struct OracleOutput {
    logits: Vec<Vec<f64>>,
    /// `(layer, head, query)` → dropped keys.
    drops: Vec<(usize, usize, usize, Vec<usize>)>,
}

/// Full-sequence forward in f64 with no cache. Rows at `masked_layers` drop
/// the `⌊γk⌋` highest-scoring visual keys, found by sorting.
fn oracle_forward(
    w: &ModelWeights,
    tokens: &[u32],
    layout: &ModalityLayout,
    masked_layers: &BTreeSet<usize>,
    gamma: f64,
) -> OracleOutput {
    let c = w.config();
    let (d, hd) = (c.model_dim, c.head_dim);
    let n = tokens.len();
    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|p| {
            (0..d)
                .map(|j| (w.token_embedding().get(tokens[p] as usize, j) + w.position_embedding().get(p, j)) as f64)
                .collect()
        })
        .collect();
    let image = layout.span(SpanRole::Image);
    let mut drops = Vec::new();
    for (l, lw) in w.layers().iter().enumerate() {
        let h: Vec<Vec<f64>> = x
            .iter()
            .map(|r| layer_norm(r, &lw.attn_norm.gain, &lw.attn_norm.bias, c.norm, c.norm_eps))
            .collect();
        let q: Vec<Vec<f64>> = h.iter().map(|r| matvec(r, &lw.wq)).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|r| matvec(r, &lw.wk)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| matvec(r, &lw.wv)).collect();
        let mut attn = vec![vec![0.0; d]; n];
        for head in 0..c.num_heads {
            let cols = head * hd..(head + 1) * hd;
            for i in 0..n {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| cols.clone().map(|t| q[i][t] * k[j][t]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let mut keep = vec![true; i + 1];
                if masked_layers.contains(&l) {
                    let in_image = |p: usize| p >= image.start && p < image.start + image.len;
                    let candidates: Vec<usize> = (0..=i)
                        .filter(|&j| if in_image(i) { true } else { in_image(j) })
                        .collect();
                    let mut ranked = candidates.clone();
                    ranked.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
                    let mut dropped: Vec<usize> = ranked[..(gamma * candidates.len() as f64).floor() as usize].to_vec();
                    dropped.sort();
                    for &j in &dropped {
                        keep[j] = false;
                    }
                    drops.push((l, head, i, dropped));
                }
                let m = scores
                    .iter()
                    .zip(&keep)
                    .filter(|p| *p.1)
                    .map(|p| *p.0)
                    .fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores
                    .iter()
                    .zip(&keep)
                    .map(|(s, &kp)| if kp { (s - m).exp() } else { 0.0 })
                    .collect();
                let z: f64 = e.iter().sum();
                for j in 0..=i {
                    for t in cols.clone() {
                        attn[i][t] += e[j] / z * v[j][t];
                    }
                }
            }
        }
        for i in 0..n {
            let o = matvec(&attn[i], &lw.wo);
            for j in 0..d {
                x[i][j] += o[j];
            }
            let hf = layer_norm(&x[i], &lw.ffn_norm.gain, &lw.ffn_norm.bias, c.norm, c.norm_eps);
            let f: Vec<f64> = matvec(&hf, &lw.w1)
                .iter()
                .zip(&lw.b1)
                .map(|(a, b)| gelu(a + *b as f64))
                .collect();
            let f = matvec(&f, &lw.w2);
            for j in 0..d {
                x[i][j] += f[j] + lw.b2[j] as f64;
            }
        }
    }
    let fnorm = w.final_norm();
    let logits = x
        .iter()
        .map(|r| {
            matvec(
                &layer_norm(r, &fnorm.gain, &fnorm.bias, c.norm, c.norm_eps),
                w.lm_head(),
            )
        })
        .collect();
    OracleOutput { logits, drops }
}

fn fixtures() -> Vec<RandomFixture> {
    (0..6u64)
        .map(|s| {
            random_fixture(
                &if s % 2 == 0 {
                    ModelConfig::tiny()
                } else {
                    ModelConfig::desk()
                },
                40 + s,
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn forward_matches_reference_implementation() {
    for (i, f) in fixtures().iter().enumerate() {
        let layers: BTreeSet<usize> = (0..f.weights.config().num_layers)
            .filter(|l| (l + i) % 2 == 0)
            .collect();
        for gamma in [None, Some(0.5f32)] {
            let masker = GammaMasker {
                gamma: gamma.unwrap_or(0.0),
            };
            let plan = MaskPlan::new(&layers, &masker);
            let trace = f.weights.forward(&f.prompt, &f.layout, gamma.map(|_| &plan)).unwrap();
            let oracle = oracle_forward(
                &f.weights,
                &f.prompt,
                &f.layout,
                &if gamma.is_some() {
                    layers.clone()
                } else {
                    BTreeSet::new()
                },
                gamma.unwrap_or(0.0) as f64,
            );
            let logits = trace.logits.as_ref().unwrap();
            for (r, row) in oracle.logits.iter().enumerate() {
                for (a, b) in logits.row(r).iter().zip(row) {
                    assert!(
                        (*a as f64 - b).abs() <= 1e-5 * b.abs().max(1.0),
                        "fixture {i} row {r}: {a} vs {b}"
                    );
                }
            }
            let got: Vec<_> = trace
                .mask
                .rows
                .iter()
                .map(|m| (m.layer, m.head, m.query, m.dropped.clone()))
                .collect();
            let mut want = oracle.drops.clone();
            want.sort();
            let mut got_sorted = got;
            got_sorted.sort();
            assert_eq!(got_sorted, want, "fixture {i}: drop sets");
        }
    }
}

#[test]
fn layer_scores_match_hand_loop() {
    for f in fixtures() {
        let trace = f.weights.forward(&f.prompt, &f.layout, None).unwrap();
        let scores = score_layers(&trace).unwrap();
        for (l, s) in scores.iter().enumerate() {
            let (x, y) = (&trace.hidden_in[l], &trace.hidden_out[l]);
            let mut total = 0.0;
            for p in 0..x.rows() {
                let (a, b) = (x.row(p), y.row(p));
                let dot: f64 = a.iter().zip(b).map(|(u, v)| *u as f64 * *v as f64).sum();
                let na: f64 = a.iter().map(|u| (*u as f64).powi(2)).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|u| (*u as f64).powi(2)).sum::<f64>().sqrt();
                total += dot / (na * nb);
            }
            let want = total / x.rows() as f64;
            assert!((*s as f64 - want).abs() < 1e-5, "layer {l}: {s} vs {want}");
        }
    }
}

/// log-softmax in f64.
fn log_probs(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|&v| v as f64 - lse).collect()
}

/// Fused next-token log-probabilities after `tokens`, by full recompute of
/// both passes.
fn fused_log_probs(f: &RandomFixture, tokens: &[u32], layers: &BTreeSet<usize>, params: &DecodeParams) -> Vec<f64> {
    let layout = f.layout.with_generated(tokens.len() - f.prompt.len());
    let masker = GammaMasker { gamma: params.gamma };
    let plan = MaskPlan::new(layers, &masker);
    let expert = f.weights.forward(tokens, &layout, None).unwrap();
    let amateur = f.weights.forward(tokens, &layout, Some(&plan)).unwrap();
    let (e, a) = (expert.last_logits().unwrap(), amateur.last_logits().unwrap());
    let fused: Vec<f32> = e.iter().zip(a).map(|(e, a)| e + params.alpha * (e - a)).collect();
    log_probs(&fused)
}

#[test]
fn beam_search_matches_reference_implementation() {
    for f in fixtures().iter().take(4) {
        for width in [1usize, 2, 3] {
            let params = DecodeParams {
                sampler: Sampler::Beam { width },
                max_new_tokens: 3,
                alpha: 1.0,
                ..Default::default()
            };
            let out = decode(&f.weights, &f.prompt, &f.layout, &params).unwrap();
            let layers = &out.selection.selected;
            // (tokens, score), kept in rank order.
            let mut beams: Vec<(Vec<u32>, f64)> = vec![(f.prompt.clone(), 0.0)];
            for _ in 0..3 {
                let mut proposals = Vec::new();
                for (b, (tokens, score)) in beams.iter().enumerate() {
                    let lp = fused_log_probs(f, tokens, layers, &params);
                    let mut order: Vec<usize> = (0..lp.len()).collect();
                    order.sort_by(|&x, &y| lp[y].partial_cmp(&lp[x]).unwrap().then(x.cmp(&y)));
                    for &t in order.iter().take(width) {
                        proposals.push((score + lp[t], b, t as u32));
                    }
                }
                proposals.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
                beams = proposals
                    .into_iter()
                    .take(width)
                    .map(|(s, b, t)| {
                        let mut tokens = beams[b].0.clone();
                        tokens.push(t);
                        (tokens, s)
                    })
                    .collect();
            }
            assert_eq!(out.tokens, beams[0].0[f.prompt.len()..], "width {width}");
            assert!(
                (out.log_prob - beams[0].1).abs() < 1e-4,
                "width {width}: {} vs {}",
                out.log_prob,
                beams[0].1
            );
        }
    }
}

#[test]
fn greedy_matches_reference_implementation() {
    for f in fixtures() {
        let params = DecodeParams {
            max_new_tokens: 6,
            alpha: 1.0,
            ..Default::default()
        };
        let out = decode(&f.weights, &f.prompt, &f.layout, &params).unwrap();
        let expert = f.weights.forward(&f.prompt, &f.layout, None).unwrap();
        let layers = select_layers(&score_layers(&expert).unwrap(), params.tau).selected;
        assert_eq!(out.selection.selected, layers);
        let mut tokens = f.prompt.clone();
        for _ in 0..6 {
            let lp = fused_log_probs(&f, &tokens, &layers, &params);
            let best = (0..lp.len()).fold(0, |b, t| if lp[t] > lp[b] { t } else { b });
            tokens.push(best as u32);
        }
        assert_eq!(out.tokens, tokens[f.prompt.len()..]);
    }
}

#[test]
fn layer_proportions_match_hand_summation() {
    for f in fixtures() {
        let trace = f.weights.forward(&f.prompt, &f.layout, None).unwrap();
        let curve = attention_proportions_by_layer(&trace, RowSelection::AllRows).unwrap();
        let last = attention_proportions_by_layer(&trace, RowSelection::LastPromptRow).unwrap();
        let n = f.layout.len();
        for (l, heads) in trace.attention.iter().enumerate() {
            for role in [SpanRole::System, SpanRole::Image, SpanRole::Question] {
                let span = f.layout.span(role);
                let mut all = 0.0f64;
                let mut final_row = 0.0f64;
                for m in heads {
                    for q in 0..n {
                        let mass: f64 = (span.start..span.start + span.len).map(|k| m.get(q, k) as f64).sum();
                        all += mass;
                        if q == n - 1 {
                            final_row += mass;
                        }
                    }
                }
                let h = heads.len() as f64;
                assert!((curve.points[l].get(role) as f64 - all / (h * n as f64)).abs() < 1e-6);
                assert!((last.points[l].get(role) as f64 - final_row / h).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn patch_grid_matches_counting() {
    for f in fixtures() {
        let config = f.weights.config().clone();
        let params = DecodeParams {
            max_new_tokens: 4,
            ..Default::default()
        };
        let out = decode(&f.weights, &f.prompt, &f.layout, &params).unwrap();
        let grid = mask_patch_grid(&out.records, &config).unwrap();
        let patches = config.image_tokens();
        let mut dropped = vec![0u64; patches];
        let mut seen = vec![0u64; patches];
        for r in &out.records {
            let image = r.layout.span(SpanRole::Image);
            for row in &r.mask.rows {
                for p in 0..patches {
                    if image.start + p <= row.query {
                        seen[p] += 1;
                    }
                    if row.dropped.contains(&(image.start + p)) {
                        dropped[p] += 1;
                    }
                }
            }
        }
        assert_eq!(grid.dropped, dropped);
        assert_eq!(grid.occurrences, seen);
    }
}
