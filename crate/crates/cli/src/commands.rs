use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;

use cmg::analysis::{
    accumulate, attention_proportions_by_layer, attention_proportions_by_step, kl_report, KlReport, PatchMaskGrid,
    PlotSpec, ProportionCurve, RowSelection,
};
use cmg::fixtures::{
    bias_model_file, bias_suite_json, default_bias_suite, random_fixture, run_bench, BiasModelSpec, BiasSuite,
};
use cmg::guidance::{
    decode, decode_baseline, score_layers, select_layers, DecodeOutput, DecodeParams, LayerSelection, StepRecord,
};
use cmg::layout::{ModalityLayout, SpanRole};
use cmg::model::{ForwardTrace, ModelWeights};
use cmg::trace_io::{read_trace, write_trace, MAGIC};
use cmg::CmgError;

use crate::io::{emit, to_json, to_json_lines, write_atomic};
use crate::settings::{ModelSize, RunSettings};

/// Exit code 2 for configuration errors, 3 for everything else.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<CmgError> for Failure {
    fn from(e: CmgError) -> Self {
        match e {
            CmgError::InvalidParams(_)
            | CmgError::InvalidConfig(_)
            | CmgError::InvalidLayout(_)
            | CmgError::TokenOutOfRange { .. }
            | CmgError::SequenceTooLong { .. } => Failure::Config(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn config_error(e: anyhow::Error) -> Failure {
    Failure::Config(e)
}

type Outcome = Result<(), Failure>;

fn read_file(path: &Path) -> anyhow::Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn load_weights(path: &Path) -> Result<ModelWeights, Failure> {
    let container = read_trace(&read_file(path)?).with_context(|| format!("reading weights {}", path.display()))?;
    Ok(ModelWeights::from_container(&container)?)
}

/// Weights, prompt and layout of a generate or compare run.
struct Run {
    weights: ModelWeights,
    prompt: Vec<u32>,
    layout: ModalityLayout,
}

impl Run {
    fn load(s: &RunSettings) -> Result<Run, Failure> {
        let (weights, default_prompt) = match &s.weights {
            Some(path) => {
                if s.model.is_some() || s.model_seed.is_some() {
                    return Err(config_error(anyhow!(
                        "--weights conflicts with --model and --model-seed"
                    )));
                }
                (load_weights(path)?, None)
            }
            None => {
                let config = s.model.unwrap_or(ModelSize::Desk).config();
                let f = random_fixture(&config, s.model_seed.unwrap_or(0))?;
                (f.weights, Some((f.prompt, f.layout)))
            }
        };
        let (prompt, layout) = match (&s.prompt, &s.layout, default_prompt) {
            (Some(p), Some(l), _) => {
                let [system, image, question] = l[..] else {
                    return Err(config_error(anyhow!(
                        "--layout needs three span lengths: system,image,question"
                    )));
                };
                (p.clone(), ModalityLayout::new(system, image, question))
            }
            (None, None, Some(default)) => default,
            (None, None, None) => {
                return Err(config_error(anyhow!("a weights file needs --prompt and --layout")));
            }
            _ => return Err(config_error(anyhow!("--prompt and --layout must be given together"))),
        };
        layout.check_token_count(prompt.len())?;
        Ok(Run {
            weights,
            prompt,
            layout,
        })
    }

    fn params(&self, s: &RunSettings) -> Result<DecodeParams, Failure> {
        let params = s.params(DecodeParams::default()).map_err(config_error)?;
        params.validate(self.weights.config().num_layers)?;
        Ok(params)
    }

    fn decode(&self, params: &DecodeParams, baseline: bool) -> Result<DecodeOutput, Failure> {
        let out = if baseline {
            decode_baseline(&self.weights, &self.prompt, &self.layout, params)?
        } else {
            decode(&self.weights, &self.prompt, &self.layout, params)?
        };
        Ok(out)
    }

    /// Expert forward over the prompt and `generated`.
    fn trace(&self, generated: &[u32]) -> Result<ForwardTrace, Failure> {
        let tokens: Vec<u32> = self.prompt.iter().chain(generated).copied().collect();
        Ok(self
            .weights
            .forward(&tokens, &self.layout.with_generated(generated.len()), None)?)
    }
}

#[derive(Serialize)]
struct TokenOutput<'a> {
    tokens: &'a [u32],
}

pub fn generate(s: &RunSettings) -> Outcome {
    let run = Run::load(s)?;
    let params = run.params(s)?;
    let out = run.decode(&params, s.baseline)?;
    log::info!(
        "generated {} tokens; masked layers {:?}",
        out.tokens.len(),
        out.selection.selected
    );
    if let Some(path) = &s.report_out {
        write_atomic(path, to_json_lines(&out.records).as_bytes())?;
    }
    if let Some(path) = &s.trace_out {
        let metadata = serde_json::json!({
            "kind": "trace",
            "command": "generate",
            "params": params,
            "baseline": s.baseline,
        });
        let container = run.trace(&out.tokens)?.to_container(metadata);
        write_atomic(path, &write_trace(&container).map_err(anyhow::Error::from)?)?;
    }
    emit(
        None,
        &(serde_json::to_string(&TokenOutput { tokens: &out.tokens }).expect("tokens serialize") + "\n"),
    )?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct StepChange {
    pub step: usize,
    pub baseline: Option<u32>,
    pub guided: Option<u32>,
    /// Top expert token of the guided run at this step.
    pub expert_argmax: u32,
    /// Top fused token of the guided run at this step.
    pub fused_argmax: u32,
    pub argmax_changed: bool,
}

#[derive(Debug, Serialize)]
pub struct CompareReport {
    pub params: DecodeParams,
    pub selection: LayerSelection,
    pub baseline_tokens: Vec<u32>,
    pub guided_tokens: Vec<u32>,
    /// Positions at which the two token sequences differ, counting unmatched
    /// tail positions.
    pub token_differences: usize,
    pub steps: Vec<StepChange>,
    pub kl: KlReport,
}

pub fn compare(s: &RunSettings) -> Outcome {
    if s.baseline {
        return Err(config_error(anyhow!(
            "compare always runs both decoders; drop --baseline"
        )));
    }
    let run = Run::load(s)?;
    let params = run.params(s)?;
    let baseline = run.decode(&params, true)?;
    let guided = run.decode(&params, false)?;
    let len = baseline.tokens.len().max(guided.tokens.len());
    let token_differences = (0..len)
        .filter(|&i| baseline.tokens.get(i) != guided.tokens.get(i))
        .count();
    let steps = guided
        .records
        .iter()
        .map(|r| {
            let expert_argmax = r.expert_top.first().map_or(0, |t| t.token);
            let fused_argmax = r.fused_top.first().map_or(0, |t| t.token);
            StepChange {
                step: r.step,
                baseline: baseline.tokens.get(r.step).copied(),
                guided: guided.tokens.get(r.step).copied(),
                expert_argmax,
                fused_argmax,
                argmax_changed: expert_argmax != fused_argmax,
            }
        })
        .collect();
    let report = CompareReport {
        kl: kl_report(&guided.records),
        params,
        selection: guided.selection,
        baseline_tokens: baseline.tokens,
        guided_tokens: guided.tokens,
        token_differences,
        steps,
    };
    log::info!("{token_differences} token positions differ");
    emit(s.report_out.as_deref(), &to_json(&report))?;
    Ok(())
}

fn load_trace(path: &Path) -> Result<ForwardTrace, Failure> {
    let container = read_trace(&read_file(path)?).with_context(|| format!("reading trace {}", path.display()))?;
    Ok(ForwardTrace::from_container(&container)?)
}

pub fn select_layers_cmd(trace: &Path, tau: f64, out: Option<&Path>) -> Outcome {
    if !(0.0..=1.0).contains(&tau) {
        return Err(config_error(anyhow!("tau {tau} not in [0, 1]")));
    }
    let trace = load_trace(trace)?;
    let selection = select_layers(&score_layers(&trace)?, tau);
    log::info!(
        "selected {} of {} layers",
        selection.selected.len(),
        selection.scores.len()
    );
    emit(out, &to_json(&selection))?;
    Ok(())
}

fn is_trace_file(path: &Path) -> anyhow::Result<bool> {
    let bytes = read_file(path)?;
    Ok(bytes.starts_with(&MAGIC))
}

fn load_step_log(path: &Path) -> Result<Vec<StepRecord>, Failure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect::<anyhow::Result<Vec<StepRecord>>>()?;
    Ok(records)
}

#[derive(Debug, Serialize)]
pub struct AnalysisReport {
    pub source: &'static str,
    pub curve: ProportionCurve,
    pub plot: PlotSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<KlReport>,
}

pub fn analyze(input: &Path, rows: RowSelection, csv: bool, out: Option<&Path>) -> Outcome {
    let report = if is_trace_file(input)? {
        let curve = attention_proportions_by_layer(&load_trace(input)?, rows)?;
        let plot = curve.plot_spec("Attention proportion by layer");
        AnalysisReport {
            source: "trace",
            curve,
            plot,
            kl: None,
        }
    } else {
        let records = load_step_log(input)?;
        let curve = attention_proportions_by_step(&records);
        let plot = curve.plot_spec("Attention proportion by step");
        AnalysisReport {
            source: "steps",
            curve,
            plot,
            kl: Some(kl_report(&records)),
        }
    };
    if csv {
        emit(out, &report.curve.to_csv())?;
    } else {
        emit(out, &to_json(&report))?;
    }
    Ok(())
}

/// Parses `RxC`.
pub fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or("expected ROWSxCOLS")?;
    let r: usize = r.parse().map_err(|_| format!("bad row count {r:?}"))?;
    let c: usize = c.parse().map_err(|_| format!("bad column count {c:?}"))?;
    if r == 0 || c == 0 {
        return Err("grid dimensions must be positive".into());
    }
    Ok((r, c))
}

pub fn mask_viz(input: &Path, grid: Option<(usize, usize)>, out: Option<&Path>) -> Outcome {
    let records = load_step_log(input)?;
    let first = records
        .first()
        .ok_or_else(|| Failure::Runtime(anyhow!("{} has no steps", input.display())))?;
    let patches = first.layout.image().len;
    let (rows, cols) = match grid {
        Some(g) => g,
        None => {
            let side = (patches as f64).sqrt().round() as usize;
            if side * side != patches {
                return Err(config_error(anyhow!(
                    "{patches} image tokens are not a square grid; pass --grid"
                )));
            }
            (side, side)
        }
    };
    let mut grid = PatchMaskGrid {
        rows,
        cols,
        dropped: vec![0; rows * cols],
        occurrences: vec![0; rows * cols],
    };
    for r in &records {
        accumulate(&mut grid, &r.mask, &r.layout)?;
    }
    emit(out, &grid.to_csv())?;
    Ok(())
}

pub fn bench(suite: &Path, s: &RunSettings, csv_out: Option<&Path>) -> Outcome {
    let weights_path = s
        .weights
        .clone()
        .unwrap_or_else(|| PathBuf::from("fixtures/bias-model.cmgt"));
    for path in [suite, weights_path.as_path()] {
        if !path.exists() {
            return Err(Failure::Runtime(anyhow!(
                "fixture {} not found; create it with `cmg fixture bias`",
                path.display()
            )));
        }
    }
    let suite: BiasSuite =
        serde_json::from_slice(&read_file(suite)?).with_context(|| format!("parsing {}", suite.display()))?;
    let weights = load_weights(&weights_path)?;
    let base = DecodeParams {
        alpha: suite.alpha as f32,
        gamma: suite.gamma as f32,
        ..DecodeParams::default()
    };
    let params = s.params(base).map_err(config_error)?;
    params.validate(weights.config().num_layers)?;
    let report = run_bench(&weights, &suite, &params)?;
    for f in &report.families {
        log::info!(
            "{}: baseline {:.3}, guided {:.3} over {} cases",
            f.family.name(),
            f.baseline_accuracy,
            f.guided_accuracy,
            f.cases
        );
    }
    if let Some(path) = csv_out {
        write_atomic(path, report.cases_csv().as_bytes())?;
    }
    emit(s.report_out.as_deref(), &to_json(&report))?;
    Ok(())
}

pub fn fixture_bias(out_dir: &Path) -> Outcome {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_atomic(
        &out_dir.join("bias-model.cmgt"),
        &bias_model_file(&BiasModelSpec::default())?,
    )?;
    write_atomic(
        &out_dir.join("bias-suite.json"),
        bias_suite_json(&default_bias_suite()).as_bytes(),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct FixturePrompt {
    prompt: Vec<u32>,
    /// Span lengths `[system, image, question]`.
    layout: [usize; 3],
}

/// The random model of `--model` and `--model-seed` as a weights file; prints
/// its prompt.
pub fn fixture_weights(model: ModelSize, seed: u64, out: &Path) -> Outcome {
    let f = random_fixture(&model.config(), seed)?;
    let name = format!("{model:?}-{seed}").to_lowercase();
    write_atomic(
        out,
        &write_trace(&f.weights.to_container(&name)).map_err(anyhow::Error::from)?,
    )?;
    let layout = [SpanRole::System, SpanRole::Image, SpanRole::Question].map(|r| f.layout.span(r).len);
    emit(
        None,
        &to_json(&FixturePrompt {
            prompt: f.prompt,
            layout,
        }),
    )?;
    Ok(())
}
