//! Patch annotation with cooperating agents.
//!
//! Every patch goes through four stages: a step agent emits a short chain of
//! measured statements, a frozen aggregator turns the chain into a label
//! distribution, a describer writes a label-conditioned sentence, and a judge
//! scores the result in `[0, 1]`. Agents are either deterministic mocks that
//! measure the synthetic image directly, or a remote HTTP endpoint.

use std::io::{BufRead, Write};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Error, Result};
use crate::io::encode_tensors;
use crate::numcore::{Rng, Tensor};
use crate::synthdata::{
    count_components, density_class, density_word, grayscale, median_filter3, segment_oracle, split_patches,
    Texture, NUM_CLASSES,
};

/// Width of every step feature vector: step-kind one-hot (3), measured value,
/// density cue (3), texture cue (2).
pub const STEP_FEATURES: usize = 9;
const VALUE: usize = 3;
const DENSITY_CUE: usize = 4;
const TEXTURE_CUE: usize = 7;

/// Mean background gradient separating fine from coarse stroma.
pub const TEXTURE_THRESHOLD: f64 = 0.007;
pub const INTENSITY_TOLERANCE: f64 = 0.01;
pub const TEXTURE_TOLERANCE: f64 = 0.001;
/// Counts at or above this share one description bucket.
pub const COUNT_BUCKET_CAP: usize = 9;

const STEP_PROMPT: &str = "Examine the tissue patch step by step. Report the number of nuclei, \
the mean intensity and the stroma texture, one finding per step.";
const DESCRIBE_PROMPT: &str = "Write one sentence describing the patch, consistent with the given \
density label and findings.";
const JUDGE_PROMPT: &str = "Rate from 0 to 1 how well the findings, label and description agree with \
the patch: visual grounding, reasoning validity and factual consistency.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Count,
    Intensity,
    Texture,
}

impl StepKind {
    const ALL: [StepKind; 3] = [StepKind::Count, StepKind::Intensity, StepKind::Texture];

    fn index(self) -> usize {
        self as usize
    }
}

/// One statement of a reasoning chain with its numeric evidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(String, Vec<f64>)", into = "(String, Vec<f64>)")]
pub struct ReasoningStep {
    pub statement: String,
    pub features: Vec<f64>,
}

impl From<(String, Vec<f64>)> for ReasoningStep {
    fn from((statement, features): (String, Vec<f64>)) -> Self {
        Self { statement, features }
    }
}

impl From<ReasoningStep> for (String, Vec<f64>) {
    fn from(s: ReasoningStep) -> Self {
        (s.statement, s.features)
    }
}

impl ReasoningStep {
    /// The step kind when the features follow the mock layout.
    pub fn kind(&self) -> Option<StepKind> {
        if self.features.len() != STEP_FEATURES {
            return None;
        }
        let hot: Vec<usize> = (0..3).filter(|&i| self.features[i] == 1.0).collect();
        let clean = (0..3).all(|i| self.features[i] == 0.0 || self.features[i] == 1.0);
        match (clean, hot.as_slice()) {
            (true, [k]) => Some(StepKind::ALL[*k]),
            _ => None,
        }
    }

    pub fn value(&self) -> Option<f64> {
        self.kind().map(|_| self.features[VALUE])
    }
}

/// Ordered statements for one patch; later steps may build on earlier ones.
#[derive(Clone, Debug, PartialEq)]
pub struct ReasoningChain {
    pub patch_id: String,
    pub steps: Vec<ReasoningStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub probs: Vec<f64>,
    pub label: usize,
}

impl LabelDistribution {
    /// Softmax of `logits`; the label is the first maximal entry.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return contract_err("no logits");
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logits {logits:?}")));
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let mut label = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[label] {
                label = i;
            }
        }
        Ok(Self { probs, label })
    }
}

/// Frozen map from mean step features to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorParams {
    /// `[STEP_FEATURES × classes]`
    pub projection: Tensor,
    pub bias: Vec<f64>,
    pub seed: u64,
}

impl AggregatorParams {
    /// Unstructured `N(0, 1/f)` projection with zero bias.
    pub fn seeded(seed: u64, features: usize, classes: usize) -> Self {
        let projection = Rng::new(seed).normal_scaled(&[features, classes], 1.0 / (features as f64).sqrt());
        Self {
            projection,
            bias: vec![0.0; classes],
            seed,
        }
    }

    /// Reads the density cue of the count step, with a small seeded
    /// perturbation on every weight.
    pub fn density_prior(seed: u64) -> Self {
        let mut projection = Rng::new(seed).normal_scaled(&[STEP_FEATURES, NUM_CLASSES], 0.05);
        for k in 0..NUM_CLASSES {
            projection.data_mut()[(DENSITY_CUE + k) * NUM_CLASSES + k] += 9.0;
        }
        Self {
            projection,
            bias: vec![0.0; NUM_CLASSES],
            seed,
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }
}

/// Mean-pools the step features, projects them to logits and normalizes.
pub fn aggregate_reasoning(chain: &ReasoningChain, params: &AggregatorParams) -> Result<LabelDistribution> {
    if chain.steps.is_empty() {
        return contract_err(format!("chain for {} has no steps", chain.patch_id));
    }
    let (f, c) = params.projection.dims2()?;
    let mut pooled = vec![0.0; f];
    for step in &chain.steps {
        if step.features.len() != f {
            return shape_err(format!(
                "step feature width {} but the aggregator expects {f}",
                step.features.len()
            ));
        }
        for (p, v) in pooled.iter_mut().zip(&step.features) {
            *p += v;
        }
    }
    let m = chain.steps.len() as f64;
    pooled.iter_mut().for_each(|p| *p /= m);
    let logits: Vec<f64> = (0..c)
        .map(|j| params.bias[j] + (0..f).map(|i| pooled[i] * params.projection.at2(i, j)).sum::<f64>())
        .collect();
    LabelDistribution::from_logits(&logits)
}

/// Direct measurements of a patch; the reference the mock judge checks against.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurements {
    pub count: usize,
    pub intensity: f64,
    /// Mean absolute median-filtered step between neighbouring background pixels.
    pub gradient: f64,
}

impl Measurements {
    pub fn texture(&self) -> Texture {
        texture_of(self.gradient)
    }
}

fn texture_of(gradient: f64) -> Texture {
    if gradient > TEXTURE_THRESHOLD {
        Texture::Fine
    } else {
        Texture::Coarse
    }
}

pub fn measure(patch: &Tensor) -> Result<Measurements> {
    let mask = segment_oracle(patch)?;
    let (gray, h, w) = grayscale(patch)?;
    if h == 0 || w == 0 {
        return contract_err("empty patch");
    }
    let smooth = median_filter3(&gray, h, w);
    let bg = |i: usize| mask.data()[i] == 0.0;
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w && bg(i) && bg(i + 1) {
                sum += (smooth[i + 1] - smooth[i]).abs();
                n += 1;
            }
            if y + 1 < h && bg(i) && bg(i + w) {
                sum += (smooth[i + w] - smooth[i]).abs();
                n += 1;
            }
        }
    }
    Ok(Measurements {
        count: count_components(&mask),
        intensity: gray.iter().sum::<f64>() / gray.len() as f64,
        gradient: if n == 0 { 0.0 } else { sum / n as f64 },
    })
}

/// Collects whatever measurements a chain states, first occurrence of each kind.
fn claimed(chain: &ReasoningChain) -> [Option<f64>; 3] {
    let mut out = [None; 3];
    for step in &chain.steps {
        if let (Some(kind), Some(v)) = (step.kind(), step.value()) {
            out[kind.index()].get_or_insert(v);
        }
    }
    out
}

fn step_features(kind: StepKind, value: f64) -> Vec<f64> {
    let mut f = vec![0.0; STEP_FEATURES];
    f[kind.index()] = 1.0;
    f[VALUE] = value;
    f
}

pub fn count_phrase(count: usize) -> String {
    match count {
        0 => "no nuclei".into(),
        1 => "1 nucleus".into(),
        n if n >= COUNT_BUCKET_CAP => format!("{COUNT_BUCKET_CAP} or more nuclei"),
        n => format!("{n} nuclei"),
    }
}

fn arrangement(label: usize) -> &'static str {
    ["scatter", "group", "cluster"][label]
}

/// Deterministic step agent: count, intensity and texture findings.
pub fn mock_step(patch_id: &str, patch: &Tensor) -> Result<ReasoningChain> {
    let m = measure(patch)?;
    let mut count = step_features(StepKind::Count, m.count as f64);
    count[DENSITY_CUE + density_class(m.count)] = 1.0;
    let count_statement = match m.count {
        0 => "no nuclei detected".to_string(),
        1 => "1 nucleus detected".to_string(),
        n => format!("{n} nuclei detected"),
    };
    let texture = m.texture();
    let mut tex = step_features(StepKind::Texture, m.gradient);
    tex[TEXTURE_CUE + (texture == Texture::Coarse) as usize] = 1.0;
    Ok(ReasoningChain {
        patch_id: patch_id.to_string(),
        steps: vec![
            ReasoningStep {
                statement: count_statement,
                features: count,
            },
            ReasoningStep {
                statement: format!("mean intensity {:.3}", m.intensity),
                features: step_features(StepKind::Intensity, m.intensity),
            },
            ReasoningStep {
                statement: format!("{} stroma texture (gradient {:.4})", texture.word(), m.gradient),
                features: tex,
            },
        ],
    })
}

/// Template description keyed by label, texture and count bucket.
pub fn describe_template(label: usize, texture: Texture, count: usize) -> String {
    format!(
        "{} {} of {} on {} stroma",
        density_word(label),
        arrangement(label),
        count_phrase(count),
        texture.word()
    )
}

/// Mock describer: uses the chain's findings, re-measuring anything missing.
pub fn mock_describe(patch: &Tensor, label: usize, chain: &ReasoningChain) -> Result<String> {
    if label >= NUM_CLASSES {
        return contract_err(format!("label {label} outside 0..{NUM_CLASSES}"));
    }
    let c = claimed(chain);
    let fallback = if c[0].is_none() || c[2].is_none() {
        Some(measure(patch)?)
    } else {
        None
    };
    let count = match c[0] {
        Some(v) => v.max(0.0).round() as usize,
        None => fallback.unwrap().count,
    };
    let texture = match c[2] {
        Some(v) => texture_of(v),
        None => fallback.unwrap().texture(),
    };
    Ok(describe_template(label, texture, count))
}

fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

fn contains_phrase(text: &[String], phrase: &str) -> bool {
    let p = words(phrase);
    !p.is_empty() && text.windows(p.len()).any(|w| w == p.as_slice())
}

/// Rubric in fifths: three grounding checks, label consistency and count coverage.
pub fn mock_judge(patch: &Tensor, chain: &ReasoningChain, label: usize, description: &str) -> Result<f64> {
    let m = measure(patch)?;
    let c = claimed(chain);
    let mut points = 0u32;
    if c[0] == Some(m.count as f64) {
        points += 1;
    }
    if c[1].is_some_and(|v| (v - m.intensity).abs() <= INTENSITY_TOLERANCE) {
        points += 1;
    }
    if c[2].is_some_and(|v| (v - m.gradient).abs() <= TEXTURE_TOLERANCE) {
        points += 1;
    }
    let text = words(description);
    let mentioned: Vec<usize> = (0..NUM_CLASSES)
        .filter(|&k| text.iter().any(|w| w == density_word(k)))
        .collect();
    if mentioned == [label] {
        points += 1;
    }
    if contains_phrase(&text, &count_phrase(m.count)) {
        points += 1;
    }
    Ok((points as f64 / 5.0).clamp(0.0, 1.0))
}

/// Where an agent role is served.
#[derive(Clone, Debug, PartialEq)]
pub enum AgentEndpoint {
    Mock,
    Remote(RemoteEndpoint),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RemoteEndpoint {
    pub url: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
}

impl RemoteEndpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout_ms: 30_000,
            max_retries: 2,
        }
    }
}

#[derive(Serialize)]
struct AgentRequest<'a> {
    role: &'a str,
    patch: String,
    context: RequestContext<'a>,
    prompt: &'a str,
}

#[derive(Serialize, Default)]
struct RequestContext<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    steps: Option<&'a [ReasoningStep]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    description: Option<&'a str>,
}

#[derive(Deserialize, Debug, Default)]
struct AgentResponse {
    steps: Option<Vec<ReasoningStep>>,
    text: Option<String>,
    score: Option<f64>,
}

fn agent_err(patch_id: &str, message: impl Into<String>) -> Error {
    Error::Agent {
        patch_id: patch_id.to_string(),
        message: message.into(),
    }
}

fn encode_patch(patch: &Tensor) -> String {
    BASE64.encode(encode_tensors([("patch", patch)]))
}

impl RemoteEndpoint {
    /// POSTs the request, retrying transport failures and 5xx responses.
    fn call(&self, patch_id: &str, request: &AgentRequest) -> Result<AgentResponse> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(self.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            match agent.post(&self.url).send_json(request) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if (200..300).contains(&status) {
                        return resp
                            .body_mut()
                            .read_json::<AgentResponse>()
                            .map_err(|e| agent_err(patch_id, format!("malformed {} response: {e}", request.role)));
                    }
                    last = format!("{} agent returned HTTP {status}", request.role);
                    if status < 500 {
                        break;
                    }
                }
                Err(e) => last = format!("{} agent request failed (attempt {}): {e}", request.role, attempt + 1),
            }
        }
        Err(agent_err(patch_id, last))
    }
}

pub fn run_step_agent(patch_id: &str, patch: &Tensor, endpoint: &AgentEndpoint) -> Result<ReasoningChain> {
    if patch.is_empty() {
        return contract_err(format!("patch {patch_id} is empty"));
    }
    match endpoint {
        AgentEndpoint::Mock => mock_step(patch_id, patch),
        AgentEndpoint::Remote(remote) => {
            let req = AgentRequest {
                role: "step",
                patch: encode_patch(patch),
                context: RequestContext::default(),
                prompt: STEP_PROMPT,
            };
            let steps = remote.call(patch_id, &req)?.steps.unwrap_or_default();
            if steps.is_empty() {
                return Err(agent_err(patch_id, "step agent returned no steps"));
            }
            Ok(ReasoningChain {
                patch_id: patch_id.to_string(),
                steps,
            })
        }
    }
}

pub fn describe_patch(
    patch_id: &str,
    patch: &Tensor,
    label: usize,
    chain: &ReasoningChain,
    endpoint: &AgentEndpoint,
) -> Result<String> {
    match endpoint {
        AgentEndpoint::Mock => mock_describe(patch, label, chain),
        AgentEndpoint::Remote(remote) => {
            let req = AgentRequest {
                role: "describe",
                patch: encode_patch(patch),
                context: RequestContext {
                    label: Some(density_word(label.min(NUM_CLASSES - 1))),
                    steps: Some(&chain.steps),
                    description: None,
                },
                prompt: DESCRIBE_PROMPT,
            };
            match remote.call(patch_id, &req)?.text {
                Some(t) if !t.trim().is_empty() => Ok(t),
                _ => Err(agent_err(patch_id, "describe agent returned no text")),
            }
        }
    }
}

pub fn judge(
    patch_id: &str,
    patch: &Tensor,
    chain: &ReasoningChain,
    label: usize,
    description: &str,
    endpoint: &AgentEndpoint,
) -> Result<f64> {
    match endpoint {
        AgentEndpoint::Mock => mock_judge(patch, chain, label, description),
        AgentEndpoint::Remote(remote) => {
            let req = AgentRequest {
                role: "judge",
                patch: encode_patch(patch),
                context: RequestContext {
                    label: Some(density_word(label.min(NUM_CLASSES - 1))),
                    steps: Some(&chain.steps),
                    description: Some(description),
                },
                prompt: JUDGE_PROMPT,
            };
            match remote.call(patch_id, &req)?.score {
                Some(s) if !s.is_nan() => Ok(s.clamp(0.0, 1.0)),
                _ => Err(agent_err(patch_id, "judge agent returned no usable score")),
            }
        }
    }
}

/// Endpoint per agent role.
#[derive(Clone, Debug, PartialEq)]
pub struct Endpoints {
    pub step: AgentEndpoint,
    pub describe: AgentEndpoint,
    pub judge: AgentEndpoint,
}

impl Endpoints {
    pub fn mock() -> Self {
        Self::all(AgentEndpoint::Mock)
    }

    pub fn all(endpoint: AgentEndpoint) -> Self {
        Self {
            step: endpoint.clone(),
            describe: endpoint.clone(),
            judge: endpoint,
        }
    }
}

/// One fully annotated patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub patch_id: String,
    pub chain: ReasoningChain,
    pub dist: LabelDistribution,
    pub description: String,
    pub judge_score: f64,
    pub human_score: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    patch_id: String,
    steps: Vec<ReasoningStep>,
    probs: Vec<f64>,
    label: usize,
    description: String,
    judge_score: f64,
    human_score: Option<f64>,
}

impl PatchRecord {
    pub fn to_json_line(&self) -> String {
        let line = RecordLine {
            patch_id: self.patch_id.clone(),
            steps: self.chain.steps.clone(),
            probs: self.dist.probs.clone(),
            label: self.dist.label,
            description: self.description.clone(),
            judge_score: self.judge_score,
            human_score: self.human_score,
        };
        serde_json::to_string(&line).expect("records serialize")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let r: RecordLine = serde_json::from_str(line)?;
        if !(0.0..=1.0).contains(&r.judge_score) {
            return Err(Error::Format(format!("{}: judge_score {} outside [0, 1]", r.patch_id, r.judge_score)));
        }
        if r.human_score.is_some_and(|h| !(0.0..=1.0).contains(&h)) {
            return Err(Error::Format(format!("{}: human_score outside [0, 1]", r.patch_id)));
        }
        if r.description.trim().is_empty() {
            return Err(Error::Format(format!("{}: empty description", r.patch_id)));
        }
        if r.label >= r.probs.len() {
            return Err(Error::Format(format!("{}: label {} without probability", r.patch_id, r.label)));
        }
        Ok(Self {
            chain: ReasoningChain {
                patch_id: r.patch_id.clone(),
                steps: r.steps,
            },
            patch_id: r.patch_id,
            dist: LabelDistribution {
                probs: r.probs,
                label: r.label,
            },
            description: r.description,
            judge_score: r.judge_score,
            human_score: r.human_score,
        })
    }
}

pub fn write_records(mut out: impl Write, records: &[PatchRecord]) -> Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_json_line())?;
    }
    Ok(())
}

pub fn read_records(input: impl BufRead) -> Result<Vec<PatchRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(PatchRecord::from_json_line(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorPolicy {
    Abort,
    SkipAndLog,
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    pub parallelism: usize,
    pub policy: ErrorPolicy,
    pub aggregator: AggregatorParams,
    pub endpoints: Endpoints,
}

impl PipelineConfig {
    pub fn mock(patch_size: usize) -> Self {
        Self {
            patch_h: patch_size,
            patch_w: patch_size,
            parallelism: 1,
            policy: ErrorPolicy::Abort,
            aggregator: AggregatorParams::density_prior(0xa66),
            endpoints: Endpoints::mock(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkippedPatch {
    pub patch_id: String,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct PipelineOutput {
    pub records: Vec<PatchRecord>,
    pub skipped: Vec<SkippedPatch>,
}

pub fn patch_id(index: usize) -> String {
    format!("patch_{index:04}")
}

/// Step → aggregate → describe → judge for one patch.
pub fn annotate_patch(id: &str, patch: &Tensor, config: &PipelineConfig) -> Result<PatchRecord> {
    let e = &config.endpoints;
    let chain = run_step_agent(id, patch, &e.step)?;
    let dist = aggregate_reasoning(&chain, &config.aggregator).map_err(|err| agent_err(id, err.to_string()))?;
    let description = describe_patch(id, patch, dist.label, &chain, &e.describe)?;
    let judge_score = judge(id, patch, &chain, dist.label, &description, &e.judge)?;
    Ok(PatchRecord {
        patch_id: id.to_string(),
        chain,
        dist,
        description,
        judge_score,
        human_score: None,
    })
}

/// Splits `image` into patches and annotates them, up to `parallelism` at a
/// time. Records come back in patch order.
pub fn run_pipeline(image: &Tensor, config: &PipelineConfig) -> Result<PipelineOutput> {
    use rayon::prelude::*;
    let patches = split_patches(image, config.patch_h, config.patch_w)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start annotation workers: {e}")))?;
    let results: Vec<Result<PatchRecord>> = pool.install(|| {
        patches
            .par_iter()
            .enumerate()
            .map(|(i, p)| annotate_patch(&patch_id(i), p, config))
            .collect()
    });
    let mut out = PipelineOutput::default();
    for (i, r) in results.into_iter().enumerate() {
        match (r, config.policy) {
            (Ok(rec), _) => out.records.push(rec),
            (Err(e), ErrorPolicy::Abort) => return Err(e),
            (Err(e), ErrorPolicy::SkipAndLog) => out.skipped.push(SkippedPatch {
                patch_id: patch_id(i),
                message: e.to_string(),
            }),
        }
    }
    Ok(out)
}

/// Reads `patch_id,score` rows.
pub fn read_human_scores(input: impl std::io::Read) -> Result<Vec<(String, f64)>> {
    #[derive(Deserialize)]
    struct Row {
        patch_id: String,
        score: f64,
    }
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["patch_id", "score"] {
        return Err(Error::Format(format!("expected header patch_id,score, got {headers:?}")));
    }
    let mut out = Vec::new();
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(|e| Error::Format(e.to_string()))?;
        if !(0.0..=1.0).contains(&row.score) {
            return Err(Error::Format(format!("{}: human score {} outside [0, 1]", row.patch_id, row.score)));
        }
        out.push((row.patch_id, row.score));
    }
    Ok(out)
}

/// Attaches imported scores to records by patch id.
pub fn attach_human_scores(records: &mut [PatchRecord], scores: &[(String, f64)]) -> Result<()> {
    for (id, score) in scores {
        let Some(r) = records.iter_mut().find(|r| &r.patch_id == id) else {
            return contract_err(format!("human score for unknown patch {id}"));
        };
        r.human_score = Some(*score);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Agreement {
    pub spearman_rho: f64,
    pub mean_abs_diff: f64,
    pub n: usize,
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Numeric("rank correlation undefined for constant scores".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Spearman correlation and mean absolute difference between judge and
/// human scores, over records that carry a human score.
pub fn agreement(records: &[PatchRecord]) -> Result<Agreement> {
    let pairs: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| r.human_score.map(|h| (r.judge_score, h)))
        .collect();
    if pairs.len() < 3 {
        return contract_err(format!("agreement needs at least 3 human scores, got {}", pairs.len()));
    }
    let judge: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let human: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let rho = pearson(&average_ranks(&judge), &average_ranks(&human))?;
    let mad = pairs.iter().map(|(j, h)| (j - h).abs()).sum::<f64>() / pairs.len() as f64;
    Ok(Agreement {
        spearman_rho: rho,
        mean_abs_diff: mad,
        n: pairs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_sample, gen_sample_with_count, gen_slide};

    fn record(id: usize, judge: f64, human: Option<f64>) -> PatchRecord {
        PatchRecord {
            patch_id: patch_id(id),
            chain: ReasoningChain {
                patch_id: patch_id(id),
                steps: vec![ReasoningStep {
                    statement: "s".into(),
                    features: vec![0.0; STEP_FEATURES],
                }],
            },
            dist: LabelDistribution::from_logits(&[0.0, 0.0, 0.0]).unwrap(),
            description: "d".into(),
            judge_score: judge,
            human_score: human,
        }
    }

    #[test]
    fn softmax_labels_and_ties() {
        let d = LabelDistribution::from_logits(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(d.label, 0);
        assert!(d.probs.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        let d = LabelDistribution::from_logits(&[1.0, 3.0, 3.0]).unwrap();
        assert_eq!(d.label, 1);
        let shifted = LabelDistribution::from_logits(&[1001.0, 1003.0, 1003.0]).unwrap();
        assert_eq!(shifted.label, 1);
        for (a, b) in d.probs.iter().zip(&shifted.probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_features_give_uniform() {
        let chain = ReasoningChain {
            patch_id: "p".into(),
            steps: vec![ReasoningStep {
                statement: "x".into(),
                features: vec![0.0; STEP_FEATURES],
            }],
        };
        let d = aggregate_reasoning(&chain, &AggregatorParams::seeded(4, STEP_FEATURES, 3)).unwrap();
        assert_eq!(d.label, 0);
        assert!(d.probs.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        let narrow = AggregatorParams::seeded(4, 5, 3);
        assert!(matches!(aggregate_reasoning(&chain, &narrow), Err(Error::Shape(_))));
        let empty = ReasoningChain {
            patch_id: "p".into(),
            steps: vec![],
        };
        assert!(aggregate_reasoning(&empty, &narrow).is_err());
    }

    #[test]
    fn aggregator_matches_straight_line() {
        let s = gen_sample(21);
        let chain = mock_step("p", &s.image).unwrap();
        let params = AggregatorParams::seeded(77, STEP_FEATURES, 3);
        let d = aggregate_reasoning(&chain, &params).unwrap();
        let mut logits = [0.0f64; 3];
        for (j, l) in logits.iter_mut().enumerate() {
            for step in &chain.steps {
                for i in 0..STEP_FEATURES {
                    *l += step.features[i] * params.projection.data()[i * 3 + j] / 3.0;
                }
            }
        }
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        for j in 0..3 {
            assert!((d.probs[j] - logits[j].exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn mock_step_counts_blobs() {
        for k in [1usize, 3, 5] {
            let s = gen_sample_with_count(40 + k as u64, k);
            let chain = mock_step("p", &s.image).unwrap();
            assert_eq!(chain.steps[0].value(), Some(count_components(&s.mask) as f64));
            assert_eq!(chain.steps.len(), 3);
        }
        let five = gen_sample_with_count(7, 5);
        assert_eq!(mock_step("p", &five.image).unwrap().steps[0].statement, "5 nuclei detected");
        let blank = Tensor::full(&[3, 32, 32], 0.8);
        let chain = mock_step("p", &blank).unwrap();
        assert_eq!(chain.steps[0].statement, "no nuclei detected");
        assert_eq!(chain.steps[0].value(), Some(0.0));
        assert_eq!(chain, mock_step("p", &blank).unwrap());
    }

    #[test]
    fn texture_measurement_matches_generator() {
        let hits = (0..200)
            .filter(|&i| {
                let s = gen_sample(i);
                measure(&s.image).unwrap().texture() == s.texture
            })
            .count();
        assert!(hits >= 195, "{hits}/200");
    }

    #[test]
    fn golden_description() {
        assert_eq!(
            describe_template(2, Texture::Coarse, 8),
            "dense cluster of 8 nuclei on coarse stroma"
        );
        assert_eq!(describe_template(0, Texture::Fine, 1), "sparse scatter of 1 nucleus on fine stroma");
        assert_eq!(describe_template(1, Texture::Fine, 12), describe_template(1, Texture::Fine, 9));
    }

    #[test]
    fn description_density_word_matches_label() {
        let params = AggregatorParams::density_prior(3);
        for seed in 0..1000 {
            let s = gen_sample(seed);
            let chain = mock_step("p", &s.image).unwrap();
            let d = aggregate_reasoning(&chain, &params).unwrap();
            let text = mock_describe(&s.image, d.label, &chain).unwrap();
            assert_eq!(text.split(' ').next(), Some(density_word(d.label)));
        }
    }

    #[test]
    fn judge_rubric() {
        let s = gen_sample_with_count(5, 4);
        let chain = mock_step("p", &s.image).unwrap();
        let params = AggregatorParams::density_prior(3);
        let d = aggregate_reasoning(&chain, &params).unwrap();
        let text = mock_describe(&s.image, d.label, &chain).unwrap();
        let full = mock_judge(&s.image, &chain, d.label, &text).unwrap();
        assert_eq!(full, 1.0);

        let wrong = text.replacen(density_word(d.label), density_word((d.label + 1) % 3), 1);
        assert!(mock_judge(&s.image, &chain, d.label, &wrong).unwrap() <= 0.8);

        let mut bad = chain.clone();
        bad.steps[1].features[VALUE] += 5.0 * INTENSITY_TOLERANCE;
        let q = mock_judge(&s.image, &bad, d.label, &text).unwrap();
        assert!((full - q - 0.2).abs() < 1e-12);
    }

    #[test]
    fn pipeline_orders_and_is_deterministic() {
        let (slide, _) = gen_slide(8, 4, 2);
        let mut cfg = PipelineConfig::mock(32);
        let a = run_pipeline(&slide, &cfg).unwrap();
        cfg.parallelism = 3;
        let b = run_pipeline(&slide, &cfg).unwrap();
        assert_eq!(a.records.len(), 8);
        assert_eq!(a.records, b.records);
        for (i, r) in a.records.iter().enumerate() {
            assert_eq!(r.patch_id, patch_id(i));
            assert!((0.0..=1.0).contains(&r.judge_score));
        }
    }

    #[test]
    fn record_line_round_trip() {
        let (slide, _) = gen_slide(2, 2, 1);
        let mut out = run_pipeline(&slide, &PipelineConfig::mock(32)).unwrap();
        out.records[1].human_score = Some(0.25);
        let mut buf = Vec::new();
        write_records(&mut buf, &out.records).unwrap();
        let back = read_records(buf.as_slice()).unwrap();
        assert_eq!(back, out.records);
        let mut again = Vec::new();
        write_records(&mut again, &back).unwrap();
        assert_eq!(again, buf);
        let line = String::from_utf8(buf).unwrap();
        assert!(line.contains("\"human_score\":null"));
        assert!(line.starts_with("{\"patch_id\":\"patch_0000\",\"steps\":[[\""));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[0.5, 0.1, 0.5, 0.9]), vec![2.5, 1.0, 2.5, 4.0]);
    }

    #[test]
    fn agreement_cases() {
        let scores = [0.1, 0.4, 0.35, 0.9, 0.6];
        let same: Vec<_> = scores.iter().enumerate().map(|(i, &s)| record(i, s, Some(s))).collect();
        let a = agreement(&same).unwrap();
        assert_eq!((a.spearman_rho, a.mean_abs_diff), (1.0, 0.0));
        let rev: Vec<_> = scores.iter().enumerate().map(|(i, &s)| record(i, s, Some(1.0 - s))).collect();
        assert_eq!(agreement(&rev).unwrap().spearman_rho, -1.0);
        assert!(agreement(&same[..2]).is_err());
    }

    #[test]
    fn spearman_matches_brute_force() {
        let mut rng = Rng::new(10);
        let recs: Vec<_> = (0..10)
            .map(|i| record(i, rng.uniform(), Some((rng.uniform() * 4.0).floor() / 4.0)))
            .collect();
        let got = agreement(&recs).unwrap().spearman_rho;
        // rank by counting, ties averaged, then the covariance form
        let rank = |v: &[f64], x: f64| {
            let below = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        };
        let j: Vec<f64> = recs.iter().map(|r| r.judge_score).collect();
        let h: Vec<f64> = recs.iter().map(|r| r.human_score.unwrap()).collect();
        let rj: Vec<f64> = j.iter().map(|&x| rank(&j, x)).collect();
        let rh: Vec<f64> = h.iter().map(|&x| rank(&h, x)).collect();
        let n = 10.0;
        let (mj, mh) = (rj.iter().sum::<f64>() / n, rh.iter().sum::<f64>() / n);
        let num: f64 = rj.iter().zip(&rh).map(|(a, b)| (a - mj) * (b - mh)).sum();
        let den = (rj.iter().map(|a| (a - mj).powi(2)).sum::<f64>() * rh.iter().map(|b| (b - mh).powi(2)).sum::<f64>()).sqrt();
        assert!((got - num / den).abs() < 1e-12);
    }

    #[test]
    fn human_scores_csv() {
        let csv = "patch_id,score\npatch_0000,0.5\npatch_0002,1\n";
        let scores = read_human_scores(csv.as_bytes()).unwrap();
        assert_eq!(scores, vec![("patch_0000".into(), 0.5), ("patch_0002".into(), 1.0)]);
        let mut recs: Vec<_> = (0..3).map(|i| record(i, 0.5, None)).collect();
        attach_human_scores(&mut recs, &scores).unwrap();
        assert_eq!(recs[2].human_score, Some(1.0));
        assert!(attach_human_scores(&mut recs, &[("nope".into(), 0.1)]).is_err());
        assert!(read_human_scores("id,score\nx,0.1\n".as_bytes()).is_err());
        assert!(read_human_scores("patch_id,score\nx,1.5\n".as_bytes()).is_err());
    }
}
