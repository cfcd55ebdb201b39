//! Fixation episodes with optional MCP termination, and the accuracy /
//! coverage harness over a dataset.
//!
//! The MCP check happens before every fixation, including the first, so a
//! threshold the LRC-only prediction already meets ends the episode with
//! zero fixations.
//!
//! Every sample draws from its own rng stream derived from the evaluation
//! seed and the sample index. Because of this a budget-`n` episode is the
//! first `n` steps of the budget-16 episode, and an MCP-terminated episode
//! is a prefix of the unterminated one; the sweep functions exploit both to
//! score several budgets or thresholds from one run.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tdfn_tensor::Tensor;

use crate::data::Dataset;
use crate::episode::{saliency_batch, softmax_rows, EpisodeBatch};
use crate::error::{Error, Result};
use crate::fixation::{random_fixation, sample_fixation, SampleMode};
use crate::model::TdfnModel;

/// Samples run in lockstep per batch during evaluation.
pub const EVAL_BATCH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    Random,
    Fpg,
}

impl Policy {
    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Random => "random",
            Policy::Fpg => "fpg",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Policy::Random),
            "fpg" => Ok(Policy::Fpg),
            _ => Err(Error::Invalid(format!("unknown policy {s:?} (random | fpg)"))),
        }
    }
}

/// Classifier state at one point of an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub class_probs: Vec<f32>,
    pub mcp: f32,
    /// Raw reconstruction, kept only when requested.
    pub reconstruction: Option<Tensor>,
}

impl Snapshot {
    fn new(class_probs: Vec<f32>, reconstruction: Option<Tensor>) -> Self {
        let mcp = class_probs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        Snapshot {
            class_probs,
            mcp,
            reconstruction,
        }
    }

    /// Most probable class, ties to the lowest index.
    pub fn prediction(&self) -> usize {
        argmax(&self.class_probs)
    }
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub region: usize,
    /// Probability the policy assigned to `region`.
    pub prob: f32,
    /// State after the fixation.
    pub snapshot: Snapshot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixationTrace {
    /// LRC-only state before any fixation.
    pub initial: Snapshot,
    pub steps: Vec<TraceStep>,
}

impl FixationTrace {
    pub fn steps_used(&self) -> usize {
        self.steps.len()
    }

    pub fn regions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.region).collect()
    }

    /// State after `n` fixations (clamped to the last step).
    pub fn snapshot_at(&self, n: usize) -> &Snapshot {
        match n.min(self.steps.len()) {
            0 => &self.initial,
            k => &self.steps[k - 1].snapshot,
        }
    }

    pub fn final_snapshot(&self) -> &Snapshot {
        self.snapshot_at(self.steps.len())
    }

    pub fn prediction(&self) -> usize {
        self.final_snapshot().prediction()
    }

    /// Fixations an MCP threshold would have allowed: the first step whose
    /// state reaches `threshold`, or the whole trace.
    pub fn stop_step(&self, threshold: f32) -> usize {
        (0..=self.steps.len())
            .find(|&n| self.snapshot_at(n).mcp >= threshold)
            .unwrap_or(self.steps.len())
    }
}

/// Episode settings shared by every sample of a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeConfig {
    pub policy: Policy,
    pub mode: SampleMode,
    pub max_steps: usize,
    pub mcp_threshold: Option<f32>,
    pub keep_reconstructions: bool,
}

impl EpisodeConfig {
    pub fn new(policy: Policy, mode: SampleMode, max_steps: usize) -> Self {
        EpisodeConfig {
            policy,
            mode,
            max_steps,
            mcp_threshold: None,
            keep_reconstructions: false,
        }
    }
}

/// Rng of sample `index` under evaluation seed `seed`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Runs one episode on a `[side, side]` image.
pub fn run_episode(model: &TdfnModel, image: &Tensor, config: EpisodeConfig, rng: &mut ChaCha8Rng) -> Result<FixationTrace> {
    let side = model.geometry.image_side;
    if image.shape() != [side, side] {
        return Err(Error::InputShape {
            expected: format!("[{side}, {side}] image"),
            got: image.shape().to_vec(),
        });
    }
    let mut rngs = vec![rng.clone()];
    let trace = run_lockstep(model, &[image.data()], config, &mut rngs)?.pop().unwrap();
    *rng = rngs.pop().unwrap();
    Ok(trace)
}

/// Runs episodes for many images in lockstep, sample `i` using `rngs[i]`.
pub fn run_lockstep(
    model: &TdfnModel,
    images: &[&[f32]],
    config: EpisodeConfig,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<FixationTrace>> {
    let regions = model.geometry.num_regions();
    if config.max_steps > regions {
        return Err(Error::Invalid(format!(
            "max_steps {} exceeds the {regions} regions",
            config.max_steps
        )));
    }
    if rngs.len() != images.len() {
        return Err(Error::Invalid("one rng per image required".into()));
    }
    let classes = model.geometry.num_classes;
    let side = model.geometry.image_side;
    let px = model.geometry.image_pixels();
    let dim = model.geometry.embed_dim;
    let mut episodes = EpisodeBatch::new(model, images)?;

    let snapshots = |out: &crate::episode::Readout| -> Result<Vec<Snapshot>> {
        let probs = softmax_rows(&out.logits, classes);
        probs
            .chunks(classes)
            .enumerate()
            .map(|(i, p)| {
                let recon = if config.keep_reconstructions {
                    Some(Tensor::new(&[side, side], out.recon[i * px..(i + 1) * px].to_vec())?)
                } else {
                    None
                };
                Ok(Snapshot::new(p.to_vec(), recon))
            })
            .collect()
    };

    let all: Vec<usize> = (0..images.len()).collect();
    let out = episodes.readout(&all)?;
    let mut rec = out.rec.clone();
    let mut traces: Vec<FixationTrace> = snapshots(&out)?
        .into_iter()
        .map(|initial| FixationTrace {
            initial,
            steps: Vec::new(),
        })
        .collect();
    let reached = |t: &FixationTrace| config.mcp_threshold.is_some_and(|th| t.final_snapshot().mcp >= th);
    let mut active: Vec<usize> = all.into_iter().filter(|&s| !reached(&traces[s])).collect();

    for _ in 0..config.max_steps {
        if active.is_empty() {
            break;
        }
        let maps = match config.policy {
            Policy::Fpg => Some(saliency_batch(model, &rec)?),
            Policy::Random => None,
        };
        let mut chosen = Vec::with_capacity(active.len());
        for (k, &s) in active.iter().enumerate() {
            let visited = episodes.visited(s);
            let pick = match &maps {
                Some(m) => sample_fixation(&m[k], &visited, &mut rngs[s], config.mode)?,
                None => random_fixation(regions, &visited, &mut rngs[s])?,
            };
            episodes.fixate(s, pick.0)?;
            chosen.push(pick);
        }
        let out = episodes.readout(&active)?;
        for ((&s, (region, prob)), snapshot) in active.iter().zip(chosen).zip(snapshots(&out)?) {
            traces[s].steps.push(TraceStep { region, prob, snapshot });
        }
        let next: Vec<usize> = active.iter().copied().filter(|&s| !reached(&traces[s])).collect();
        rec = next
            .iter()
            .flat_map(|s| {
                let k = active.iter().position(|a| a == s).unwrap();
                out.rec[k * dim..(k + 1) * dim].iter().copied()
            })
            .collect();
        active = next;
    }
    Ok(traces)
}

/// Runs episodes over the first `limit` samples of `data` (0 = all).
pub fn run_dataset(model: &TdfnModel, data: &Dataset, config: EpisodeConfig, seed: u64, limit: usize) -> Result<Vec<FixationTrace>> {
    let len = if limit == 0 { data.len() } else { limit.min(data.len()) };
    if len == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut traces = Vec::with_capacity(len);
    for start in (0..len).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(len);
        let images: Vec<&[f32]> = (start..end).map(|i| data.image(i)).collect();
        let mut rngs: Vec<ChaCha8Rng> = (start..end).map(|i| sample_rng(seed, i)).collect();
        traces.extend(run_lockstep(model, &images, config, &mut rngs)?);
    }
    Ok(traces)
}

/// What an [`EvalReport`] row was measured at.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Setting {
    Budget(usize),
    Threshold(f32),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub policy: Policy,
    pub setting: Setting,
    pub accuracy: f64,
    pub coverage: f64,
    pub avg_steps: f64,
    pub samples: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "policy,budget_or_threshold,accuracy,coverage,avg_steps";

    /// Scores samples given how many fixations each used.
    fn score(policy: Policy, setting: Setting, traces: &[FixationTrace], labels: &[usize], steps: impl Fn(&FixationTrace) -> usize, regions: usize) -> Result<Self> {
        let n = traces.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut correct = 0usize;
        let mut distinct = 0usize;
        for (t, &label) in traces.iter().zip(labels) {
            let k = steps(t);
            if t.snapshot_at(k).prediction() == label {
                correct += 1;
            }
            distinct += k;
        }
        Ok(EvalReport {
            policy,
            setting,
            accuracy: correct as f64 / n as f64,
            coverage: coverage_fraction(distinct, n * regions)?,
            avg_steps: distinct as f64 / n as f64,
            samples: n,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let setting = match self.setting {
            Setting::Budget(n) => n.to_string(),
            Setting::Threshold(t) => format!("{t:.4}"),
        };
        write!(
            f,
            "{},{},{:.4},{:.4},{:.4}",
            self.policy.as_str(),
            setting,
            self.accuracy,
            self.coverage,
            self.avg_steps
        )
    }
}

fn coverage_fraction(distinct: usize, total: usize) -> Result<f64> {
    if distinct > total || total == 0 {
        return Err(Error::Invalid(format!("coverage {distinct}/{total} out of range")));
    }
    Ok(distinct as f64 / total as f64)
}

/// Fraction of the image covered by `n_distinct` of `regions` regions.
pub fn coverage_of(n_distinct: usize, regions: usize) -> Result<f64> {
    coverage_fraction(n_distinct, regions)
}

/// Accuracy at each budget in `budgets`, all measured on one episode run.
pub fn evaluate_budgets(
    model: &TdfnModel,
    data: &Dataset,
    policy: Policy,
    mode: SampleMode,
    budgets: &[usize],
    seed: u64,
    limit: usize,
) -> Result<Vec<EvalReport>> {
    let max = budgets.iter().copied().max().unwrap_or(0);
    let traces = run_dataset(model, data, EpisodeConfig::new(policy, mode, max), seed, limit)?;
    let regions = model.geometry.num_regions();
    budgets
        .iter()
        .map(|&n| EvalReport::score(policy, Setting::Budget(n), &traces, data.labels(), |t| n.min(t.steps_used()), regions))
        .collect()
}

pub fn evaluate_fixed_budget(
    model: &TdfnModel,
    data: &Dataset,
    policy: Policy,
    mode: SampleMode,
    budget: usize,
    seed: u64,
) -> Result<EvalReport> {
    Ok(evaluate_budgets(model, data, policy, mode, &[budget], seed, 0)?.remove(0))
}

/// MCP-terminated FPG evaluation at each threshold, from one full-length
/// run.
pub fn evaluate_mcp_sweep(
    model: &TdfnModel,
    data: &Dataset,
    mode: SampleMode,
    thresholds: &[f32],
    seed: u64,
    limit: usize,
) -> Result<Vec<EvalReport>> {
    if let Some(bad) = thresholds.iter().find(|t| !(t.is_finite() && **t > 0.0 && **t < 1.0)) {
        return Err(Error::Invalid(format!("MCP threshold {bad} outside (0, 1)")));
    }
    let regions = model.geometry.num_regions();
    let traces = run_dataset(model, data, EpisodeConfig::new(Policy::Fpg, mode, regions), seed, limit)?;
    thresholds
        .iter()
        .map(|&th| {
            EvalReport::score(Policy::Fpg, Setting::Threshold(th), &traces, data.labels(), |t| t.stop_step(th), regions)
        })
        .collect()
}

pub fn evaluate_mcp(model: &TdfnModel, data: &Dataset, threshold: f32, seed: u64) -> Result<EvalReport> {
    Ok(evaluate_mcp_sweep(model, data, SampleMode::Sample, &[threshold], seed, 0)?.remove(0))
}
