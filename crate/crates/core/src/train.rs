//! Two-phase training.
//!
//! Phase 1 trains everything except the fixation point generator (FPG) on
//! the task loss with randomly placed fixations. Phase 2 freezes that
//! network and trains the FPG alone with REINFORCE, rewarding each fixation
//! by how much it lowered the task loss.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tdfn_tensor::{AdamState, Tape, Tensor};

use crate::checkpoint::{Checkpoint, OptimizerState, Phase};
use crate::config::TrainConfig;
use crate::data::{batch_iter, Dataset};
use crate::episode::{saliency_batch, EpisodeBatch};
use crate::error::{Error, Result};
use crate::fixation::{sample_fixation, RegionSet, SampleMode};
use crate::model::{crop_region, is_fpg_param, pool_lowres, TdfnModel};

/// Components of the task loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f32,
    pub class: f32,
    pub recon: f32,
}

/// Task loss of one sample: cross-entropy of the class probabilities plus
/// `alpha` times the pixel mean squared error of the raw reconstruction.
pub fn task_loss(class_probs: &Tensor, label: usize, recon: &Tensor, image: &Tensor, alpha: f32) -> Result<LossParts> {
    if label >= class_probs.numel() {
        return Err(Error::Invalid(format!("label {label} out of range")));
    }
    if recon.numel() != image.numel() {
        return Err(Error::InputShape {
            expected: format!("{}-pixel reconstruction", image.numel()),
            got: recon.shape().to_vec(),
        });
    }
    let class = -(class_probs.data()[label] as f64).max(f64::MIN_POSITIVE).ln();
    let recon = mse(recon.data(), image.data());
    Ok(combine(class, recon, alpha))
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64
}

fn combine(class: f64, recon: f64, alpha: f32) -> LossParts {
    LossParts {
        total: (class + alpha as f64 * recon) as f32,
        class: class as f32,
        recon: recon as f32,
    }
}

/// Per-sample task losses from logits (`[B, classes]`) and raw
/// reconstructions (`[B, pixels]`).
pub fn sample_losses(logits: &[f32], labels: &[usize], recon: &[f32], images: &[f32], alpha: f32) -> Vec<LossParts> {
    let b = labels.len();
    let classes = logits.len() / b;
    let px = recon.len() / b;
    (0..b)
        .map(|i| {
            let row = &logits[i * classes..(i + 1) * classes];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
            let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
            let class = lse - row[labels[i]] as f64;
            let recon = mse(&recon[i * px..(i + 1) * px], &images[i * px..(i + 1) * px]);
            combine(class, recon, alpha)
        })
        .collect()
}

/// Mean task-loss components over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub task_loss: f32,
    pub class_loss: f32,
    pub recon_loss: f32,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,task_loss,class_loss,recon_loss";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6}",
            self.epoch, self.task_loss, self.class_loss, self.recon_loss
        )
    }
}

#[derive(Default)]
struct Mean {
    total: f64,
    class: f64,
    recon: f64,
    count: usize,
}

impl Mean {
    fn add(&mut self, parts: LossParts, weight: usize) {
        self.total += parts.total as f64 * weight as f64;
        self.class += parts.class as f64 * weight as f64;
        self.recon += parts.recon as f64 * weight as f64;
        self.count += weight;
    }

    fn finish(&self, epoch: usize) -> EpochMetrics {
        let n = self.count.max(1) as f64;
        EpochMetrics {
            epoch,
            task_loss: (self.total / n) as f32,
            class_loss: (self.class / n) as f32,
            recon_loss: (self.recon / n) as f32,
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn limited(data: &Dataset, limit: usize) -> usize {
    if limit == 0 {
        data.len()
    } else {
        limit.min(data.len())
    }
}

fn optimizer_state(model: &TdfnModel, adam: &AdamState, filter: impl Fn(&str) -> bool) -> OptimizerState {
    OptimizerState {
        names: model
            .store
            .iter()
            .map(|(n, _)| n)
            .filter(|n| filter(n))
            .map(String::from)
            .collect(),
        adam: adam.clone(),
    }
}

fn adam_from(config: &TrainConfig, lr: f32) -> AdamState {
    AdamState::new(lr, config.beta1, config.beta2, config.epsilon)
}

fn check_budget(model: &TdfnModel, config: &TrainConfig) -> Result<()> {
    if config.max_fixations > model.geometry.num_regions() {
        return Err(Error::Invalid(format!(
            "max_fixations {} exceeds the {} regions",
            config.max_fixations,
            model.geometry.num_regions()
        )));
    }
    Ok(())
}

/// Phase 1 trainer.
pub struct TaskTrainer {
    pub model: TdfnModel,
    pub adam: AdamState,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl TaskTrainer {
    pub fn new(model: TdfnModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        check_budget(&model, &config)?;
        Ok(TaskTrainer {
            adam: adam_from(&config, config.learning_rate),
            rng: rng_for(config.seed, 1),
            model,
            config,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Continues the epoch count of a resumed run, so later epochs use the
    /// same shuffles and draws as an uninterrupted one.
    pub fn resume_at(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    /// One pass over the (possibly limited) training set.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        let len = limited(data, self.config.train_limit);
        if len == 0 {
            return Err(Error::EmptyDataset);
        }
        self.epoch += 1;
        self.rng = rng_for(self.config.seed.wrapping_add(self.epoch as u64), 1);
        let mut mean = Mean::default();
        let shuffle_seed = self.config.seed.wrapping_add(self.epoch as u64);
        for batch in batch_iter(len, self.config.batch_size, shuffle_seed, true) {
            let n = self.rng.random_range(0..=self.config.max_fixations);
            let parts = self.step(data, &batch, n)?;
            mean.add(parts, batch.len());
        }
        Ok(mean.finish(self.epoch))
    }

    /// One update with `n` uniformly drawn distinct regions per sample.
    pub fn step(&mut self, data: &Dataset, batch: &[usize], n: usize) -> Result<LossParts> {
        let regions_total = self.model.geometry.num_regions();
        if n > regions_total {
            return Err(Error::Invalid(format!("{n} fixations exceed {regions_total} regions")));
        }
        let regions: Vec<Vec<usize>> = batch
            .iter()
            .map(|_| sample_indices(&mut self.rng, regions_total, n).into_vec())
            .collect();
        self.step_with_regions(data, batch, &regions)
    }

    /// One update with explicit fixation regions per sample.
    pub fn step_with_regions(&mut self, data: &Dataset, batch: &[usize], regions: &[Vec<usize>]) -> Result<LossParts> {
        let model = &self.model;
        let g = model.geometry;
        let b = batch.len();
        if b == 0 || regions.len() != b {
            return Err(Error::Invalid("batch and region lists must be non-empty and equal length".into()));
        }
        let n = regions[0].len();
        let images: Vec<f32> = batch.iter().flat_map(|&i| data.image(i).iter().copied()).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| data.label(i)).collect();
        let lowres: Vec<f32> = batch.iter().flat_map(|&i| pool_lowres(&g, data.image(i))).collect();
        let rois: Vec<f32> = batch
            .iter()
            .zip(regions)
            .flat_map(|(&i, regs)| regs.iter().flat_map(move |&r| crop_region(&g, data.image(i), r)))
            .collect();

        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, |name| !is_fpg_param(name));
        let lrc = model.lrc_pairs(&mut tape, &p, &lowres, b)?;
        let hrc = if n > 0 {
            Some(model.hrc_pairs(&mut tape, &p, &rois, b * n)?)
        } else {
            None
        };
        let (cls, rec) = model.he_readouts(&mut tape, &p, lrc, hrc, regions)?;
        let logits = model.class_logits(&mut tape, &p, cls)?;
        let recon = model.reconstruction(&mut tape, &p, rec)?;
        let class = tape.cross_entropy(logits, &labels)?;
        let target = tape.constant(Tensor::new(&[b, g.image_pixels()], images)?);
        let recon_loss = tape.mse(recon, target)?;
        let weighted = tape.scale(recon_loss, self.config.alpha);
        let loss = tape.add(class, weighted)?;
        tape.backward(loss)?;

        let parts = combine(
            tape.value(class).item()? as f64,
            tape.value(recon_loss).item()? as f64,
            self.config.alpha,
        );
        self.model.store.zero_grads();
        self.model.store.accumulate(&tape, &p)?;
        self.adam
            .step(&mut self.model.store.select_mut(|name| !is_fpg_param(name)))?;
        Ok(parts)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.model.clone(), Phase::Task, self.config.seed, self.config.render());
        c.epochs = self.epoch as u32;
        c.optimizer = Some(optimizer_state(&self.model, &self.adam, |n| !is_fpg_param(n)));
        c
    }
}

/// Trains phase 1 for `config.epochs_phase1` epochs, reporting each epoch.
pub fn train_task_phase(
    model: TdfnModel,
    data: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &TaskTrainer) -> Result<()>,
) -> Result<TaskTrainer> {
    let mut trainer = TaskTrainer::new(model, config.clone())?;
    for _ in 0..config.epochs_phase1 {
        let m = trainer.run_epoch(data)?;
        on_epoch(&m, &trainer)?;
    }
    Ok(trainer)
}

/// One fixation of a policy-training episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixationStepRecord {
    /// Fixation ordinal, from 1.
    pub step: usize,
    pub region: usize,
    /// Renormalised probability of `region` among unvisited regions.
    pub prob: f32,
    pub loss_before: f32,
    pub loss_after: f32,
    pub reward: f32,
    /// `-reward · ln(prob)`
    pub rl_loss: f32,
}

impl FixationStepRecord {
    /// Derives the reward and policy loss from the two task losses.
    pub fn new(step: usize, region: usize, prob: f32, loss_before: f32, loss_after: f32) -> Self {
        let reward = loss_before - loss_after;
        FixationStepRecord {
            step,
            region,
            prob,
            loss_before,
            loss_after,
            reward,
            rl_loss: -reward * prob.ln(),
        }
    }
}

/// Adds the gradient of `mean_b(-advantage_b · ln p_b(chosen_b))` to the
/// FPG parameters, where `p_b` is the FPG softmax over the regions not in
/// `visited_b`. `rec` holds the rec readouts, `[B, dim]`.
pub fn accumulate_policy_gradient(
    model: &mut TdfnModel,
    rec: &[f32],
    visited: &[RegionSet],
    chosen: &[usize],
    advantages: &[f32],
) -> Result<f32> {
    let b = visited.len();
    let regions = model.geometry.num_regions();
    let dim = model.geometry.embed_dim;
    if rec.len() != b * dim || chosen.len() != b || advantages.len() != b || b == 0 {
        return Err(Error::Invalid("policy batch inputs disagree in length".into()));
    }
    let mut mask = vec![0.0f32; b * regions];
    for (i, v) in visited.iter().enumerate() {
        if v.contains(chosen[i]) {
            return Err(Error::Memory(format!("region {} already visited", chosen[i])));
        }
        for r in 0..regions {
            if v.contains(r) {
                mask[i * regions + r] = -1e9;
            }
        }
    }
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, is_fpg_param);
    let x = tape.constant(Tensor::new(&[b, dim], rec.to_vec())?);
    let logits = model.fpg_logits(&mut tape, &p, x)?;
    let mask = tape.constant(Tensor::new(&[b, regions], mask)?);
    let masked = tape.add(logits, mask)?;
    let logp = tape.log_softmax(masked);
    let flat: Vec<usize> = chosen.iter().enumerate().map(|(i, &r)| i * regions + r).collect();
    let picked = tape.pick(logp, &flat)?;
    let weights: Vec<f32> = advantages.iter().map(|&a| -a / b as f32).collect();
    let weights = tape.constant(Tensor::vector(weights));
    let terms = tape.mul(picked, weights)?;
    let loss = tape.sum(terms);
    tape.backward(loss)?;
    model.store.accumulate(&tape, &p)?;
    Ok(tape.value(loss).item()?)
}

/// Applies one Adam update to the FPG parameters.
pub fn fpg_update(model: &mut TdfnModel, adam: &mut AdamState) -> Result<()> {
    adam.step(&mut model.store.select_mut(is_fpg_param))?;
    model.store.zero_grads();
    Ok(())
}

/// Policy-phase summary of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyMetrics {
    pub epoch: usize,
    /// Mean task loss before the first fixation.
    pub initial_loss: f32,
    /// Mean task loss after the last fixation.
    pub final_loss: f32,
    pub mean_reward: f32,
    pub rl_loss: f32,
}

impl PolicyMetrics {
    pub const CSV_HEADER: &'static str = "epoch,initial_loss,final_loss,mean_reward,rl_loss";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.initial_loss, self.final_loss, self.mean_reward, self.rl_loss
        )
    }
}

/// Phase 2 trainer.
pub struct PolicyTrainer {
    pub model: TdfnModel,
    pub adam: AdamState,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl PolicyTrainer {
    pub fn new(model: TdfnModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        check_budget(&model, &config)?;
        Ok(PolicyTrainer {
            adam: adam_from(&config, config.fpg_learning_rate),
            rng: rng_for(config.seed, 2),
            model,
            config,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn resume_at(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn run_epoch(&mut self, data: &Dataset) -> Result<PolicyMetrics> {
        let len = limited(data, self.config.fpg_train_limit);
        if len == 0 {
            return Err(Error::EmptyDataset);
        }
        self.epoch += 1;
        self.rng = rng_for(self.config.seed.wrapping_add(self.epoch as u64), 2);
        let (mut first, mut last, mut reward, mut rl, mut samples, mut steps) = (0f64, 0f64, 0f64, 0f64, 0usize, 0usize);
        let shuffle_seed = self.config.seed.wrapping_add(1000 + self.epoch as u64);
        for batch in batch_iter(len, self.config.fpg_batch_size, shuffle_seed, true) {
            for episode in self.episode_batch(data, &batch)? {
                if let (Some(a), Some(z)) = (episode.first(), episode.last()) {
                    first += a.loss_before as f64;
                    last += z.loss_after as f64;
                }
                for r in &episode {
                    reward += r.reward as f64;
                    rl += r.rl_loss as f64;
                }
                samples += 1;
                steps += episode.len();
            }
        }
        let s = samples.max(1) as f64;
        let t = steps.max(1) as f64;
        Ok(PolicyMetrics {
            epoch: self.epoch,
            initial_loss: (first / s) as f32,
            final_loss: (last / s) as f32,
            mean_reward: (reward / t) as f32,
            rl_loss: (rl / t) as f32,
        })
    }

    /// Runs full-length episodes for `batch`, sampling fixations from the
    /// FPG, and applies one policy update. Returns the per-step records of
    /// each sample.
    pub fn episode_batch(&mut self, data: &Dataset, batch: &[usize]) -> Result<Vec<Vec<FixationStepRecord>>> {
        let images: Vec<&[f32]> = batch.iter().map(|&i| data.image(i)).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| data.label(i)).collect();
        let alpha = self.config.alpha;
        let b = batch.len();
        let all: Vec<usize> = (0..b).collect();
        let mut records = vec![Vec::with_capacity(self.config.max_fixations); b];

        let mut episodes = EpisodeBatch::new(&self.model, &images)?;
        let flat: Vec<f32> = images.concat();
        let out = episodes.readout(&all)?;
        let mut before: Vec<f32> = sample_losses(&out.logits, &labels, &out.recon, &flat, alpha)
            .iter()
            .map(|l| l.total)
            .collect();
        let mut rec = out.rec;
        let mut steps = Vec::with_capacity(self.config.max_fixations);
        for step in 1..=self.config.max_fixations {
            let maps = saliency_batch(&self.model, &rec)?;
            let visited: Vec<RegionSet> = all.iter().map(|&s| episodes.visited(s)).collect();
            let mut chosen = Vec::with_capacity(b);
            for (s, map) in maps.iter().enumerate() {
                let (region, prob) = sample_fixation(map, &visited[s], &mut self.rng, SampleMode::Sample)?;
                episodes.fixate(s, region)?;
                chosen.push((region, prob));
            }
            let out = episodes.readout(&all)?;
            let after: Vec<f32> = sample_losses(&out.logits, &labels, &out.recon, &flat, alpha)
                .iter()
                .map(|l| l.total)
                .collect();
            let mut rewards = Vec::with_capacity(b);
            for s in 0..b {
                let (region, prob) = chosen[s];
                let record = FixationStepRecord::new(step, region, prob, before[s], after[s]);
                rewards.push(record.reward);
                records[s].push(record);
            }
            steps.push((rec, visited, chosen.iter().map(|c| c.0).collect::<Vec<_>>(), rewards));
            before = after;
            rec = out.rec;
        }
        drop(episodes);

        self.model.store.zero_grads();
        let baseline = self.config.reward_baseline;
        for (rec, visited, chosen, rewards) in steps {
            let adv: Vec<f32> = rewards.iter().map(|r| r - baseline).collect();
            accumulate_policy_gradient(&mut self.model, &rec, &visited, &chosen, &adv)?;
        }
        fpg_update(&mut self.model, &mut self.adam)?;
        Ok(records)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.model.clone(), Phase::Fpg, self.config.seed, self.config.render());
        c.epochs = self.epoch as u32;
        c.optimizer = Some(optimizer_state(&self.model, &self.adam, is_fpg_param));
        c
    }
}

/// Trains phase 2 for `config.epochs_phase2` epochs.
pub fn train_fpg_phase(
    model: TdfnModel,
    data: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&PolicyMetrics, &PolicyTrainer) -> Result<()>,
) -> Result<PolicyTrainer> {
    let mut trainer = PolicyTrainer::new(model, config.clone())?;
    for _ in 0..config.epochs_phase2 {
        let m = trainer.run_epoch(data)?;
        on_epoch(&m, &trainer)?;
    }
    Ok(trainer)
}

/// Policy-gradient sanity probe: a one-step bandit on a fixed rec readout
/// where `rewarded` pays +1 and every other region pays 0. Each update
/// samples `batch` regions from the FPG, applies the phase 2 gradient and
/// one Adam step. Returns the probability of `rewarded` after each update.
pub fn policy_bandit(
    model: &mut TdfnModel,
    rewarded: usize,
    updates: usize,
    batch: usize,
    learning_rate: f32,
    seed: u64,
) -> Result<Vec<f32>> {
    model.check_region(rewarded)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = model.geometry.embed_dim;
    let readout: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rec = readout.repeat(batch);
    let visited = vec![RegionSet::new(); batch];
    let mut adam = AdamState::with_lr(learning_rate);
    model.store.zero_grads();
    let mut trajectory = Vec::with_capacity(updates);
    for _ in 0..updates {
        let map = &saliency_batch(model, &readout)?[0];
        let mut chosen = Vec::with_capacity(batch);
        let mut rewards = Vec::with_capacity(batch);
        for v in &visited {
            let (region, _) = sample_fixation(map, v, &mut rng, SampleMode::Sample)?;
            chosen.push(region);
            rewards.push(if region == rewarded { 1.0 } else { 0.0 });
        }
        accumulate_policy_gradient(model, &rec, &visited, &chosen, &rewards)?;
        fpg_update(model, &mut adam)?;
        trajectory.push(saliency_batch(model, &readout)?[0].probs()[rewarded]);
    }
    Ok(trajectory)
}
