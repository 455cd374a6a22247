//! Clip-higher policy optimization driven by either FR3E exploration or the
//! GRPO++ baseline.
//!
//! A training step collects prompts against a frozen snapshot of the policy,
//! drops prompts whose full-rollout group has uniform rewards, accumulates
//! per-token samples until `batch_size` prompts were accepted, and then runs
//! one pass of mini-batch gradient descent on the token-averaged clipped
//! surrogate loss. There is no KL or entropy term.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::grpo_group_advantage;
use crate::error::{contract, Error, Result};
use crate::explore::{explore_prompt, score_group, ExplorationRecord, ExploreConfig, RolloutGroup};
use crate::mdp::{GenState, Mdp, TaskInstance, Token, Trajectory};
use crate::policy::{ContextFeatures, Gradient, PolicyParams};
use crate::scalar::Scalar;
use crate::telemetry::{count_group_extremes, MetricsHistory, RunMetadata, StepStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "fr3e")]
    Fr3e,
    #[serde(rename = "grpo++")]
    GrpoPlusPlus,
}

impl Algorithm {
    /// Group-normalized advantages have unit scale while modulated ones are
    /// bounded by one and mostly far smaller, so FR3E takes a larger step.
    pub fn default_lr(self) -> f64 {
        match self {
            Algorithm::Fr3e => 12.0,
            Algorithm::GrpoPlusPlus => 3.0,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Fr3e => "fr3e",
            Algorithm::GrpoPlusPlus => "grpo++",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fr3e" => Ok(Algorithm::Fr3e),
            "grpo++" | "grpo" => Ok(Algorithm::GrpoPlusPlus),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// Scalar type a run computes in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        }
    }
}

/// Every hyperparameter of a run. Serialized as a flat TOML document;
/// missing keys take defaults, unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub precision: Precision,
    pub seed: u64,
    pub max_steps: u64,
    /// Accepted prompts per optimizer step.
    pub batch_size: usize,
    /// Prompts per gradient application.
    pub mini_batch: usize,
    /// Step size; when absent, [`Algorithm::default_lr`].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    pub eps_low: f64,
    pub eps_high: f64,
    /// Full rollouts per prompt (`G`).
    pub g_initial: usize,
    /// Entropy-sensitive positions per base trajectory (`K`).
    pub k_top: usize,
    /// Rollouts per intermediate state (`M`).
    pub m_explore: usize,
    pub max_len: usize,
    pub feature_dim: usize,
    pub window: usize,
    /// Collection attempts per step, as a multiple of `batch_size`.
    pub attempts_factor: usize,
    /// Greedy evaluation cadence in steps; 0 evaluates only the final step.
    pub eval_every: u64,
    /// Checkpoint cadence in steps; 0 keeps only the initial and final ones.
    pub checkpoint_every: u64,
    /// Exploration-record logging cadence in steps; 0 disables it.
    pub log_records_every: u64,
    /// Train on the initial full-rollout group (FR3E group 0).
    pub train_base_group: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Fr3e,
            precision: Precision::F64,
            seed: 0,
            max_steps: 200,
            batch_size: 32,
            mini_batch: 8,
            lr: None,
            eps_low: 0.22,
            eps_high: 0.28,
            g_initial: 16,
            k_top: 4,
            m_explore: 8,
            max_len: crate::mdp::DEFAULT_MAX_LEN,
            feature_dim: crate::policy::DEFAULT_FEATURE_DIM,
            window: crate::policy::DEFAULT_WINDOW,
            attempts_factor: 10,
            eval_every: 10,
            checkpoint_every: 100,
            log_records_every: 10,
            train_base_group: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.eps_low > 0.0 && self.eps_low < 1.0) || !(self.eps_high > 0.0) {
            return bad("clip bounds need 0 < eps_low < 1 and eps_high > 0");
        }
        if !(self.batch_size >= self.mini_batch && self.mini_batch >= 1) {
            return bad("batch_size >= mini_batch >= 1 required");
        }
        if !(self.lr().is_finite() && self.lr() > 0.0) {
            return bad("lr must be positive and finite");
        }
        if self.g_initial < 2 {
            return bad("g_initial must be at least 2");
        }
        if self.m_explore == 0 || self.max_len == 0 || self.feature_dim == 0 {
            return bad("m_explore, max_len and feature_dim must be positive");
        }
        if self.attempts_factor == 0 {
            return bad("attempts_factor must be positive");
        }
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.algorithm.default_lr())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Stable hash of the canonical serialization.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv_bytes(self.to_toml().as_bytes()))
    }

    pub fn explore(&self) -> ExploreConfig {
        ExploreConfig {
            k_top: self.k_top,
            m_explore: self.m_explore,
        }
    }
}

pub(crate) fn fnv_bytes(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Hash of a task suite's identities and prompts.
pub fn suite_hash(suite: &[TaskInstance]) -> String {
    let mut bytes = Vec::new();
    for t in suite {
        bytes.extend_from_slice(t.id.as_bytes());
        bytes.push(0);
        for tok in &t.prompt {
            bytes.extend_from_slice(&tok.to_le_bytes());
        }
        bytes.push(t.answer());
    }
    format!("{:016x}", fnv_bytes(&bytes))
}

/// Independent RNG stream for `(seed, path)`.
pub fn derive_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut x = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in path {
        x = splitmix(x ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    ChaCha8Rng::seed_from_u64(x)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_COLLECT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;

/// Which prompt attempt and rollout group a sample came from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub task_id: String,
    pub attempt: u64,
    pub group: usize,
}

/// One token-level training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample<T: Scalar = f64> {
    pub features: ContextFeatures,
    pub token: Token,
    pub old_logprob: T,
    pub advantage: T,
    pub provenance: Provenance,
}

/// Expands a rollout into one sample per sampled token, all sharing
/// `advantage`.
pub fn trajectory_samples<T: Scalar>(
    params: &PolicyParams<T>,
    task: &TaskInstance,
    traj: &Trajectory<T>,
    advantage: T,
    provenance: &Provenance,
) -> Vec<TrainSample<T>> {
    let mut state = GenState::with_generated(task.prompt.clone(), traj.prefix.clone());
    traj.tokens
        .iter()
        .zip(&traj.logprobs)
        .map(|(&token, &old_logprob)| {
            let features = params.featurize(&state);
            state.generated.push(token);
            TrainSample {
                features,
                token,
                old_logprob,
                advantage,
                provenance: provenance.clone(),
            }
        })
        .collect()
}

/// `true` keeps the prompt; `false` rejects a group whose rewards are all
/// equal.
pub fn reject_degenerate(rewards: &[u8]) -> Result<bool> {
    if rewards.len() < 2 {
        return Err(contract("rejection sampling needs at least two rollouts"));
    }
    Ok(rewards.iter().any(|&r| r != rewards[0]))
}

/// Importance ratio `exp(new − old)`.
pub fn ratio<T: Scalar>(new_logprob: T, old_logprob: T) -> Result<T> {
    if !(new_logprob <= T::zero() && old_logprob <= T::zero()) {
        return Err(contract("log-probabilities must be finite and <= 0"));
    }
    let r = (new_logprob - old_logprob).exp();
    if !r.is_finite() {
        return Err(Error::NonFinite("importance ratio".into()));
    }
    Ok(r)
}

/// `min(r·A, clip(r, 1 − ε_low, 1 + ε_high)·A)`.
pub fn clip_surrogate<T: Scalar>(ratio: T, advantage: T, eps_low: T, eps_high: T) -> T {
    let clipped = ratio.max(T::one() - eps_low).min(T::one() + eps_high);
    (ratio * advantage).min(clipped * advantage)
}

/// Whether the min in [`clip_surrogate`] picks the constant clipped branch.
pub fn selects_clipped_branch<T: Scalar>(ratio: T, advantage: T, eps_low: T, eps_high: T) -> bool {
    let clipped = ratio.max(T::one() - eps_low).min(T::one() + eps_high);
    clipped * advantage < ratio * advantage
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput<T: Scalar = f64> {
    pub loss: T,
    /// Gradient of `loss` (the descent direction is its negation).
    pub gradient: Gradient<T>,
    pub clipped: usize,
    pub ratio_sum: T,
    pub tokens: usize,
}

/// Negated token average of the clipped surrogate, and its exact gradient.
/// Samples on the clipped branch contribute no gradient.
pub fn policy_loss<T: Scalar>(
    samples: &[TrainSample<T>],
    params: &PolicyParams<T>,
    eps_low: T,
    eps_high: T,
) -> Result<LossOutput<T>> {
    if samples.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    let n = T::of_usize(samples.len());
    let mut gradient = Gradient::like(params);
    let mut surrogate = T::zero();
    let mut clipped = 0;
    let mut ratio_sum = T::zero();
    for s in samples {
        let log_probs = params.log_probs(&s.features)?;
        let r = ratio(log_probs[s.token as usize], s.old_logprob)?;
        ratio_sum += r;
        surrogate += clip_surrogate(r, s.advantage, eps_low, eps_high);
        if selects_clipped_branch(r, s.advantage, eps_low, eps_high) {
            clipped += 1;
        } else if s.advantage != T::zero() {
            // d(r·A)/dθ = r·A·∇log π
            let probs: Vec<T> = log_probs.iter().map(|l| l.exp()).collect();
            gradient.add_log_prob_grad(&s.features, &probs, s.token, -(r * s.advantage) / n);
        }
    }
    Ok(LossOutput {
        loss: -surrogate / n,
        gradient,
        clipped,
        ratio_sum,
        tokens: samples.len(),
    })
}

/// Samples accumulated across accepted prompts for one optimizer step.
#[derive(Clone, Debug)]
pub struct TrainBatch<T: Scalar = f64> {
    pub samples: Vec<TrainSample<T>>,
    /// Sample range contributed by each accepted prompt.
    pub units: Vec<Range<usize>>,
    pub target_prompts: usize,
    pub accepted_prompts: usize,
    pub attempts: usize,
    pub rejected: Vec<Provenance>,
    complete: bool,
    exhausted: bool,
}

impl<T: Scalar> TrainBatch<T> {
    pub fn new(target_prompts: usize) -> Self {
        Self {
            samples: Vec::new(),
            units: Vec::new(),
            target_prompts,
            accepted_prompts: 0,
            attempts: 0,
            rejected: Vec::new(),
            complete: false,
            exhausted: false,
        }
    }

    /// Records one collection attempt.
    pub fn accumulate(&mut self, new_samples: Vec<TrainSample<T>>, prompt_accepted: bool) {
        self.attempts += 1;
        if !prompt_accepted {
            return;
        }
        let start = self.samples.len();
        self.samples.extend(new_samples);
        self.units.push(start..self.samples.len());
        self.accepted_prompts += 1;
        self.complete = self.accepted_prompts >= self.target_prompts;
    }

    pub fn reject(&mut self, provenance: Provenance) {
        self.rejected.push(provenance);
        self.accumulate(Vec::new(), false);
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    /// The attempt budget ran out before the batch filled.
    pub fn mark_exhausted(&mut self) {
        self.exhausted = !self.complete;
    }

    pub fn is_exhausted(&self) -> bool {
        self.exhausted
    }
}

/// Outcome of collecting one prompt.
#[derive(Clone, Debug)]
pub enum Collected<T: Scalar = f64> {
    Accepted {
        samples: Vec<TrainSample<T>>,
        initial: RolloutGroup<T>,
        record: Option<ExplorationRecord<T>>,
    },
    Rejected {
        initial: RolloutGroup<T>,
    },
}

impl<T: Scalar> Collected<T> {
    pub fn initial(&self) -> &RolloutGroup<T> {
        match self {
            Collected::Accepted { initial, .. } | Collected::Rejected { initial } => initial,
        }
    }
}

fn initial_group<T: Scalar, R: Rng + ?Sized>(
    task: &TaskInstance,
    params: &PolicyParams<T>,
    mdp: &Mdp,
    g: usize,
    rng: &mut R,
) -> Result<RolloutGroup<T>> {
    let mut rollouts = (0..g)
        .map(|_| params.generate(mdp, task, rng))
        .collect::<Result<Vec<_>>>()?;
    let rewards = score_group(mdp, task, &rollouts)?;
    for (r, &reward) in rollouts.iter_mut().zip(&rewards) {
        r.reward = Some(reward);
    }
    RolloutGroup::new(0, rollouts, rewards)
}

/// FR3E collection for one prompt.
///
/// The first correct full rollout is the base trajectory; `V(S_0)` is the
/// full-rollout group's mean reward. Every exploration rollout from `S_j`
/// trains with advantage `α_j (r − V(S_j))`; the full-rollout group trains as
/// group 0 with `α_0 = 1` unless `train_base_group` is off.
pub fn fr3e_collect<T: Scalar, R: Rng + ?Sized>(
    task: &TaskInstance,
    params: &PolicyParams<T>,
    mdp: &Mdp,
    config: &TrainConfig,
    attempt: u64,
    rng: &mut R,
) -> Result<Collected<T>> {
    let initial = initial_group(task, params, mdp, config.g_initial, rng)?;
    if !reject_degenerate(&initial.rewards)? {
        return Ok(Collected::Rejected { initial });
    }
    let base = initial
        .rollouts
        .iter()
        .find(|r| r.reward == Some(1))
        .expect("a kept group has a correct rollout")
        .clone();
    let record = explore_prompt(task, params, mdp, &base, initial.clone(), config.explore(), rng)?;
    let mut samples = Vec::new();
    for (j, group) in record.groups.iter().enumerate() {
        if group.closed || (j == 0 && !config.train_base_group) {
            continue;
        }
        let provenance = Provenance {
            task_id: task.id.clone(),
            attempt,
            group: j,
        };
        for (rollout, &reward) in group.rollouts.iter().zip(&group.rewards) {
            let adv = crate::advantage::modulate(
                record.alphas[j],
                crate::advantage::raw_advantage(reward, group.value),
            );
            samples.extend(trajectory_samples(params, task, rollout, adv, &provenance));
        }
    }
    Ok(Collected::Accepted {
        samples,
        initial,
        record: Some(record),
    })
}

/// GRPO++ collection: group-normalized advantages on the full rollouts.
pub fn grpo_collect<T: Scalar, R: Rng + ?Sized>(
    task: &TaskInstance,
    params: &PolicyParams<T>,
    mdp: &Mdp,
    config: &TrainConfig,
    attempt: u64,
    rng: &mut R,
) -> Result<Collected<T>> {
    let initial = initial_group(task, params, mdp, config.g_initial, rng)?;
    if !reject_degenerate(&initial.rewards)? {
        return Ok(Collected::Rejected { initial });
    }
    let adv = grpo_group_advantage::<T>(&initial.rewards)?;
    let provenance = Provenance {
        task_id: task.id.clone(),
        attempt,
        group: 0,
    };
    let samples = initial
        .rollouts
        .iter()
        .zip(&adv.values)
        .flat_map(|(r, &a)| trajectory_samples(params, task, r, a, &provenance))
        .collect();
    Ok(Collected::Accepted {
        samples,
        initial,
        record: None,
    })
}

/// Optimizer-side statistics of one train step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub loss: f64,
    pub adv_mean: f64,
    pub adv_std: f64,
    /// Mean entropy of the pre-update snapshot at the trained positions.
    pub snapshot_entropy: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub minibatches: usize,
    pub samples: usize,
    /// Surrogate value and clip fraction of the first mini-batch, which is
    /// evaluated at the collection snapshot.
    pub first_surrogate: f64,
    pub first_clip_fraction: f64,
}

/// One epoch of mini-batch descent over `batch`.
///
/// Prompt units are shuffled with a stream of `(config.seed, step)` and
/// chunked into `mini_batch` prompts. A non-finite loss aborts the step and
/// returns the error; `params` is never modified.
pub fn train_step<T: Scalar>(
    batch: &TrainBatch<T>,
    params: &PolicyParams<T>,
    config: &TrainConfig,
    step: u64,
) -> Result<(PolicyParams<T>, UpdateStats)> {
    if !(batch.is_complete() || batch.is_exhausted()) {
        return Err(contract("train_step needs a complete batch"));
    }
    if batch.samples.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let (eps_low, eps_high) = (T::of(config.eps_low), T::of(config.eps_high));
    let n = batch.samples.len() as f64;

    let adv: Vec<f64> = batch.samples.iter().map(|s| s.advantage.as_f64()).collect();
    let adv_mean = adv.iter().sum::<f64>() / n;
    let adv_std = (adv.iter().map(|a| (a - adv_mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut entropy = 0.0;
    for s in &batch.samples {
        entropy += crate::first_return::token_entropy(&params.distribution_of(&s.features)?)?.as_f64();
    }

    let mut order: Vec<usize> = (0..batch.units.len()).collect();
    order.shuffle(&mut derive_rng(config.seed, &[STREAM_SHUFFLE, step]));

    let mut live = params.clone();
    let mut stats = UpdateStats {
        adv_mean,
        adv_std,
        snapshot_entropy: entropy / n,
        samples: batch.samples.len(),
        ..Default::default()
    };
    let (mut loss_sum, mut clipped, mut ratio_sum) = (0.0, 0usize, 0.0);
    for chunk in order.chunks(config.mini_batch) {
        let mini: Vec<TrainSample<T>> = chunk
            .iter()
            .flat_map(|&u| batch.samples[batch.units[u].clone()].iter().cloned())
            .collect();
        if mini.is_empty() {
            continue;
        }
        let out = policy_loss(&mini, &live, eps_low, eps_high)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        if stats.minibatches == 0 {
            stats.first_surrogate = -out.loss.as_f64();
            stats.first_clip_fraction = out.clipped as f64 / out.tokens as f64;
        }
        loss_sum += out.loss.as_f64() * out.tokens as f64;
        clipped += out.clipped;
        ratio_sum += out.ratio_sum.as_f64();
        live.apply_update(&out.gradient.scaled(-T::of(config.lr())))?;
        stats.minibatches += 1;
    }
    stats.loss = loss_sum / n;
    stats.clip_fraction = clipped as f64 / n;
    stats.mean_ratio = ratio_sum / n;
    Ok((live, stats))
}

/// Everything produced by one optimizer step.
#[derive(Clone, Debug)]
pub struct StepReport<T: Scalar = f64> {
    pub stats: StepStats,
    pub update: Option<UpdateStats>,
    pub accepted_prompts: usize,
    pub attempts: usize,
    pub rejected_prompts: usize,
    /// The attempt budget ran out before `batch_size` prompts were accepted.
    pub exhausted: bool,
    pub records: Vec<ExplorationRecord<T>>,
    /// Provenance of every trained sample, one entry per accepted prompt
    /// and group.
    pub trained: Vec<Provenance>,
    pub rejected: Vec<Provenance>,
}

/// Owns the live parameters and steps the training loop.
pub struct Trainer<T: Scalar = f64> {
    config: TrainConfig,
    mdp: Mdp,
    suite: Vec<TaskInstance>,
    eval: Vec<TaskInstance>,
    params: PolicyParams<T>,
    step: u64,
    history: MetricsHistory,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, suite: Vec<TaskInstance>, eval: Vec<TaskInstance>) -> Result<Self> {
        config.validate()?;
        if config.precision.name() != T::NAME {
            return Err(Error::Config(format!(
                "config asks for {} but the trainer computes in {}",
                config.precision.name(),
                T::NAME
            )));
        }
        if suite.is_empty() {
            return Err(Error::Empty("training suite"));
        }
        let mdp = Mdp::chain_sum(config.max_len)?;
        let params = PolicyParams::zeros(config.feature_dim, mdp.vocab().size(), config.window)?;
        let mut trainer = Self {
            history: MetricsHistory::new(RunMetadata {
                algorithm: config.algorithm.to_string(),
                seed: config.seed,
                config_hash: config.hash(),
                suite_hash: suite_hash(&suite),
                scalar: T::NAME.to_string(),
                initial_solve_rate: None,
            }),
            config,
            mdp,
            suite,
            eval,
            params,
            step: 0,
        };
        trainer.history.meta.initial_solve_rate = trainer.solve_rate()?;
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn mdp(&self) -> &Mdp {
        &self.mdp
    }

    pub fn params(&self) -> &PolicyParams<T> {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &MetricsHistory {
        &self.history
    }

    pub fn into_history(self) -> MetricsHistory {
        self.history
    }

    /// Greedy solve rate on the evaluation suite.
    pub fn solve_rate(&self) -> Result<Option<f64>> {
        solve_rate(&self.params, &self.mdp, &self.eval)
    }

    fn collect(&self, attempt: u64) -> Result<(Collected<T>, Provenance)> {
        let mut rng = derive_rng(self.config.seed, &[STREAM_COLLECT, self.step, attempt]);
        let task = &self.suite[rng.random_range(0..self.suite.len())];
        let provenance = Provenance {
            task_id: task.id.clone(),
            attempt,
            group: 0,
        };
        let collected = match self.config.algorithm {
            Algorithm::Fr3e => fr3e_collect(task, &self.params, &self.mdp, &self.config, attempt, &mut rng)?,
            Algorithm::GrpoPlusPlus => {
                grpo_collect(task, &self.params, &self.mdp, &self.config, attempt, &mut rng)?
            }
        };
        Ok((collected, provenance))
    }

    /// Collect, accumulate, update, evaluate. On error the live parameters and
    /// history are left as they were before the step.
    pub fn step(&mut self) -> Result<StepReport<T>> {
        self.step += 1;
        let result = self.step_inner();
        if result.is_err() {
            self.step -= 1;
        }
        result
    }

    fn step_inner(&mut self) -> Result<StepReport<T>> {
        let step = self.step;
        let budget = self.config.attempts_factor * self.config.batch_size;
        let mut batch = TrainBatch::new(self.config.batch_size);
        let mut records = Vec::new();
        let mut trained = Vec::new();
        let (mut entropy_sum, mut entropy_tokens, mut length_sum, mut responses) = (0.0, 0usize, 0usize, 0usize);

        while !batch.is_complete() && batch.attempts < budget {
            let attempt = batch.attempts as u64;
            let (collected, provenance) = self.collect(attempt)?;
            for r in &collected.initial().rollouts {
                let ent = r.entropies.as_deref().unwrap_or(&[]);
                entropy_sum += ent.iter().map(|h| h.as_f64()).sum::<f64>();
                entropy_tokens += ent.len();
                length_sum += r.len();
                responses += 1;
            }
            match collected {
                Collected::Accepted { samples, record, .. } => {
                    let mut groups: Vec<Provenance> = samples.iter().map(|s| s.provenance.clone()).collect();
                    groups.dedup();
                    trained.extend(groups);
                    batch.accumulate(samples, true);
                    records.extend(record);
                }
                Collected::Rejected { .. } => batch.reject(provenance),
            }
        }
        batch.mark_exhausted();
        if batch.is_exhausted() {
            log::warn!(
                "step {step}: attempt budget {budget} exhausted with {} of {} prompts accepted",
                batch.accepted_prompts,
                self.config.batch_size
            );
        }

        let update = if batch.samples.is_empty() {
            None
        } else {
            let (params, stats) = train_step(&batch, &self.params, &self.config, step)?;
            self.params = params;
            Some(stats)
        };

        let evaluate = step == self.config.max_steps
            || (self.config.eval_every > 0 && step.is_multiple_of(self.config.eval_every));
        let solve_rate = if evaluate { self.solve_rate()? } else { None };
        let (all_right, all_wrong) =
            count_group_extremes(records.iter().flat_map(|r| r.exploration_groups()));
        let u = update.clone().unwrap_or_default();
        let stats = StepStats {
            step,
            mean_token_entropy: match &update {
                Some(u) => u.snapshot_entropy,
                None if entropy_tokens > 0 => entropy_sum / entropy_tokens as f64,
                None => 0.0,
            },
            adv_mean: u.adv_mean,
            adv_std: u.adv_std,
            clip_fraction: u.clip_fraction,
            mean_ratio: if update.is_some() { u.mean_ratio } else { 1.0 },
            mean_response_length: if responses > 0 {
                length_sum as f64 / responses as f64
            } else {
                0.0
            },
            all_right_count: all_right,
            all_wrong_count: all_wrong,
            solve_rate,
        };
        self.history.push(stats.clone())?;
        Ok(StepReport {
            stats,
            update,
            accepted_prompts: batch.accepted_prompts,
            attempts: batch.attempts,
            rejected_prompts: batch.rejected.len(),
            exhausted: batch.is_exhausted(),
            records,
            trained,
            rejected: batch.rejected,
        })
    }
}

/// Greedy solve rate of `params` over `tasks`; `None` for an empty suite.
pub fn solve_rate<T: Scalar>(params: &PolicyParams<T>, mdp: &Mdp, tasks: &[TaskInstance]) -> Result<Option<f64>> {
    if tasks.is_empty() {
        return Ok(None);
    }
    let mut solved = 0;
    for task in tasks {
        let traj = params.greedy(mdp, task)?;
        solved += crate::mdp::verify(task, &traj, mdp.eos())? as usize;
    }
    Ok(Some(solved as f64 / tasks.len() as f64))
}

/// Receives run artifacts as training proceeds.
pub trait RunSink<T: Scalar> {
    fn checkpoint(&mut self, _step: u64, _params: &PolicyParams<T>) -> Result<()> {
        Ok(())
    }

    fn step(&mut self, _report: &StepReport<T>) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl<T: Scalar> RunSink<T> for NullSink {}

/// A run that stopped early; `history` holds every completed step.
#[derive(Debug)]
pub struct PartialRun {
    pub history: MetricsHistory,
    pub error: Error,
}

impl fmt::Display for PartialRun {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training aborted after {} steps: {}", self.history.len(), self.error)
    }
}

impl std::error::Error for PartialRun {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Runs `config.max_steps` steps, emitting the initial checkpoint, every
/// step report, and checkpoints at the configured cadence and at the end.
pub fn run_training<T: Scalar>(
    config: &TrainConfig,
    suite: &[TaskInstance],
    eval: &[TaskInstance],
    sink: &mut dyn RunSink<T>,
) -> std::result::Result<MetricsHistory, PartialRun> {
    let mut trainer = match Trainer::<T>::new(config.clone(), suite.to_vec(), eval.to_vec()) {
        Ok(t) => t,
        Err(error) => {
            return Err(PartialRun {
                history: MetricsHistory::new(RunMetadata {
                    algorithm: config.algorithm.to_string(),
                    seed: config.seed,
                    config_hash: config.hash(),
                    suite_hash: suite_hash(suite),
                    scalar: T::NAME.to_string(),
                    initial_solve_rate: None,
                }),
                error,
            })
        }
    };
    let fail = |trainer: Trainer<T>, error| PartialRun {
        history: trainer.into_history(),
        error,
    };
    if let Err(e) = sink.checkpoint(0, trainer.params()) {
        return Err(fail(trainer, e));
    }
    for step in 1..=config.max_steps {
        let report = match trainer.step() {
            Ok(r) => r,
            Err(e) => return Err(fail(trainer, e)),
        };
        if let Err(e) = sink.step(&report) {
            return Err(fail(trainer, e));
        }
        let due = step == config.max_steps
            || (config.checkpoint_every > 0 && step.is_multiple_of(config.checkpoint_every));
        if due {
            if let Err(e) = sink.checkpoint(step, trainer.params()) {
                return Err(fail(trainer, e));
            }
        }
    }
    Ok(trainer.into_history())
}
