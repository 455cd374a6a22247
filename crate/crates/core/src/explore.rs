//! Entropy-eliciting explore stage: branch `M` rollouts from every
//! intermediate state and estimate its value by their mean reward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::first_return::{
    build_states, entropy_profile, segment_blocks, select_topk, Block, EntropyProfile,
    IntermediateState, SensitivePositions,
};
use crate::mdp::{verify, GenState, Mdp, TaskInstance, Termination, Token, Trajectory};
use crate::policy::PolicyParams;
use crate::scalar::Scalar;

/// Rollouts launched from one state `S_j` and their empirical value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RolloutGroup<T: Scalar = f64> {
    pub state_index: usize,
    pub rollouts: Vec<Trajectory<T>>,
    pub rewards: Vec<u8>,
    pub value: T,
    /// The root was already terminal, so its outcome is fixed: the group holds
    /// a single empty continuation and contributes no training tokens.
    #[serde(default)]
    pub closed: bool,
}

impl<T: Scalar> RolloutGroup<T> {
    pub fn new(state_index: usize, rollouts: Vec<Trajectory<T>>, rewards: Vec<u8>) -> Result<Self> {
        if rollouts.len() != rewards.len() {
            return Err(contract("one reward per rollout required"));
        }
        let value = empirical_value(&rewards)?;
        Ok(Self {
            state_index,
            rollouts,
            rewards,
            value,
            closed: false,
        })
    }

    pub fn m(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_all_right(&self) -> bool {
        self.rewards.iter().all(|&r| r == 1)
    }

    pub fn is_all_wrong(&self) -> bool {
        self.rewards.iter().all(|&r| r == 0)
    }
}

/// Knobs of the explore stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExploreConfig {
    /// Number of entropy-sensitive positions `K`.
    pub k_top: usize,
    /// Rollouts per intermediate state `M`.
    pub m_explore: usize,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        Self {
            k_top: 4,
            m_explore: 8,
        }
    }
}

/// Everything the two stages produced for one prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ExplorationRecord<T: Scalar = f64> {
    pub task_id: String,
    pub prompt: Vec<Token>,
    pub base: Trajectory<T>,
    pub profile: EntropyProfile<T>,
    pub positions: SensitivePositions,
    /// Token emitted at each sensitive position.
    pub position_tokens: Vec<Token>,
    pub blocks: Vec<Block>,
    pub states: Vec<IntermediateState>,
    /// Group `j` is rooted at `states[j]`; group 0 is the initial
    /// full-rollout group.
    pub groups: Vec<RolloutGroup<T>>,
    pub values: Vec<T>,
    /// `alphas[0] = 1`; `alphas[j] = exp(V(S_{j-1}) - V(S_j))`.
    pub alphas: Vec<T>,
}

impl<T: Scalar> ExplorationRecord<T> {
    pub fn k(&self) -> usize {
        self.states.len() - 1
    }

    /// Groups rooted at `S_1..S_K` that actually sampled continuations.
    pub fn exploration_groups(&self) -> impl Iterator<Item = &RolloutGroup<T>> {
        self.groups.iter().skip(1).filter(|g| !g.closed)
    }
}

/// `m` independent continuations of `state`, each sampled to termination.
pub fn rollout_from<T: Scalar, R: Rng + ?Sized>(
    params: &PolicyParams<T>,
    mdp: &Mdp,
    task: &TaskInstance,
    state: &GenState,
    m: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory<T>>> {
    if m == 0 {
        return Err(contract("rollout count must be at least 1"));
    }
    if mdp.is_terminal(state) {
        return Err(contract(format!(
            "rollout root of length {} is already terminal (cap {})",
            state.generated.len(),
            mdp.max_len()
        )));
    }
    (0..m)
        .map(|_| params.continue_from(mdp, task, state, rng))
        .collect()
}

pub fn score_group<T: Scalar>(
    mdp: &Mdp,
    task: &TaskInstance,
    rollouts: &[Trajectory<T>],
) -> Result<Vec<u8>> {
    rollouts.iter().map(|r| verify(task, r, mdp.eos())).collect()
}

/// Mean of binary rewards.
pub fn empirical_value<T: Scalar>(rewards: &[u8]) -> Result<T> {
    if rewards.is_empty() {
        return Err(Error::Empty("reward group"));
    }
    if rewards.iter().any(|&r| r > 1) {
        return Err(contract("rewards must be 0 or 1"));
    }
    let hits = rewards.iter().filter(|&&r| r == 1).count();
    Ok(T::of_usize(hits) / T::of_usize(rewards.len()))
}

fn closed_group<T: Scalar>(
    mdp: &Mdp,
    task: &TaskInstance,
    root: &IntermediateState,
) -> Result<RolloutGroup<T>> {
    let terminal = Trajectory {
        task_id: task.id.clone(),
        prefix: root.state.generated.clone(),
        tokens: Vec::new(),
        logprobs: Vec::new(),
        entropies: Some(Vec::new()),
        termination: Some(if root.state.generated.last() == Some(&mdp.eos()) {
            Termination::Eos
        } else {
            Termination::LengthCap
        }),
        reward: None,
    };
    let reward = verify(task, &terminal, mdp.eos())?;
    let mut terminal = terminal;
    terminal.reward = Some(reward);
    let mut group = RolloutGroup::new(root.j, vec![terminal], vec![reward])?;
    group.closed = true;
    Ok(group)
}

/// Runs profile → top-k → segmentation → states, then explores `S_1..S_K`.
///
/// `initial` is the prompt's full-rollout group; it becomes group 0 and
/// supplies `V(S_0)`. A root that is already terminal gets a closed group
/// whose value is its own verdict.
pub fn explore_prompt<T: Scalar, R: Rng + ?Sized>(
    task: &TaskInstance,
    params: &PolicyParams<T>,
    mdp: &Mdp,
    base: &Trajectory<T>,
    initial: RolloutGroup<T>,
    config: ExploreConfig,
    rng: &mut R,
) -> Result<ExplorationRecord<T>> {
    if base.reward != Some(1) {
        return Err(contract("base trajectory must be a verified correct rollout"));
    }
    if !base.prefix.is_empty() {
        return Err(contract("base trajectory must start from the bare prompt"));
    }
    if initial.state_index != 0 {
        return Err(contract("initial group must be rooted at S_0"));
    }
    let profile = entropy_profile(params, task, base)?;
    let positions = if config.k_top == 0 {
        SensitivePositions::none()
    } else {
        select_topk(&profile, config.k_top)?
    };
    let generated = base.generated();
    let position_tokens = positions.indices.iter().map(|&k| generated[k - 1]).collect();
    let blocks = segment_blocks(&generated, &positions)?;
    let states = build_states(task, &blocks);

    let mut groups = Vec::with_capacity(states.len());
    groups.push(initial);
    for root in states.iter().skip(1) {
        let group = if mdp.is_terminal(&root.state) {
            closed_group(mdp, task, root)?
        } else {
            let mut rollouts = rollout_from(params, mdp, task, &root.state, config.m_explore, rng)?;
            let rewards = score_group(mdp, task, &rollouts)?;
            for (r, &reward) in rollouts.iter_mut().zip(&rewards) {
                r.reward = Some(reward);
            }
            RolloutGroup::new(root.j, rollouts, rewards)?
        };
        groups.push(group);
    }
    let values: Vec<T> = groups.iter().map(|g| g.value).collect();
    let alphas = crate::advantage::modulation_ladder(&values);
    Ok(ExplorationRecord {
        task_id: task.id.clone(),
        prompt: task.prompt.clone(),
        base: base.clone(),
        profile,
        positions,
        position_tokens,
        blocks,
        states,
        groups,
        values,
        alphas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{tokens, Difficulty, Operator};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn task() -> TaskInstance {
        TaskInstance::chain_sum("t", vec![1, 2], vec![Operator::Add], &[], Difficulty::Easy).unwrap()
    }

    fn random_params(seed: u64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..256 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        PolicyParams::from_weights(w, 256, 16, 4).unwrap()
    }

    fn correct_base(params: &PolicyParams, mdp: &Mdp, task: &TaskInstance, rng: &mut ChaCha8Rng) -> Trajectory {
        loop {
            let mut t = params.generate(mdp, task, rng).unwrap();
            if verify(task, &t, mdp.eos()).unwrap() == 1 {
                t.reward = Some(1);
                return t;
            }
        }
    }

    fn initial_group(base: &Trajectory) -> RolloutGroup {
        let mut wrong = base.clone();
        wrong.reward = Some(0);
        RolloutGroup::new(0, vec![base.clone(), wrong], vec![1, 0]).unwrap()
    }

    #[test]
    fn empirical_value_examples() {
        assert_eq!(empirical_value::<f64>(&[1, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(empirical_value::<f64>(&[0, 0, 0]).unwrap(), 0.0);
        assert_eq!(empirical_value::<f64>(&[1, 1]).unwrap(), 1.0);
        assert!(matches!(empirical_value::<f64>(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn eos_policy_rollout_has_one_token() {
        let mut p = PolicyParams::<f64>::zeros(64, 16, 4).unwrap();
        for i in 0..64 {
            p.set_weight(i, tokens::EOS, 100.0);
        }
        let mdp = Mdp::chain_sum(32).unwrap();
        let root = GenState::with_generated(task().prompt, vec![3]);
        let out = rollout_from(&p, &mdp, &task(), &root, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].generated(), vec![3, tokens::EOS]);
        assert_eq!(out[0].tokens.len(), 1);
    }

    #[test]
    fn rollouts_share_prefix_and_are_reproducible() {
        let p = random_params(1);
        let mdp = Mdp::chain_sum(32).unwrap();
        let root = GenState::with_generated(task().prompt, vec![4, 14]);
        let a = rollout_from(&p, &mdp, &task(), &root, 6, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = rollout_from(&p, &mdp, &task(), &root, 6, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        for r in &a {
            assert!(r.generated().starts_with(&root.generated));
            assert!(r.is_terminated());
        }
    }

    #[test]
    fn rollout_from_capped_root_fails() {
        let p = random_params(1);
        let mdp = Mdp::chain_sum(4).unwrap();
        let root = GenState::with_generated(task().prompt, vec![1, 1, 1, 1]);
        assert!(rollout_from(&p, &mdp, &task(), &root, 2, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn score_group_matches_verify() {
        let mdp = Mdp::chain_sum(32).unwrap();
        let t = task();
        let mk = |toks: &[Token], term| Trajectory::<f64> {
            task_id: "t".into(),
            prefix: vec![],
            tokens: toks.to_vec(),
            logprobs: vec![-0.1; toks.len()],
            entropies: None,
            termination: Some(term),
            reward: None,
        };
        let group = vec![
            mk(&[3, tokens::EOS], Termination::Eos),
            mk(&[4, tokens::EOS], Termination::Eos),
            mk(&[9, 14, 3, tokens::EOS], Termination::Eos),
            mk(&[3, 3], Termination::LengthCap),
        ];
        assert_eq!(score_group(&mdp, &t, &group).unwrap(), vec![1, 0, 1, 0]);
    }

    #[test]
    fn explore_prompt_shapes() {
        let p = random_params(2);
        let mdp = Mdp::chain_sum(32).unwrap();
        let t = task();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = correct_base(&p, &mdp, &t, &mut rng);
        let cfg = ExploreConfig { k_top: 3, m_explore: 4 };
        let rec = explore_prompt(&t, &p, &mdp, &base, initial_group(&base), cfg, &mut rng).unwrap();
        let k = rec.positions.len();
        assert_eq!(k, 3.min(base.len()));
        assert_eq!(rec.values.len(), k + 1);
        assert_eq!(rec.groups.len(), k + 1);
        assert_eq!(rec.values[0], 0.5);
        for (j, g) in rec.groups.iter().enumerate() {
            assert_eq!(g.state_index, j);
            for r in &g.rollouts {
                assert!(r.generated().starts_with(&rec.states[j].state.generated));
            }
            let hits = g.rewards.iter().filter(|&&r| r == 1).count();
            assert_eq!(g.value * g.m() as f64, hits as f64);
        }
    }

    #[test]
    fn explore_with_k_zero_has_only_root() {
        let p = random_params(2);
        let mdp = Mdp::chain_sum(32).unwrap();
        let t = task();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = correct_base(&p, &mdp, &t, &mut rng);
        let cfg = ExploreConfig { k_top: 0, m_explore: 4 };
        let rec = explore_prompt(&t, &p, &mdp, &base, initial_group(&base), cfg, &mut rng).unwrap();
        assert_eq!(rec.states.len(), 1);
        assert_eq!(rec.groups.len(), 1);
        assert_eq!(rec.values.len(), 1);
    }

    #[test]
    fn explore_is_deterministic_and_leaves_base_alone() {
        let p = random_params(4);
        let mdp = Mdp::chain_sum(32).unwrap();
        let t = task();
        let base = correct_base(&p, &mdp, &t, &mut ChaCha8Rng::seed_from_u64(8));
        let snapshot = base.clone();
        let run = |seed| {
            explore_prompt(&t, &p, &mdp, &base, initial_group(&base), ExploreConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap()
        };
        assert_eq!(run(1), run(1));
        assert_eq!(base, snapshot);
    }

    #[test]
    fn terminal_root_gets_closed_group() {
        // a base whose last token (eos) is the only position: S_1 is terminal
        let p = PolicyParams::<f64>::zeros(64, 16, 4).unwrap();
        let mdp = Mdp::chain_sum(32).unwrap();
        let t = task();
        let base = Trajectory {
            task_id: "t".into(),
            prefix: vec![],
            tokens: vec![3, tokens::EOS],
            logprobs: vec![-(16f64.ln()); 2],
            entropies: None,
            termination: Some(Termination::Eos),
            reward: Some(1),
        };
        let cfg = ExploreConfig { k_top: 2, m_explore: 3 };
        let rec = explore_prompt(&t, &p, &mdp, &base, initial_group(&base), cfg, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(rec.positions.indices, vec![1, 2]);
        assert!(!rec.groups[1].closed);
        assert!(rec.groups[2].closed);
        assert_eq!(rec.groups[2].value, 1.0);
        assert_eq!(rec.exploration_groups().count(), 1);
        assert!(rec.blocks[2].tokens.is_empty());
    }
}
