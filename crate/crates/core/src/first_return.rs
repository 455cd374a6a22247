//! First-return stage: locate high-entropy fork points on a base trajectory
//! and cut it into blocks whose prefixes become rollout roots.
//!
//! Positions are 1-based throughout this module: position `k` is the `k`-th
//! generated token, and its entropy is that of the distribution it was
//! sampled from.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::mdp::{GenState, TaskInstance, Token, Trajectory};
use crate::policy::{PolicyParams, TokenDistribution};
use crate::scalar::Scalar;

/// `-Σ p ln p` in nats, with `0 ln 0 = 0`, clamped to `[0, ln |V|]`.
pub fn token_entropy<T: Scalar>(dist: &TokenDistribution<T>) -> Result<T> {
    let probs = dist.probs();
    if probs.is_empty() {
        return Err(Error::InvalidDistribution("empty".into()));
    }
    let h = -probs
        .iter()
        .filter(|&&p| p > T::zero())
        .map(|&p| p * p.ln())
        .sum::<T>();
    let max = T::of_usize(probs.len()).ln();
    Ok(h.max(T::zero()).min(max))
}

/// Per-position entropies `H_1..H_L` of a trajectory's continuation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EntropyProfile<T: Scalar = f64> {
    pub values: Vec<T>,
}

impl<T: Scalar> EntropyProfile<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> Option<T> {
        (!self.values.is_empty())
            .then(|| self.values.iter().copied().sum::<T>() / T::of_usize(self.values.len()))
    }
}

/// Entropy at every sampled position of `traj` under `params`.
pub fn entropy_profile<T: Scalar>(
    params: &PolicyParams<T>,
    task: &TaskInstance,
    traj: &Trajectory<T>,
) -> Result<EntropyProfile<T>> {
    let mut state = GenState::with_generated(task.prompt.clone(), traj.prefix.clone());
    let mut values = Vec::with_capacity(traj.tokens.len());
    for &t in &traj.tokens {
        values.push(token_entropy(&params.token_distribution(&state)?)?);
        state.generated.push(t);
    }
    Ok(EntropyProfile { values })
}

/// Top-K entropy positions, 1-based and ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitivePositions {
    pub indices: Vec<usize>,
    pub k: usize,
}

impl SensitivePositions {
    pub fn none() -> Self {
        Self {
            indices: Vec::new(),
            k: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Positions of the `min(k, L)` largest entropies; equal entropies are
/// ranked by earlier position.
pub fn select_topk<T: Scalar>(profile: &EntropyProfile<T>, k: usize) -> Result<SensitivePositions> {
    if k == 0 {
        return Err(contract("top-k requires k >= 1"));
    }
    if profile.is_empty() {
        return Err(Error::Empty("entropy profile"));
    }
    if profile.values.iter().any(|h| !h.is_finite()) {
        return Err(Error::NonFinite("entropy profile".into()));
    }
    let mut order: Vec<usize> = (0..profile.len()).collect();
    // stable sort keeps earlier positions first among ties
    order.sort_by(|&a, &b| {
        profile.values[b]
            .partial_cmp(&profile.values[a])
            .expect("finite entropies are ordered")
    });
    let mut indices: Vec<usize> = order.into_iter().take(k).map(|i| i + 1).collect();
    indices.sort_unstable();
    Ok(SensitivePositions { indices, k })
}

/// A span of the generated sequence ending at a sensitive position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    /// 1-based block number `n`.
    pub index: usize,
    /// 0-based offset of the first token in the generated sequence.
    pub start: usize,
    pub tokens: Vec<Token>,
}

impl Block {
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }
}

/// Splits `generated` into `K + 1` blocks, block `n` covering positions
/// `k_{n-1}+1 ..= k_n` with `k_0 = 0` and `k_{K+1} = L`.
pub fn segment_blocks(generated: &[Token], positions: &SensitivePositions) -> Result<Vec<Block>> {
    let len = generated.len();
    let mut prev = 0;
    for &k in &positions.indices {
        if k <= prev || k > len {
            return Err(contract(format!(
                "sensitive positions must be strictly increasing within 1..={len}"
            )));
        }
        prev = k;
    }
    let mut bounds = positions.indices.clone();
    bounds.push(len);
    let mut start = 0;
    Ok(bounds
        .into_iter()
        .enumerate()
        .map(|(i, end)| {
            let block = Block {
                index: i + 1,
                start,
                tokens: generated[start..end].to_vec(),
            };
            start = end;
            block
        })
        .collect())
}

/// `S_j`: the prompt plus blocks `B_1..B_j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntermediateState {
    pub j: usize,
    pub state: GenState,
}

/// States `S_0..S_K` from `K + 1` blocks; the final block never roots a
/// rollout group.
pub fn build_states(task: &TaskInstance, blocks: &[Block]) -> Vec<IntermediateState> {
    let mut state = task.initial_state();
    let mut out = vec![IntermediateState {
        j: 0,
        state: state.clone(),
    }];
    for block in blocks.iter().take(blocks.len().saturating_sub(1)) {
        state.generated.extend_from_slice(&block.tokens);
        out.push(IntermediateState {
            j: block.index,
            state: state.clone(),
        });
    }
    out
}
