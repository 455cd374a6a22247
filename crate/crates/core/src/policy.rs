//! Linear-softmax autoregressive policy over hashed context features.
//!
//! Scores are `w^T φ(s)` for a sparse feature vector `φ(s)` and a dense
//! `feature_dim × vocab` weight matrix; the next-token distribution is their
//! softmax. Gradients of `log π(token | s)` are closed-form, so no autodiff is
//! involved anywhere in the optimizer.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::mdp::{GenState, Mdp, TaskInstance, Termination, Token, Trajectory};
use crate::scalar::Scalar;

pub const DEFAULT_FEATURE_DIM: usize = 1 << 14;
pub const DEFAULT_WINDOW: usize = 4;

const BOS: u64 = u16::MAX as u64 + 1;

/// Sparse feature vector of a generation state. Indices are unique and
/// sorted; values count hash collisions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextFeatures {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl ContextFeatures {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| (i as usize, v))
    }

    fn from_hashes(mut hashes: Vec<u32>) -> Self {
        hashes.sort_unstable();
        let mut indices = Vec::with_capacity(hashes.len());
        let mut values: Vec<f64> = Vec::with_capacity(hashes.len());
        for h in hashes {
            if indices.last() == Some(&h) {
                *values.last_mut().unwrap() += 1.0;
            } else {
                indices.push(h);
                values.push(1.0);
            }
        }
        Self { indices, values }
    }
}

/// FNV-1a over 64-bit words.
fn fnv(words: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Hashed context features of a state.
///
/// Active features: a bias; each prompt token with its position; a hash of
/// the whole prompt; the last 1..=`window` generated tokens as n-grams
/// (padded with a begin marker), each both alone and crossed with the
/// whole-prompt hash; and the generated length.
pub fn featurize(state: &GenState, feature_dim: usize, window: usize) -> ContextFeatures {
    let dim = feature_dim as u64;
    let bucket = |words: &[u64]| (fnv(words) % dim) as u32;
    let gen = &state.generated;
    let prompt_hash = fnv(&state.prompt.iter().map(|&t| t as u64).collect::<Vec<_>>());

    let mut hashes = Vec::with_capacity(state.prompt.len() + window + 5);
    hashes.push(bucket(&[0]));
    for (pos, &t) in state.prompt.iter().enumerate() {
        hashes.push(bucket(&[1, pos as u64, t as u64]));
    }
    hashes.push(bucket(&[2, prompt_hash]));
    for n in 1..=window {
        let mut words = vec![3, n as u64];
        for back in (1..=n).rev() {
            words.push(if gen.len() >= back {
                gen[gen.len() - back] as u64
            } else {
                BOS
            });
        }
        if n == 1 {
            hashes.push(bucket(&words));
        }
        words[0] = 4;
        words.push(prompt_hash);
        hashes.push(bucket(&words));
    }
    hashes.push(bucket(&[5, gen.len().min(63) as u64]));
    ContextFeatures::from_hashes(hashes)
}

/// A validated next-token distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution<T: Scalar = f64> {
    probs: Vec<T>,
}

impl<T: Scalar> TokenDistribution<T> {
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < T::zero()) {
            return Err(Error::InvalidDistribution(
                "entries must be finite and non-negative".into(),
            ));
        }
        let total: T = probs.iter().copied().sum();
        if (total - T::one()).abs() > T::normalization_tolerance() {
            return Err(Error::InvalidDistribution(format!("sums to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![T::one() / T::of_usize(n); n],
        }
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Inverse-CDF draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Token {
        let u = T::of(rng.random::<f64>());
        let mut acc = T::zero();
        let mut fallback = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > T::zero() {
                fallback = i;
            }
            acc += p;
            if u < acc {
                return i as Token;
            }
        }
        fallback as Token
    }

    /// Highest-probability token, lowest index on ties.
    pub fn argmax(&self) -> Token {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as Token
    }
}

/// Stable log-softmax: `s - max(s) - ln Σ exp(s - max(s))`.
pub fn log_softmax<T: Scalar>(scores: &[T]) -> Result<Vec<T>> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("policy scores".into()));
    }
    let max = scores
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| a.max(b));
    let lse = scores.iter().map(|&s| (s - max).exp()).sum::<T>().ln();
    Ok(scores.iter().map(|&s| s - max - lse).collect())
}

/// Policy parameters `θ`: a dense row-major `feature_dim × vocab` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams<T: Scalar = f64> {
    weights: Vec<T>,
    feature_dim: usize,
    vocab_size: usize,
    window: usize,
    version: u64,
}

impl<T: Scalar> PolicyParams<T> {
    /// All-zero weights, i.e. the uniform policy.
    pub fn zeros(feature_dim: usize, vocab_size: usize, window: usize) -> Result<Self> {
        if feature_dim == 0 || vocab_size < 2 {
            return Err(contract("feature_dim >= 1 and vocab_size >= 2 required"));
        }
        Ok(Self {
            weights: vec![T::zero(); feature_dim * vocab_size],
            feature_dim,
            vocab_size,
            window,
            version: 0,
        })
    }

    pub fn from_weights(
        weights: Vec<T>,
        feature_dim: usize,
        vocab_size: usize,
        window: usize,
    ) -> Result<Self> {
        let mut p = Self::zeros(feature_dim, vocab_size, window)?;
        if weights.len() != p.weights.len() {
            return Err(contract("weight matrix has the wrong shape"));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("initial weights".into()));
        }
        p.weights = weights;
        Ok(p)
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weight(&self, feature: usize, token: Token) -> T {
        self.weights[feature * self.vocab_size + token as usize]
    }

    /// Direct write access for tests and hand-built policies. Does not bump
    /// the version.
    pub fn set_weight(&mut self, feature: usize, token: Token, w: T) {
        self.weights[feature * self.vocab_size + token as usize] = w;
    }

    pub fn featurize(&self, state: &GenState) -> ContextFeatures {
        featurize(state, self.feature_dim, self.window)
    }

    pub fn scores(&self, features: &ContextFeatures) -> Vec<T> {
        let v = self.vocab_size;
        let mut scores = vec![T::zero(); v];
        for (i, x) in features.iter() {
            let x = T::of(x);
            let row = &self.weights[i * v..(i + 1) * v];
            for (s, &w) in scores.iter_mut().zip(row) {
                *s += w * x;
            }
        }
        scores
    }

    pub fn log_probs(&self, features: &ContextFeatures) -> Result<Vec<T>> {
        log_softmax(&self.scores(features))
    }

    pub fn distribution_of(&self, features: &ContextFeatures) -> Result<TokenDistribution<T>> {
        let probs = self.log_probs(features)?.into_iter().map(T::exp).collect();
        TokenDistribution::new(probs)
    }

    pub fn token_distribution(&self, state: &GenState) -> Result<TokenDistribution<T>> {
        self.distribution_of(&self.featurize(state))
    }

    pub fn log_prob(&self, state: &GenState, token: Token) -> Result<T> {
        self.check_token(token)?;
        Ok(self.log_probs(&self.featurize(state))?[token as usize])
    }

    pub fn sample_token<R: Rng + ?Sized>(&self, state: &GenState, rng: &mut R) -> Result<Token> {
        Ok(self.token_distribution(state)?.sample(rng))
    }

    /// Samples a full response to `task` from the empty generation.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        mdp: &Mdp,
        task: &TaskInstance,
        rng: &mut R,
    ) -> Result<Trajectory<T>> {
        self.continue_from(mdp, task, &task.initial_state(), rng)
    }

    /// Samples a continuation of `root` until termination. The root's
    /// generated tokens become the trajectory's forced prefix.
    pub fn continue_from<R: Rng + ?Sized>(
        &self,
        mdp: &Mdp,
        task: &TaskInstance,
        root: &GenState,
        rng: &mut R,
    ) -> Result<Trajectory<T>> {
        self.rollout(mdp, task, root, |dist| dist.sample(rng))
    }

    /// Greedy decoding from the bare prompt.
    pub fn greedy(&self, mdp: &Mdp, task: &TaskInstance) -> Result<Trajectory<T>> {
        self.rollout(mdp, task, &task.initial_state(), |dist| dist.argmax())
    }

    fn rollout(
        &self,
        mdp: &Mdp,
        task: &TaskInstance,
        root: &GenState,
        mut choose: impl FnMut(&TokenDistribution<T>) -> Token,
    ) -> Result<Trajectory<T>> {
        if mdp.vocab().size() != self.vocab_size {
            return Err(contract("policy and MDP vocabularies differ"));
        }
        let mut state = root.clone();
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        let mut entropies = Vec::new();
        while !mdp.is_terminal(&state) {
            let lp = self.log_probs(&self.featurize(&state))?;
            let dist = TokenDistribution::new(lp.iter().map(|l| l.exp()).collect())?;
            let token = choose(&dist);
            entropies.push(crate::first_return::token_entropy(&dist)?);
            logprobs.push(lp[token as usize]);
            tokens.push(token);
            state.generated.push(token);
        }
        let termination = if state.generated.last() == Some(&mdp.eos()) {
            Termination::Eos
        } else {
            Termination::LengthCap
        };
        Ok(Trajectory {
            task_id: task.id.clone(),
            prefix: root.generated.clone(),
            tokens,
            logprobs,
            entropies: Some(entropies),
            termination: Some(termination),
            reward: None,
        })
    }

    /// Exact gradient of `log π(token | state)` with respect to the weights.
    pub fn grad_log_prob(&self, state: &GenState, token: Token) -> Result<Gradient<T>> {
        self.grad_log_prob_features(&self.featurize(state), token)
    }

    pub fn grad_log_prob_features(
        &self,
        features: &ContextFeatures,
        token: Token,
    ) -> Result<Gradient<T>> {
        self.check_token(token)?;
        let probs: Vec<T> = self.log_probs(features)?.into_iter().map(T::exp).collect();
        let mut g = Gradient::zeros(self.feature_dim, self.vocab_size);
        g.add_log_prob_grad(features, &probs, token, T::one());
        Ok(g)
    }

    /// `weights += delta`, bumping the version. Non-finite deltas leave the
    /// parameters untouched.
    pub fn apply_update(&mut self, delta: &Gradient<T>) -> Result<()> {
        if delta.feature_dim != self.feature_dim || delta.vocab_size != self.vocab_size {
            return Err(contract("update shape does not match parameters"));
        }
        if delta.data.iter().any(|d| !d.is_finite()) {
            return Err(Error::NonFinite("parameter update".into()));
        }
        for (w, &d) in self.weights.iter_mut().zip(&delta.data) {
            *w += d;
        }
        self.version += 1;
        Ok(())
    }

    fn check_token(&self, token: Token) -> Result<()> {
        if token as usize >= self.vocab_size {
            return Err(contract(format!("token {token} out of range")));
        }
        Ok(())
    }
}

/// A dense weight-shaped vector: gradients and update deltas.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient<T: Scalar = f64> {
    data: Vec<T>,
    feature_dim: usize,
    vocab_size: usize,
}

impl<T: Scalar> Gradient<T> {
    pub fn zeros(feature_dim: usize, vocab_size: usize) -> Self {
        Self {
            data: vec![T::zero(); feature_dim * vocab_size],
            feature_dim,
            vocab_size,
        }
    }

    pub fn like(params: &PolicyParams<T>) -> Self {
        Self::zeros(params.feature_dim, params.vocab_size)
    }

    pub fn from_vec(data: Vec<T>, feature_dim: usize, vocab_size: usize) -> Result<Self> {
        if data.len() != feature_dim * vocab_size {
            return Err(contract("gradient has the wrong shape"));
        }
        Ok(Self {
            data,
            feature_dim,
            vocab_size,
        })
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, feature: usize, token: Token) -> T {
        self.data[feature * self.vocab_size + token as usize]
    }

    pub fn set(&mut self, feature: usize, token: Token, value: T) {
        self.data[feature * self.vocab_size + token as usize] = value;
    }

    /// Adds `scale · ∇ log π(token)` given the distribution `probs` at those
    /// features: row `i`, column `v` gains `scale · φ_i · (1{v = token} − p_v)`.
    pub fn add_log_prob_grad(
        &mut self,
        features: &ContextFeatures,
        probs: &[T],
        token: Token,
        scale: T,
    ) {
        let v = self.vocab_size;
        for (i, x) in features.iter() {
            let fx = scale * T::of(x);
            let row = &mut self.data[i * v..(i + 1) * v];
            for (col, (g, &p)) in row.iter_mut().zip(probs).enumerate() {
                let indicator = if col == token as usize { T::one() } else { T::zero() };
                *g += fx * (indicator - p);
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in &mut self.data {
            *g *= c;
        }
    }

    pub fn scaled(mut self, c: T) -> Self {
        self.scale(c);
        self
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|g| *g == T::zero())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, g| m.max(g.abs()))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FR3ECKPT";
const CHECKPOINT_FORMAT: u32 = 1;

/// Writes a bit-exact binary checkpoint: magic, format, scalar width, then
/// feature_dim, vocab_size, window, version and step as little-endian u64,
/// followed by the weights.
pub fn write_checkpoint<T: Scalar, W: Write>(
    mut out: W,
    params: &PolicyParams<T>,
    step: u64,
) -> Result<()> {
    let mut buf = Vec::with_capacity(48 + params.weights.len() * T::BYTES);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_FORMAT.to_le_bytes());
    buf.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
    for x in [
        params.feature_dim as u64,
        params.vocab_size as u64,
        params.window as u64,
        params.version,
        step,
    ] {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for &w in &params.weights {
        w.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`]; returns the
/// parameters and the stored step counter.
pub fn read_checkpoint<T: Scalar, R: Read>(mut input: R) -> Result<(PolicyParams<T>, u64)> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if buf.len() < 56 || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
    if u32_at(8) != CHECKPOINT_FORMAT {
        return Err(bad("unsupported format version"));
    }
    if u32_at(12) as usize != T::BYTES {
        return Err(bad("scalar width mismatch"));
    }
    let (feature_dim, vocab_size, window) =
        (u64_at(16) as usize, u64_at(24) as usize, u64_at(32) as usize);
    let (version, step) = (u64_at(40), u64_at(48));
    let body = &buf[56..];
    if body.len() != feature_dim * vocab_size * T::BYTES {
        return Err(bad("weight payload has the wrong length"));
    }
    let weights = body.chunks_exact(T::BYTES).map(T::read_le).collect();
    let mut params = PolicyParams::from_weights(weights, feature_dim, vocab_size, window)?;
    params.version = version;
    Ok((params, step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{tokens, Difficulty, Operator};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> PolicyParams {
        PolicyParams::zeros(64, 16, 4).unwrap()
    }

    fn random_params(seed: u64, dim: usize, vocab: usize) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..dim * vocab)
            .map(|_| rng.random_range(-1.5..1.5))
            .collect();
        PolicyParams::from_weights(w, dim, vocab, 4).unwrap()
    }

    fn easy_task() -> TaskInstance {
        TaskInstance::chain_sum("t", vec![2, 3], vec![Operator::Add], &[], Difficulty::Easy).unwrap()
    }

    /// Puts a large weight on `token` for the bias feature, so every state
    /// prefers it.
    fn forced(token: Token, margin: f64) -> PolicyParams {
        let mut p = small();
        let bias = (fnv(&[0]) % 64) as usize;
        p.set_weight(bias, token, margin);
        p
    }

    #[test]
    fn featurize_is_deterministic_and_sensitive() {
        let a = GenState::with_generated(vec![1, 10, 2, 12], vec![5, 7]);
        let b = GenState::with_generated(vec![1, 10, 2, 12], vec![5, 8]);
        assert_eq!(featurize(&a, 4096, 4), featurize(&a, 4096, 4));
        assert_ne!(featurize(&a, 4096, 4), featurize(&b, 4096, 4));
        let empty = featurize(&GenState::new(vec![1, 10, 2, 12]), 4096, 4);
        assert!(!empty.is_empty());
        assert!(empty.indices.windows(2).all(|w| w[0] < w[1]));
        assert!(empty.indices.iter().all(|&i| i < 4096));
    }

    #[test]
    fn zero_weights_give_uniform() {
        let p = small();
        let d = p.token_distribution(&GenState::new(vec![1, 2])).unwrap();
        for &q in d.probs() {
            assert!((q - 1.0 / 16.0).abs() < 1e-15);
        }
        let lp = PolicyParams::<f64>::zeros(8, 4, 4)
            .unwrap()
            .log_prob(&GenState::default(), 2)
            .unwrap();
        assert!((lp - (0.25f64).ln()).abs() < 1e-15);
        assert!((lp + 1.386_294_361_119_890_6).abs() < 1e-12);
    }

    #[test]
    fn dominant_score_saturates() {
        let p = forced(3, 50.0);
        let d = p.token_distribution(&GenState::new(vec![4])).unwrap();
        // 1 / (1 + 15 e^-50) > 1 - 1e-15
        assert!(d.probs()[3] >= 1.0 - 1e-15);
    }

    #[test]
    fn log_prob_matches_distribution() {
        let p = random_params(3, 64, 16);
        let s = GenState::with_generated(vec![3, 10, 4, 12], vec![1, 14]);
        let d = p.token_distribution(&s).unwrap();
        let total: f64 = (0..16).map(|t| p.log_prob(&s, t).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        for t in 0..16 {
            assert!((p.log_prob(&s, t).unwrap().exp() - d.probs()[t as usize]).abs() <= 1e-12);
        }
    }

    #[test]
    fn non_finite_scores_error() {
        let mut p = small();
        let s = GenState::default();
        let f = p.featurize(&s);
        p.weights[f.indices[0] as usize * 16] = f64::INFINITY;
        assert!(matches!(p.token_distribution(&s), Err(Error::NonFinite(_))));
    }

    #[test]
    fn one_hot_sampling_is_constant() {
        let p = forced(9, 200.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(p.sample_token(&GenState::default(), &mut rng).unwrap(), 9);
        }
    }

    #[test]
    fn sampling_reproducible_with_seed() {
        let p = random_params(5, 64, 16);
        let task = easy_task();
        let mdp = Mdp::chain_sum(32).unwrap();
        let a = p.generate(&mdp, &task, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = p.generate(&mdp, &task, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eos_policy_generates_single_token() {
        let p = forced(tokens::EOS, 200.0);
        let mdp = Mdp::chain_sum(32).unwrap();
        let traj = p
            .generate(&mdp, &easy_task(), &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(traj.tokens, vec![tokens::EOS]);
        assert_eq!(traj.termination, Some(Termination::Eos));
        assert_eq!(traj.reward, None);
    }

    #[test]
    fn no_eos_mass_hits_cap() {
        let p = forced(tokens::EOS, -1e3);
        let mdp = Mdp::chain_sum(8).unwrap();
        let traj = p
            .generate(&mdp, &easy_task(), &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap();
        assert_eq!(traj.len(), 8);
        assert_eq!(traj.termination, Some(Termination::LengthCap));
    }

    #[test]
    fn trajectory_logprobs_match_recomputation() {
        let p = random_params(8, 64, 16);
        let task = easy_task();
        let mdp = Mdp::chain_sum(32).unwrap();
        let traj = p.generate(&mdp, &task, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        traj.check_invariants().unwrap();
        let mut state = task.initial_state();
        for (&t, &lp) in traj.tokens.iter().zip(&traj.logprobs) {
            assert_eq!(p.log_prob(&state, t).unwrap(), lp);
            state.generated.push(t);
        }
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let p = random_params(11, 64, 16);
        let s = GenState::with_generated(vec![1, 2], vec![3]);
        let g = p.grad_log_prob(&s, 7).unwrap();
        for i in 0..64 {
            let row: f64 = (0..16).map(|v| g.get(i, v)).sum();
            assert!(row.abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_of_empty_features_is_zero() {
        let p = random_params(12, 64, 16);
        assert!(p
            .grad_log_prob_features(&ContextFeatures::empty(), 3)
            .unwrap()
            .is_zero());
    }

    #[test]
    fn update_and_revert() {
        let mut p = random_params(13, 16, 4);
        let orig = p.clone();
        p.apply_update(&Gradient::like(&p)).unwrap();
        assert_eq!(p.weights(), orig.weights());
        assert_eq!(p.version(), orig.version() + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let delta = Gradient::from_vec((0..64).map(|_| rng.random_range(-1.0..1.0)).collect(), 16, 4)
            .unwrap();
        p.apply_update(&delta).unwrap();
        p.apply_update(&delta.clone().scaled(-1.0)).unwrap();
        for (a, b) in p.weights().iter().zip(orig.weights()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(p.version(), orig.version() + 3);
    }

    #[test]
    fn nan_update_is_rejected_without_mutation() {
        let mut p = random_params(14, 16, 4);
        let before = p.clone();
        let mut delta = Gradient::like(&p);
        delta.set(3, 1, f64::NAN);
        assert!(p.apply_update(&delta).is_err());
        assert_eq!(p, before);
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let mut p = random_params(15, 32, 16);
        p.version = 42;
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, 7).unwrap();
        let (back, step): (PolicyParams, u64) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(step, 7);
        assert_eq!(back.version(), 42);
        assert!(back
            .weights()
            .iter()
            .zip(p.weights())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(read_checkpoint::<f32, _>(buf.as_slice()).is_err());
        assert!(read_checkpoint::<f64, _>(&buf[..60]).is_err());
    }

    #[test]
    fn f32_policy_is_normalized() {
        let p = PolicyParams::<f32>::zeros(64, 16, 4).unwrap();
        let d = p.token_distribution(&GenState::new(vec![1])).unwrap();
        assert!((d.probs().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
