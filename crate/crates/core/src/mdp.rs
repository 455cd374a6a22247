//! Token-level generation MDP and the synthetic chain-sum task family.
//!
//! A state is a prompt plus the tokens generated so far; an action appends one
//! vocabulary token; the episode ends on end-of-sequence or at the length cap.
//! The only reward is a binary verdict on the finished generation.
//!
//! Chain-sum prompts encode a short chain of single-digit operands joined by
//! `+`/`-`, terminated by `=`. The answer is the chain's value modulo 10. A
//! generation is correct when it ends with end-of-sequence and the last digit
//! token it emitted is the answer; every other token is free-form reasoning the
//! verifier ignores, so many distinct correct generations exist.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;

pub type Token = u16;

/// Token ids of the chain-sum vocabulary. Digits are tokens `0..=9`.
pub mod tokens {
    use super::Token;

    pub const PLUS: Token = 10;
    pub const MINUS: Token = 11;
    pub const EQUALS: Token = 12;
    pub const DISTRACTOR: Token = 13;
    pub const FILLER: Token = 14;
    pub const EOS: Token = 15;

    /// Number of digit tokens.
    pub const DIGITS: Token = 10;
}

/// Default generation length cap.
pub const DEFAULT_MAX_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    eos: Token,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>, eos: Token) -> Result<Self> {
        if symbols.len() < 2 {
            return Err(contract("vocabulary needs at least two tokens"));
        }
        if symbols.len() > Token::MAX as usize {
            return Err(contract("vocabulary too large for the token type"));
        }
        if eos as usize >= symbols.len() {
            return Err(contract(format!(
                "eos index {eos} out of range for vocabulary of size {}",
                symbols.len()
            )));
        }
        let mut seen = HashSet::new();
        for s in &symbols {
            if !seen.insert(s.as_str()) {
                return Err(contract(format!("duplicate vocabulary symbol `{s}`")));
            }
        }
        Ok(Self { symbols, eos })
    }

    /// The 16-token chain-sum vocabulary.
    pub fn chain_sum() -> Self {
        let mut symbols: Vec<String> = (0..10).map(|d| d.to_string()).collect();
        symbols.extend(["+", "-", "=", "#", ".", "<eos>"].map(String::from));
        Self::new(symbols, tokens::EOS).expect("chain-sum vocabulary is valid")
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn eos(&self) -> Token {
        self.eos
    }

    pub fn symbol(&self, token: Token) -> &str {
        self.symbols
            .get(token as usize)
            .map(String::as_str)
            .unwrap_or("<?>")
    }

    pub fn render(&self, seq: &[Token]) -> String {
        seq.iter()
            .map(|&t| self.symbol(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A generation state: the prompt plus the tokens generated after it.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GenState {
    pub prompt: Vec<Token>,
    pub generated: Vec<Token>,
}

impl GenState {
    pub fn new(prompt: Vec<Token>) -> Self {
        Self {
            prompt,
            generated: Vec::new(),
        }
    }

    pub fn with_generated(prompt: Vec<Token>, generated: Vec<Token>) -> Self {
        Self { prompt, generated }
    }

    /// Prompt length plus generated length.
    pub fn total_len(&self) -> usize {
        self.prompt.len() + self.generated.len()
    }

    pub fn is_prefix_of(&self, other: &GenState) -> bool {
        self.prompt == other.prompt && other.generated.starts_with(&self.generated)
    }
}

/// The deterministic transition structure: vocabulary plus length cap.
#[derive(Clone, Debug)]
pub struct Mdp {
    vocab: Vocabulary,
    max_len: usize,
}

impl Mdp {
    pub fn new(vocab: Vocabulary, max_len: usize) -> Result<Self> {
        if max_len == 0 {
            return Err(contract("max_len must be at least 1"));
        }
        Ok(Self { vocab, max_len })
    }

    pub fn chain_sum(max_len: usize) -> Result<Self> {
        Self::new(Vocabulary::chain_sum(), max_len)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn eos(&self) -> Token {
        self.vocab.eos
    }

    /// True iff the last generated token is eos or the length cap is reached.
    pub fn is_terminal(&self, state: &GenState) -> bool {
        state.generated.last() == Some(&self.vocab.eos) || state.generated.len() >= self.max_len
    }

    pub fn step(&self, state: &GenState, token: Token) -> Result<GenState> {
        if self.is_terminal(state) {
            return Err(contract("cannot step a terminal state"));
        }
        if token as usize >= self.vocab.size() {
            return Err(contract(format!(
                "token {token} out of range for vocabulary of size {}",
                self.vocab.size()
            )));
        }
        let mut next = state.clone();
        next.generated.push(token);
        Ok(next)
    }

    /// Checks every prompt and generated token against the vocabulary.
    pub fn validate_state(&self, state: &GenState) -> Result<()> {
        let n = self.vocab.size();
        if let Some(&t) = state
            .prompt
            .iter()
            .chain(&state.generated)
            .find(|&&t| t as usize >= n)
        {
            return Err(contract(format!("token {t} out of vocabulary range")));
        }
        if state.generated.len() > self.max_len {
            return Err(contract("generated sequence exceeds max_len"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operator {
    #[serde(rename = "+")]
    Add,
    #[serde(rename = "-")]
    Sub,
}

impl Operator {
    pub fn token(self) -> Token {
        match self {
            Operator::Add => tokens::PLUS,
            Operator::Sub => tokens::MINUS,
        }
    }
}

/// How a completed generation is judged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "answer")]
pub enum Verifier {
    /// Correct iff the generation ends with eos and the last digit token
    /// emitted before it equals the answer.
    FinalDigit(u8),
}

impl Verifier {
    pub fn accepts(&self, generated: &[Token], eos: Token) -> bool {
        match *self {
            Verifier::FinalDigit(answer) => {
                let Some((&last, body)) = generated.split_last() else {
                    return false;
                };
                if last != eos {
                    return false;
                }
                body.iter()
                    .rev()
                    .find(|&&t| t < tokens::DIGITS && t != eos)
                    .is_some_and(|&d| d == answer as Token)
            }
        }
    }
}

/// A synthetic reasoning problem.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub prompt: Vec<Token>,
    pub difficulty: Difficulty,
    pub generator: String,
    pub operands: Vec<u8>,
    pub operators: Vec<Operator>,
    pub verifier: Verifier,
}

impl TaskInstance {
    /// Builds a chain-sum instance; distractors are inserted before the given
    /// operand indices.
    pub fn chain_sum(
        id: impl Into<String>,
        operands: Vec<u8>,
        operators: Vec<Operator>,
        distractors_before: &[usize],
        difficulty: Difficulty,
    ) -> Result<Self> {
        if operands.is_empty() || operators.len() + 1 != operands.len() {
            return Err(contract("chain-sum needs n operands and n-1 operators"));
        }
        if operands.iter().any(|&d| d > 9) {
            return Err(contract("chain-sum operands are single digits"));
        }
        let mut prompt = Vec::new();
        for (i, &d) in operands.iter().enumerate() {
            if i > 0 {
                prompt.push(operators[i - 1].token());
            }
            let n = distractors_before.iter().filter(|&&k| k == i).count();
            prompt.extend(std::iter::repeat_n(tokens::DISTRACTOR, n));
            prompt.push(d as Token);
        }
        prompt.push(tokens::EQUALS);
        let answer = chain_value(&operands, &operators);
        Ok(Self {
            id: id.into(),
            prompt,
            difficulty,
            generator: "chain-sum".into(),
            operands,
            operators,
            verifier: Verifier::FinalDigit(answer),
        })
    }

    pub fn answer(&self) -> u8 {
        match self.verifier {
            Verifier::FinalDigit(a) => a,
        }
    }

    pub fn accepts(&self, generated: &[Token], eos: Token) -> bool {
        self.verifier.accepts(generated, eos)
    }

    pub fn initial_state(&self) -> GenState {
        GenState::new(self.prompt.clone())
    }

    /// Structural consistency of a deserialized record.
    pub fn validate(&self) -> Result<()> {
        if self.operands.is_empty() || self.operators.len() + 1 != self.operands.len() {
            return Err(Error::Format(format!("{}: operand/operator arity", self.id)));
        }
        let expected = chain_value(&self.operands, &self.operators);
        if self.answer() != expected {
            return Err(Error::Format(format!(
                "{}: stored answer {} but operands evaluate to {expected}",
                self.id,
                self.answer()
            )));
        }
        let digits: Vec<u8> = self
            .prompt
            .iter()
            .filter(|&&t| t < tokens::DIGITS)
            .map(|&t| t as u8)
            .collect();
        if digits != self.operands || self.prompt.last() != Some(&tokens::EQUALS) {
            return Err(Error::Format(format!(
                "{}: prompt does not encode its operands",
                self.id
            )));
        }
        Ok(())
    }
}

fn chain_value(operands: &[u8], operators: &[Operator]) -> u8 {
    let mut acc = operands[0] as i32;
    for (op, &d) in operators.iter().zip(&operands[1..]) {
        match op {
            Operator::Add => acc += d as i32,
            Operator::Sub => acc -= d as i32,
        }
    }
    acc.rem_euclid(10) as u8
}

/// A sampled generation with its per-token log-probabilities.
///
/// `prefix` holds generated tokens that were forced (a rollout root) rather
/// than sampled; `tokens`, `logprobs` and `entropies` describe only the
/// sampled continuation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Trajectory<T: Scalar = f64> {
    pub task_id: String,
    pub prefix: Vec<Token>,
    pub tokens: Vec<Token>,
    pub logprobs: Vec<T>,
    pub entropies: Option<Vec<T>>,
    pub termination: Option<Termination>,
    pub reward: Option<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Eos,
    LengthCap,
}

impl<T: Scalar> Trajectory<T> {
    /// Full generated sequence: forced prefix followed by the continuation.
    pub fn generated(&self) -> Vec<Token> {
        let mut out = Vec::with_capacity(self.prefix.len() + self.tokens.len());
        out.extend_from_slice(&self.prefix);
        out.extend_from_slice(&self.tokens);
        out
    }

    /// Number of sampled (trainable) tokens.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_terminated(&self) -> bool {
        self.termination.is_some()
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.tokens.len() != self.logprobs.len() {
            return Err(contract("token/logprob length mismatch"));
        }
        if let Some(e) = &self.entropies {
            if e.len() != self.tokens.len() {
                return Err(contract("token/entropy length mismatch"));
            }
        }
        if self.logprobs.iter().any(|lp| !(*lp <= T::zero())) {
            return Err(contract("log-probabilities must be finite and <= 0"));
        }
        if matches!(self.reward, Some(r) if r > 1) {
            return Err(contract("reward must be 0 or 1"));
        }
        Ok(())
    }
}

/// Binary verdict for a terminated trajectory.
pub fn verify<T: Scalar>(task: &TaskInstance, traj: &Trajectory<T>, eos: Token) -> Result<u8> {
    if !traj.is_terminated() {
        return Err(contract(format!(
            "trajectory for {} is not terminated",
            traj.task_id
        )));
    }
    Ok(task.accepts(&traj.generated(), eos) as u8)
}

/// Generator names accepted by [`generate_task_suite`].
pub const GENERATORS: &[&str] = &[
    "chain-sum",
    "chain-sum-easy",
    "chain-sum-medium",
    "chain-sum-hard",
];

/// Deterministic, solvable task suite.
///
/// `chain-sum` mixes difficulties; the suffixed variants fix one.
/// Easy: two operands in 0..=4 joined by `+`. Medium: three operands in
/// 0..=5 with mixed `+`/`-`. Hard: four operands in 0..=9 with mixed
/// operators and one or two distractor tokens.
pub fn generate_task_suite(kind: &str, n: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    let fixed = match kind {
        "chain-sum" => None,
        "chain-sum-easy" => Some(Difficulty::Easy),
        "chain-sum-medium" => Some(Difficulty::Medium),
        "chain-sum-hard" => Some(Difficulty::Hard),
        other => return Err(Error::UnknownGenerator(other.to_string())),
    };
    if n == 0 {
        return Err(contract("task suite size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let difficulty = fixed.unwrap_or_else(|| match rng.random_range(0..3) {
                0 => Difficulty::Easy,
                1 => Difficulty::Medium,
                _ => Difficulty::Hard,
            });
            let id = format!("{kind}-{seed}-{i:05}");
            sample_chain_sum(&mut rng, id, difficulty)
        })
        .collect()
}

fn sample_chain_sum(rng: &mut impl Rng, id: String, difficulty: Difficulty) -> Result<TaskInstance> {
    let (count, max_operand, allow_sub, distractors) = match difficulty {
        Difficulty::Easy => (2, 4, false, 0),
        Difficulty::Medium => (3, 5, true, 0),
        Difficulty::Hard => (4, 9, true, rng.random_range(1..=2)),
    };
    let operands: Vec<u8> = (0..count).map(|_| rng.random_range(0..=max_operand)).collect();
    let operators: Vec<Operator> = (1..count)
        .map(|_| {
            if allow_sub && rng.random_bool(0.5) {
                Operator::Sub
            } else {
                Operator::Add
            }
        })
        .collect();
    let before: Vec<usize> = (0..distractors).map(|_| rng.random_range(0..count)).collect();
    TaskInstance::chain_sum(id, operands, operators, &before, difficulty)
}

/// Writes one JSON record per line.
pub fn write_suite<W: Write>(mut out: W, suite: &[TaskInstance]) -> Result<()> {
    for task in suite {
        serde_json::to_writer(&mut out, task)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_suite<R: BufRead>(input: R) -> Result<Vec<TaskInstance>> {
    let mut suite = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let task: TaskInstance = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("suite line {}: {e}", lineno + 1)))?;
        task.validate()?;
        suite.push(task);
    }
    Ok(suite)
}

/// Exact probability that a uniform-random policy solves `task`.
///
/// Dynamic program over the verifier's three-state automaton (no digit yet,
/// last digit correct, last digit wrong).
pub fn uniform_success_probability(task: &TaskInstance, mdp: &Mdp) -> f64 {
    let v = mdp.vocab().size() as f64;
    let eos = mdp.eos();
    let answer = task.answer() as Token;
    let digit_tokens = (0..mdp.vocab().size() as Token)
        .filter(|&t| t < tokens::DIGITS && t != eos)
        .count() as f64;
    let correct_digit = if (answer as usize) < mdp.vocab().size() && answer != eos {
        1.0
    } else {
        0.0
    };
    let wrong_digit = digit_tokens - correct_digit;
    let other = v - digit_tokens - 1.0;

    // Mass of live (non-terminated) prefixes in each automaton state.
    let (mut none, mut right, mut wrong) = (1.0f64, 0.0f64, 0.0f64);
    let mut success = 0.0;
    for _ in 0..mdp.max_len() {
        success += right / v;
        let total = none + right + wrong;
        let next_right = total * correct_digit / v;
        let next_wrong = total * wrong_digit / v;
        let next_none = none * other / v;
        right = next_right + right * other / v;
        wrong = next_wrong + wrong * other / v;
        none = next_none;
    }
    success
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "medium" => Ok(Difficulty::Medium),
            "hard" => Ok(Difficulty::Hard),
            other => Err(Error::Format(format!("unknown difficulty `{other}`"))),
        }
    }
}
