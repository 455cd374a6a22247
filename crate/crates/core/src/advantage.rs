//! Advantage arithmetic: raw advantages against empirical state values,
//! value-progress modulation, the token-weighted batch mean, and the
//! group-normalized advantage used by the baseline.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::explore::ExplorationRecord;
use crate::scalar::Scalar;

/// `α = exp(V(S_{j-1}) − V(S_j))`: below one when the value improved, above
/// one when it stalled or dropped.
pub fn modulation_factor<T: Scalar>(v_j: T, v_prev: T) -> T {
    (v_prev - v_j).exp()
}

/// `[1, α_1, …, α_K]` for a value ladder `V(S_0..S_K)`.
pub fn modulation_ladder<T: Scalar>(values: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(values.len());
    if !values.is_empty() {
        out.push(T::one());
    }
    out.extend(values.windows(2).map(|w| modulation_factor(w[1], w[0])));
    out
}

pub fn raw_advantage<T: Scalar>(reward: u8, value: T) -> T {
    T::of(reward as f64) - value
}

pub fn modulate<T: Scalar>(alpha: T, raw: T) -> T {
    alpha * raw
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AdvantageRecord<T: Scalar = f64> {
    pub state_index: usize,
    pub rollout_index: usize,
    pub raw: T,
    pub alpha: T,
    pub modulated: T,
    /// Continuation tokens the advantage is broadcast to.
    pub token_count: usize,
}

impl<T: Scalar> AdvantageRecord<T> {
    pub fn new(state_index: usize, rollout_index: usize, reward: u8, value: T, alpha: T, token_count: usize) -> Result<Self> {
        if !(alpha > T::zero()) {
            return Err(contract("modulation factor must be positive"));
        }
        let raw = raw_advantage(reward, value);
        Ok(Self {
            state_index,
            rollout_index,
            raw,
            alpha,
            modulated: modulate(alpha, raw),
            token_count,
        })
    }
}

/// One advantage record per rollout of a record, group 0 at `α = 1`.
/// Closed groups carry no tokens and are skipped.
pub fn advantage_records<T: Scalar>(record: &ExplorationRecord<T>) -> Result<Vec<AdvantageRecord<T>>> {
    let mut out = Vec::new();
    for (j, group) in record.groups.iter().enumerate() {
        if group.closed {
            continue;
        }
        for (m, (rollout, &reward)) in group.rollouts.iter().zip(&group.rewards).enumerate() {
            out.push(AdvantageRecord::new(
                j,
                m,
                reward,
                group.value,
                record.alphas[j],
                rollout.len(),
            )?);
        }
    }
    Ok(out)
}

/// Token-weighted batch mean `Σ L·A′ / Σ L`.
///
/// With `equal_lengths` the caller asserts every rollout within a state group
/// has the same token count (checked); the mean then vanishes up to rounding.
/// Otherwise the mean is returned as measured and logged when non-zero.
pub fn batch_mean_modulated<T: Scalar>(records: &[AdvantageRecord<T>], equal_lengths: bool) -> Result<T> {
    if records.is_empty() {
        return Err(Error::Empty("advantage batch"));
    }
    if equal_lengths {
        let mut seen: std::collections::BTreeMap<usize, usize> = Default::default();
        for r in records {
            if *seen.entry(r.state_index).or_insert(r.token_count) != r.token_count {
                return Err(contract(format!(
                    "group {} has unequal rollout lengths",
                    r.state_index
                )));
            }
        }
    }
    let tokens: usize = records.iter().map(|r| r.token_count).sum();
    if tokens == 0 {
        return Err(Error::Empty("advantage batch tokens"));
    }
    let weighted: T = records
        .iter()
        .map(|r| r.modulated * T::of_usize(r.token_count))
        .sum();
    let mean = weighted / T::of_usize(tokens);
    if !equal_lengths && mean != T::zero() {
        log::info!("modulated advantage batch mean {mean} over {tokens} tokens (unequal lengths)");
    }
    Ok(mean)
}

/// Group-normalized advantages `(r_i − mean) / std` with population std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GroupAdvantage<T: Scalar = f64> {
    pub values: Vec<T>,
}

pub fn grpo_group_advantage<T: Scalar>(rewards: &[u8]) -> Result<GroupAdvantage<T>> {
    if rewards.is_empty() {
        return Err(Error::Empty("reward group"));
    }
    let n = T::of_usize(rewards.len());
    let r: Vec<T> = rewards.iter().map(|&x| T::of(x as f64)).collect();
    let mean = r.iter().copied().sum::<T>() / n;
    let var = r.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let std = var.sqrt();
    if !(std > T::zero()) {
        return Err(Error::DegenerateGroup(format!(
            "all {} rewards equal; rejection sampling should have dropped this prompt",
            rewards.len()
        )));
    }
    Ok(GroupAdvantage {
        values: r.into_iter().map(|x| (x - mean) / std).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modulation_examples() {
        assert_eq!(modulation_factor(0.5, 0.5), 1.0);
        assert!((modulation_factor(1.0f64, 0.0) - 0.367_879_441_171_442_33).abs() < 1e-15);
        assert!((modulation_factor(0.25f64, 0.75) - 1.648_721_270_700_128_1).abs() < 1e-15);
    }

    #[test]
    fn ladder_starts_at_one() {
        let a = modulation_ladder(&[0.5, 0.75, 0.75, 1.0]);
        assert_eq!(a.len(), 4);
        assert_eq!(a[0], 1.0);
        assert!(a[1] < 1.0 && a[2] == 1.0 && a[3] < 1.0);
        assert!(modulation_ladder::<f64>(&[]).is_empty());
    }

    #[test]
    fn raw_and_modulated_examples() {
        assert_eq!(raw_advantage(1, 0.75), 0.25);
        assert_eq!(raw_advantage(0, 0.75), -0.75);
        let sum: f64 = [1u8, 0, 1, 1].iter().map(|&r| raw_advantage(r, 0.75)).sum();
        assert_eq!(sum, 0.0);
        assert_eq!(modulate(1.0, -0.75), -0.75);
        assert!((modulate(0.367879f64, 0.25) - 0.091_969_75).abs() < 1e-12);
        assert_eq!(modulate(2.5, 0.0), 0.0);
    }

    #[test]
    fn record_rejects_nonpositive_alpha() {
        assert!(AdvantageRecord::new(1, 0, 1, 0.5, 0.0, 3).is_err());
        let r = AdvantageRecord::new(1, 0, 1, 0.5, 2.0, 3).unwrap();
        assert_eq!(r.modulated, r.alpha * r.raw);
    }

    fn group(j: usize, rewards: &[u8], alpha: f64, len: impl Fn(usize) -> usize) -> Vec<AdvantageRecord> {
        let v = empirical(rewards);
        rewards
            .iter()
            .enumerate()
            .map(|(m, &r)| AdvantageRecord::new(j, m, r, v, alpha, len(m)).unwrap())
            .collect()
    }

    fn empirical(rewards: &[u8]) -> f64 {
        rewards.iter().map(|&r| r as f64).sum::<f64>() / rewards.len() as f64
    }

    #[test]
    fn single_group_mean_is_zero() {
        let recs = group(1, &[1, 0, 1, 1], 0.8, |_| 5);
        assert!(batch_mean_modulated(&recs, true).unwrap().abs() < 1e-12);
    }

    #[test]
    fn two_groups_with_different_alphas_mean_is_zero() {
        let mut recs = group(1, &[1, 0, 0], 1.7, |_| 4);
        recs.extend(group(2, &[1, 1, 0, 1, 0], 0.3, |_| 9));
        assert!(batch_mean_modulated(&recs, true).unwrap().abs() < 1e-12);
    }

    #[test]
    fn unequal_lengths_give_nonzero_mean() {
        // correct rollouts long, incorrect short
        let recs = group(1, &[1, 0, 1, 0], 1.0, |m| if m % 2 == 0 { 10 } else { 2 });
        let mean = batch_mean_modulated(&recs, false).unwrap();
        // (0.5*10*2 - 0.5*2*2) / 24 = 8/24
        assert!((mean - 1.0 / 3.0).abs() < 1e-15);
        assert!(batch_mean_modulated(&recs, true).is_err());
    }

    #[test]
    fn empty_batch_errors() {
        assert!(batch_mean_modulated::<f64>(&[], true).is_err());
    }

    #[test]
    fn grpo_examples() {
        assert_eq!(grpo_group_advantage::<f64>(&[1, 0]).unwrap().values, vec![1.0, -1.0]);
        assert_eq!(
            grpo_group_advantage::<f64>(&[1, 1, 0, 0]).unwrap().values,
            vec![1.0, 1.0, -1.0, -1.0]
        );
        assert!(matches!(
            grpo_group_advantage::<f64>(&[1, 1, 1, 1]),
            Err(Error::DegenerateGroup(_))
        ));
        assert!(grpo_group_advantage::<f64>(&[0, 0]).is_err());
    }

    #[test]
    fn grpo_f32() {
        let a = grpo_group_advantage::<f32>(&[1, 0, 0, 0]).unwrap();
        let mean: f32 = a.values.iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
    }
}
