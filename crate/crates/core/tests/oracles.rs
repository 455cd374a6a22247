use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fr3e_core::explore::{explore_prompt, score_group, ExploreConfig, RolloutGroup};
use fr3e_core::mdp::{
    generate_task_suite, read_suite, uniform_success_probability, write_suite, GenState, Mdp,
    TaskInstance, Token, Trajectory, GENERATORS,
};
use fr3e_core::policy::{read_checkpoint, write_checkpoint, PolicyParams};

fn random_params(seed: u64, dim: usize) -> PolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..dim * 16).map(|_| rng.random_range(-1.5..1.5)).collect();
    PolicyParams::from_weights(w, dim, 16, 4).unwrap()
}

/// Success probability of the uniform policy by enumerating every sequence.
fn enumerate_uniform(task: &TaskInstance, mdp: &Mdp) -> f64 {
    fn go(task: &TaskInstance, mdp: &Mdp, state: &mut Vec<Token>, mass: f64) -> f64 {
        let s = GenState::with_generated(task.prompt.clone(), state.clone());
        if mdp.is_terminal(&s) {
            return if task.accepts(state, mdp.eos()) { mass } else { 0.0 };
        }
        let v = mdp.vocab().size();
        let mut total = 0.0;
        for t in 0..v as Token {
            state.push(t);
            total += go(task, mdp, state, mass / v as f64);
            state.pop();
        }
        total
    }
    go(task, mdp, &mut Vec::new(), 1.0)
}

#[test]
fn uniform_success_matches_enumeration() {
    let suite = generate_task_suite("chain-sum", 6, 3).unwrap();
    for max_len in 1..=4 {
        let mdp = Mdp::chain_sum(max_len).unwrap();
        for task in &suite {
            let dp = uniform_success_probability(task, &mdp);
            let brute = enumerate_uniform(task, &mdp);
            assert!((dp - brute).abs() < 1e-12, "max_len {max_len}: {dp} vs {brute}");
        }
    }
}

#[test]
fn every_generated_task_is_solvable() {
    let mdp = Mdp::chain_sum(32).unwrap();
    for kind in GENERATORS {
        for task in generate_task_suite(kind, 200, 11).unwrap() {
            let answer = task.answer() as Token;
            assert!(task.accepts(&[answer, mdp.eos()], mdp.eos()));
            assert!(uniform_success_probability(&task, &mdp) > 0.0);
        }
    }
}

#[test]
fn suite_roundtrip_is_identical() {
    let suite = generate_task_suite("chain-sum", 50, 5).unwrap();
    let mut buf = Vec::new();
    write_suite(&mut buf, &suite).unwrap();
    assert_eq!(read_suite(&buf[..]).unwrap(), suite);
    let again = generate_task_suite("chain-sum", 50, 5).unwrap();
    let mut buf2 = Vec::new();
    write_suite(&mut buf2, &again).unwrap();
    assert_eq!(buf, buf2);
}

#[test]
fn grad_log_prob_matches_finite_differences() {
    let dim = 64;
    let suite = generate_task_suite("chain-sum", 10, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (n, task) in suite.iter().enumerate() {
        let params = random_params(n as u64, dim);
        let gen: Vec<Token> = (0..rng.random_range(0..6)).map(|_| rng.random_range(0..15)).collect();
        let state = GenState::with_generated(task.prompt.clone(), gen);
        let token: Token = rng.random_range(0..16);
        let analytic = params.grad_log_prob(&state, token).unwrap();
        let h = 1e-6;
        for (i, &g) in analytic.as_slice().iter().enumerate() {
            let (f, v) = (i / 16, (i % 16) as Token);
            let w = params.weight(f, v);
            let mut p = params.clone();
            p.set_weight(f, v, w + h);
            let up = p.log_prob(&state, token).unwrap();
            p.set_weight(f, v, w - h);
            let down = p.log_prob(&state, token).unwrap();
            let numeric = (up - down) / (2.0 * h);
            assert!((g - numeric).abs() < 1e-7, "coord {i}: {g} vs {numeric}");
        }
    }
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let p64 = random_params(1, 32);
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &p64, 17).unwrap();
    let (back, step) = read_checkpoint::<f64, _>(&buf[..]).unwrap();
    assert_eq!(step, 17);
    assert_eq!(back.weights(), p64.weights());
    assert!(read_checkpoint::<f32, _>(&buf[..]).is_err());

    let w32: Vec<f32> = p64.weights().iter().map(|&w| w as f32).collect();
    let p32 = PolicyParams::from_weights(w32, 32, 16, 4).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &p32, 3).unwrap();
    let (back, _) = read_checkpoint::<f32, _>(&buf[..]).unwrap();
    assert_eq!(back.weights(), p32.weights());
    buf.truncate(buf.len() - 1);
    assert!(read_checkpoint::<f32, _>(&buf[..]).is_err());
}

fn correct_base(
    params: &PolicyParams,
    mdp: &Mdp,
    task: &TaskInstance,
    rng: &mut ChaCha8Rng,
) -> Option<(Trajectory, RolloutGroup)> {
    for _ in 0..50 {
        let mut rollouts: Vec<Trajectory> =
            (0..8).map(|_| params.generate(mdp, task, rng).unwrap()).collect();
        let rewards = score_group(mdp, task, &rollouts).unwrap();
        for (r, &x) in rollouts.iter_mut().zip(&rewards) {
            r.reward = Some(x);
        }
        if let Some(base) = rollouts.iter().find(|r| r.reward == Some(1)).cloned() {
            return Some((base, RolloutGroup::new(0, rollouts, rewards).unwrap()));
        }
    }
    None
}

#[test]
fn exploration_record_values_and_alphas_are_consistent() {
    let mdp = Mdp::chain_sum(16).unwrap();
    let suite = generate_task_suite("chain-sum-easy", 20, 2).unwrap();
    let params = PolicyParams::<f64>::zeros(128, 16, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    for task in &suite {
        let Some((base, initial)) = correct_base(&params, &mdp, task, &mut rng) else {
            continue;
        };
        let record = explore_prompt(task, &params, &mdp, &base, initial, ExploreConfig::default(), &mut rng)
            .unwrap();
        assert_eq!(record.groups.len(), record.k() + 1);
        assert_eq!(record.alphas[0], 1.0);
        for j in 1..record.values.len() {
            let expected = (record.values[j - 1] - record.values[j]).exp();
            assert!((record.alphas[j] - expected).abs() < 1e-12);
            let g = &record.groups[j];
            let mean = g.rewards.iter().map(|&r| r as f64).sum::<f64>() / g.m() as f64;
            assert_eq!(g.value, mean);
        }
        let json = serde_json::to_string(&record).unwrap();
        let back: fr3e_core::explore::ExplorationRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, record);
        checked += 1;
    }
    assert!(checked >= 10);
}
