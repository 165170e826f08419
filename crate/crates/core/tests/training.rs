//! Actor-critic behavior: gradient correctness against finite
//! differences, EMA and buffer mechanics, determinism, and convergence
//! on small MDPs.

use dae_core::actor_critic::{
    actor_loss, critic_loss, ema_update, train, AgentState, CriticMethod, ReplayBuffer, TrainConfig,
};
use dae_core::builders;
use dae_core::dp;
use dae_core::trajectory::{sample_dataset, Step, Trajectory};
use dae_core::transition_model::{ModelKind, TransitionModel};
use dae_core::{FiniteMdp, PolicyTable};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn randomize_agent(agent: &mut AgentState, rng: &mut ChaCha8Rng) {
    let (ns, na) = (agent.num_states(), agent.num_actions());
    for s in 0..ns {
        agent.values[s] = rng.random_range(-1.0..1.0);
        agent.values_ema[s] = rng.random_range(-1.0..1.0);
        for a in 0..na {
            agent.advantage[(s, a)] = rng.random_range(-1.0..1.0);
            agent.advantage_ema[(s, a)] = rng.random_range(-1.0..1.0);
            agent.logits[(s, a)] = rng.random_range(-1.0..1.0);
            agent.logits_ema[(s, a)] = rng.random_range(-1.0..1.0);
        }
    }
    for x in agent.luck.iter_mut() {
        *x = rng.random_range(-1.0..1.0);
    }
    for x in agent.luck_ema.iter_mut() {
        *x = rng.random_range(-1.0..1.0);
    }
}

fn random_batch(mdp: &FiniteMdp, seed: u64, segments: usize, segment_len: usize) -> Vec<Trajectory> {
    let policy = builders::uniform_policy(mdp);
    let mut out = Vec::new();
    let data = sample_dataset(mdp, &policy, seed, segments, segment_len).unwrap();
    out.extend(data.trajectories);
    out
}

/// Central finite differences of the critic loss against its analytic
/// gradient, for every method and every table entry.
#[test]
fn critic_gradients_match_finite_differences() {
    let mdp = builders::random_mdp(4, 4, 2);
    let model = TransitionModel::oracle(&mdp);
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (case, method) in (0..40).flat_map(|c| CriticMethod::ALL.map(|m| (c, m))) {
        let mut config = TrainConfig::new(method);
        config.gamma = 0.9;
        config.backup_length = 3;
        let mut agent = AgentState::new(mdp.num_states(), mdp.num_actions(), 64);
        randomize_agent(&mut agent, &mut rng);
        let batch = random_batch(&mdp, 1000 + case, 3, 4);
        let model_arg = (method == CriticMethod::OffpolicyDae).then_some(&model);

        let (_, grads) = critic_loss(&batch, &agent, &config, model_arg).unwrap();
        let loss_of = |agent: &AgentState| critic_loss(batch.as_slice(), agent, &config, model_arg).unwrap().0;

        for s in 0..mdp.num_states() {
            let mut plus = agent.clone();
            plus.values[s] += h;
            let mut minus = agent.clone();
            minus.values[s] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            assert!(
                rel_err(grads.values[s], fd) < 1e-6,
                "{method} case {case} dV[{s}]: {} vs {fd}",
                grads.values[s]
            );
            for a in 0..mdp.num_actions() {
                let mut plus = agent.clone();
                plus.advantage[(s, a)] += h;
                let mut minus = agent.clone();
                minus.advantage[(s, a)] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                assert!(
                    rel_err(grads.advantage[(s, a)], fd) < 1e-6,
                    "{method} case {case} dA[({s},{a})]: {} vs {fd}",
                    grads.advantage[(s, a)]
                );
            }
        }
        if method == CriticMethod::OffpolicyDae {
            for i in 0..agent.luck.len() {
                let mut plus = agent.clone();
                plus.luck[i] += h;
                let mut minus = agent.clone();
                minus.luck[i] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                assert!(
                    rel_err(grads.luck[i], fd) < 1e-6,
                    "{method} case {case} dB[{i}]: {} vs {fd}",
                    grads.luck[i]
                );
            }
        }
    }
}

#[test]
fn actor_gradients_match_finite_differences() {
    let mdp = builders::random_mdp(6, 4, 3);
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..40 {
        let mut config = TrainConfig::new(CriticMethod::Dae);
        config.beta_kl = rng.random_range(0.0..4.0);
        let mut agent = AgentState::new(mdp.num_states(), mdp.num_actions(), 64);
        randomize_agent(&mut agent, &mut rng);
        let pairs: Vec<(usize, usize)> = (0..12)
            .map(|_| (rng.random_range(0..mdp.num_states()), rng.random_range(0..mdp.num_actions())))
            .collect();

        let (_, grad) = actor_loss(&pairs, &agent, &config).unwrap();
        for s in 0..mdp.num_states() {
            for a in 0..mdp.num_actions() {
                let mut plus = agent.clone();
                plus.logits[(s, a)] += h;
                let mut minus = agent.clone();
                minus.logits[(s, a)] -= h;
                let fd = (actor_loss(&pairs, &plus, &config).unwrap().0
                    - actor_loss(&pairs, &minus, &config).unwrap().0)
                    / (2.0 * h);
                assert!(
                    rel_err(grad[(s, a)], fd) < 1e-6,
                    "case {case} dz[({s},{a})]: {} vs {fd}",
                    grad[(s, a)]
                );
            }
        }
    }
}

#[test]
fn actor_loss_vanishes_at_ema_with_zero_advantage() {
    let mdp = builders::random_mdp(2, 3, 2);
    let config = TrainConfig::new(CriticMethod::Dae);
    let mut agent = AgentState::new(mdp.num_states(), mdp.num_actions(), 16);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for s in 0..agent.num_states() {
        for a in 0..agent.num_actions() {
            let z = rng.random_range(-1.0..1.0);
            agent.logits[(s, a)] = z;
            agent.logits_ema[(s, a)] = z;
        }
    }
    let pairs = vec![(0, 0), (1, 1), (2, 0)];
    let (loss, grad) = actor_loss(&pairs, &agent, &config).unwrap();
    assert!(loss.abs() < 1e-12, "loss {loss}");
    assert!(grad.iter().all(|g| g.abs() < 1e-12));
}

#[test]
fn kl_penalty_pulls_toward_ema_policy() {
    // With a dominant KL weight the gradient step must move the policy
    // toward the EMA policy at every batch state.
    let config = {
        let mut c = TrainConfig::new(CriticMethod::Dae);
        c.beta_kl = 1e6;
        c
    };
    let mut agent = AgentState::new(2, 3, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    randomize_agent(&mut agent, &mut rng);
    let pairs = vec![(0, 0), (1, 2)];
    let (_, grad) = actor_loss(&pairs, &agent, &config).unwrap();
    for &(s, _) in &pairs {
        let pi = agent.policy();
        let pi_ema = agent.target_policy();
        // Moving along -grad must decrease KL(pi || pi_ema): check the
        // alignment of -grad with the KL gradient.
        let mut dot = 0.0;
        for a in 0..3 {
            let kl_grad_a = {
                let kl: f64 = (0..3)
                    .map(|a2| pi.prob(s, a2) * (pi.prob(s, a2).ln() - pi_ema.prob(s, a2).ln()))
                    .sum();
                pi.prob(s, a) * ((pi.prob(s, a).ln() - pi_ema.prob(s, a).ln()) - kl)
            };
            dot += -grad[(s, a)] * kl_grad_a;
        }
        assert!(dot < 0.0, "state {s}: -grad does not descend the KL");
    }
}

#[test]
fn ema_update_examples() {
    let mut agent = AgentState::new(2, 2, 16);
    agent.values = vec![1.0, -2.0];
    agent.values_ema = vec![0.5, 0.5];

    let frozen = agent.clone();
    ema_update(&mut agent, 1.0);
    assert_eq!(agent.values_ema, frozen.values_ema);

    ema_update(&mut agent, 0.0);
    assert_eq!(agent.values_ema, agent.values);

    // Constant parameters: the gap decays geometrically.
    let mut agent = AgentState::new(1, 1, 16);
    agent.values = vec![1.0];
    agent.values_ema = vec![0.0];
    let tau: f64 = 0.999;
    let k = 250;
    for _ in 0..k {
        ema_update(&mut agent, tau);
    }
    let expected_gap = tau.powi(k);
    assert!(
        ((1.0 - agent.values_ema[0]) - expected_gap).abs() < 1e-12,
        "gap {} vs {expected_gap}",
        1.0 - agent.values_ema[0]
    );
}

#[test]
fn replay_buffer_is_fifo_with_step_capacity() {
    let mut buffer = ReplayBuffer::new(10);
    let seg = |id: usize, len: usize| Trajectory {
        steps: (0..len).map(|_| Step { state: id, action: 0, reward: 0.0 }).collect(),
        final_state: id,
        truncated: true,
    };
    for id in 0..6 {
        buffer.push(seg(id, 3));
        assert!(buffer.steps() <= 10, "{} steps", buffer.steps());
    }
    // 6 pushes of 3 steps with capacity 10 keep only the last 3 segments.
    assert_eq!(buffer.num_segments(), 3);
    assert_eq!(buffer.oldest().unwrap().final_state, 3);
}

#[test]
fn centered_advantage_invariant_after_updates() {
    let mdp = builders::gridworld(3, 3, 0.2);
    let mut config = TrainConfig::new(CriticMethod::Dae);
    config.total_steps = 3_000;
    config.initial_steps = 200;
    config.eval_every = 3_000;
    config.eval_episodes = 10;
    let (agent, _) = train(&mdp, &config).unwrap();
    let target = agent.target_policy();
    let centered = agent.centered_advantage();
    for s in 0..agent.num_states() {
        let mean: f64 = (0..agent.num_actions()).map(|a| target.prob(s, a) * centered[(s, a)]).sum();
        assert!(mean.abs() < 1e-9, "state {s}: centering residual {mean}");
    }
}

#[test]
fn training_is_deterministic() {
    let mdp = builders::gridworld(3, 3, 0.1);
    let mut config = TrainConfig::new(CriticMethod::OffpolicyDae);
    config.total_steps = 4_000;
    config.initial_steps = 500;
    config.eval_every = 1_000;
    config.eval_episodes = 20;
    let (agent_a, curve_a) = train(&mdp, &config).unwrap();
    let (agent_b, curve_b) = train(&mdp, &config).unwrap();
    assert_eq!(curve_a, curve_b);
    assert_eq!(agent_a.values, agent_b.values);
    assert_eq!(agent_a.logits, agent_b.logits);
}

#[test]
fn divergence_guard_aborts() {
    let mdp = builders::gridworld(3, 3, 0.1);
    let mut config = TrainConfig::new(CriticMethod::Uncorrected);
    config.learning_rate = 1e6;
    config.total_steps = 4_000;
    config.initial_steps = 100;
    let err = train(&mdp, &config).unwrap_err();
    assert!(matches!(err, dae_core::Error::Divergence(_)), "{err}");
}

#[test]
fn checkpoint_round_trip() {
    let mut agent = AgentState::new(3, 2, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    randomize_agent(&mut agent, &mut rng);
    agent.env_steps = 77;
    let text = agent.to_text();
    let back = AgentState::from_text(&text, 32).unwrap();
    assert_eq!(agent.logits, back.logits);
    assert_eq!(agent.values, back.values);
    assert_eq!(agent.advantage, back.advantage);
    assert_eq!(agent.luck, back.luck);
    assert_eq!(agent.values_ema, back.values_ema);
    assert_eq!(agent.env_steps, back.env_steps);
}

#[test]
fn config_file_parsing_and_overrides() {
    let mut config = TrainConfig::new(CriticMethod::Uncorrected);
    config
        .apply_config_text(
            "method = offpolicy-dae\n\
             n = 4            # short backups\n\
             gamma = 0.95\n\
             model = oracle\n\
             total_steps = 1234\n",
        )
        .unwrap();
    assert_eq!(config.method, CriticMethod::OffpolicyDae);
    assert_eq!(config.backup_length, 4);
    assert_eq!(config.model_kind, ModelKind::Oracle);
    assert_eq!(config.total_steps, 1234);
    // Later settings win, as command-line flags do.
    config.set("method", "tree").unwrap();
    assert_eq!(config.method, CriticMethod::Tree);

    assert!(config.set("method", "bogus").is_err());
    assert!(config.apply_config_text("no_equals_sign").is_err());
    let mut bad = TrainConfig::new(CriticMethod::Dae);
    bad.total_steps = 0;
    assert!(bad.validate().is_err());
}

/// The critic alone (fixed uniform behavior and target) must recover the
/// dynamic-programming tables of the target policy.
#[test]
fn critic_converges_to_exact_tables() {
    let mdp = builders::fig4();
    let behavior = builders::uniform_policy(&mdp);
    let mut config = TrainConfig::new(CriticMethod::OffpolicyDae);
    config.gamma = 1.0;
    config.backup_length = 8;
    let model = TransitionModel::oracle(&mdp);
    let mut agent = AgentState::new(mdp.num_states(), mdp.num_actions(), 1 << 20);

    let iterations = 4_000;
    for k in 0..iterations {
        let batch = random_batch(&mdp, 50_000 + k, 64, 16);
        let (_, grads) = critic_loss(&batch, &agent, &config, Some(&model)).unwrap();
        let lr = 0.5 * (1.0 - k as f64 / iterations as f64) + 0.01;
        for s in 0..agent.num_states() {
            agent.values[s] -= lr * grads.values[s];
            for a in 0..agent.num_actions() {
                agent.advantage[(s, a)] -= lr * grads.advantage[(s, a)];
            }
        }
        for (x, g) in agent.luck.iter_mut().zip(&grads.luck) {
            *x -= lr * g;
        }
        ema_update(&mut agent, 0.99);
    }

    // The EMA target policy of zero logits is uniform: compare to the
    // uniform-policy oracles. The agent samples with uniform actions, so
    // behavior and target coincide here.
    let v = dp::policy_evaluation_exact(&mdp, &behavior).unwrap();
    let a = dp::advantage_exact(&mdp, &behavior).unwrap();
    let b = dp::nature_advantage_exact(&mdp, &behavior).unwrap();
    let centered = agent.centered_advantage();
    for s in 0..mdp.num_states() {
        if mdp.is_terminal(s) {
            continue;
        }
        assert!((agent.values[s] - v[s]).abs() < 0.02, "V({s}) = {} vs {}", agent.values[s], v[s]);
        for act in 0..mdp.num_actions() {
            assert!(
                (centered[(s, act)] - a[(s, act)]).abs() < 0.02,
                "A({s},{act}) = {} vs {}",
                centered[(s, act)],
                a[(s, act)]
            );
        }
    }
    for ((s, act, s2), exact) in b.iter() {
        let got = agent.centered_luck(&model, *s, *act, *s2);
        assert!((got - exact).abs() < 0.02, "B({s},{act},{s2}) = {got} vs {exact}");
    }
}

/// Every backup method must drive the 5-state chain to the optimal
/// policy found by policy iteration.
#[test]
fn chain_reaches_optimal_policy_with_every_method() {
    let mdp = builders::chain(5);
    let (optimal, _) = dp::policy_iteration(&mdp).unwrap();
    let optimal_actions = optimal.greedy_actions();
    for method in CriticMethod::ALL {
        let mut config = TrainConfig::new(method);
        config.total_steps = 50_000;
        config.backup_length = 4;
        config.max_episode_len = 100;
        config.eval_every = 50_000;
        config.eval_episodes = 10;
        config.seed = 7;
        let (agent, _) = train(&mdp, &config).unwrap();
        let greedy = agent.greedy_actions();
        for s in 0..mdp.num_states() - 1 {
            assert_eq!(
                greedy[s], optimal_actions[s],
                "method {method}: state {s} learned {} (optimal {})",
                greedy[s], optimal_actions[s]
            );
        }
    }
}

/// Fixed behavior, uniform target: the averaged tree target reproduces
/// the one-step expectation structure (sanity on wiring, not statistics).
#[test]
fn tree_critic_smoke() {
    let mdp = builders::fig4();
    let config = {
        let mut c = TrainConfig::new(CriticMethod::Tree);
        c.gamma = 1.0;
        c.backup_length = 8;
        c
    };
    let agent = AgentState::new(mdp.num_states(), mdp.num_actions(), 1024);
    let batch = random_batch(&mdp, 1, 32, 16);
    let (loss, grads) = critic_loss(&batch, &agent, &config, None).unwrap();
    assert!(loss > 0.0);
    assert!(grads.values.iter().any(|g| *g != 0.0));
}
