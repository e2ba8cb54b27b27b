use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::env::{build_device_env, ConstraintMode, DeviceEnv, DeviceSpec, RewardSpec};
use crate::graph::{generate_synthetic, Edge, Family, Graph, GraphKind, Node, SynthParams};

fn device_env(g: Graph, devices: usize, cap: f64) -> DeviceEnv {
    build_device_env(g, DeviceSpec { devices, mem_capacity: cap, bandwidth: 2.0 }, RewardSpec::default()).unwrap()
}

fn small_graph(seed: u64, n: usize) -> Graph {
    let params = SynthParams { op_types: 2, edge_prob: 0.5, ..SynthParams::default() };
    generate_synthetic(seed, n, Family::RandomDag, &params).unwrap()
}

fn hyper(g: &Graph, locations: usize, hidden: usize, rounds: usize) -> Hyper {
    Hyper { features: feature_width(g), hidden, rounds, locations, encoder: EncoderKind::MessagePassing }
}

/// Params whose head produces exactly `biases` as logits for every node.
fn bias_only(biases: &[f64]) -> PolicyParams {
    let hyper = Hyper { features: 5, hidden: 2, rounds: 1, locations: biases.len(), encoder: EncoderKind::Flat };
    let mut p = init_params(0, hyper).unwrap();
    let l = p.layout();
    for (j, &b) in biases.iter().enumerate() {
        l.head_a(j).for_each(|k| p.weights[k] = 0.0);
        p.weights[l.head_d(j)] = 0.0;
        p.weights[l.head_b(j)] = b;
    }
    p
}

fn state(m: usize) -> StepState {
    StepState { partial: crate::env::Placement::unassigned(1), load: vec![0.0; m], usage: vec![0.0; m], cursor: 0 }
}

#[test]
fn distribution_examples() {
    let h = [0.3, -0.2];
    let p = action_distribution(&bias_only(&[0.0, 0.0]), &h, &state(2), &[true, true]).unwrap();
    assert_eq!(p, vec![0.5, 0.5]);

    let p = action_distribution(&bias_only(&[5.0, -2.0, 0.0]), &h, &state(3), &[true, false, true]).unwrap();
    let e5 = 5f64.exp();
    assert!((p[0] - e5 / (e5 + 1.0)).abs() < 1e-15);
    assert_eq!(p[1], 0.0);
    assert!((p[2] - 1.0 / (e5 + 1.0)).abs() < 1e-15);

    let err = action_distribution(&bias_only(&[0.0, 0.0]), &h, &state(2), &[false, false]).unwrap_err();
    assert!(matches!(err, Error::DeadEnd));
}

#[test]
fn symmetric_head_gives_uniform_distribution_at_init() {
    let g = small_graph(3, 4);
    let env = device_env(g.clone(), 3, 100.0);
    let mut params = init_params(11, hyper(&g, 3, 4, 2)).unwrap();
    let l = params.layout();
    let (a0, d0) = (params.weights[l.head_a(0)].to_vec(), params.weights[l.head_d(0)]);
    for j in 1..3 {
        params.weights[l.head_a(j)].copy_from_slice(&a0);
        params.weights[l.head_d(j)] = d0;
    }
    let enc = encode(&g, &params).unwrap();
    let s = env.initial_state();
    for i in 0..4 {
        let p = action_distribution(&params, enc.embedding(i), &s, &[true, true, true]).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let p = action_distribution(&params, enc.embedding(i), &s, &[true, false, true]).unwrap();
        assert_eq!(p[1], 0.0);
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[2] - 0.5).abs() < 1e-15);
    }
}

#[test]
fn greedy_ties_go_to_lowest_index() {
    let d = StepDist::new(vec![1.0, 3.0, 3.0, 3.0], &[true, false, true, true]).unwrap();
    assert_eq!(d.greedy(&[true, false, true, true]), 2);
    let d = StepDist::new(vec![0.0; 3], &[true; 3]).unwrap();
    assert_eq!(d.greedy(&[true; 3]), 0);
}

#[test]
fn single_location_rollout() {
    let g = small_graph(1, 5);
    let env = device_env(g.clone(), 1, 1e9);
    let params = init_params(2, hyper(&g, 1, 3, 2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = sample_rollout(&env, &params, &mut rng, DecodeMode::Sample).unwrap();
    assert_eq!(t.actions, vec![0; 5]);
    assert!(t.logps.iter().all(|&lp| lp == 0.0));
    let grad = trajectory_grad(&env, &params, &t).unwrap();
    assert!(grad.iter().all(|&g| g == 0.0));
}

#[test]
fn rollouts_are_reproducible() {
    let g = small_graph(4, 6);
    let env = device_env(g.clone(), 3, 1e9);
    let params = init_params(5, hyper(&g, 3, 4, 2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g1 = sample_rollout(&env, &params, &mut rng, DecodeMode::Greedy).unwrap();
    let g2 = sample_rollout(&env, &params, &mut rng, DecodeMode::Greedy).unwrap();
    assert_eq!(g1, g2);

    let s1 = sample_rollout(&env, &params, &mut ChaCha8Rng::seed_from_u64(9), DecodeMode::Sample).unwrap();
    let s2 = sample_rollout(&env, &params, &mut ChaCha8Rng::seed_from_u64(9), DecodeMode::Sample).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(s1.step_rewards.len(), 6);
    assert_eq!(s1.episode_return, s1.step_rewards.iter().sum::<f64>());
}

#[test]
fn dead_end_aborts_with_penalty() {
    // memories 3, 3, 2 on two devices of capacity 4: the third node never fits
    let nodes = [3.0, 3.0, 2.0]
        .iter()
        .enumerate()
        .map(|(id, &memory)| Node { id, op_type: 0, compute: 1.0, memory })
        .collect();
    let g = Graph::new(GraphKind::Device, 1, nodes, vec![]).unwrap();
    let env = device_env(g.clone(), 2, 4.0);
    let params = init_params(0, Hyper { features: 5, hidden: 2, rounds: 1, locations: 2, encoder: EncoderKind::Flat })
        .unwrap();
    let t = sample_rollout(&env, &params, &mut ChaCha8Rng::seed_from_u64(1), DecodeMode::Sample).unwrap();
    assert!(t.aborted);
    assert_eq!(t.actions.len(), 2);
    assert_ne!(t.actions[0], t.actions[1]);
    assert_eq!(t.step_rewards, vec![0.0, 0.0, -20.0]);
    assert_eq!(t.episode_return, -20.0);
    // the gradient of an aborted trajectory covers only the decided steps
    assert!(trajectory_grad(&env, &params, &t).is_ok());
}

#[test]
fn dimension_mismatch_is_reported() {
    let g = small_graph(1, 3);
    let env = device_env(g.clone(), 2, 1e9);
    let params = init_params(0, hyper(&g, 3, 2, 1)).unwrap();
    let err = sample_rollout(&env, &params, &mut ChaCha8Rng::seed_from_u64(0), DecodeMode::Greedy).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));
}

fn central_difference(params: &PolicyParams, f: impl Fn(&PolicyParams) -> f64, eps: f64) -> Vec<f64> {
    let mut probe = params.clone();
    (0..params.weights.len())
        .map(|k| {
            let w = params.weights[k];
            probe.weights[k] = w + eps;
            let up = f(&probe);
            probe.weights[k] = w - eps;
            let down = f(&probe);
            probe.weights[k] = w;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let g = small_graph(100 + seed, 4);
        let env = device_env(g.clone(), 3, 1e9);
        let params = init_params(seed, hyper(&g, 3, 4, 2)).unwrap();
        let t = sample_rollout(&env, &params, &mut ChaCha8Rng::seed_from_u64(seed), DecodeMode::Sample).unwrap();
        let analytic = trajectory_grad(&env, &params, &t).unwrap();
        let numeric = central_difference(
            &params,
            |p| replay_logps(&env, p, &t.actions).unwrap().unwrap().iter().sum(),
            1e-5,
        );
        for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(1.0);
            assert!(rel < 1e-4, "seed {seed} coord {k}: analytic {a} numeric {n}");
        }
    }
}

#[test]
fn entropy_gradient_matches_finite_differences() {
    let g = small_graph(7, 4);
    let env = device_env(g.clone(), 3, 1e9);
    let params = init_params(3, hyper(&g, 3, 3, 1)).unwrap();
    let t = sample_rollout(&env, &params, &mut ChaCha8Rng::seed_from_u64(1), DecodeMode::Sample).unwrap();
    let enc = encode(&g, &params).unwrap();
    let mut acc = GradAccumulator::new(&params, &enc);
    acc.add(&env, &t, 0.0, 1.0).unwrap();
    let analytic = acc.finish();

    let mean_entropy = |p: &PolicyParams| {
        let enc = encode(&g, p).unwrap();
        let mut s = env.initial_state();
        let mut total = 0.0;
        for &a in &t.actions {
            let node = env.current_node(&s).unwrap();
            let mask = env.step_mask(&s);
            total += StepDist::new(logits(p, enc.embedding(node), &s.usage), &mask).unwrap().entropy();
            env.apply(&mut s, a);
        }
        total / t.actions.len() as f64
    };
    let numeric = central_difference(&params, mean_entropy, 1e-5);
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!((a - n).abs() / a.abs().max(1.0) < 1e-4);
    }
}

#[test]
fn gradient_is_linear_over_trajectories() {
    let g = small_graph(8, 5);
    let env = device_env(g.clone(), 2, 1e9);
    let params = init_params(8, hyper(&g, 2, 3, 2)).unwrap();
    let t1 = sample_rollout(&env, &params, &mut ChaCha8Rng::seed_from_u64(1), DecodeMode::Sample).unwrap();
    let t2 = sample_rollout(&env, &params, &mut ChaCha8Rng::seed_from_u64(2), DecodeMode::Sample).unwrap();
    let enc = encode(&g, &params).unwrap();
    let mut acc = GradAccumulator::new(&params, &enc);
    acc.add(&env, &t1, 1.0, 0.0).unwrap();
    acc.add(&env, &t2, 1.0, 0.0).unwrap();
    let joint = acc.finish();
    let g1 = trajectory_grad(&env, &params, &t1).unwrap();
    let g2 = trajectory_grad(&env, &params, &t2).unwrap();
    for k in 0..joint.len() {
        assert!((joint[k] - (g1[k] + g2[k])).abs() < 1e-12);
    }
}

#[test]
fn relabeling_nodes_permutes_embeddings() {
    let g = small_graph(12, 6);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let nodes = g
        .nodes()
        .iter()
        .map(|n| Node { id: perm[n.id], ..n.clone() })
        .collect();
    let edges = g
        .edges()
        .iter()
        .map(|e| Edge { src: perm[e.src], dst: perm[e.dst], bytes: e.bytes })
        .collect();
    let relabeled = Graph::new(GraphKind::Device, g.op_types(), nodes, edges).unwrap();
    let params = init_params(4, hyper(&g, 2, 4, 3)).unwrap();
    let a = encode(&g, &params).unwrap();
    let b = encode(&relabeled, &params).unwrap();
    for i in 0..6 {
        assert_eq!(a.embedding(i), b.embedding(perm[i]));
    }
}

#[test]
fn penalty_mode_never_masks() {
    let g = small_graph(2, 5);
    let reward = RewardSpec { constraint_mode: ConstraintMode::Penalty, ..RewardSpec::default() };
    let env = build_device_env(g.clone(), DeviceSpec { devices: 2, mem_capacity: 1.0, bandwidth: 1.0 }, reward).unwrap();
    let params = init_params(1, hyper(&g, 2, 3, 1)).unwrap();
    for seed in 0..20 {
        let t = sample_rollout(&env, &params, &mut ChaCha8Rng::seed_from_u64(seed), DecodeMode::Sample).unwrap();
        assert!(!t.aborted);
        assert_eq!(t.actions.len(), 5);
    }
}

proptest! {
    #[test]
    fn distribution_is_a_masked_simplex(
        logits in prop::collection::vec(-30.0f64..30.0, 1..8),
        mask_bits in prop::collection::vec(any::<bool>(), 8),
    ) {
        let m = logits.len();
        let mut mask = mask_bits[..m].to_vec();
        if !mask.iter().any(|&b| b) {
            mask[0] = true;
        }
        let p = action_distribution(&bias_only(&logits), &[0.0, 0.0], &state(m), &mask).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (j, &x) in p.iter().enumerate() {
            prop_assert!(x >= 0.0);
            if !mask[j] {
                prop_assert_eq!(x, 0.0);
            }
        }
    }
}
