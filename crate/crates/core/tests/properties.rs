//! Property tests for the dropout filters, the risk identities and the
//! model-bias computation.

use std::collections::BTreeMap;

use proptest::prelude::*;

use mbdp::buffer::Transition;
use mbdp::config::DropoutConfig;
use mbdp::ensemble::{compute_bias, retained_members, DynamicsModel, EnsembleState, Normalizer};
use mbdp::envs::{DiscreteMdp, TabularPolicy};
use mbdp::risk::{cvar_p_split, eps_alpha, exact_v_alpha, v_alpha_of, PerturbationSet};
use mbdp::rollout::{dropout_return_estimate, rollout_dropout, DropoutMode, DropoutOptions, RolloutBatch, RolloutSample};
use mbdp::verify::random_case;

fn sample(group: usize, rollout: usize, timestep: usize, reward: f64) -> RolloutSample {
    RolloutSample {
        transition: Transition::new(vec![0.0], vec![0.0], reward, vec![0.0], false),
        group,
        rollout,
        timestep,
    }
}

/// Rewards on a coarse grid so ties are common.
fn batch_strategy() -> impl Strategy<Value = RolloutBatch> {
    (1usize..5, 1usize..8, 1usize..4).prop_flat_map(|(groups, rollouts, horizon)| {
        proptest::collection::vec(-8i32..8, groups * rollouts * horizon).prop_map(move |raw| {
            let mut samples = Vec::new();
            let mut k = 0;
            for g in 0..groups {
                for r in 0..rollouts {
                    for t in 0..horizon {
                        samples.push(sample(g, r, t, raw[k] as f64 * 0.25));
                        k += 1;
                    }
                }
            }
            RolloutBatch::from_samples(samples, horizon)
        })
    })
}

fn expected_keep(n: usize, alpha: f64) -> usize {
    ((1.0 - alpha) * n as f64 - 1e-9).ceil().max(1.0) as usize
}

fn by_group(batch: &RolloutBatch) -> BTreeMap<usize, Vec<f64>> {
    let mut m: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for s in batch.samples() {
        m.entry(s.group).or_default().push(s.transition.reward);
    }
    m
}

/// A member whose mean prediction is `s + v` for every input.
fn offset_model(id: usize, v: &[f64]) -> DynamicsModel {
    let mut m = DynamicsModel::new(id, v.len(), 1, &[2], id as u64).unwrap();
    m.net_mut().params_mut().iter_mut().for_each(|p| *p = 0.0);
    m.set_normalizers(
        Normalizer::identity(v.len() + 1),
        Normalizer {
            mean: v.to_vec(),
            std: vec![1.0; v.len()],
        },
    );
    m
}

fn still_transitions(n: usize) -> Vec<Transition> {
    (0..n)
        .map(|i| {
            let s = vec![i as f64 * 0.1 - 1.0];
            Transition::new(s.clone(), vec![0.0], 0.0, s, false)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn per_sample_dropout_counts_and_pessimism(batch in batch_strategy(), alpha in 0.0f64..0.95) {
        let opts = DropoutOptions { mode: DropoutMode::PerSample, min_group_size: 5, gamma: 0.9 };
        let kept = rollout_dropout(&batch, alpha, &opts).unwrap();
        let before = by_group(&batch);
        let after = by_group(&kept);
        for (g, all) in &before {
            let k = after.get(g).cloned().unwrap_or_default();
            if all.len() < opts.min_group_size || alpha == 0.0 {
                prop_assert_eq!(k.len(), all.len());
                prop_assert_eq!(kept.thresholds()[g], None);
                continue;
            }
            prop_assert_eq!(k.len(), expected_keep(all.len(), alpha));
            // Multiset difference: what was dropped.
            let mut dropped = all.clone();
            for v in &k {
                let i = dropped.iter().position(|d| d == v).unwrap();
                dropped.remove(i);
            }
            let max_kept = k.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min_dropped = dropped.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert!(max_kept <= min_dropped);
            prop_assert_eq!(kept.thresholds()[g], Some(max_kept));
        }
    }

    #[test]
    fn alpha_zero_is_identity(batch in batch_strategy()) {
        for mode in [DropoutMode::PerSample, DropoutMode::PerTrajectory] {
            let opts = DropoutOptions { mode, min_group_size: 1, gamma: 0.9 };
            let kept = rollout_dropout(&batch, 0.0, &opts).unwrap();
            prop_assert_eq!(kept.samples(), batch.samples());
        }
    }

    #[test]
    fn per_trajectory_keeps_whole_rollouts(batch in batch_strategy(), alpha in 0.0f64..0.95) {
        let opts = DropoutOptions { mode: DropoutMode::PerTrajectory, min_group_size: 2, gamma: 0.9 };
        let kept = rollout_dropout(&batch, alpha, &opts).unwrap();
        let count = |b: &RolloutBatch| {
            let mut m: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            for s in b.samples() {
                *m.entry((s.group, s.rollout)).or_default() += 1;
            }
            m
        };
        let full = count(&batch);
        for (key, n) in count(&kept) {
            prop_assert_eq!(n, full[&key]);
        }
    }

    #[test]
    fn model_dropout_cardinality_order_nesting(
        biases in proptest::collection::vec(0.0f64..3.0, 1..10),
        b1 in 0.0f64..0.99,
        b2 in 0.0f64..0.99,
    ) {
        let refs_owned = still_transitions(4);
        let refs: Vec<&Transition> = refs_owned.iter().collect();
        let members: Vec<DynamicsModel> = biases.iter().enumerate().map(|(i, &b)| offset_model(i, &[b])).collect();
        let mut ens = EnsembleState::from_members(members);
        let got = ens.compute_biases(&refs).unwrap();
        for (g, b) in got.iter().zip(&biases) {
            prop_assert!((g - b).abs() < 1e-12);
        }
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        let wide = ens.model_dropout(lo).unwrap().to_vec();
        let narrow = ens.model_dropout(hi).unwrap().to_vec();
        prop_assert_eq!(wide.len(), retained_members(biases.len(), lo));
        prop_assert_eq!(narrow.len(), retained_members(biases.len(), hi));
        prop_assert!(!narrow.is_empty());
        // Nested: the narrower subset is a prefix of the wider one.
        prop_assert_eq!(&wide[..narrow.len()], &narrow[..]);
        // Every kept bias is ≤ every dropped bias.
        for &k in &wide {
            for d in (0..biases.len()).filter(|d| !wide.contains(d)) {
                prop_assert!(got[k] <= got[d]);
            }
        }
        // Dropped members are still present.
        prop_assert_eq!(ens.len(), biases.len());
    }

    #[test]
    fn dropout_value_identities(seed in 0u64..1000, trial in 0usize..8, alpha in 0.001f64..0.95) {
        let case = random_case(seed, trial).unwrap();
        let va = v_alpha_of(&case.returns, alpha).unwrap();
        let c = -cvar_p_split(&case.returns.negate(), alpha).unwrap();
        let adv = PerturbationSet::for_dropout(alpha).unwrap().worst_case(&case.returns);
        prop_assert!((va - c).abs() < 1e-9, "{} vs {}", va, c);
        prop_assert!((va - adv).abs() < 1e-9, "{} vs {}", va, adv);
        let v = case.mdp.value(&case.policy);
        prop_assert!(va <= v + 1e-9);
        let r_m = case.mdp.reward_sup().max(1e-12);
        let cfg = DropoutConfig::new(alpha, 0.0, case.mdp.gamma(), r_m).unwrap();
        prop_assert!((va - v).abs() <= eps_alpha(&cfg) + 1e-9);
    }

    #[test]
    fn worst_case_density_is_feasible(seed in 0u64..1000, alpha in 0.0f64..0.95) {
        let case = random_case(seed, 0).unwrap();
        let set = PerturbationSet::for_dropout(alpha).unwrap();
        let delta = set.worst_case_density(&case.returns);
        prop_assert!(set.contains(&case.returns, &delta));
    }

    #[test]
    fn compute_bias_matches_direct_formula(offset in proptest::collection::vec(-2.0f64..2.0, 1..4), n in 1usize..20) {
        let d = offset.len();
        let mut m = offset_model(0, &offset);
        let data: Vec<Transition> = (0..n)
            .map(|i| {
                let s: Vec<f64> = (0..d).map(|j| (i * 7 + j) as f64 * 0.03).collect();
                let ns: Vec<f64> = s.iter().enumerate().map(|(j, x)| x + 0.1 * j as f64 - 0.05 * i as f64).collect();
                Transition::new(s, vec![0.5], 0.0, ns, false)
            })
            .collect();
        let refs: Vec<&Transition> = data.iter().collect();
        let got = compute_bias(&mut m, &refs).unwrap();
        // Independent path: through the raw delta prediction.
        let mut total = 0.0;
        for t in &data {
            let mu = m.predict_delta(&t.state, &t.action).unwrap().mean;
            let err: f64 = (0..d).map(|j| (t.state[j] + mu[j] - t.next_state[j]).powi(2)).sum();
            total += err.sqrt();
        }
        prop_assert!((got - total / n as f64).abs() < 1e-12);
        prop_assert_eq!(m.bias(), Some(got));
    }
}

/// Every state-action path of an MDP with uniform initial and transition
/// laws and a deterministic policy, as per-step rewards.
fn equiprobable_paths(mdp: &DiscreteMdp, action: &[usize]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    fn rec(mdp: &DiscreteMdp, action: &[usize], s: usize, t: usize, acc: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
        acc.push(mdp.reward(s, action[s]));
        if t == mdp.horizon() {
            out.push(acc.clone());
        } else {
            for next in 0..mdp.n_states() {
                rec(mdp, action, next, t + 1, acc, out);
            }
        }
        acc.pop();
    }
    for s in 0..mdp.n_states() {
        rec(mdp, action, s, 0, &mut Vec::new(), &mut out);
    }
    out
}

#[test]
fn dropout_return_estimate_matches_exact_value_on_equiprobable_mdp() {
    let mut rng = mbdp::seed::rng(42);
    for trial in 0..20 {
        let (n_s, n_a, horizon) = (2 + trial % 2, 2, 1 + trial % 3);
        let gamma = 0.9;
        let transition = vec![1.0 / n_s as f64; n_s * n_a * n_s];
        let reward: Vec<f64> = (0..n_s * n_a).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let mdp = DiscreteMdp::new(n_s, n_a, transition, reward, vec![1.0 / n_s as f64; n_s], horizon, gamma).unwrap();
        let action: Vec<usize> = (0..n_s).map(|s| (s + trial) % n_a).collect();
        let mut probs = vec![0.0; n_s * n_a];
        for (s, &a) in action.iter().enumerate() {
            probs[s * n_a + a] = 1.0;
        }
        let policy = TabularPolicy::new(n_s, n_a, probs).unwrap();
        let paths = equiprobable_paths(&mdp, &action);
        let n = paths.len();
        let samples: Vec<RolloutSample> = paths
            .iter()
            .enumerate()
            .flat_map(|(r, rewards)| rewards.iter().enumerate().map(move |(t, &x)| sample(0, r, t, x)))
            .collect();
        let batch = RolloutBatch::from_samples(samples, horizon + 1);
        // α with an integral retained count.
        for dropped in 0..n {
            let alpha = dropped as f64 / n as f64;
            let opts = DropoutOptions {
                mode: DropoutMode::PerTrajectory,
                min_group_size: 1,
                gamma,
            };
            let kept = rollout_dropout(&batch, alpha, &opts).unwrap();
            let est = dropout_return_estimate(&kept, gamma).unwrap();
            let exact = exact_v_alpha(&mdp, &policy, alpha).unwrap();
            assert!((est - exact).abs() < 1e-12, "trial {trial}, alpha {alpha}: {est} vs {exact}");
        }
    }
}
