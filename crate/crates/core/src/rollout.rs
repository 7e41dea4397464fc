//! Branched model rollouts from `D_env` start states and per-start-state
//! rollout dropout.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{BufferError, ReplayBuffer, Transition};
use crate::ensemble::{EnsembleError, EnsembleState, PredictMode};
use crate::nn::NnError;
use crate::policy::{Policy, RewardModel};
use crate::seed;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("percentile of an empty sequence")]
    Empty,
    #[error("alpha = {0} outside [0, 1)")]
    Alpha(f64),
    #[error("non-finite reward in rollout batch")]
    NonFinite,
    #[error("D_env holds {have} transitions, need {required} start states")]
    NotEnoughStarts { required: usize, have: usize },
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
}

/// What the percentile ranks within a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropoutMode {
    /// Individual sample rewards.
    #[default]
    PerSample,
    /// Discounted returns of whole rollouts; a rollout is kept or dropped as
    /// a unit.
    PerTrajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSample {
    pub transition: Transition,
    /// Index of the start state the rollout branched from.
    pub group: usize,
    /// Rollout index within the group.
    pub rollout: usize,
    pub timestep: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBatch {
    samples: Vec<RolloutSample>,
    horizon: usize,
    /// Per group: the percentile threshold, `None` when the group was kept
    /// whole.
    thresholds: BTreeMap<usize, Option<f64>>,
    generated: usize,
    truncated: usize,
}

/// Summary row of one rollout / dropout pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatchStats {
    pub groups: usize,
    pub generated: usize,
    pub retained: usize,
    pub mean_threshold: f64,
    pub retained_fraction: f64,
    pub truncated: usize,
}

impl RolloutBatch {
    pub fn from_samples(samples: Vec<RolloutSample>, horizon: usize) -> Self {
        let generated = samples.len();
        Self {
            samples,
            horizon,
            thresholds: BTreeMap::new(),
            generated,
            truncated: 0,
        }
    }

    pub fn samples(&self) -> &[RolloutSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn thresholds(&self) -> &BTreeMap<usize, Option<f64>> {
        &self.thresholds
    }

    /// Rollouts cut short by a non-finite prediction.
    pub fn truncated(&self) -> usize {
        self.truncated
    }

    pub fn groups(&self) -> BTreeMap<usize, Vec<&RolloutSample>> {
        let mut g: BTreeMap<usize, Vec<&RolloutSample>> = BTreeMap::new();
        for s in &self.samples {
            g.entry(s.group).or_default().push(s);
        }
        g
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> + '_ {
        self.samples.iter().map(|s| &s.transition)
    }

    pub fn stats(&self) -> BatchStats {
        let ts: Vec<f64> = self.thresholds.values().flatten().copied().collect();
        let mean_threshold = if ts.is_empty() {
            f64::NAN
        } else {
            ts.iter().sum::<f64>() / ts.len() as f64
        };
        let groups = if self.thresholds.is_empty() {
            self.groups().len()
        } else {
            self.thresholds.len()
        };
        BatchStats {
            groups,
            generated: self.generated,
            retained: self.samples.len(),
            mean_threshold,
            retained_fraction: if self.generated == 0 {
                f64::NAN
            } else {
                self.samples.len() as f64 / self.generated as f64
            },
            truncated: self.truncated,
        }
    }
}

/// Roll `policy` through the ensemble for `horizon` steps, `per_start`
/// times from each of `n_starts` states drawn from `d_env`. Members are
/// drawn uniformly from Φ_β at every step. Work is split by start state,
/// each with its own derived stream, so the batch does not depend on the
/// number of workers.
#[allow(clippy::too_many_arguments)]
pub fn generate_rollouts<P: Policy, R: RewardModel>(
    ens: &EnsembleState,
    policy: &P,
    reward: &R,
    d_env: &ReplayBuffer,
    n_starts: usize,
    per_start: usize,
    horizon: usize,
    mode: PredictMode,
    seed: u64,
) -> Result<RolloutBatch, RolloutError> {
    if d_env.len() < n_starts {
        return Err(RolloutError::NotEnoughStarts {
            required: n_starts,
            have: d_env.len(),
        });
    }
    let idx = d_env.sample_indices(n_starts, seed::derive(seed, "rollout-starts", &[]))?;
    let starts: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| d_env.get(i).expect("sampled index in range").state.clone())
        .collect();
    generate_rollouts_from(ens, policy, reward, &starts, per_start, horizon, mode, seed)
}

/// `generate_rollouts` from explicit start states; group `g` is `starts[g]`.
#[allow(clippy::too_many_arguments)]
pub fn generate_rollouts_from<P: Policy, R: RewardModel>(
    ens: &EnsembleState,
    policy: &P,
    reward: &R,
    starts: &[Vec<f64>],
    per_start: usize,
    horizon: usize,
    mode: PredictMode,
    seed: u64,
) -> Result<RolloutBatch, RolloutError> {
    let per_group = starts
        .par_iter()
        .enumerate()
        .map(|(g, s0)| {
            let mut rng = seed::derived_rng(seed, "rollout", &[g as u64]);
            let mut out = Vec::with_capacity(per_start * horizon);
            let mut truncated = 0;
            for k in 0..per_start {
                let mut s = s0.clone();
                for t in 0..horizon {
                    let a = policy.act(&s, &mut rng);
                    let next = match ens.predict(&s, &a, mode, &mut rng) {
                        Ok(n) if n.iter().chain(&a).all(|x| x.is_finite()) => n,
                        Ok(_)
                        | Err(EnsembleError::Net {
                            source: NnError::NonFinite { .. },
                            ..
                        }) => {
                            truncated += 1;
                            break;
                        }
                        Err(e) => return Err(e.into()),
                    };
                    let r = reward.reward(&s, &a);
                    let terminal = reward.is_terminal(&next);
                    out.push(RolloutSample {
                        transition: Transition::new(s, a, r, next.clone(), terminal),
                        group: g,
                        rollout: k,
                        timestep: t,
                    });
                    if terminal {
                        break;
                    }
                    s = next;
                }
            }
            Ok::<_, RolloutError>((out, truncated))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut batch = RolloutBatch {
        horizon,
        ..Default::default()
    };
    for (samples, truncated) in per_group {
        batch.samples.extend(samples);
        batch.truncated += truncated;
    }
    batch.generated = batch.samples.len();
    Ok(batch)
}

/// How many of `n` ranked items survive dropping a `frac` fraction:
/// `⌈(1 − frac)·n⌉`, at least one.
pub fn retained_count(n: usize, frac: f64) -> usize {
    (((1.0 - frac) * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Nearest-rank `(1 − α)` percentile: the `⌈(1 − α)·n⌉`-th smallest value.
pub fn percentile_threshold(values: &[f64], alpha: f64) -> Result<f64, RolloutError> {
    if values.is_empty() {
        return Err(RolloutError::Empty);
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(RolloutError::Alpha(alpha));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(RolloutError::NonFinite);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[retained_count(values.len(), alpha) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutOptions {
    pub mode: DropoutMode,
    /// Groups with fewer ranked items than this are kept whole.
    pub min_group_size: usize,
    /// Discount for per-trajectory returns.
    pub gamma: f64,
}

impl Default for DropoutOptions {
    fn default() -> Self {
        Self {
            mode: DropoutMode::PerSample,
            min_group_size: 5,
            gamma: 0.99,
        }
    }
}

/// Keep, within every group, the `⌈(1 − α)·n⌉` lowest-ranked items; the
/// top `α` are discarded. Ties at the threshold are resolved by sample
/// order, so the retained count is exact and every kept value is ≤ every
/// dropped one.
pub fn rollout_dropout(batch: &RolloutBatch, alpha: f64, opts: &DropoutOptions) -> Result<RolloutBatch, RolloutError> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(RolloutError::Alpha(alpha));
    }
    let mut keep = vec![false; batch.samples.len()];
    let mut thresholds = BTreeMap::new();
    let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in batch.samples.iter().enumerate() {
        by_group.entry(s.group).or_default().push(i);
    }
    for (&g, idx) in &by_group {
        // Ranked units: single samples, or whole rollouts.
        let units: Vec<(f64, Vec<usize>)> = match opts.mode {
            DropoutMode::PerSample => idx.iter().map(|&i| (batch.samples[i].transition.reward, vec![i])).collect(),
            DropoutMode::PerTrajectory => {
                let mut rollouts: BTreeMap<usize, (f64, Vec<usize>)> = BTreeMap::new();
                for &i in idx {
                    let s = &batch.samples[i];
                    let e = rollouts.entry(s.rollout).or_insert((0.0, Vec::new()));
                    e.0 += opts.gamma.powi(s.timestep as i32) * s.transition.reward;
                    e.1.push(i);
                }
                rollouts.into_values().collect()
            }
        };
        if units.iter().any(|u| !u.0.is_finite()) {
            return Err(RolloutError::NonFinite);
        }
        if units.len() < opts.min_group_size || alpha == 0.0 {
            thresholds.insert(g, None);
            units.iter().flat_map(|u| &u.1).for_each(|&i| keep[i] = true);
            continue;
        }
        let mut order: Vec<usize> = (0..units.len()).collect();
        order.sort_by(|&a, &b| units[a].0.total_cmp(&units[b].0).then(a.cmp(&b)));
        let n_keep = retained_count(units.len(), alpha);
        thresholds.insert(g, Some(units[order[n_keep - 1]].0));
        for &u in &order[..n_keep] {
            units[u].1.iter().for_each(|&i| keep[i] = true);
        }
    }
    let samples = batch
        .samples
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(s, _)| s.clone())
        .collect();
    Ok(RolloutBatch {
        samples,
        horizon: batch.horizon,
        thresholds,
        generated: batch.generated,
        truncated: batch.truncated,
    })
}

/// Mean over retained rollout fragments of `Σ γ^t r`.
pub fn dropout_return_estimate(batch: &RolloutBatch, gamma: f64) -> Result<f64, RolloutError> {
    if batch.is_empty() {
        return Err(RolloutError::Empty);
    }
    let mut fragments: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for s in &batch.samples {
        *fragments.entry((s.group, s.rollout)).or_insert(0.0) += gamma.powi(s.timestep as i32) * s.transition.reward;
    }
    Ok(fragments.values().sum::<f64>() / fragments.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{DynamicsModel, Normalizer};
    use crate::policy::UniformPolicy;

    fn sample(group: usize, rollout: usize, timestep: usize, reward: f64) -> RolloutSample {
        RolloutSample {
            transition: Transition::new(vec![0.0], vec![0.0], reward, vec![0.0], false),
            group,
            rollout,
            timestep,
        }
    }

    fn rewards(b: &RolloutBatch) -> Vec<f64> {
        b.samples().iter().map(|s| s.transition.reward).collect()
    }

    #[test]
    fn percentile_examples() {
        let xs: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile_threshold(&xs, 0.2).unwrap(), 8.0);
        assert_eq!(percentile_threshold(&[3.0, -1.0, 7.0], 0.0).unwrap(), 7.0);
        assert_eq!(percentile_threshold(&[2.5; 9], 0.37).unwrap(), 2.5);
        assert!(matches!(percentile_threshold(&[], 0.2), Err(RolloutError::Empty)));
    }

    #[test]
    fn dropout_examples() {
        let one = RolloutBatch::from_samples((1..=10).map(|r| sample(0, r, 0, r as f64)).collect(), 1);
        let opts = DropoutOptions::default();
        let out = rollout_dropout(&one, 0.2, &opts).unwrap();
        assert_eq!(rewards(&out), (1..=8).map(f64::from).collect::<Vec<_>>());
        assert_eq!(out.thresholds()[&0], Some(8.0));
        assert_eq!(rollout_dropout(&one, 0.0, &opts).unwrap().samples(), one.samples());

        let two = RolloutBatch::from_samples(
            (1..=20).map(|r| sample(usize::from(r > 10), r, 0, r as f64)).collect(),
            1,
        );
        let out = rollout_dropout(&two, 0.5, &opts).unwrap();
        let mut expect: Vec<f64> = (1..=5).map(f64::from).collect();
        expect.extend((11..=15).map(f64::from));
        assert_eq!(rewards(&out), expect);
    }

    #[test]
    fn small_group_kept_whole() {
        let b = RolloutBatch::from_samples((0..4).map(|r| sample(0, r, 0, r as f64)).collect(), 1);
        let out = rollout_dropout(&b, 0.5, &DropoutOptions::default()).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out.thresholds()[&0], None);
    }

    #[test]
    fn per_trajectory_keeps_whole_rollouts() {
        let mut samples = Vec::new();
        for k in 0..10 {
            for t in 0..3 {
                samples.push(sample(0, k, t, k as f64 + 0.1 * t as f64));
            }
        }
        let b = RolloutBatch::from_samples(samples, 3);
        let opts = DropoutOptions {
            mode: DropoutMode::PerTrajectory,
            ..Default::default()
        };
        let out = rollout_dropout(&b, 0.2, &opts).unwrap();
        assert_eq!(out.len(), 24);
        assert!(out.samples().iter().all(|s| s.rollout < 8));
    }

    #[test]
    fn return_estimate_examples() {
        let b = RolloutBatch::from_samples(vec![sample(0, 0, 0, 2.0)], 1);
        assert_eq!(dropout_return_estimate(&b, 0.9).unwrap(), 2.0);
        let b = RolloutBatch::from_samples((0..3).map(|t| sample(0, 0, t, 1.0)).collect(), 3);
        assert!((dropout_return_estimate(&b, 0.5).unwrap() - 1.75).abs() < 1e-15);
        assert!(dropout_return_estimate(&RolloutBatch::default(), 0.5).is_err());
    }

    struct ZeroReward;
    impl RewardModel for ZeroReward {
        fn reward(&self, s: &[f64], _a: &[f64]) -> f64 {
            s[0]
        }
        fn is_terminal(&self, _s: &[f64]) -> bool {
            false
        }
    }

    fn drift_ensemble() -> EnsembleState {
        let mut m = DynamicsModel::new(0, 1, 1, &[4], 0).unwrap();
        m.net_mut().params_mut().iter_mut().for_each(|p| *p = 0.0);
        m.set_normalizers(
            Normalizer::identity(2),
            Normalizer {
                mean: vec![0.5],
                std: vec![1.0],
            },
        );
        EnsembleState::from_members(vec![m])
    }

    fn start_buffer(n: usize) -> ReplayBuffer {
        let mut buf = ReplayBuffer::new(n).unwrap();
        for i in 0..n {
            buf.push(Transition::new(vec![i as f64], vec![0.0], 0.0, vec![0.0], false)).unwrap();
        }
        buf
    }

    #[test]
    fn rollout_counts() {
        let ens = drift_ensemble();
        let pi = UniformPolicy { dim: 1, high: 1.0 };
        let buf = start_buffer(10);
        let b = generate_rollouts(&ens, &pi, &ZeroReward, &buf, 1, 1, 1, PredictMode::Mean, 0).unwrap();
        assert_eq!((b.len(), b.groups().len()), (1, 1));
        let b = generate_rollouts(&ens, &pi, &ZeroReward, &buf, 4, 8, 3, PredictMode::Stochastic, 0).unwrap();
        assert_eq!(b.len(), 96);
        assert!(b.groups().values().all(|g| g.len() == 24));
        assert!(generate_rollouts(&ens, &pi, &ZeroReward, &buf, 11, 1, 1, PredictMode::Mean, 0).is_err());
    }

    #[test]
    fn deterministic_mode_collapses_rollouts() {
        let ens = drift_ensemble();
        let pi = UniformPolicy { dim: 1, high: 0.0 };
        let b = generate_rollouts(&ens, &pi, &ZeroReward, &start_buffer(5), 2, 6, 3, PredictMode::Mean, 4).unwrap();
        for g in b.groups().values() {
            let first: Vec<_> = g.iter().filter(|s| s.rollout == 0).map(|s| &s.transition).collect();
            for k in 1..6 {
                let other: Vec<_> = g.iter().filter(|s| s.rollout == k).map(|s| &s.transition).collect();
                assert_eq!(first, other);
            }
        }
    }

    #[test]
    fn rollouts_independent_of_thread_count() {
        let ens = drift_ensemble();
        let pi = UniformPolicy { dim: 1, high: 1.0 };
        let buf = start_buffer(20);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| generate_rollouts(&ens, &pi, &ZeroReward, &buf, 10, 4, 3, PredictMode::Stochastic, 7).unwrap())
        };
        assert_eq!(run(1), run(4));
    }
}
