//! Probabilistic dynamics ensemble: Gaussian MLPs over next-state deltas,
//! validation bias per member and bias-ranked model dropout.

use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{ReplayBuffer, Transition};
use crate::nn::{clip_global_norm, Adam, GaussianHead, Mlp, NnError};
use crate::seed::{self, Rng};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("need at least {required} transitions to train, have {have}")]
    NotEnoughData { required: usize, have: usize },
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("bias of member {0} is stale")]
    StaleBias(usize),
    #[error("model-dropout subset is empty")]
    EmptySubset,
    #[error("beta = {0} outside [0, 1)")]
    Beta(f64),
    #[error("ensemble needs at least one member")]
    NoMembers,
    #[error("member {id}: {source}")]
    Net {
        id: usize,
        #[source]
        source: NnError,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-feature affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]> + Clone) -> Self {
        let n = rows.clone().count().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows.clone() {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let std = var.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect()
    }
}

/// Training hyper-parameters shared by every member.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub validation_fraction: f64,
    pub max_validation: usize,
    /// Smallest `D_env` that training accepts.
    pub min_transitions: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 64,
            lr: 1e-3,
            validation_fraction: 0.2,
            max_validation: 1000,
            min_transitions: 50,
        }
    }
}

/// One member: `(s, a) ↦ N(μ, diag σ²)` over `s' − s`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    id: usize,
    state_dim: usize,
    action_dim: usize,
    net: Mlp,
    head: GaussianHead,
    input_norm: Normalizer,
    output_norm: Normalizer,
    adam: Adam,
    bias: Option<f64>,
    train_nll: f64,
    val_nll: f64,
    skipped_steps: usize,
}

/// Mean and standard deviation of the predicted delta, in state units.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaPrediction {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DynamicsModel {
    pub fn new(id: usize, state_dim: usize, action_dim: usize, hidden: &[usize], seed: u64) -> Result<Self, EnsembleError> {
        let head = GaussianHead::new(state_dim);
        let mut widths = vec![state_dim + action_dim];
        widths.extend_from_slice(hidden);
        widths.push(head.raw_dim());
        let mut rng = seed::derived_rng(seed, "member-init", &[id as u64]);
        let net = Mlp::new(&widths, 0.1, &mut rng).map_err(|source| EnsembleError::Net { id, source })?;
        let adam = Adam::new(net.num_params());
        Ok(Self {
            id,
            state_dim,
            action_dim,
            net,
            head,
            input_norm: Normalizer::identity(state_dim + action_dim),
            output_norm: Normalizer::identity(state_dim),
            adam,
            bias: None,
            train_nll: f64::NAN,
            val_nll: f64::NAN,
            skipped_steps: 0,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// `None` while stale.
    pub fn bias(&self) -> Option<f64> {
        self.bias
    }

    pub fn train_nll(&self) -> f64 {
        self.train_nll
    }

    pub fn val_nll(&self) -> f64 {
        self.val_nll
    }

    /// Gradient steps skipped because of non-finite losses or gradients.
    pub fn skipped_steps(&self) -> usize {
        self.skipped_steps
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        self.bias = None;
        &mut self.net
    }

    pub fn set_normalizers(&mut self, input: Normalizer, output: Normalizer) {
        self.input_norm = input;
        self.output_norm = output;
        self.bias = None;
    }

    fn features(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.state_dim + self.action_dim);
        x.extend_from_slice(s);
        x.extend_from_slice(a);
        self.input_norm.apply(&x)
    }

    pub fn predict_delta(&self, s: &[f64], a: &[f64]) -> Result<DeltaPrediction, NnError> {
        let raw = self.net.forward(&self.features(s, a))?;
        let g = self.head.split(&raw);
        let on = &self.output_norm;
        let mean = g.mean.iter().zip(&on.mean).zip(&on.std).map(|((z, m), sd)| z * sd + m).collect();
        let std = g.log_std.iter().zip(&on.std).map(|(l, sd)| l.exp() * sd).collect();
        Ok(DeltaPrediction { mean, std })
    }

    /// `s + μ(s, a)`.
    pub fn predict_mean(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>, NnError> {
        let d = self.predict_delta(s, a)?;
        Ok(s.iter().zip(&d.mean).map(|(x, m)| x + m).collect())
    }

    fn target(&self, t: &Transition) -> Vec<f64> {
        let delta: Vec<f64> = t.next_state.iter().zip(&t.state).map(|(n, s)| n - s).collect();
        self.output_norm.apply(&delta)
    }

    /// Mean NLL (in normalized units) and its parameter gradient.
    fn batch_loss(&self, batch: &[&Transition], grad: &mut [f64]) -> Result<f64, NnError> {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for t in batch {
            let tape = self.net.forward_tape(&self.features(&t.state, &t.action))?;
            let (l, mut d_raw) = self.head.nll(tape.output(), &self.target(t));
            d_raw.iter_mut().for_each(|d| *d *= scale);
            self.net.backward(&tape, &d_raw, grad);
            loss += l * scale;
        }
        Ok(loss)
    }

    fn mean_nll(&self, data: &[&Transition]) -> f64 {
        if data.is_empty() {
            return f64::NAN;
        }
        let mut total = 0.0;
        for t in data {
            match self.net.forward(&self.features(&t.state, &t.action)) {
                Ok(raw) => total += self.head.nll(&raw, &self.target(t)).0,
                Err(_) => return f64::NAN,
            }
        }
        total / data.len() as f64
    }

    fn train_on(&mut self, train: &[&Transition], val: &[&Transition], settings: &TrainSettings, seed: u64) {
        let mut rng = seed::derived_rng(seed, "member-train", &[self.id as u64]);
        let n = train.len();
        let boot: Vec<&Transition> = (0..n).map(|_| train[rng.random_range(0..n)]).collect();
        let mut grad = self.net.zeros_like();
        let batch_size = settings.batch_size.min(n);
        let mut batch = Vec::with_capacity(batch_size);
        let mut last = f64::NAN;
        for _ in 0..settings.steps {
            batch.clear();
            batch.extend((0..batch_size).map(|_| boot[rng.random_range(0..n)]));
            let ok = match self.batch_loss(&batch, &mut grad) {
                Ok(l) if l.is_finite() => {
                    clip_global_norm(&mut grad, 100.0);
                    let stepped = self.adam.step(self.net.params_mut(), &grad, settings.lr).is_ok();
                    if stepped {
                        last = l;
                    }
                    stepped
                }
                _ => false,
            };
            if !ok {
                self.skipped_steps += 1;
            }
        }
        self.train_nll = last;
        self.val_nll = self.mean_nll(val);
        self.bias = None;
    }
}

/// Mean over `validation` of `‖s + μ(s, a) − s'‖₂`; stored on the model.
pub fn compute_bias(model: &mut DynamicsModel, validation: &[&Transition]) -> Result<f64, EnsembleError> {
    if validation.is_empty() {
        return Err(EnsembleError::EmptyValidation);
    }
    let mut total = 0.0;
    for t in validation {
        let pred = model
            .predict_mean(&t.state, &t.action)
            .map_err(|source| EnsembleError::Net { id: model.id, source })?;
        total += pred
            .iter()
            .zip(&t.next_state)
            .map(|(p, o)| (p - o) * (p - o))
            .sum::<f64>()
            .sqrt();
    }
    let bias = total / validation.len() as f64;
    model.bias = Some(bias);
    Ok(bias)
}

/// Number of members kept at dropout ratio `beta`: `⌈(1 − β)·n⌉`.
pub fn retained_members(n: usize, beta: f64) -> usize {
    let k = ((1.0 - beta) * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    /// Member drawn uniformly from the subset; Gaussian sample.
    Stochastic,
    /// Member drawn uniformly from the subset; `s + μ`.
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    members: Vec<DynamicsModel>,
    /// Φ_β as member indices, in ascending (bias, id) order.
    subset: Vec<usize>,
}

/// Outcome of one `train_ensemble` call.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Indices (by age in `D_env`) of the shared validation transitions.
    pub validation: Vec<usize>,
    pub train_size: usize,
}

impl EnsembleState {
    pub fn new(n: usize, state_dim: usize, action_dim: usize, hidden: &[usize], seed: u64) -> Result<Self, EnsembleError> {
        if n == 0 {
            return Err(EnsembleError::NoMembers);
        }
        let members = (0..n)
            .map(|id| DynamicsModel::new(id, state_dim, action_dim, hidden, seed))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_members(members))
    }

    pub fn from_members(members: Vec<DynamicsModel>) -> Self {
        let subset = (0..members.len()).collect();
        Self { members, subset }
    }

    pub fn members(&self) -> &[DynamicsModel] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [DynamicsModel] {
        &mut self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn subset(&self) -> &[usize] {
        &self.subset
    }

    pub fn is_retained(&self, i: usize) -> bool {
        self.subset.contains(&i)
    }

    /// Train every member for `settings.steps` minibatch steps on a
    /// bootstrap resample of the non-validation part of `d_env`.
    ///
    /// The split is drawn from `seed` and shared by all members; the input
    /// and output normalizers are refit on the training part. Zero steps
    /// leave the ensemble untouched.
    pub fn train(&mut self, d_env: &ReplayBuffer, settings: &TrainSettings, seed: u64) -> Result<TrainOutcome, EnsembleError> {
        let have = d_env.len();
        if have < settings.min_transitions.max(2) {
            return Err(EnsembleError::NotEnoughData {
                required: settings.min_transitions.max(2),
                have,
            });
        }
        let n_val = ((settings.validation_fraction * have as f64).round() as usize).clamp(1, settings.max_validation.min(have - 1));
        let mut split_rng = seed::derived_rng(seed, "ensemble-split", &[]);
        let order = index::sample(&mut split_rng, have, have).into_vec();
        let validation = order[..n_val].to_vec();
        if settings.steps == 0 {
            return Ok(TrainOutcome {
                validation,
                train_size: have - n_val,
            });
        }
        let get = |i: &usize| d_env.get(*i).expect("index in range");
        let val: Vec<&Transition> = validation.iter().map(get).collect();
        let train: Vec<&Transition> = order[n_val..].iter().map(get).collect();

        let (d_s, d_a) = (train[0].state.len(), train[0].action.len());
        let inputs: Vec<Vec<f64>> = train.iter().map(|t| [t.state.as_slice(), &t.action].concat()).collect();
        let deltas: Vec<Vec<f64>> = train
            .iter()
            .map(|t| t.next_state.iter().zip(&t.state).map(|(n, s)| n - s).collect())
            .collect();
        let in_norm = Normalizer::fit(d_s + d_a, inputs.iter().map(Vec::as_slice));
        let out_norm = Normalizer::fit(d_s, deltas.iter().map(Vec::as_slice));

        self.members.par_iter_mut().for_each(|m| {
            m.input_norm = in_norm.clone();
            m.output_norm = out_norm.clone();
            m.train_on(&train, &val, settings, seed);
        });
        Ok(TrainOutcome {
            validation,
            train_size: train.len(),
        })
    }

    /// Recompute every member's bias on `validation`.
    pub fn compute_biases(&mut self, validation: &[&Transition]) -> Result<Vec<f64>, EnsembleError> {
        self.members.par_iter_mut().map(|m| compute_bias(m, validation)).collect()
    }

    /// Keep the `⌈(1 − β)·N⌉` members with the smallest bias (ties to the
    /// lower id). Dropped members stay in the ensemble and keep training.
    pub fn model_dropout(&mut self, beta: f64) -> Result<&[usize], EnsembleError> {
        if !(0.0..1.0).contains(&beta) {
            return Err(EnsembleError::Beta(beta));
        }
        let mut ranked = Vec::with_capacity(self.members.len());
        for (i, m) in self.members.iter().enumerate() {
            ranked.push((m.bias.ok_or(EnsembleError::StaleBias(i))?, m.id, i));
        }
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        ranked.truncate(retained_members(self.members.len(), beta));
        self.subset = ranked.into_iter().map(|r| r.2).collect();
        Ok(&self.subset)
    }

    /// Next state from a member drawn uniformly from Φ_β.
    pub fn predict(&self, s: &[f64], a: &[f64], mode: PredictMode, rng: &mut Rng) -> Result<Vec<f64>, EnsembleError> {
        if self.subset.is_empty() {
            return Err(EnsembleError::EmptySubset);
        }
        let i = self.subset[rng.random_range(0..self.subset.len())];
        let m = &self.members[i];
        let d = m.predict_delta(s, a).map_err(|source| EnsembleError::Net { id: m.id, source })?;
        Ok(match mode {
            PredictMode::Mean => s.iter().zip(&d.mean).map(|(x, mu)| x + mu).collect(),
            PredictMode::Stochastic => s
                .iter()
                .zip(d.mean.iter().zip(&d.std))
                .map(|(x, (mu, sd))| {
                    let z: f64 = StandardNormal.sample(rng);
                    x + mu + sd * z
                })
                .collect(),
        })
    }

    pub fn report_rows(&self, epoch: usize) -> Vec<EnsembleRow> {
        self.members
            .iter()
            .enumerate()
            .map(|(i, m)| EnsembleRow {
                epoch,
                member: m.id,
                train_nll: m.train_nll,
                val_nll: m.val_nll,
                bias: m.bias.unwrap_or(f64::NAN),
                retained: self.is_retained(i),
            })
            .collect()
    }

    /// One `member_<id>` network per member plus `ensemble.toml` holding the
    /// normalizers and biases.
    pub fn save(&self, dir: &Path) -> Result<(), EnsembleError> {
        std::fs::create_dir_all(dir)?;
        let mut meta = EnsembleMeta {
            subset: self.subset.clone(),
            members: Vec::new(),
        };
        for m in &self.members {
            m.net.save(dir, &format!("member_{}", m.id))?;
            meta.members.push(MemberMeta {
                id: m.id,
                state_dim: m.state_dim,
                action_dim: m.action_dim,
                input_norm: m.input_norm.clone(),
                output_norm: m.output_norm.clone(),
                bias: m.bias,
            });
        }
        let text = toml::to_string(&meta).map_err(|e| EnsembleError::Checkpoint(e.to_string()))?;
        std::fs::write(dir.join("ensemble.toml"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, EnsembleError> {
        let text = std::fs::read_to_string(dir.join("ensemble.toml"))?;
        let meta: EnsembleMeta = toml::from_str(&text).map_err(|e| EnsembleError::Checkpoint(e.to_string()))?;
        let mut members = Vec::new();
        for mm in meta.members {
            let net = Mlp::load(dir, &format!("member_{}", mm.id)).map_err(|source| EnsembleError::Net { id: mm.id, source })?;
            let adam = Adam::new(net.num_params());
            members.push(DynamicsModel {
                id: mm.id,
                state_dim: mm.state_dim,
                action_dim: mm.action_dim,
                net,
                head: GaussianHead::new(mm.state_dim),
                input_norm: mm.input_norm,
                output_norm: mm.output_norm,
                adam,
                bias: mm.bias,
                train_nll: f64::NAN,
                val_nll: f64::NAN,
                skipped_steps: 0,
            });
        }
        if meta.subset.iter().any(|&i| i >= members.len()) {
            return Err(EnsembleError::Checkpoint("subset index out of range".into()));
        }
        Ok(Self {
            members,
            subset: meta.subset,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct MemberMeta {
    id: usize,
    state_dim: usize,
    action_dim: usize,
    input_norm: Normalizer,
    output_norm: Normalizer,
    bias: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct EnsembleMeta {
    subset: Vec<usize>,
    members: Vec<MemberMeta>,
}

/// Row of the per-epoch ensemble CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleRow {
    pub epoch: usize,
    pub member: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub bias: f64,
    pub retained: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_buffer(n: usize, seed_: u64) -> ReplayBuffer {
        let mut rng = seed::rng(seed_);
        let mut buf = ReplayBuffer::new(n).unwrap();
        for _ in 0..n {
            let s: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = vec![rng.random_range(-1.0..1.0)];
            let ns = vec![0.9 * s[0] + 0.1 * s[1], -0.2 * s[0] + 0.8 * s[1] + 0.5 * a[0]];
            buf.push(Transition::new(s, a, 0.0, ns, false)).unwrap();
        }
        buf
    }

    fn offset_model(v: &[f64]) -> DynamicsModel {
        // Zero network output and an output normalizer shifted by `v`.
        let mut m = DynamicsModel::new(0, v.len(), 1, &[4], 1).unwrap();
        m.net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let out = Normalizer {
            mean: v.to_vec(),
            std: vec![1.0; v.len()],
        };
        m.set_normalizers(Normalizer::identity(v.len() + 1), out);
        m
    }

    #[test]
    fn zero_steps_is_noop() {
        let buf = linear_buffer(200, 2);
        let mut ens = EnsembleState::new(3, 2, 1, &[8], 5).unwrap();
        let before = ens.clone();
        let settings = TrainSettings {
            steps: 0,
            ..Default::default()
        };
        ens.train(&buf, &settings, 9).unwrap();
        // Debug output distinguishes every bit pattern except NaN payloads,
        // which the untrained losses share.
        assert_eq!(format!("{ens:?}"), format!("{before:?}"));
    }

    #[test]
    fn too_little_data() {
        let buf = linear_buffer(10, 2);
        let mut ens = EnsembleState::new(1, 2, 1, &[8], 5).unwrap();
        assert!(matches!(
            ens.train(&buf, &TrainSettings::default(), 0),
            Err(EnsembleError::NotEnoughData { .. })
        ));
    }

    #[test]
    fn members_are_distinct() {
        let buf = linear_buffer(300, 3);
        let mut ens = EnsembleState::new(5, 2, 1, &[8], 5).unwrap();
        let settings = TrainSettings {
            steps: 20,
            ..Default::default()
        };
        ens.train(&buf, &settings, 1).unwrap();
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(ens.members()[i].net().params(), ens.members()[j].net().params());
            }
        }
    }

    #[test]
    fn bias_of_offset_model_is_norm() {
        let buf = linear_buffer(50, 4);
        let v = [0.3, -0.4];
        // Transitions that move every state by exactly `v`.
        let shifted: Vec<Transition> = buf
            .iter()
            .map(|t| {
                let ns = t.state.iter().zip(&v).map(|(s, d)| s + d).collect();
                Transition::new(t.state.clone(), t.action.clone(), 0.0, ns, false)
            })
            .collect();
        let refs: Vec<&Transition> = shifted.iter().collect();
        assert_eq!(compute_bias(&mut offset_model(&v), &refs).unwrap(), 0.0);
        let mut still = offset_model(&[0.0, 0.0]);
        let b = compute_bias(&mut still, &refs).unwrap();
        assert!((b - 0.5).abs() < 1e-12, "{b}");
        assert_eq!(still.bias(), Some(b));
        assert!(matches!(compute_bias(&mut still, &[]), Err(EnsembleError::EmptyValidation)));
    }

    #[test]
    fn dropout_examples() {
        let mut ens = EnsembleState::new(5, 1, 1, &[2], 0).unwrap();
        assert!(matches!(ens.model_dropout(0.2), Err(EnsembleError::StaleBias(0))));
        for (i, b) in [0.3, 0.1, 0.5, 0.2, 0.4].into_iter().enumerate() {
            ens.members[i].bias = Some(b);
        }
        assert_eq!(ens.model_dropout(0.2).unwrap(), &[1, 3, 0, 4]);
        assert_eq!(ens.model_dropout(0.0).unwrap().len(), 5);
        for m in &mut ens.members {
            m.bias = Some(1.0);
        }
        assert_eq!(ens.model_dropout(0.5).unwrap(), &[0, 1, 2]);
        assert!(ens.model_dropout(1.0).is_err());
    }

    #[test]
    fn retained_count_rounding() {
        assert_eq!(retained_members(5, 0.2), 4);
        assert_eq!(retained_members(10, 0.2), 8);
        assert_eq!(retained_members(7, 0.0), 7);
        assert_eq!(retained_members(3, 0.99), 1);
    }

    #[test]
    fn predict_mean_mode_single_member() {
        let m = offset_model(&[0.25, -1.0]);
        let ens = EnsembleState::from_members(vec![m]);
        let mut rng = seed::rng(0);
        let out = ens.predict(&[1.0, 2.0], &[0.0], PredictMode::Mean, &mut rng).unwrap();
        assert_eq!(out, vec![1.25, 1.0]);
    }

    #[test]
    fn sigma_floor_sampling() {
        let mut m = offset_model(&[0.0]);
        // Drive the raw log-std far below its soft floor.
        let n = m.net.num_params();
        m.net.params_mut()[n - 1] = -50.0;
        let ens = EnsembleState::from_members(vec![m]);
        let mut rng = seed::rng(1);
        let xs: Vec<f64> = (0..1000)
            .map(|_| ens.predict(&[0.0], &[0.0], PredictMode::Stochastic, &mut rng).unwrap()[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / 1000.0;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 999.0).sqrt();
        let floor = GaussianHead::SIGMA_MIN;
        assert!((sd - floor).abs() < 0.2 * floor, "{sd}");
    }

    #[test]
    fn uniform_member_selection() {
        let members: Vec<DynamicsModel> = (0..4)
            .map(|i| {
                let mut m = offset_model(&[i as f64]);
                m.id = i;
                m
            })
            .collect();
        let ens = EnsembleState::from_members(members);
        let mut rng = seed::rng(2);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let out = ens.predict(&[0.0], &[0.0], PredictMode::Mean, &mut rng).unwrap();
            counts[out[0].round() as usize] += 1;
        }
        let sd = (10_000.0 * 0.25 * 0.75_f64).sqrt();
        for c in counts {
            assert!((c as f64 - 2500.0).abs() < 4.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn fits_linear_system() {
        let buf = linear_buffer(5000, 6);
        let mut ens = EnsembleState::new(1, 2, 1, &[32, 32], 3).unwrap();
        let settings = TrainSettings {
            steps: 3000,
            batch_size: 64,
            lr: 3e-3,
            ..Default::default()
        };
        let out = ens.train(&buf, &settings, 11).unwrap();
        let val: Vec<&Transition> = out.validation.iter().map(|&i| buf.get(i).unwrap()).collect();
        let m = &ens.members()[0];
        let mse: f64 = val
            .iter()
            .map(|t| {
                let p = m.predict_mean(&t.state, &t.action).unwrap();
                p.iter().zip(&t.next_state).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 2.0
            })
            .sum::<f64>()
            / val.len() as f64;
        assert!(mse < 1e-3, "validation mse {mse}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let buf = linear_buffer(200, 8);
        let mut ens = EnsembleState::new(2, 2, 1, &[8], 5).unwrap();
        let out = ens
            .train(
                &buf,
                &TrainSettings {
                    steps: 5,
                    ..Default::default()
                },
                0,
            )
            .unwrap();
        let val: Vec<&Transition> = out.validation.iter().map(|&i| buf.get(i).unwrap()).collect();
        ens.compute_biases(&val).unwrap();
        ens.model_dropout(0.5).unwrap();
        ens.save(dir.path()).unwrap();
        let back = EnsembleState::load(dir.path()).unwrap();
        assert_eq!(back.subset(), ens.subset());
        let s = [0.1, 0.2];
        assert_eq!(
            back.members()[1].predict_mean(&s, &[0.3]).unwrap(),
            ens.members()[1].predict_mean(&s, &[0.3]).unwrap()
        );
    }
}
