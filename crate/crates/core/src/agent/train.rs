use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{evaluate_policy, AgentError, Greedy, PolicyParams, SacSettings};
use crate::buffer::{BufferError, ReplayBuffer, Transition};
use crate::config::{ConfigError, TrainConfig};
use crate::ensemble::{EnsembleError, EnsembleState, PredictMode, TrainSettings};
use crate::envs::{ContinuousEnv, EnvError, PerturbationConfig};
use crate::nn::NnError;
use crate::policy::{Policy, UniformPolicy};
use crate::risk::{estimate_eps_m, estimate_lipschitz_k, BoundsReport, RiskError};
use crate::rollout::{
    dropout_return_estimate, generate_rollouts, generate_rollouts_from, rollout_dropout, DropoutMode, DropoutOptions,
    RolloutError,
};
use crate::seed;

/// Where in an epoch a failure happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Setup,
    Interaction,
    ModelTraining,
    ModelDropout,
    Rollout,
    PolicyUpdate,
    Evaluation,
    Bounds,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Setup => "setup",
            Stage::Interaction => "env interaction",
            Stage::ModelTraining => "model training",
            Stage::ModelDropout => "model dropout",
            Stage::Rollout => "model rollouts",
            Stage::PolicyUpdate => "policy update",
            Stage::Evaluation => "evaluation",
            Stage::Bounds => "bounds report",
            Stage::Output => "writing outputs",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("epoch {epoch}, {stage}: {source}")]
    Stage {
        epoch: usize,
        stage: Stage,
        #[source]
        source: StageError,
    },
}

fn nn_is_numeric(e: &NnError) -> bool {
    matches!(e, NnError::NonFinite { .. } | NnError::NonFiniteGradient { .. })
}

impl TrainError {
    /// Whether the failure is a numeric blow-up (NaN or infinite values)
    /// rather than a configuration or I/O problem.
    pub fn is_numeric(&self) -> bool {
        let TrainError::Stage { source, .. } = self else {
            return false;
        };
        match source {
            StageError::Env(e) => matches!(e, EnvError::BlowUp { .. } | EnvError::NonFiniteAction),
            StageError::Buffer(e) => matches!(e, BufferError::NonFinite(_)),
            StageError::Ensemble(EnsembleError::Net { source, .. }) => nn_is_numeric(source),
            StageError::Rollout(RolloutError::NonFinite) => true,
            StageError::Rollout(RolloutError::Ensemble(EnsembleError::Net { source, .. })) => nn_is_numeric(source),
            StageError::Agent(AgentError::NonFinite { .. }) => true,
            StageError::Agent(AgentError::Nn(e)) => nn_is_numeric(e),
            StageError::Agent(AgentError::Env(e)) => matches!(e, EnvError::NonFiniteAction),
            StageError::Risk(RiskError::NonFinite(_)) => true,
            _ => false,
        }
    }
}

/// One row of `metrics.csv`. Bound columns are NaN until the ensemble has
/// been trained at least once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub run_id: String,
    pub epoch: usize,
    pub env_steps: usize,
    pub eval_return: f64,
    pub eval_return_std: f64,
    pub eval_discounted: f64,
    pub eval_blowups: usize,
    pub d_env_size: usize,
    pub d_model_size: usize,
    pub rollouts_generated: usize,
    pub rollouts_retained: usize,
    pub retained_fraction: f64,
    pub mean_threshold: f64,
    pub subset_size: usize,
    pub ensemble_size: usize,
    pub model_val_nll: f64,
    pub policy_updates: usize,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub env_blowups: usize,
    pub eps_alpha: f64,
    pub eps_m: f64,
    pub lipschitz_k: f64,
    pub k_estimated: bool,
    pub d_alpha_beta: f64,
    pub v_env: f64,
    pub v_alpha_model: f64,
    pub eps_k: f64,
    pub eta: f64,
}

impl TrainReport {
    /// The η residual if bounds were available this epoch.
    pub fn bounds(&self) -> Option<(f64, f64)> {
        self.eta.is_finite().then_some((self.eps_k, self.eta))
    }
}

#[derive(Serialize)]
struct EnsembleCsvRow<'a> {
    run_id: &'a str,
    epoch: usize,
    iteration: usize,
    member: usize,
    train_nll: f64,
    val_nll: f64,
    bias: f64,
    retained: bool,
}

#[derive(Serialize)]
struct RolloutCsvRow<'a> {
    run_id: &'a str,
    epoch: usize,
    iteration: usize,
    groups: usize,
    generated: usize,
    retained: usize,
    mean_threshold: f64,
    retained_fraction: f64,
    truncated: usize,
}

#[derive(Serialize)]
struct TimingRow<'a> {
    run_id: &'a str,
    epoch: usize,
    wall_seconds: f64,
}

/// Output settings for `mbdp_train`.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for CSVs and checkpoints; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Value of the `run_id` column in every CSV.
    pub run_id: String,
    /// Print one summary line per epoch to stderr.
    pub verbose: bool,
}

pub struct TrainOutcome {
    pub reports: Vec<TrainReport>,
    pub agent: PolicyParams,
    pub ensemble: EnsembleState,
    pub env_steps: usize,
}

struct Writers {
    metrics: csv::Writer<File>,
    ensemble: csv::Writer<File>,
    rollouts: csv::Writer<File>,
    timing: csv::Writer<File>,
    checkpoints: PathBuf,
}

impl Writers {
    fn create(dir: &Path) -> Result<Self, StageError> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| csv::WriterBuilder::new().has_headers(false).from_path(dir.join(name));
        let mut w = Self {
            metrics: open("metrics.csv")?,
            ensemble: open("ensemble.csv")?,
            rollouts: open("rollouts.csv")?,
            timing: open("timing.csv")?,
            checkpoints: dir.join("checkpoints"),
        };
        // Headers go out up front so an empty run still leaves
        // well-formed files.
        w.metrics.write_record(metrics_columns())?;
        w.ensemble.write_record(["run_id", "epoch", "iteration", "member", "train_nll", "val_nll", "bias", "retained"])?;
        w.rollouts.write_record([
            "run_id",
            "epoch",
            "iteration",
            "groups",
            "generated",
            "retained",
            "mean_threshold",
            "retained_fraction",
            "truncated",
        ])?;
        w.timing.write_record(["run_id", "epoch", "wall_seconds"])?;
        w.flush()?;
        Ok(w)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.metrics.flush()?;
        self.ensemble.flush()?;
        self.rollouts.flush()?;
        self.timing.flush()
    }
}

/// Column names of `metrics.csv`, in order.
pub fn metrics_columns() -> &'static [&'static str] {
    &[
        "run_id",
        "epoch",
        "env_steps",
        "eval_return",
        "eval_return_std",
        "eval_discounted",
        "eval_blowups",
        "d_env_size",
        "d_model_size",
        "rollouts_generated",
        "rollouts_retained",
        "retained_fraction",
        "mean_threshold",
        "subset_size",
        "ensemble_size",
        "model_val_nll",
        "policy_updates",
        "critic_loss",
        "actor_loss",
        "env_blowups",
        "eps_alpha",
        "eps_m",
        "lipschitz_k",
        "k_estimated",
        "d_alpha_beta",
        "v_env",
        "v_alpha_model",
        "eps_k",
        "eta",
    ]
}

fn write_row<T: Serialize>(w: &mut csv::Writer<File>, row: &T) -> Result<(), csv::Error> {
    w.serialize(row)
}

/// Train MBDP for `cfg.run.epochs` epochs.
///
/// Each epoch: (i) collect `env_steps_per_epoch` real transitions into
/// `D_env` (uniform actions for the first `random_steps`); (ii)
/// `model.train_iters` times train the ensemble, recompute biases, apply
/// model dropout, roll out from `D_env` states and push the
/// rollout-dropout survivors into `D_model`; (iii) run
/// `updates_per_env_step · env_steps_per_epoch` actor-critic updates on
/// `D_model`; (iv) evaluate the mean-action policy and build the bound
/// report.
pub fn mbdp_train(cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let kind = cfg.env_kind()?;
    let dcfg = cfg.dropout_config()?;
    let root = cfg.run.seed;
    let setup = |source: StageError| TrainError::Stage {
        epoch: 0,
        stage: Stage::Setup,
        source,
    };

    let perturbation = PerturbationConfig::new(cfg.run.c_mass, cfg.run.c_friction).map_err(|e| setup(e.into()))?;
    let base_env = ContinuousEnv::new(kind, seed::derive(root, "env", &[]))
        .perturb(perturbation)
        .map_err(|e| setup(e.into()))?;
    let mut env = base_env.clone();
    let mut obs = env.reset();
    let (d_s, d_a, high) = (kind.state_dim(), kind.action_dim(), kind.action_high());

    let mut d_env = ReplayBuffer::new(cfg.buffers.env_capacity).map_err(|e| setup(e.into()))?;
    let mut d_model = ReplayBuffer::new(cfg.buffers.model_capacity).map_err(|e| setup(e.into()))?;
    let mut ens = EnsembleState::new(
        cfg.model.ensemble_size,
        d_s,
        d_a,
        &cfg.model.hidden,
        seed::derive(root, "ensemble-init", &[]),
    )
    .map_err(|e| setup(e.into()))?;
    let sac = SacSettings {
        gamma: dcfg.gamma,
        entropy_weight: cfg.agent.entropy_weight,
        tau: cfg.agent.tau,
        actor_lr: cfg.agent.actor_lr,
        critic_lr: cfg.agent.critic_lr,
        grad_clip: cfg.agent.grad_clip,
    };
    let mut agent = PolicyParams::new(d_s, d_a, high, &cfg.agent.hidden, sac, seed::derive(root, "agent-init", &[]))
        .map_err(|e| setup(e.into()))?;
    let model_settings = TrainSettings {
        steps: cfg.model.train_steps,
        batch_size: cfg.model.batch_size,
        lr: cfg.model.lr,
        validation_fraction: cfg.model.validation_fraction,
        max_validation: cfg.model.max_validation,
        min_transitions: cfg.model.min_transitions,
    };
    let dropout_opts = DropoutOptions {
        mode: cfg.rollout.mode,
        min_group_size: cfg.rollout.min_group_size,
        gamma: dcfg.gamma,
    };

    let mut writers = match &opts.out_dir {
        Some(dir) => Some(Writers::create(dir).map_err(setup)?),
        None => None,
    };
    let run_id = opts.run_id.as_str();
    let uniform = UniformPolicy { dim: d_a, high };
    let mut explore_rng = seed::derived_rng(root, "explore", &[]);
    let mut reports = Vec::with_capacity(cfg.run.epochs);
    let mut env_steps = 0usize;
    let mut env_blowups = 0usize;
    let mut episode = 0u64;

    for epoch in 0..cfg.run.epochs {
        let started = Instant::now();
        let fail = |stage: Stage| move |source: StageError| TrainError::Stage { epoch, stage, source };

        // (i) real interaction
        for _ in 0..cfg.run.env_steps_per_epoch {
            let a = if env_steps < cfg.run.random_steps {
                uniform.act(&obs, &mut explore_rng)
            } else {
                agent.act(&obs, &mut explore_rng)
            };
            match env.step(&a) {
                Ok(tr) => {
                    obs = tr.next_state.clone();
                    d_env.push(tr).map_err(|e| fail(Stage::Interaction)(e.into()))?;
                }
                Err(EnvError::BlowUp { .. }) => env_blowups += 1,
                Err(e) => return Err(fail(Stage::Interaction)(e.into())),
            }
            env_steps += 1;
            if env.is_done() {
                episode += 1;
                env.reseed(seed::derive(root, "env-episode", &[episode]));
                obs = env.reset();
            }
        }

        // (ii) model training, double dropout, model data
        let mut generated = 0;
        let mut retained = 0;
        let mut thresholds = Vec::new();
        let mut trained = false;
        if d_env.len() >= cfg.model.min_transitions {
            for it in 0..cfg.model.train_iters {
                let path = [epoch as u64, it as u64];
                let out = ens
                    .train(&d_env, &model_settings, seed::derive(root, "model-train", &path))
                    .map_err(|e| fail(Stage::ModelTraining)(e.into()))?;
                let val: Vec<&Transition> = out.validation.iter().map(|&i| d_env.get(i).expect("index in range")).collect();
                ens.compute_biases(&val).map_err(|e| fail(Stage::ModelTraining)(e.into()))?;
                ens.model_dropout(dcfg.beta).map_err(|e| fail(Stage::ModelDropout)(e.into()))?;
                trained = true;

                let batch = generate_rollouts(
                    &ens,
                    &agent,
                    &base_env,
                    &d_env,
                    cfg.rollout.starts.min(d_env.len()),
                    cfg.rollout.rollouts_per_start,
                    cfg.rollout.horizon,
                    PredictMode::Stochastic,
                    seed::derive(root, "rollouts", &path),
                )
                .map_err(|e| fail(Stage::Rollout)(e.into()))?;
                let kept = rollout_dropout(&batch, dcfg.alpha, &dropout_opts).map_err(|e| fail(Stage::Rollout)(e.into()))?;
                for t in kept.transitions() {
                    d_model.push(t.clone()).map_err(|e| fail(Stage::Rollout)(e.into()))?;
                }
                let st = kept.stats();
                generated += st.generated;
                retained += st.retained;
                if st.mean_threshold.is_finite() {
                    thresholds.push(st.mean_threshold);
                }
                if let Some(w) = writers.as_mut() {
                    let out_err = fail(Stage::Output);
                    for r in ens.report_rows(epoch) {
                        write_row(
                            &mut w.ensemble,
                            &EnsembleCsvRow {
                                run_id,
                                epoch,
                                iteration: it,
                                member: r.member,
                                train_nll: r.train_nll,
                                val_nll: r.val_nll,
                                bias: r.bias,
                                retained: r.retained,
                            },
                        )
                        .map_err(|e| out_err(e.into()))?;
                    }
                    write_row(
                        &mut w.rollouts,
                        &RolloutCsvRow {
                            run_id,
                            epoch,
                            iteration: it,
                            groups: st.groups,
                            generated: st.generated,
                            retained: st.retained,
                            mean_threshold: st.mean_threshold,
                            retained_fraction: st.retained_fraction,
                            truncated: st.truncated,
                        },
                    )
                    .map_err(|e| out_err(e.into()))?;
                }
            }
        }

        // (iii) policy optimization on D_model
        let mut update = super::UpdateStats {
            critic_loss: f64::NAN,
            actor_loss: f64::NAN,
            ..Default::default()
        };
        if d_model.len() >= cfg.agent.batch_size {
            update = agent
                .policy_update(
                    &d_model,
                    cfg.agent.updates_per_env_step * cfg.run.env_steps_per_epoch,
                    cfg.agent.batch_size,
                    seed::derive(root, "policy-update", &[epoch as u64]),
                )
                .map_err(|e| fail(Stage::PolicyUpdate)(e.into()))?;
        }

        // (iv) evaluation and bounds
        let eval = evaluate_policy(
            &agent,
            &base_env,
            cfg.run.eval_episodes,
            dcfg.gamma,
            seed::derive(root, "eval", &[epoch as u64]),
        )
        .map_err(|e| fail(Stage::Evaluation)(e.into()))?;
        let bounds = if trained {
            Some(bounds_report(cfg, &dcfg, epoch, &ens, &agent, &base_env, &d_env, &eval.initial_observations, eval.discounted_mean, &dropout_opts).map_err(fail(Stage::Bounds))?)
        } else {
            None
        };

        let nan = f64::NAN;
        let b = bounds.as_ref();
        let val_nlls: Vec<f64> = ens.members().iter().map(|m| m.val_nll()).collect();
        let report = TrainReport {
            run_id: run_id.to_string(),
            epoch,
            env_steps,
            eval_return: eval.mean,
            eval_return_std: eval.std,
            eval_discounted: eval.discounted_mean,
            eval_blowups: eval.blowups,
            d_env_size: d_env.len(),
            d_model_size: d_model.len(),
            rollouts_generated: generated,
            rollouts_retained: retained,
            retained_fraction: if generated == 0 { nan } else { retained as f64 / generated as f64 },
            mean_threshold: if thresholds.is_empty() {
                nan
            } else {
                thresholds.iter().sum::<f64>() / thresholds.len() as f64
            },
            subset_size: ens.subset().len(),
            ensemble_size: ens.len(),
            model_val_nll: val_nlls.iter().sum::<f64>() / val_nlls.len() as f64,
            policy_updates: update.updates,
            critic_loss: update.critic_loss,
            actor_loss: update.actor_loss,
            env_blowups,
            eps_alpha: b.map_or(crate::risk::eps_alpha(&dcfg), |b| b.eps_alpha),
            eps_m: b.map_or(nan, |b| b.eps_m),
            lipschitz_k: b.map_or(nan, |b| b.lipschitz_k),
            k_estimated: b.is_some_and(|b| b.k_estimated),
            d_alpha_beta: b.map_or(nan, |b| b.d_alpha_beta),
            v_env: eval.discounted_mean,
            v_alpha_model: b.map_or(nan, |b| b.v_alpha_model),
            eps_k: b.map_or(nan, |b| b.eps_k),
            eta: b.map_or(nan, |b| b.eta),
        };
        if opts.verbose {
            eprintln!(
                "epoch {:>4}  steps {:>7}  return {:>9.3} ± {:<8.3} D_model {:>6}  kept {:>5.3}  eta {:>9.3}",
                epoch, env_steps, report.eval_return, report.eval_return_std, report.d_model_size, report.retained_fraction, report.eta
            );
        }
        if let Some(w) = writers.as_mut() {
            let out_err = fail(Stage::Output);
            write_row(&mut w.metrics, &report).map_err(|e| out_err(e.into()))?;
            write_row(
                &mut w.timing,
                &TimingRow {
                    run_id,
                    epoch,
                    wall_seconds: started.elapsed().as_secs_f64(),
                },
            )
            .map_err(|e| out_err(e.into()))?;
            w.flush().map_err(|e| out_err(e.into()))?;
            let every = cfg.run.checkpoint_every;
            if every > 0 && (epoch + 1) % every == 0 {
                let dir = w.checkpoints.join(format!("epoch_{}", epoch + 1));
                agent.save(&dir.join("agent")).map_err(|e| out_err(e.into()))?;
                ens.save(&dir.join("ensemble")).map_err(|e| out_err(e.into()))?;
            }
        }
        reports.push(report);
    }

    if let Some(w) = writers.as_mut() {
        let out_err = |source: StageError| TrainError::Stage {
            epoch: cfg.run.epochs,
            stage: Stage::Output,
            source,
        };
        let dir = w.checkpoints.join("final");
        agent.save(&dir.join("agent")).map_err(|e| out_err(e.into()))?;
        ens.save(&dir.join("ensemble")).map_err(|e| out_err(e.into()))?;
        w.flush().map_err(|e| out_err(e.into()))?;
    }
    Ok(TrainOutcome {
        reports,
        agent,
        ensemble: ens,
        env_steps,
    })
}

/// `V_α` on the model is estimated from mean-action rollouts on the
/// retained members, started at the evaluation episodes' initial states and
/// run for the full episode horizon; each start's rollouts form one group
/// and are filtered per trajectory. This puts it on the same footing as the
/// discounted evaluation return it is compared with.
#[allow(clippy::too_many_arguments)]
fn bounds_report(
    cfg: &TrainConfig,
    dcfg: &crate::config::DropoutConfig,
    epoch: usize,
    ens: &EnsembleState,
    agent: &PolicyParams,
    env: &ContinuousEnv,
    d_env: &ReplayBuffer,
    starts: &[Vec<f64>],
    v_env: f64,
    opts: &DropoutOptions,
) -> Result<BoundsReport, StageError> {
    let root = cfg.run.seed;
    let eps_m = estimate_eps_m(ens)?;
    let (k, estimated) = match cfg.run.lipschitz_k {
        Some(k) => (k, false),
        None => {
            let n = d_env.len().min(500);
            let idx = d_env.sample_indices(n, seed::derive(root, "lipschitz-states", &[epoch as u64]))?;
            let states: Vec<Vec<f64>> = idx.iter().map(|&i| d_env.get(i).expect("index in range").state.clone()).collect();
            let est = estimate_lipschitz_k(
                |s| agent.state_value(s),
                &states,
                cfg.run.lipschitz_pairs,
                seed::derive(root, "lipschitz", &[epoch as u64]),
            )?;
            (est.k, true)
        }
    };
    let batch = generate_rollouts_from(
        ens,
        &Greedy(agent),
        env,
        starts,
        cfg.rollout.rollouts_per_start,
        env.horizon(),
        PredictMode::Stochastic,
        seed::derive(root, "bounds-rollouts", &[epoch as u64]),
    )?;
    let traj = DropoutOptions {
        mode: DropoutMode::PerTrajectory,
        ..*opts
    };
    let kept = rollout_dropout(&batch, dcfg.alpha, &traj)?;
    let v_alpha_model = dropout_return_estimate(&kept, dcfg.gamma)?;
    Ok(BoundsReport::new(epoch, dcfg, eps_m, k, estimated, v_env, v_alpha_model)?)
}
