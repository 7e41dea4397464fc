use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{evaluate_policy, mbdp_train, AgentError, PolicyParams, TrainError, TrainOptions};
use crate::config::TrainConfig;
use crate::envs::{ContinuousEnv, EnvKind, PerturbationConfig};
use crate::seed;

/// Mean evaluation return per `(c_mass, c_friction)` cell; rows follow
/// `masses`, columns follow `frictions`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub masses: Vec<f64>,
    pub frictions: Vec<f64>,
    pub returns: Vec<Vec<f64>>,
}

impl GridResult {
    pub fn mean(&self) -> f64 {
        let all: Vec<f64> = self.returns.iter().flatten().copied().collect();
        all.iter().sum::<f64>() / all.len() as f64
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.returns[i][j]
    }

    /// Heat-map matrix: a header of friction coefficients, then one row per
    /// mass coefficient.
    pub fn write_csv(&self, path: &Path, run_id: &str) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "run_id,c_mass\\c_friction")?;
        for c in &self.frictions {
            write!(f, ",{c}")?;
        }
        writeln!(f)?;
        for (m, row) in self.masses.iter().zip(&self.returns) {
            write!(f, "{run_id},{m}")?;
            for v in row {
                write!(f, ",{v}")?;
            }
            writeln!(f)?;
        }
        f.flush()
    }
}

/// Evaluate a fixed policy on every perturbed copy of the environment,
/// without adaptation. Every cell uses the same episode seeds.
pub fn robustness_grid(
    agent: &PolicyParams,
    kind: EnvKind,
    masses: &[f64],
    frictions: &[f64],
    episodes: usize,
    gamma: f64,
    seed: u64,
) -> Result<GridResult, AgentError> {
    let base = ContinuousEnv::new(kind, seed::derive(seed, "grid-env", &[]));
    let mut returns = Vec::with_capacity(masses.len());
    for &m in masses {
        let mut row = Vec::with_capacity(frictions.len());
        for &c in frictions {
            let env = base.perturb(PerturbationConfig::new(m, c)?)?;
            row.push(evaluate_policy(agent, &env, episodes, gamma, seed)?.mean);
        }
        returns.push(row);
    }
    Ok(GridResult {
        masses: masses.to_vec(),
        frictions: frictions.to_vec(),
        returns,
    })
}

/// One dropout configuration of the four-way comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Variant {
    pub name: &'static str,
    pub alpha: f64,
    pub beta: f64,
}

impl Variant {
    /// No dropout, rollout dropout only, model dropout only, both.
    pub fn four(alpha: f64, beta: f64) -> [Variant; 4] {
        [
            Variant {
                name: "no-dropout",
                alpha: 0.0,
                beta: 0.0,
            },
            Variant {
                name: "alpha-only",
                alpha,
                beta: 0.0,
            },
            Variant {
                name: "beta-only",
                alpha: 0.0,
                beta,
            },
            Variant { name: "both", alpha, beta },
        ]
    }
}

fn grid_seed(cfg: &TrainConfig) -> u64 {
    seed::derive(cfg.run.seed, "robustness-grid", &[])
}

/// Train each of the four variants from `cfg` (same seed) and evaluate each
/// on the perturbation grid. With `out_dir`, every variant's training run
/// lands in `<out_dir>/<name>/` and its matrix in `<out_dir>/grid_<name>.csv`.
pub fn four_variant_grids(
    cfg: &TrainConfig,
    masses: &[f64],
    frictions: &[f64],
    out_dir: Option<&Path>,
    run_id: &str,
) -> Result<Vec<(Variant, GridResult)>, TrainError> {
    let kind = cfg.env_kind()?;
    let mut out = Vec::new();
    for v in Variant::four(cfg.dropout.alpha, cfg.dropout.beta) {
        let mut c = cfg.clone();
        c.dropout.alpha = v.alpha;
        c.dropout.beta = v.beta;
        let opts = TrainOptions {
            out_dir: out_dir.map(|d| d.join(v.name)),
            run_id: run_id.to_string(),
            verbose: false,
        };
        let trained = mbdp_train(&c, &opts)?;
        let grid = robustness_grid(&trained.agent, kind, masses, frictions, c.run.eval_episodes, c.dropout.gamma, grid_seed(&c))
            .map_err(|e| grid_err(c.run.epochs, e))?;
        if let Some(d) = out_dir {
            grid.write_csv(&d.join(format!("grid_{}.csv", v.name)), run_id)
                .map_err(|e| grid_err(c.run.epochs, AgentError::Io(e)))?;
        }
        out.push((v, grid));
    }
    Ok(out)
}

fn grid_err(epoch: usize, e: AgentError) -> TrainError {
    TrainError::Stage {
        epoch,
        stage: super::Stage::Evaluation,
        source: e.into(),
    }
}

/// One cell of an ablation sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub run_id: String,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub baseline: bool,
    /// Final unperturbed evaluation return (efficiency).
    pub final_return: f64,
    /// Mean return over the perturbation grid (robustness).
    pub robust_return: f64,
    /// Failure message; the numeric columns are NaN when set.
    pub error: String,
}

/// Train one cell per `(α, β, seed)` in the cartesian product, adding an
/// `α = β = 0` baseline per seed when `baseline` is set. Failing cells are
/// recorded and the sweep continues.
#[allow(clippy::too_many_arguments)]
pub fn ablation_sweep(
    cfg: &TrainConfig,
    alphas: &[f64],
    betas: &[f64],
    seeds: &[u64],
    baseline: bool,
    masses: &[f64],
    frictions: &[f64],
    out_dir: Option<&Path>,
    run_id: &str,
) -> Vec<SweepRow> {
    let mut cells: Vec<(f64, f64, u64, bool)> = Vec::new();
    for &s in seeds {
        if baseline {
            cells.push((0.0, 0.0, s, true));
        }
        for &a in alphas {
            for &b in betas {
                cells.push((a, b, s, false));
            }
        }
    }
    cells
        .into_iter()
        .map(|(alpha, beta, s, is_base)| {
            let mut c = cfg.clone();
            c.dropout.alpha = alpha;
            c.dropout.beta = beta;
            c.run.seed = s;
            let dir: Option<PathBuf> = out_dir.map(|d| d.join(format!("a{alpha}_b{beta}_s{s}{}", if is_base { "_base" } else { "" })));
            let result = (|| -> Result<(f64, f64), TrainError> {
                let opts = TrainOptions {
                    out_dir: dir.clone(),
                    run_id: run_id.to_string(),
                    verbose: false,
                };
                let kind = c.env_kind()?;
                let trained = mbdp_train(&c, &opts)?;
                let final_return = trained.reports.last().map_or(f64::NAN, |r| r.eval_return);
                let grid = robustness_grid(&trained.agent, kind, masses, frictions, c.run.eval_episodes, c.dropout.gamma, grid_seed(&c))
                    .map_err(|e| grid_err(c.run.epochs, e))?;
                Ok((final_return, grid.mean()))
            })();
            let (final_return, robust_return, error) = match result {
                Ok((f, r)) => (f, r, String::new()),
                Err(e) => (f64::NAN, f64::NAN, e.to_string()),
            };
            SweepRow {
                run_id: run_id.to_string(),
                alpha,
                beta,
                seed: s,
                baseline: is_base,
                final_return,
                robust_return,
                error,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::SacSettings;

    #[test]
    fn unit_grid_matches_direct_evaluation() {
        let agent = PolicyParams::new(3, 1, 2.0, &[8], SacSettings::default(), 0).unwrap();
        let g = robustness_grid(&agent, EnvKind::Pendulum, &[1.0], &[1.0], 3, 0.99, 4).unwrap();
        let env = ContinuousEnv::new(EnvKind::Pendulum, seed::derive(4, "grid-env", &[]));
        let direct = evaluate_policy(&agent, &env, 3, 0.99, 4).unwrap().mean;
        assert_eq!(g.get(0, 0), direct);
    }

    #[test]
    fn grid_shape_and_csv() {
        let agent = PolicyParams::new(4, 2, 1.0, &[8], SacSettings::default(), 0).unwrap();
        let cs = [0.8, 1.0, 1.2];
        let g = robustness_grid(&agent, EnvKind::PointMass, &cs, &cs, 1, 0.99, 0).unwrap();
        assert_eq!(g.returns.len(), 3);
        assert!(g.returns.iter().all(|r| r.len() == 3 && r.iter().all(|v| v.is_finite())));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        g.write_csv(&p, "x").unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "run_id,c_mass\\c_friction,0.8,1,1.2");
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("x,1,"));
    }
}
