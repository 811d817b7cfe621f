//! Experiment configuration read from TOML. Unknown keys are rejected and
//! every value is checked before any command does work.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use deepbekk::data::{Dgp, SimulationSpec, Splits, ValueKind};
use deepbekk::estimation::{FitOptions, LstmInit, StartRule, TrainConfig};
use deepbekk::evaluation::{McsConfig, PortfolioSpec};
use deepbekk::garch::{DccParams, ScalarBekkParams, UnivariateGarchParams};
use deepbekk::linalg::{cholesky, Matrix};
use deepbekk::lstm::LstmWeights;
use deepbekk::lstm_bekk::LstmBekkParams;
use deepbekk::ModelKind;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds simulation, weight initialisation, dropout, subpanel draws and
    /// the bootstrap.
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub backtest: BacktestConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Csv {
        path: PathBuf,
        #[serde(default)]
        values: ValuesCfg,
        train_end: Option<usize>,
        val_end: Option<usize>,
    },
    Simulate(SimulateConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValuesCfg {
    #[default]
    Returns,
    Prices,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    Iid,
    ScalarBekk,
    Dcc,
    LstmBekk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub dgp: DgpKind,
    pub n: usize,
    pub t: usize,
    /// Per-asset variances; all ones when absent.
    pub variances: Option<Vec<f64>>,
    /// Common pairwise correlation of the long-run covariance.
    #[serde(default = "defaults::correlation")]
    pub correlation: f64,
    #[serde(default = "defaults::a")]
    pub a: f64,
    #[serde(default = "defaults::b")]
    pub b: f64,
    #[serde(default = "defaults::a")]
    pub garch_alpha: f64,
    #[serde(default = "defaults::b")]
    pub garch_beta: f64,
    #[serde(default = "defaults::layers")]
    pub lstm_layers: usize,
    #[serde(default = "defaults::one")]
    pub lstm_projection_scale: f64,
    pub train_end: Option<usize>,
    pub val_end: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartCfg {
    #[default]
    Grid,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LstmInitCfg {
    #[default]
    Xavier,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "defaults::models")]
    pub models: Vec<String>,
    #[serde(default = "defaults::layers")]
    pub layers: usize,
    #[serde(default = "defaults::dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub lstm_init: LstmInitCfg,
    #[serde(default = "defaults::one")]
    pub projection_scale: f64,
    #[serde(default)]
    pub freeze_lstm: bool,
    #[serde(default)]
    pub start: StartCfg,
    #[serde(default = "defaults::start_a")]
    pub start_a: f64,
    #[serde(default = "defaults::start_b")]
    pub start_b: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            models: defaults::models(),
            layers: defaults::layers(),
            dropout: defaults::dropout(),
            lstm_init: LstmInitCfg::default(),
            projection_scale: 1.0,
            freeze_lstm: false,
            start: StartCfg::default(),
            start_a: defaults::start_a(),
            start_b: defaults::start_b(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub convergence_tol: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            rmsprop_decay: d.rmsprop_decay,
            epsilon: d.epsilon,
            clip_norm: d.clip_norm,
            max_epochs: d.max_epochs,
            patience: d.patience,
            convergence_tol: d.convergence_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Model the paired t-tests are taken against.
    pub reference: String,
    pub portfolio_count: usize,
    pub portfolio_size: usize,
    pub mcs_level: f64,
    pub block_mean: f64,
    pub bootstrap_resamples: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        let m = McsConfig::default();
        Self {
            reference: ModelKind::LstmBekk.to_string(),
            portfolio_count: 50,
            portfolio_size: 10,
            mcs_level: m.level,
            block_mean: m.block_mean,
            bootstrap_resamples: m.resamples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BacktestConfig {
    pub levels: Vec<f64>,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            levels: deepbekk::portfolio::DEFAULT_LEVELS.to_vec(),
        }
    }
}

mod defaults {
    pub fn correlation() -> f64 {
        0.3
    }
    pub fn a() -> f64 {
        0.05
    }
    pub fn b() -> f64 {
        0.90
    }
    pub fn layers() -> usize {
        3
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn dropout() -> f64 {
        0.1
    }
    pub fn start_a() -> f64 {
        0.10
    }
    pub fn start_b() -> f64 {
        0.80
    }
    pub fn models() -> Vec<String> {
        deepbekk::ModelKind::ALL.iter().map(|k| k.to_string()).collect()
    }
}

/// Where the panel comes from, after validation.
#[derive(Debug, Clone)]
pub enum DataSource {
    Csv {
        path: PathBuf,
        kind: ValueKind,
        splits: Option<Splits>,
    },
    Simulate {
        spec: SimulationSpec,
        splits: Option<Splits>,
    },
}

/// A validated configuration with every library-level setting built.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub hash: [u8; 32],
    pub output_dir: PathBuf,
    pub data: DataSource,
    pub models: Vec<ModelKind>,
    pub train: TrainConfig,
    pub fit: FitOptions,
    pub mcs: McsConfig,
    pub portfolios: PortfolioSpec,
    pub reference: ModelKind,
    pub levels: Vec<f64>,
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| cfg_err(format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the normalised configuration.
    pub fn hash(&self) -> [u8; 32] {
        let text = toml::to_string(self).expect("configuration serialises");
        Sha256::digest(text.as_bytes()).into()
    }

    /// Builds and checks every setting; relative paths resolve against `base`.
    pub fn resolve(self, base: &Path) -> Result<Resolved, CliError> {
        let hash = self.hash();
        let models = self
            .model
            .models
            .iter()
            .map(|m| m.parse::<ModelKind>().map_err(|e| cfg_err(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        if models.is_empty() {
            return Err(cfg_err("model.models must name at least one model"));
        }
        let mut seen = models.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != models.len() {
            return Err(cfg_err("model.models lists a model twice"));
        }
        let reference: ModelKind = self.evaluation.reference.parse().map_err(|e: deepbekk::Error| cfg_err(e.to_string()))?;

        let t = &self.train;
        let train = TrainConfig {
            learning_rate: t.learning_rate,
            rmsprop_decay: t.rmsprop_decay,
            epsilon: t.epsilon,
            clip_norm: t.clip_norm,
            max_epochs: t.max_epochs,
            patience: t.patience,
            convergence_tol: t.convergence_tol,
            seed: self.seed,
        };
        train.validate().map_err(|e| cfg_err(format!("[train] {e}")))?;

        let m = &self.model;
        let fit = FitOptions {
            start: match m.start {
                StartCfg::Grid => StartRule::Grid,
                StartCfg::Fixed => StartRule::Fixed { a: m.start_a, b: m.start_b },
            },
            layers: m.layers,
            dropout: m.dropout,
            lstm_init: match m.lstm_init {
                LstmInitCfg::Xavier => LstmInit::Xavier,
                LstmInitCfg::Zero => LstmInit::Zero,
            },
            lstm_weights: None,
            projection_scale: m.projection_scale,
            freeze_lstm: m.freeze_lstm,
        };
        fit.validate().map_err(|e| cfg_err(format!("[model] {e}")))?;

        let e = &self.evaluation;
        let mcs = McsConfig {
            level: e.mcs_level,
            block_mean: e.block_mean,
            resamples: e.bootstrap_resamples,
            seed: self.seed,
        };
        mcs.validate().map_err(|err| cfg_err(format!("[evaluation] {err}")))?;
        if e.portfolio_count == 0 || e.portfolio_size == 0 {
            return Err(cfg_err("[evaluation] portfolio_count and portfolio_size must be positive"));
        }
        let portfolios = PortfolioSpec {
            count: e.portfolio_count,
            size: e.portfolio_size,
            seed: self.seed,
        };

        for &alpha in &self.backtest.levels {
            if !(alpha > 0.0 && alpha < 0.5) {
                return Err(cfg_err(format!("[backtest] level {alpha} outside (0, 0.5)")));
            }
        }
        if self.backtest.levels.is_empty() {
            return Err(cfg_err("[backtest] levels must not be empty"));
        }

        let data = match &self.data {
            DataConfig::Csv {
                path,
                values,
                train_end,
                val_end,
            } => DataSource::Csv {
                path: base.join(path),
                kind: match values {
                    ValuesCfg::Returns => ValueKind::Returns,
                    ValuesCfg::Prices => ValueKind::Prices,
                },
                splits: splits(*train_end, *val_end)?,
            },
            DataConfig::Simulate(sim) => DataSource::Simulate {
                spec: simulation_spec(sim, self.seed)?,
                splits: splits(sim.train_end, sim.val_end)?,
            },
        };

        Ok(Resolved {
            hash,
            output_dir: base.join(&self.output_dir),
            levels: self.backtest.levels.clone(),
            data,
            models,
            train,
            fit,
            mcs,
            portfolios,
            reference,
        })
    }
}

fn splits(train_end: Option<usize>, val_end: Option<usize>) -> Result<Option<Splits>, CliError> {
    match (train_end, val_end) {
        (None, None) => Ok(None),
        (Some(train_end), Some(val_end)) => Ok(Some(Splits { train_end, val_end })),
        _ => Err(cfg_err("train_end and val_end must be given together")),
    }
}

/// `D^{1/2} R D^{1/2}` with equicorrelation `R`.
fn long_run_covariance(sim: &SimulateConfig) -> Result<(Matrix, Matrix), CliError> {
    let n = sim.n;
    let variances = sim.variances.clone().unwrap_or_else(|| vec![1.0; n]);
    if variances.len() != n {
        return Err(cfg_err(format!("[data] {} variances given for n = {n}", variances.len())));
    }
    if variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(cfg_err("[data] variances must be positive"));
    }
    let rho = sim.correlation;
    let mut corr = Matrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                corr.set(i, j, rho);
            }
        }
    }
    cholesky(&corr).map_err(|_| cfg_err(format!("[data] correlation {rho} does not give a positive definite matrix")))?;
    let mut cov = corr.clone();
    for i in 0..n {
        for j in 0..n {
            cov.set(i, j, corr.get(i, j) * (variances[i] * variances[j]).sqrt());
        }
    }
    Ok((cov, corr))
}

fn simulation_spec(sim: &SimulateConfig, seed: u64) -> Result<SimulationSpec, CliError> {
    if sim.n == 0 {
        return Err(cfg_err("[data] n must be positive"));
    }
    let constraint = |e: deepbekk::Error| cfg_err(format!("[data] {e}"));
    let (cov, corr) = long_run_covariance(sim)?;
    let static_c = |a: f64, b: f64| {
        deepbekk::garch::check_persistence(a, b).map_err(constraint)?;
        cholesky(&cov.scale(1.0 - a - b)).map_err(constraint)
    };
    let dgp = match sim.dgp {
        DgpKind::Iid => Dgp::IidGaussian { cov },
        DgpKind::ScalarBekk => Dgp::ScalarBekk(ScalarBekkParams::new(static_c(sim.a, sim.b)?, sim.a, sim.b).map_err(constraint)?),
        DgpKind::Dcc => {
            let variances = cov.diag();
            let garch = variances
                .iter()
                .map(|v| {
                    UnivariateGarchParams::new(
                        (1.0 - sim.garch_alpha - sim.garch_beta) * v,
                        sim.garch_alpha,
                        sim.garch_beta,
                    )
                })
                .collect::<deepbekk::Result<Vec<_>>>()
                .map_err(constraint)?;
            Dgp::Dcc(DccParams::new(garch, sim.a, sim.b, corr).map_err(constraint)?)
        }
        DgpKind::LstmBekk => {
            let c = static_c(sim.a, sim.b)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            let mut lstm = LstmWeights::xavier(sim.n, sim.lstm_layers, &mut rng).map_err(constraint)?;
            if !sim.lstm_projection_scale.is_finite() {
                return Err(cfg_err("[data] lstm_projection_scale must be finite"));
            }
            lstm.proj_w
                .as_mut_slice()
                .iter_mut()
                .for_each(|x| *x *= sim.lstm_projection_scale);
            Dgp::LstmBekk(LstmBekkParams::new(c, sim.a, sim.b, lstm).map_err(constraint)?)
        }
    };
    let spec = SimulationSpec { dgp, t: sim.t, seed };
    spec.dgp.validate().map_err(constraint)?;
    if sim.t < deepbekk::data::MIN_ROWS {
        return Err(cfg_err(format!("[data] t = {} is below the minimum of {}", sim.t, deepbekk::data::MIN_ROWS)));
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "out"
[data]
source = "simulate"
dgp = "iid"
n = 2
t = 50
"#;

    #[test]
    fn minimal_config_resolves() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        let r = cfg.resolve(Path::new("/tmp")).unwrap();
        assert_eq!(r.models, ModelKind::ALL.to_vec());
        assert_eq!(r.output_dir, Path::new("/tmp/out"));
        assert_eq!(r.train.patience, 10);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{MINIMAL}\n[train]\nlearning_rat = 0.1\n");
        assert!(matches!(ExperimentConfig::parse(&text), Err(CliError::Config(_))));
        let text = MINIMAL.replace("n = 2", "n = 2\nbogus = 1");
        assert!(ExperimentConfig::parse(&text).is_err());
    }

    #[test]
    fn non_stationary_dgp_rejected() {
        let text = MINIMAL.replace("dgp = \"iid\"", "dgp = \"scalar_bekk\"\na = 0.2\nb = 0.8");
        let err = ExperimentConfig::parse(&text).unwrap().resolve(Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("stationary"), "{err}");
    }

    #[test]
    fn hash_ignores_formatting() {
        let a = ExperimentConfig::parse(MINIMAL).unwrap();
        let b = ExperimentConfig::parse(&MINIMAL.replace("n = 2", "n    =   2  # two assets")).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::parse(&MINIMAL.replace("n = 2", "n = 3")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }
}
