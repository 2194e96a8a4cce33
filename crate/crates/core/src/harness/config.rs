//! Line-based `key = value` experiment configuration.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::TrainConfig;
use crate::perturb::{LabelMode, PerturbConfig, Strategy};
use crate::unlearn::{HbuSolver, ObjectiveKind, UnlearnObjective};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Blobs { n_per_class: usize, k: usize, dim: usize, spread: f64 },
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ServerBehavior {
    HonestUnlearn,
    NoOp,
    OutputSuppression,
    FineTune { epochs: usize, lr: f64 },
    HonestWithMix { mix_ratio: f64 },
}

impl ServerBehavior {
    pub fn label(&self) -> &'static str {
        match self {
            ServerBehavior::HonestUnlearn => "honest",
            ServerBehavior::NoOp => "noop",
            ServerBehavior::OutputSuppression => "suppress",
            ServerBehavior::FineTune { .. } => "finetune",
            ServerBehavior::HonestWithMix { .. } => "mix",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    None,
    Esr(Vec<f64>),
    D(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSpec,
    pub layers: Vec<usize>,
    pub train: TrainConfig,
    pub esr: f64,
    pub heldout_fraction: f64,
    pub target_count: usize,
    pub conf_threshold: f64,
    pub perturb: PerturbConfig,
    pub objective: UnlearnObjective,
    pub behavior: ServerBehavior,
    pub tau: f64,
    pub beta_override: Option<f64>,
    pub seed: u64,
    pub sweep: SweepAxis,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "scenario".to_string(),
            dataset: DatasetSpec::Blobs { n_per_class: 200, k: 10, dim: 8, spread: 0.12 },
            layers: vec![8, 32, 10],
            train: TrainConfig::default(),
            esr: 0.02,
            heldout_fraction: 0.2,
            target_count: 50,
            conf_threshold: 0.9,
            perturb: PerturbConfig::default(),
            objective: UnlearnObjective::default(),
            behavior: ServerBehavior::HonestUnlearn,
            tau: 0.05,
            beta_override: None,
            seed: 0,
            sweep: SweepAxis::None,
        }
    }
}

impl ExperimentConfig {
    pub fn objective_label(&self) -> &'static str {
        match self.objective.kind {
            ObjectiveKind::GradAscent => "grad_ascent",
            ObjectiveKind::Hbu { .. } => "hbu",
            ObjectiveKind::SalUn { .. } => "salun",
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        // raw fields gathered first so key order does not matter
        let mut hbu_damping = 1e-2;
        let mut hbu_solver = HbuSolver::Explicit;
        let mut hbu_cg_max_iters = 500usize;
        let mut hbu_cg_tol = 1e-10;
        let mut salun_sparsity = 0.5;
        let mut objective_kind = "grad_ascent".to_string();
        let mut strategy_kind = "descent".to_string();
        let mut restarts = 5usize;
        let mut inner_steps = 50usize;
        let mut behavior_kind = "honest".to_string();
        let mut finetune_epochs = 5usize;
        let mut finetune_lr = 0.05;
        let mut mix_ratio = 1.0;
        let mut dataset_kind = "blobs".to_string();
        let mut blobs = (200usize, 10usize, 8usize, 0.12f64);
        let mut idx_paths: (Option<PathBuf>, Option<PathBuf>) = (None, None);
        let mut sweep_axis = "none".to_string();
        let mut sweep_grid: Vec<f64> = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| Error::config(format!("line {}: bad {what}: {value}", lineno + 1));
            macro_rules! parse {
                ($ty:ty, $what:expr) => {
                    value.parse::<$ty>().map_err(|_| bad($what))?
                };
            }
            match key {
                "name" => cfg.name = value.to_string(),
                "seed" => cfg.seed = parse!(u64, "seed"),
                "tau" => cfg.tau = parse!(f64, "tau"),
                "esr" => cfg.esr = parse!(f64, "esr"),
                "heldout_fraction" => cfg.heldout_fraction = parse!(f64, "heldout_fraction"),
                "target_count" => cfg.target_count = parse!(usize, "target_count"),
                "conf_threshold" => cfg.conf_threshold = parse!(f64, "conf_threshold"),
                "beta_override" => cfg.beta_override = Some(parse!(f64, "beta_override")),
                "layers" => {
                    cfg.layers = value
                        .split(',')
                        .map(|s| s.trim().parse::<usize>().map_err(|_| bad("layers")))
                        .collect::<Result<_>>()?
                }
                "dataset" => dataset_kind = value.to_string(),
                "blobs_per_class" => blobs.0 = parse!(usize, "blobs_per_class"),
                "blobs_classes" => blobs.1 = parse!(usize, "blobs_classes"),
                "blobs_dim" => blobs.2 = parse!(usize, "blobs_dim"),
                "blobs_spread" => blobs.3 = parse!(f64, "blobs_spread"),
                "idx_images" => idx_paths.0 = Some(PathBuf::from(value)),
                "idx_labels" => idx_paths.1 = Some(PathBuf::from(value)),
                "train_lr" => cfg.train.learning_rate = parse!(f64, "train_lr"),
                "train_epochs" => cfg.train.epochs = parse!(usize, "train_epochs"),
                "train_batch" => cfg.train.batch_size = parse!(usize, "train_batch"),
                "train_momentum" => cfg.train.momentum = parse!(f64, "train_momentum"),
                "perturb_d" => cfg.perturb.d = parse!(f64, "perturb_d"),
                "perturb_eta" => cfg.perturb.eta = parse!(f64, "perturb_eta"),
                "perturb_iters" => cfg.perturb.n = parse!(usize, "perturb_iters"),
                "perturb_strategy" => strategy_kind = value.to_string(),
                "perturb_restarts" => restarts = parse!(usize, "perturb_restarts"),
                "perturb_inner_steps" => inner_steps = parse!(usize, "perturb_inner_steps"),
                "perturb_label_mode" => {
                    cfg.perturb.label_mode = match value {
                        "targeted" => LabelMode::Targeted,
                        "untargeted" => LabelMode::Untargeted,
                        _ => return Err(bad("perturb_label_mode")),
                    }
                }
                "objective" => objective_kind = value.to_string(),
                "objective_steps" => cfg.objective.steps = parse!(usize, "objective_steps"),
                "objective_lr" => cfg.objective.learning_rate = parse!(f64, "objective_lr"),
                "hbu_damping" => hbu_damping = parse!(f64, "hbu_damping"),
                "hbu_solver" => {
                    hbu_solver = match value {
                        "explicit" => HbuSolver::Explicit,
                        "cg" => HbuSolver::ConjugateGradient { max_iters: hbu_cg_max_iters, tol: hbu_cg_tol },
                        _ => return Err(bad("hbu_solver")),
                    }
                }
                "hbu_cg_max_iters" => hbu_cg_max_iters = parse!(usize, "hbu_cg_max_iters"),
                "hbu_cg_tol" => hbu_cg_tol = parse!(f64, "hbu_cg_tol"),
                "salun_sparsity" => salun_sparsity = parse!(f64, "salun_sparsity"),
                "behavior" => behavior_kind = value.to_string(),
                "finetune_epochs" => finetune_epochs = parse!(usize, "finetune_epochs"),
                "finetune_lr" => finetune_lr = parse!(f64, "finetune_lr"),
                "mix_ratio" => mix_ratio = parse!(f64, "mix_ratio"),
                "sweep_axis" => sweep_axis = value.to_string(),
                "sweep_grid" => {
                    sweep_grid = value
                        .split(',')
                        .map(|s| s.trim().parse::<f64>().map_err(|_| bad("sweep_grid")))
                        .collect::<Result<_>>()?
                }
                other => {
                    return Err(Error::config(format!("line {}: unknown key `{other}`", lineno + 1)));
                }
            }
        }

        cfg.dataset = match dataset_kind.as_str() {
            "blobs" => DatasetSpec::Blobs {
                n_per_class: blobs.0,
                k: blobs.1,
                dim: blobs.2,
                spread: blobs.3,
            },
            "idx" => {
                let images = idx_paths.0.ok_or_else(|| Error::config("idx dataset needs idx_images"))?;
                let labels = idx_paths.1.ok_or_else(|| Error::config("idx dataset needs idx_labels"))?;
                DatasetSpec::Idx { images, labels }
            }
            other => return Err(Error::config(format!("unknown dataset `{other}`"))),
        };
        cfg.perturb.strategy = match strategy_kind.as_str() {
            "descent" => Strategy::Descent,
            "restarts" => Strategy::Restarts { restarts, inner_steps },
            other => return Err(Error::config(format!("unknown perturb_strategy `{other}`"))),
        };
        cfg.objective.kind = match objective_kind.as_str() {
            "grad_ascent" => ObjectiveKind::GradAscent,
            "hbu" => {
                // refresh CG settings in case they were set after hbu_solver
                let solver = match hbu_solver {
                    HbuSolver::Explicit => HbuSolver::Explicit,
                    HbuSolver::ConjugateGradient { .. } => {
                        HbuSolver::ConjugateGradient { max_iters: hbu_cg_max_iters, tol: hbu_cg_tol }
                    }
                };
                ObjectiveKind::Hbu { damping: hbu_damping, solver }
            }
            "salun" => ObjectiveKind::SalUn { sparsity: salun_sparsity },
            other => return Err(Error::config(format!("unknown objective `{other}`"))),
        };
        cfg.behavior = match behavior_kind.as_str() {
            "honest" => ServerBehavior::HonestUnlearn,
            "noop" => ServerBehavior::NoOp,
            "suppress" => ServerBehavior::OutputSuppression,
            "finetune" => ServerBehavior::FineTune { epochs: finetune_epochs, lr: finetune_lr },
            "mix" => ServerBehavior::HonestWithMix { mix_ratio },
            other => return Err(Error::config(format!("unknown behavior `{other}`"))),
        };
        cfg.sweep = match sweep_axis.as_str() {
            "none" => SweepAxis::None,
            "esr" => SweepAxis::Esr(sweep_grid.clone()),
            "d" => SweepAxis::D(sweep_grid.clone()),
            other => return Err(Error::config(format!("unknown sweep_axis `{other}`"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(Error::config("need at least 2 layer sizes"));
        }
        if !(self.tau > 0.0 && self.tau <= 0.5) {
            return Err(Error::config("tau must be in (0, 0.5]"));
        }
        if !(self.esr > 0.0 && self.esr < 1.0) {
            return Err(Error::config("esr must be in (0,1)"));
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(Error::config("heldout_fraction must be in (0,1)"));
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(Error::config("conf_threshold must be in [0,1]"));
        }
        if let ServerBehavior::HonestWithMix { mix_ratio } = self.behavior {
            if !(0.0..=1.0).contains(&mix_ratio) {
                return Err(Error::config("mix_ratio must be in [0,1]"));
            }
        }
        self.perturb.validate()?;
        self.objective.validate()?;
        Ok(())
    }
}
