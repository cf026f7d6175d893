//! Experiment harness: target functions, dataset builders, the flat
//! key-value run configuration, and the hierarchical-vs-direct comparison
//! runner with plot-ready CSV emission.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diagnostics::{c_opt, generalization_estimate, stability_constant, BoxSampler};
use crate::error::{Error, Result};
use crate::growth::{
    adaptive_train, derive_seed, GrowthConfig, GrowthSite, StepRule,
};
use crate::loss::{LossSpec, TrainingSet};
use crate::net::{eval_layers, Activation, Architecture, WeightSet};
use crate::optim::{train, FrozenMask, OptimConfig};
use crate::trace::{
    aggregate_median, AggregateRow, Mode, RunMeta, RunTrace, TraceRow,
};

/// Built-in target functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    /// `(x + y)² / 2` on the unit square.
    Sq2d,
    /// `(x + y + z)² / 3` on the unit cube.
    Sq3d,
    /// `(x + y)^{2/3}` on the unit square.
    Pow23_2d,
    /// `(Σ_{i=1}^{10} x_i)² / 10` on the 10-dimensional unit cube.
    Sq10d,
    /// The realization of a seeded random network; enables exact
    /// representability oracles.
    Planted,
    /// Load a training CSV from disk; no closed-form oracle.
    Csv,
}

impl TargetKind {
    pub fn id(&self) -> &'static str {
        match self {
            TargetKind::Sq2d => "sq2d",
            TargetKind::Sq3d => "sq3d",
            TargetKind::Pow23_2d => "pow23_2d",
            TargetKind::Sq10d => "sq10d",
            TargetKind::Planted => "planted",
            TargetKind::Csv => "csv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sq2d" => Ok(TargetKind::Sq2d),
            "sq3d" => Ok(TargetKind::Sq3d),
            "pow23_2d" => Ok(TargetKind::Pow23_2d),
            "sq10d" => Ok(TargetKind::Sq10d),
            "planted" => Ok(TargetKind::Planted),
            "csv" => Ok(TargetKind::Csv),
            other => Err(Error::Config(format!("unknown target '{other}'"))),
        }
    }

    pub fn input_dim(&self) -> Option<usize> {
        match self {
            TargetKind::Sq2d | TargetKind::Pow23_2d => Some(2),
            TargetKind::Sq3d => Some(3),
            TargetKind::Sq10d => Some(10),
            TargetKind::Planted | TargetKind::Csv => None,
        }
    }
}

/// Sampling scheme for built-in targets on the unit cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Tensor grid with endpoints included; supported for dimensions up to 3.
    Grid,
    /// Uniform random samples drawn with the dataset seed.
    UniformRandom,
}

impl Scheme {
    pub fn id(&self) -> &'static str {
        match self {
            Scheme::Grid => "grid",
            Scheme::UniformRandom => "uniform-random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Scheme::Grid),
            "uniform-random" | "random" => Ok(Scheme::UniformRandom),
            other => Err(Error::Config(format!("unknown scheme '{other}'"))),
        }
    }
}

/// One token of the direct-architecture template, e.g. `2,w,1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectTok {
    Fixed(usize),
    Width,
}

/// Full experiment description; see the crate README for the configuration
/// file format and the documented defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub target: TargetKind,
    pub csv_path: Option<PathBuf>,
    pub planted_widths: Vec<usize>,
    pub planted_seed: u64,
    pub samples: usize,
    pub scheme: Scheme,
    pub dataset_seed: u64,
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
    pub delta_relu: f64,
    pub start_widths: Vec<usize>,
    pub star_widths: Vec<usize>,
    pub growth_site: GrowthSite,
    pub rounds: usize,
    pub l_max: usize,
    pub kappa: f64,
    pub search_restarts: usize,
    pub search_ascent_steps: usize,
    pub step_rule: StepRule,
    pub copt_exit: f64,
    /// Optimizer settings; `max_epochs` is taken from `full_epochs` and
    /// `inner_epochs` per phase.
    pub optim: OptimConfig,
    /// Epoch budget of the full-training phase of each outer round.
    pub full_epochs: usize,
    /// Epoch budget per inner-loop training phase.
    pub inner_epochs: usize,
    pub direct_arch: Vec<DirectTok>,
    pub direct_widths: Vec<usize>,
    /// Epoch budget per direct run; 0 matches the hierarchical median total.
    pub direct_epochs: usize,
    pub gen_samples: usize,
    pub diag_restarts: usize,
    pub diag_ascent_steps: usize,
    /// Disable to skip the per-round diagnostic columns (written as NaN).
    pub diagnostics: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            target: TargetKind::Sq2d,
            csv_path: None,
            planted_widths: vec![2, 5, 1],
            planted_seed: 999,
            samples: 1024,
            scheme: Scheme::Grid,
            dataset_seed: 42,
            seeds: vec![0, 1, 2, 3, 4],
            modes: vec![Mode::Hierarchical, Mode::Direct],
            delta_relu: 0.01,
            start_widths: vec![2, 2, 1],
            star_widths: vec![2, 3, 1],
            growth_site: GrowthSite::Whole,
            rounds: 6,
            l_max: 5,
            kappa: 0.9,
            search_restarts: 48,
            search_ascent_steps: 150,
            step_rule: StepRule::ExactLineSearch,
            copt_exit: 1e-3,
            optim: OptimConfig::default(),
            full_epochs: 2000,
            inner_epochs: 400,
            direct_arch: vec![DirectTok::Fixed(2), DirectTok::Width, DirectTok::Fixed(1)],
            direct_widths: vec![10, 20, 40],
            direct_epochs: 0,
            gen_samples: 100_000,
            diag_restarts: 12,
            diag_ascent_steps: 60,
            diagnostics: true,
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn parse_usize_list(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("bad integer list entry '{t}': {e}")))
        })
        .collect()
}

fn parse_u64_list(v: &str) -> Result<Vec<u64>> {
    v.split(',')
        .map(|t| {
            t.trim()
                .parse::<u64>()
                .map_err(|e| Error::Config(format!("bad seed '{t}': {e}")))
        })
        .collect()
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.trim()
        .parse::<f64>()
        .map_err(|e| Error::Config(format!("bad value for {key}: {e}")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse::<usize>()
        .map_err(|e| Error::Config(format!("bad value for {key}: {e}")))
}

impl ExperimentSpec {
    /// Parse the flat `key = value` configuration text on top of the
    /// defaults. `#` starts a comment; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = ExperimentSpec::default();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", line_no + 1))
            })?;
            spec.set(key.trim(), value.trim())?;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "target" => self.target = TargetKind::parse(value)?,
            "csv_path" => self.csv_path = Some(PathBuf::from(value)),
            "planted_widths" => self.planted_widths = parse_usize_list(value)?,
            "planted_seed" => self.planted_seed = value.parse().map_err(|e| {
                Error::Config(format!("bad planted_seed: {e}"))
            })?,
            "samples" => self.samples = parse_usize(key, value)?,
            "scheme" => self.scheme = Scheme::parse(value)?,
            "dataset_seed" => {
                self.dataset_seed = value
                    .parse()
                    .map_err(|e| Error::Config(format!("bad dataset_seed: {e}")))?
            }
            "seeds" => self.seeds = parse_u64_list(value)?,
            "modes" => {
                self.modes = value
                    .split(',')
                    .map(|t| Mode::parse(t.trim()))
                    .collect::<Result<_>>()?
            }
            "delta_relu" => self.delta_relu = parse_f64(key, value)?,
            "start_widths" => self.start_widths = parse_usize_list(value)?,
            "star_widths" => self.star_widths = parse_usize_list(value)?,
            "growth_site" => {
                self.growth_site = if value == "whole" {
                    GrowthSite::Whole
                } else if let Some(dp) = value.strip_prefix("final_layers:") {
                    GrowthSite::FinalLayers {
                        d_prime: parse_usize(key, dp)?,
                    }
                } else {
                    return Err(Error::Config(format!(
                        "growth_site must be 'whole' or 'final_layers:<d>', got '{value}'"
                    )));
                }
            }
            "rounds" => self.rounds = parse_usize(key, value)?,
            "l_max" => self.l_max = parse_usize(key, value)?,
            "kappa" => self.kappa = parse_f64(key, value)?,
            "search_restarts" => self.search_restarts = parse_usize(key, value)?,
            "search_ascent_steps" => self.search_ascent_steps = parse_usize(key, value)?,
            "step_rule" => {
                self.step_rule = if value == "exact_line_search" {
                    StepRule::ExactLineSearch
                } else if value == "joint_alpha_beta" {
                    StepRule::JointAlphaBeta
                } else if let Some(rest) = value.strip_prefix("theoretical:") {
                    let (l, ratio) = rest.split_once(':').ok_or_else(|| {
                        Error::Config("step_rule theoretical needs 'theoretical:<L>:<ratio>'".into())
                    })?;
                    StepRule::Theoretical {
                        l_assumed: parse_f64(key, l)?,
                        size_ratio: parse_f64(key, ratio)?,
                    }
                } else {
                    return Err(Error::Config(format!("unknown step_rule '{value}'")));
                }
            }
            "copt_exit" => self.copt_exit = parse_f64(key, value)?,
            "learning_rate" => self.optim.learning_rate = parse_f64(key, value)?,
            "adam_beta1" => self.optim.adam_beta1 = parse_f64(key, value)?,
            "adam_beta2" => self.optim.adam_beta2 = parse_f64(key, value)?,
            "epsilon" => self.optim.epsilon = parse_f64(key, value)?,
            "stall_window" => self.optim.stall_window = parse_usize(key, value)?,
            "stall_rel_tol" => self.optim.stall_rel_tol = parse_f64(key, value)?,
            "batch_size" => {
                let b = parse_usize(key, value)?;
                self.optim.batch_size = if b == 0 { None } else { Some(b) };
            }
            "grad_norm_tol" => self.optim.grad_norm_tol = parse_f64(key, value)?,
            "full_epochs" => self.full_epochs = parse_usize(key, value)?,
            "inner_epochs" => self.inner_epochs = parse_usize(key, value)?,
            "direct_arch" => {
                self.direct_arch = value
                    .split(',')
                    .map(|t| {
                        let t = t.trim();
                        if t == "w" {
                            Ok(DirectTok::Width)
                        } else {
                            t.parse::<usize>()
                                .map(DirectTok::Fixed)
                                .map_err(|e| Error::Config(format!("bad direct_arch entry: {e}")))
                        }
                    })
                    .collect::<Result<_>>()?
            }
            "direct_widths" => self.direct_widths = parse_usize_list(value)?,
            "direct_epochs" => self.direct_epochs = parse_usize(key, value)?,
            "gen_samples" => self.gen_samples = parse_usize(key, value)?,
            "diag_restarts" => self.diag_restarts = parse_usize(key, value)?,
            "diag_ascent_steps" => self.diag_ascent_steps = parse_usize(key, value)?,
            "diagnostics" => {
                self.diagnostics = match value {
                    "true" | "on" | "1" => true,
                    "false" | "off" | "0" => false,
                    other => {
                        return Err(Error::Config(format!("bad diagnostics flag '{other}'")))
                    }
                }
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("samples must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("need at least one seed".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("need at least one mode".into()));
        }
        if self.target == TargetKind::Csv && self.csv_path.is_none() {
            return Err(Error::Config("target csv needs csv_path".into()));
        }
        Architecture::new(self.start_widths.clone())?;
        Architecture::new(self.star_widths.clone())?;
        self.optim.validate()?;
        if self.modes.contains(&Mode::Direct) {
            if self.direct_widths.is_empty() {
                return Err(Error::Config("direct mode needs direct_widths".into()));
            }
            if !self.direct_arch.contains(&DirectTok::Width) {
                return Err(Error::Config(
                    "direct_arch needs a 'w' placeholder".into(),
                ));
            }
            if self.direct_epochs == 0 && !self.modes.contains(&Mode::Hierarchical) {
                return Err(Error::Config(
                    "direct_epochs = 0 (matched budget) needs a hierarchical run in the same experiment"
                        .into(),
                ));
            }
        }
        Ok(())
    }

    /// Canonical text form: every key in a fixed order. Used for the config
    /// hash and the resolved-config dump.
    pub fn canonical_text(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        push("target", self.target.id().into());
        if let Some(p) = &self.csv_path {
            push("csv_path", p.display().to_string());
        }
        push("planted_widths", list(&self.planted_widths));
        push("planted_seed", self.planted_seed.to_string());
        push("samples", self.samples.to_string());
        push("scheme", self.scheme.id().into());
        push("dataset_seed", self.dataset_seed.to_string());
        push(
            "seeds",
            self.seeds
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        push(
            "modes",
            self.modes
                .iter()
                .map(|m| m.as_str().to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        push("delta_relu", format!("{:?}", self.delta_relu));
        push("start_widths", list(&self.start_widths));
        push("star_widths", list(&self.star_widths));
        push(
            "growth_site",
            match self.growth_site {
                GrowthSite::Whole => "whole".into(),
                GrowthSite::FinalLayers { d_prime } => format!("final_layers:{d_prime}"),
            },
        );
        push("rounds", self.rounds.to_string());
        push("l_max", self.l_max.to_string());
        push("kappa", format!("{:?}", self.kappa));
        push("search_restarts", self.search_restarts.to_string());
        push("search_ascent_steps", self.search_ascent_steps.to_string());
        push(
            "step_rule",
            match self.step_rule {
                StepRule::ExactLineSearch => "exact_line_search".into(),
                StepRule::JointAlphaBeta => "joint_alpha_beta".into(),
                StepRule::Theoretical {
                    l_assumed,
                    size_ratio,
                } => format!("theoretical:{l_assumed:?}:{size_ratio:?}"),
            },
        );
        push("copt_exit", format!("{:?}", self.copt_exit));
        push("learning_rate", format!("{:?}", self.optim.learning_rate));
        push("adam_beta1", format!("{:?}", self.optim.adam_beta1));
        push("adam_beta2", format!("{:?}", self.optim.adam_beta2));
        push("epsilon", format!("{:?}", self.optim.epsilon));
        push("stall_window", self.optim.stall_window.to_string());
        push("stall_rel_tol", format!("{:?}", self.optim.stall_rel_tol));
        push(
            "batch_size",
            self.optim.batch_size.unwrap_or(0).to_string(),
        );
        push("grad_norm_tol", format!("{:?}", self.optim.grad_norm_tol));
        push("full_epochs", self.full_epochs.to_string());
        push("inner_epochs", self.inner_epochs.to_string());
        push(
            "direct_arch",
            self.direct_arch
                .iter()
                .map(|t| match t {
                    DirectTok::Width => "w".to_string(),
                    DirectTok::Fixed(v) => v.to_string(),
                })
                .collect::<Vec<_>>()
                .join(","),
        );
        push("direct_widths", list(&self.direct_widths));
        push("direct_epochs", self.direct_epochs.to_string());
        push("gen_samples", self.gen_samples.to_string());
        push("diag_restarts", self.diag_restarts.to_string());
        push("diag_ascent_steps", self.diag_ascent_steps.to_string());
        push("diagnostics", self.diagnostics.to_string());
        s
    }

    /// FNV-1a hash of the canonical text, as 16 hex digits.
    pub fn config_hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.canonical_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    pub fn activation(&self) -> Result<Activation> {
        Activation::leaky_relu(self.delta_relu)
    }

    pub fn growth_config(&self) -> Result<GrowthConfig> {
        Ok(GrowthConfig {
            star_arch: Architecture::new(self.star_widths.clone())?,
            kappa: self.kappa,
            l_max: self.l_max,
            search_restarts: self.search_restarts,
            search_ascent_steps: self.search_ascent_steps,
            step_rule: self.step_rule,
            copt_exit_threshold: self.copt_exit,
        })
    }

    fn diag_growth_config(&self) -> Result<GrowthConfig> {
        let mut cfg = self.growth_config()?;
        cfg.search_restarts = self.diag_restarts.max(1);
        cfg.search_ascent_steps = self.diag_ascent_steps;
        Ok(cfg)
    }

    fn optim_full(&self) -> OptimConfig {
        OptimConfig {
            max_epochs: self.full_epochs,
            ..self.optim.clone()
        }
    }

    fn optim_inner(&self) -> OptimConfig {
        OptimConfig {
            max_epochs: self.inner_epochs,
            ..self.optim.clone()
        }
    }

    fn direct_architecture(&self, width: usize) -> Result<Architecture> {
        let widths: Vec<usize> = self
            .direct_arch
            .iter()
            .map(|t| match t {
                DirectTok::Fixed(v) => *v,
                DirectTok::Width => width,
            })
            .collect();
        Architecture::new(widths)
    }
}

/// Closed-form oracle of a built-in target; `None` for CSV data.
pub fn target_oracle(spec: &ExperimentSpec) -> Result<Option<Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>>> {
    let oracle: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync> = match spec.target {
        TargetKind::Sq2d => Arc::new(|x: &[f64]| (x[0] + x[1]).powi(2) / 2.0),
        TargetKind::Sq3d => Arc::new(|x: &[f64]| (x[0] + x[1] + x[2]).powi(2) / 3.0),
        TargetKind::Pow23_2d => Arc::new(|x: &[f64]| (x[0] + x[1]).powf(2.0 / 3.0)),
        TargetKind::Sq10d => {
            Arc::new(|x: &[f64]| x.iter().sum::<f64>().powi(2) / 10.0)
        }
        TargetKind::Planted => {
            let arch = Architecture::new(spec.planted_widths.clone())?;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.planted_seed);
            let w = WeightSet::random_uniform(arch, 1.0, &mut rng);
            let act = spec.activation()?;
            Arc::new(move |x: &[f64]| w.realize(act, x).expect("planted oracle evaluation"))
        }
        TargetKind::Csv => return Ok(None),
    };
    Ok(Some(oracle))
}

fn input_dim(spec: &ExperimentSpec) -> Result<usize> {
    match spec.target {
        TargetKind::Planted => Ok(spec.planted_widths[0]),
        TargetKind::Csv => Err(Error::Config(
            "csv targets carry their own input dimension".into(),
        )),
        other => Ok(other.input_dim().expect("built-in targets have a dimension")),
    }
}

/// Sample the unit cube per the configured scheme and evaluate the target.
pub fn build_dataset(spec: &ExperimentSpec) -> Result<TrainingSet> {
    if spec.target == TargetKind::Csv {
        let path = spec.csv_path.as_ref().expect("validated");
        let file = fs::File::open(path)?;
        return TrainingSet::read_csv(BufReader::new(file));
    }
    let dim = input_dim(spec)?;
    let oracle = target_oracle(spec)?.expect("built-in targets have an oracle");
    let points: Vec<Vec<f64>> = match spec.scheme {
        Scheme::Grid => {
            if dim > 3 {
                return Err(Error::Config(format!(
                    "grid sampling supports dimensions up to 3, target has {dim}"
                )));
            }
            let k = (spec.samples as f64).powf(1.0 / dim as f64).round() as usize;
            let k = k.max(2);
            let axis: Vec<f64> = (0..k).map(|i| i as f64 / (k - 1) as f64).collect();
            let mut pts = Vec::with_capacity(k.pow(dim as u32));
            let total = k.pow(dim as u32);
            for flat in 0..total {
                let mut idx = flat;
                let mut p = Vec::with_capacity(dim);
                for _ in 0..dim {
                    p.push(axis[idx % k]);
                    idx /= k;
                }
                pts.push(p);
            }
            pts
        }
        Scheme::UniformRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.dataset_seed);
            (0..spec.samples)
                .map(|_| (0..dim).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect())
                .collect()
        }
    };
    let responses: Vec<f64> = points.iter().map(|p| oracle(p)).collect();
    TrainingSet::uniform(points, responses)
}

/// Everything a finished experiment produced.
#[derive(Debug)]
pub struct ExperimentReport {
    pub runs: Vec<RunTrace>,
    pub hierarchical_aggregate: Option<Vec<AggregateRow>>,
    pub direct_aggregate: Option<Vec<AggregateRow>>,
    pub files: Vec<PathBuf>,
    /// Median cumulative epochs of the hierarchical runs (the matched budget
    /// handed to direct baselines when `direct_epochs = 0`).
    pub matched_epochs: Option<usize>,
}

struct DiagContext<'a> {
    spec: &'a ExperimentSpec,
    ts: &'a TrainingSet,
    oracle: Option<Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>>,
    act: Activation,
    loss_spec: LossSpec,
}

impl<'a> DiagContext<'a> {
    /// Optimality indicator of a state; for final-layer growth the indicator
    /// is computed on the suffix problem the growth actually sees.
    fn c_opt_of(&self, w: &WeightSet, seed: u64) -> f64 {
        if !self.spec.diagnostics {
            return f64::NAN;
        }
        let cfg = match self.spec.diag_growth_config() {
            Ok(c) => c,
            Err(_) => return f64::NAN,
        };
        let result = match self.spec.growth_site {
            GrowthSite::Whole => c_opt(w, self.act, self.ts, &self.loss_spec, &cfg, seed),
            GrowthSite::FinalLayers { d_prime } => {
                let d = w.arch().depth();
                if d_prime == 0 || d_prime >= d {
                    return f64::NAN;
                }
                let cut = d - d_prime;
                let prefix = &w.layers()[..cut];
                let suffix = match WeightSet::from_layers(w.layers()[cut..].to_vec()) {
                    Ok(s) => s,
                    Err(_) => return f64::NAN,
                };
                let act = self.act;
                let mapped = match self.ts.map_inputs(suffix.arch().input_width(), |x| {
                    eval_layers(prefix, act, x)
                        .expect("prefix evaluation")
                        .into_iter()
                        .map(|v| act.apply(v))
                        .collect()
                }) {
                    Ok(m) => m,
                    Err(_) => return f64::NAN,
                };
                c_opt(&suffix, self.act, &mapped, &self.loss_spec, &cfg, seed)
            }
        };
        match result {
            Ok(report) => report.c_opt,
            Err(_) => f64::NAN,
        }
    }

    /// Stability constant of the per-neuron final-layer split.
    fn stability_of(&self, w: &WeightSet) -> f64 {
        if !self.spec.diagnostics {
            return f64::NAN;
        }
        let parts = match w.split_final_layer(1) {
            Ok(p) => p,
            Err(_) => return f64::NAN,
        };
        match stability_constant(&parts, self.act, self.ts, &self.loss_spec) {
            Ok(r) => r.l_constant,
            Err(_) => f64::NAN,
        }
    }

    fn gen_of(&self, w: &WeightSet, seed: u64) -> f64 {
        if !self.spec.diagnostics {
            return f64::NAN;
        }
        let oracle = match &self.oracle {
            Some(o) => o.clone(),
            None => return f64::NAN,
        };
        let sampler = BoxSampler::unit_cube(w.arch().input_width());
        match generalization_estimate(
            w,
            self.act,
            move |x| oracle(x),
            &sampler,
            self.spec.gen_samples,
            seed,
        ) {
            Ok(g) => g,
            Err(_) => f64::NAN,
        }
    }
}

fn run_hierarchical(spec: &ExperimentSpec, ts: &TrainingSet, seed: u64) -> Result<RunTrace> {
    let act = spec.activation()?;
    let loss_spec = LossSpec::identity();
    let growth_cfg = spec.growth_config()?;
    let start = Architecture::new(spec.start_widths.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x11));
    let w_init = WeightSet::random_normal_scaled(start, &mut rng);

    let outcome = adaptive_train(
        &w_init,
        act,
        ts,
        &loss_spec,
        &growth_cfg,
        &spec.optim_full(),
        &spec.optim_inner(),
        spec.rounds,
        derive_seed(seed, 0x22),
        spec.growth_site,
    )?;

    let diag = DiagContext {
        spec,
        ts,
        oracle: target_oracle(spec)?,
        act,
        loss_spec: loss_spec.clone(),
    };
    let mut rows = Vec::with_capacity(outcome.rounds.len());
    for (state, record) in outcome.states.iter().zip(&outcome.rounds) {
        rows.push(TraceRow {
            round: record.round,
            wall_ms: record.wall_ms,
            params: record.params,
            loss: record.loss,
            error: record.error,
            c_opt: diag.c_opt_of(state, derive_seed(seed, 0x33 + record.round as u64)),
            stability_l: diag.stability_of(state),
            gen_estimate: diag.gen_of(state, derive_seed(seed, 0x44 + record.round as u64)),
            extensions: record.extensions,
            epochs: record.epochs,
        });
    }
    Ok(RunTrace {
        meta: RunMeta {
            mode: Mode::Hierarchical,
            seed,
            dataset_id: spec.target.id().to_string(),
            config_hash: spec.config_hash(),
            direct_width: None,
        },
        rows,
    })
}

fn run_direct(
    spec: &ExperimentSpec,
    ts: &TrainingSet,
    seed: u64,
    width: usize,
    epochs: usize,
) -> Result<RunTrace> {
    let act = spec.activation()?;
    let loss_spec = LossSpec::identity();
    let arch = spec.direct_architecture(width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x100 + width as u64));
    let w_init = WeightSet::random_normal_scaled(arch.clone(), &mut rng);
    let start = std::time::Instant::now();
    let cfg = OptimConfig {
        max_epochs: epochs,
        // The direct baseline spends its whole budget.
        stall_window: epochs + 1,
        ..spec.optim.clone()
    };
    let report = train(&w_init, act, ts, &loss_spec, &FrozenMask::none(&arch), &cfg)?;
    let final_loss = crate::loss::loss(&report.weights, act, ts, &loss_spec)?;

    let diag = DiagContext {
        spec,
        ts,
        oracle: target_oracle(spec)?,
        act,
        loss_spec: loss_spec.clone(),
    };
    let row = TraceRow {
        round: 0,
        wall_ms: start.elapsed().as_millis(),
        params: arch.param_count(),
        loss: final_loss,
        error: final_loss.sqrt(),
        c_opt: diag.c_opt_of(&report.weights, derive_seed(seed, 0x200 + width as u64)),
        stability_l: diag.stability_of(&report.weights),
        gen_estimate: diag.gen_of(&report.weights, derive_seed(seed, 0x300 + width as u64)),
        extensions: 0,
        epochs: report.epochs,
    };
    Ok(RunTrace {
        meta: RunMeta {
            mode: Mode::Direct,
            seed,
            dataset_id: spec.target.id().to_string(),
            config_hash: spec.config_hash(),
            direct_width: Some(width),
        },
        rows: vec![row],
    })
}

/// Run every (seed, mode) cell of the experiment, write one CSV per run plus
/// per-mode aggregates and an index, and return everything in memory.
///
/// Cells run in a work pool; each cell is single-threaded over its training
/// loop and owns its output file, and the index is written once at the end.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let ts = build_dataset(spec)?;
    let hash = spec.config_hash();
    fs::create_dir_all(&spec.out_dir)?;
    let mut files = Vec::new();
    let mut runs: Vec<RunTrace> = Vec::new();

    // Hierarchical cells first; direct baselines may need the matched budget.
    let mut matched_epochs = None;
    if spec.modes.contains(&Mode::Hierarchical) {
        let hier: Vec<RunTrace> = spec
            .seeds
            .par_iter()
            .map(|&seed| run_hierarchical(spec, &ts, seed))
            .collect::<Result<_>>()?;
        let totals: Vec<f64> = hier
            .iter()
            .map(|t| t.rows.last().map(|r| r.epochs as f64).unwrap_or(0.0))
            .collect();
        matched_epochs = Some(crate::trace::median(&totals).round() as usize);
        runs.extend(hier);
    }

    if spec.modes.contains(&Mode::Direct) {
        let budget = if spec.direct_epochs > 0 {
            spec.direct_epochs
        } else {
            matched_epochs.ok_or_else(|| {
                Error::Config("matched direct budget requires hierarchical runs".into())
            })?
        };
        let cells: Vec<(u64, usize)> = spec
            .seeds
            .iter()
            .flat_map(|&s| spec.direct_widths.iter().map(move |&w| (s, w)))
            .collect();
        let direct: Vec<RunTrace> = cells
            .par_iter()
            .map(|&(seed, width)| run_direct(spec, &ts, seed, width, budget))
            .collect::<Result<_>>()?;
        runs.extend(direct);
    }

    // Per-run files.
    for run in &runs {
        let width_part = run
            .meta
            .direct_width
            .map(|w| format!("_w{w}"))
            .unwrap_or_default();
        let name = format!(
            "{}_{}_s{}{}_{}.csv",
            run.meta.mode.as_str(),
            run.meta.dataset_id,
            run.meta.seed,
            width_part,
            hash
        );
        let path = spec.out_dir.join(name);
        let mut f = fs::File::create(&path)?;
        run.write_csv(&mut f)?;
        files.push(path);
    }

    // Aggregates.
    let hier_refs: Vec<&RunTrace> = runs
        .iter()
        .filter(|r| r.meta.mode == Mode::Hierarchical)
        .collect();
    let hierarchical_aggregate = if hier_refs.is_empty() {
        None
    } else {
        let agg = aggregate_median(&hier_refs)?;
        let path = spec
            .out_dir
            .join(format!("aggregate_hierarchical_{}_{}.csv", spec.target.id(), hash));
        let mut f = fs::File::create(&path)?;
        crate::trace::write_aggregate_csv(&agg, &mut f)?;
        files.push(path);
        Some(agg)
    };

    let direct_aggregate = if spec.modes.contains(&Mode::Direct) {
        // One aggregate row per width: median over seeds of the single row.
        let mut rows = Vec::new();
        for (i, &w) in spec.direct_widths.iter().enumerate() {
            let group: Vec<&RunTrace> = runs
                .iter()
                .filter(|r| r.meta.mode == Mode::Direct && r.meta.direct_width == Some(w))
                .collect();
            if group.is_empty() {
                continue;
            }
            let mut agg = aggregate_median(&group)?;
            agg[0].round = i;
            rows.push(agg.remove(0));
        }
        let path = spec
            .out_dir
            .join(format!("aggregate_direct_{}_{}.csv", spec.target.id(), hash));
        let mut f = fs::File::create(&path)?;
        crate::trace::write_aggregate_csv(&rows, &mut f)?;
        files.push(path);
        Some(rows)
    } else {
        None
    };

    // Index and resolved configuration.
    let index_path = spec.out_dir.join("runs.csv");
    {
        let mut f = fs::File::create(&index_path)?;
        use std::io::Write;
        writeln!(f, "file,mode,target,seed,width,rows,config")?;
        for (run, path) in runs.iter().zip(&files) {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                path.file_name().unwrap().to_string_lossy(),
                run.meta.mode.as_str(),
                run.meta.dataset_id,
                run.meta.seed,
                run.meta
                    .direct_width
                    .map(|w| w.to_string())
                    .unwrap_or_default(),
                run.rows.len(),
                hash
            )?;
        }
    }
    files.push(index_path);
    let resolved = spec.out_dir.join(format!("config_{hash}.resolved.txt"));
    fs::write(&resolved, spec.canonical_text())?;
    files.push(resolved);

    Ok(ExperimentReport {
        runs,
        hierarchical_aggregate,
        direct_aggregate,
        files,
        matched_epochs,
    })
}

/// Write the dataset an experiment would train on.
pub fn write_dataset(spec: &ExperimentSpec, path: &Path) -> Result<()> {
    let ts = build_dataset(spec)?;
    let mut f = fs::File::create(path)?;
    ts.write_csv(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_values() {
        let spec = ExperimentSpec::default();
        let oracle = target_oracle(&spec).unwrap().unwrap();
        assert_eq!(oracle(&[1.0, 1.0]), 2.0);

        let mut s10 = ExperimentSpec::default();
        s10.set("target", "sq10d").unwrap();
        let oracle = target_oracle(&s10).unwrap().unwrap();
        assert_eq!(oracle(&vec![1.0; 10]), 10.0);

        let mut p = ExperimentSpec::default();
        p.set("target", "pow23_2d").unwrap();
        let oracle = target_oracle(&p).unwrap().unwrap();
        assert_eq!(oracle(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn grid_dataset_shape() {
        let mut spec = ExperimentSpec::default();
        spec.set("samples", "1024").unwrap();
        let ts = build_dataset(&spec).unwrap();
        assert_eq!(ts.len(), 1024); // 32 x 32
        assert_eq!(ts.input_width(), 2);
        // corner value
        let oracle = target_oracle(&spec).unwrap().unwrap();
        for i in 0..ts.len() {
            assert_eq!(ts.responses()[i], oracle(ts.input(i)));
        }
    }

    #[test]
    fn random_dataset_is_seeded() {
        let mut spec = ExperimentSpec::default();
        spec.set("target", "sq10d").unwrap();
        spec.set("scheme", "random").unwrap();
        spec.set("samples", "64").unwrap();
        let a = build_dataset(&spec).unwrap();
        let b = build_dataset(&spec).unwrap();
        assert_eq!(a, b);
        spec.set("dataset_seed", "43").unwrap();
        let c = build_dataset(&spec).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn config_parsing_and_hash() {
        let text = "
            target = sq2d
            samples = 256        # 16x16
            seeds = 0,1
            modes = hierarchical
            rounds = 2
            l_max = 1
        ";
        let spec = ExperimentSpec::parse(text).unwrap();
        assert_eq!(spec.samples, 256);
        assert_eq!(spec.seeds, vec![0, 1]);
        assert_eq!(spec.rounds, 2);
        let h1 = spec.config_hash();
        let mut other = spec.clone();
        other.set("rounds", "3").unwrap();
        assert_ne!(h1, other.config_hash());

        assert!(ExperimentSpec::parse("nonsense_key = 1").is_err());
        assert!(ExperimentSpec::parse("samples
                                       = 1")
        .is_err());
    }

    #[test]
    fn direct_needs_width_placeholder() {
        let mut spec = ExperimentSpec::default();
        spec.set("direct_arch", "2,4,1").unwrap();
        assert!(spec.validate().is_err());
    }
}
