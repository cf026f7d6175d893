//! Network growth: the small extension-search problem, step-size rules, the
//! inner freeze–train–search–extend loop, the outer adaptive loop, and the
//! partial-layer variants for deeper networks.
//!
//! The search maximizes the inner product between the current residual and
//! the candidate's operator response over a small architecture under a unit
//! response norm. Homogeneous weight scaling makes the normalization exact,
//! so restarts only have to cover directions, not magnitudes.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::loss::{
    loss_of_residual, weighted_dot, weighted_norm, weighted_norm_sq, LossSpec, TrainingSet,
};
use crate::net::{eval_layers, Activation, Architecture, LayerWeights, WeightSet};
use crate::optim::{
    backward_accumulate, forward_store, polish, train, FrozenMask, OptimConfig, Workspace,
};

/// Step-size rule applied to a found extension direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// Exact minimizer of the quadratic loss in the step size. Default: it
    /// dominates the theoretical rate rule pointwise for the same direction.
    ExactLineSearch,
    /// The rate-analysis step `α = (1-κ)/(4L√ratio)·√L(F)` for an assumed
    /// stability constant and competitor size ratio; kept for reproducing the
    /// analysis, not for production runs.
    Theoretical { l_assumed: f64, size_ratio: f64 },
    /// Jointly rescale the existing network by `β` and the extension by `α`
    /// through the 2x2 normal equations; falls back to the exact line search
    /// when the system is near singular.
    JointAlphaBeta,
}

/// Configuration of the extension machinery.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthConfig {
    /// Extension architecture; must match the grown block in depth and input
    /// width.
    pub star_arch: Architecture,
    /// Target contraction per outer round; the guarantees need
    /// `(√5-1)/2 < κ < 1`, anything in `(0,1)` is accepted with a logged
    /// caveat.
    pub kappa: f64,
    /// Cap on extensions per inner round.
    pub l_max: usize,
    pub search_restarts: usize,
    pub search_ascent_steps: usize,
    pub step_rule: StepRule,
    /// Stop extending when the optimality indicator drops below this value.
    pub copt_exit_threshold: f64,
}

impl GrowthConfig {
    pub fn new(star_arch: Architecture) -> Self {
        Self {
            star_arch,
            kappa: 0.9,
            l_max: 8,
            search_restarts: 64,
            search_ascent_steps: 200,
            step_rule: StepRule::ExactLineSearch,
            copt_exit_threshold: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.kappa && self.kappa < 1.0) {
            return Err(Error::Config(format!(
                "kappa must lie in (0, 1), got {}",
                self.kappa
            )));
        }
        if self.kappa <= golden_kappa_floor() {
            log::warn!(
                "kappa = {} is at or below (√5-1)/2 ≈ {:.6}; the contraction guarantee does not apply",
                self.kappa,
                golden_kappa_floor()
            );
        }
        if self.search_restarts == 0 {
            return Err(Error::Config("search_restarts must be positive".into()));
        }
        if self.star_arch.param_count() > 100 {
            log::warn!(
                "extension architecture {} has {} parameters; the sampling search is meant for small blocks",
                self.star_arch,
                self.star_arch.param_count()
            );
        }
        Ok(())
    }
}

/// `(√5 - 1)/2`, the lower bound on κ for the contraction guarantee.
pub fn golden_kappa_floor() -> f64 {
    (5.0_f64.sqrt() - 1.0) / 2.0
}

/// `μ = (κ - √(1-κ))²`, the required competitor quality for one inner round.
pub fn mu(kappa: f64) -> f64 {
    let m = kappa - (1.0 - kappa).sqrt();
    m * m
}

/// `C_desc = 8 L² log(3/2) / (1-κ)²` from the inner-loop step bound.
pub fn c_desc(kappa: f64, l_assumed: f64) -> f64 {
    8.0 * l_assumed * l_assumed * (1.5_f64).ln() / ((1.0 - kappa) * (1.0 - kappa))
}

/// Theoretical inner-loop step budget `L_max = C_desc · w*`.
pub fn theoretical_l_max(kappa: f64, l_assumed: f64, w_star_parts: usize) -> f64 {
    c_desc(kappa, l_assumed) * w_star_parts as f64
}

/// Result of one extension search.
#[derive(Debug, Clone)]
pub struct WstarCandidate {
    /// Normalized extension weights, `| |H R(wstar)| - 1 | ≤ 1e-9`.
    pub wstar: WeightSet,
    /// Attained inner product with the residual; never negative.
    pub objective_value: f64,
    /// Restart that produced the winner (deterministic tie-break: lowest).
    pub restart_index: usize,
    /// Ascent steps the winning restart accepted.
    pub ascent_steps: usize,
}

/// One applied extension.
#[derive(Debug, Clone)]
pub struct ExtensionResult {
    pub wstar: WeightSet,
    pub objective_value: f64,
    pub alpha: f64,
    /// Rescaling applied to the existing network; 1 except for the joint rule.
    pub beta: f64,
    pub loss_before: f64,
    pub loss_after: f64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic per-subtask seed derivation.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt))
}

/// Operator response of a candidate, reusing preallocated buffers.
fn candidate_response(
    layers: &[LayerWeights],
    act: Activation,
    ts: &TrainingSet,
    spec: &LossSpec,
    ws: &mut Workspace,
    scratch: &mut Vec<f64>,
    out: &mut [f64],
) -> Result<()> {
    for i in 0..ts.len() {
        let mut acc = 0.0;
        spec.for_each_point(ts, i, scratch, |point, coeff| {
            forward_store(layers, act, point, ws);
            acc += coeff * ws.output_scalar();
            Ok(())
        })?;
        out[i] = acc;
    }
    Ok(())
}

struct RestartOutcome {
    flat: Vec<f64>,
    objective: f64,
    accepted_steps: usize,
}

/// Single restart: sample, orient, hill-climb the scale-invariant objective
/// `⟨r, z(W)⟩ / |z(W)|`, without intermediate normalization.
fn run_restart(
    restart: usize,
    seed: u64,
    residual: &[f64],
    act: Activation,
    ts: &TrainingSet,
    spec: &LossSpec,
    cfg: &GrowthConfig,
) -> Result<Option<RestartOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, restart as u64));
    let arch = cfg.star_arch.clone();
    let n = ts.len();
    let mut z = vec![0.0; n];
    let mut ws = Workspace::for_layers(WeightSet::zeros(arch.clone()).layers());
    let mut scratch = Vec::new();

    // Draw until the response is not identically zero on the samples.
    let mut current: Option<WeightSet> = None;
    for _ in 0..16 {
        let w = WeightSet::random_uniform(arch.clone(), 1.0, &mut rng);
        candidate_response(w.layers(), act, ts, spec, &mut ws, &mut scratch, &mut z)?;
        if weighted_norm(&z, ts) > 1e-12 {
            current = Some(w);
            break;
        }
    }
    let mut w = match current {
        Some(w) => w,
        None => return Ok(None),
    };
    // Orient towards the residual; negating the output layer is exact.
    if weighted_dot(residual, &z, ts) < 0.0 {
        w = w.negate_output();
        z.iter_mut().for_each(|v| *v = -*v);
    }

    let param_count = arch.param_count();
    let mut flat = w.to_flat();
    let mut norm = weighted_norm(&z, ts);
    let mut objective = weighted_dot(residual, &z, ts) / norm;
    let mut accepted_steps = 0usize;

    let mut grad_inner = vec![0.0; param_count];
    let mut grad_norm_sq = vec![0.0; param_count];
    let mut direction = vec![0.0; param_count];
    let mut trial_flat = vec![0.0; param_count];
    let mut trial_z = vec![0.0; n];
    let mut step = 0.25;

    for _ in 0..cfg.search_ascent_steps {
        // Gradients of ⟨r, z⟩ and |z|² at the current weights.
        grad_inner.iter_mut().for_each(|g| *g = 0.0);
        grad_norm_sq.iter_mut().for_each(|g| *g = 0.0);
        let gammas = ts.point_weights();
        for i in 0..n {
            let c_inner = gammas[i] * residual[i];
            let c_norm = 2.0 * gammas[i] * z[i];
            spec.for_each_point(ts, i, &mut scratch, |point, coeff| {
                forward_store(w.layers(), act, point, &mut ws);
                if c_inner != 0.0 {
                    backward_accumulate(
                        w.layers(),
                        act,
                        point,
                        &mut ws,
                        &[coeff * c_inner],
                        &mut grad_inner,
                        None,
                    );
                }
                if c_norm != 0.0 {
                    backward_accumulate(
                        w.layers(),
                        act,
                        point,
                        &mut ws,
                        &[coeff * c_norm],
                        &mut grad_norm_sq,
                        None,
                    );
                }
                Ok(())
            })?;
        }
        // ∇(inner/|z|) = (∇inner - objective·∇|z|²/(2|z|)) / |z|
        let mut dir_norm_sq = 0.0;
        for k in 0..param_count {
            let d = (grad_inner[k] - objective * grad_norm_sq[k] / (2.0 * norm)) / norm;
            direction[k] = d;
            dir_norm_sq += d * d;
        }
        let dir_norm = dir_norm_sq.sqrt();
        if dir_norm < 1e-14 {
            break;
        }
        // Normalized trial step with multiplicative adaptation.
        let mut improved = false;
        while step > 1e-12 {
            for k in 0..param_count {
                trial_flat[k] = flat[k] + step * direction[k] / dir_norm;
            }
            let trial = WeightSet::from_flat(arch.clone(), &trial_flat)?;
            candidate_response(
                trial.layers(),
                act,
                ts,
                spec,
                &mut ws,
                &mut scratch,
                &mut trial_z,
            )?;
            let trial_norm = weighted_norm(&trial_z, ts);
            if trial_norm > 1e-12 {
                let trial_inner = weighted_dot(residual, &trial_z, ts);
                let trial_obj = trial_inner / trial_norm;
                if trial_obj > objective {
                    flat.copy_from_slice(&trial_flat);
                    w = trial;
                    z.copy_from_slice(&trial_z);
                    norm = trial_norm;
                    objective = trial_obj;
                    step *= 1.5;
                    accepted_steps += 1;
                    improved = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(Some(RestartOutcome {
        flat,
        objective,
        accepted_steps,
    }))
}

/// Multi-start search for the extension weights maximizing
/// `⟨residual, H R(W)⟩` over the extension class under `|H R(W)| ≤ 1`.
///
/// Restarts sample uniformly from a centered cube, ascend the scale-invariant
/// objective and are normalized exactly afterwards through homogeneous
/// scaling. Restarts run in parallel; the reduction takes the best objective
/// with the lowest restart index as tie-break, so the result is deterministic
/// for a fixed seed.
pub fn wstar_search(
    residual: &[f64],
    act: Activation,
    ts: &TrainingSet,
    spec: &LossSpec,
    cfg: &GrowthConfig,
    seed: u64,
) -> Result<WstarCandidate> {
    cfg.validate()?;
    if residual.len() != ts.len() {
        return Err(Error::ShapeMismatch(format!(
            "residual has {} entries, data has {}",
            residual.len(),
            ts.len()
        )));
    }
    if cfg.star_arch.input_width() != ts.input_width() {
        return Err(Error::ShapeMismatch(format!(
            "extension architecture {} expects {} inputs, data has {}",
            cfg.star_arch,
            cfg.star_arch.input_width(),
            ts.input_width()
        )));
    }
    let outcomes: Vec<Option<RestartOutcome>> = (0..cfg.search_restarts)
        .into_par_iter()
        .map(|r| run_restart(r, seed, residual, act, ts, spec, cfg))
        .collect::<Result<_>>()?;

    let mut best: Option<(usize, &RestartOutcome)> = None;
    for (idx, outcome) in outcomes.iter().enumerate() {
        if let Some(o) = outcome {
            let better = match best {
                None => true,
                Some((_, b)) => o.objective > b.objective,
            };
            if better {
                best = Some((idx, o));
            }
        }
    }
    let (restart_index, winner) = best.ok_or_else(|| {
        Error::DegenerateSearch(
            "every sampled extension realized identically zero on the samples".into(),
        )
    })?;

    // Exact normalization through homogeneous scaling.
    let raw = WeightSet::from_flat(cfg.star_arch.clone(), &winner.flat)?;
    let z = crate::loss::response_vector(&raw, act, ts, spec)?;
    let norm = weighted_norm(&z, ts);
    if norm <= 1e-12 {
        return Err(Error::DegenerateSearch(
            "winning candidate lost its response norm".into(),
        ));
    }
    let wstar = raw.scale(1.0 / norm)?;
    let z_final = crate::loss::response_vector(&wstar, act, ts, spec)?;
    let objective = weighted_dot(residual, &z_final, ts).max(0.0);
    Ok(WstarCandidate {
        wstar,
        objective_value: objective,
        restart_index,
        ascent_steps: winner.accepted_steps,
    })
}

/// Exact minimizer of `α ↦ |residual - α·z|²`: `α = ⟨residual, z⟩ / |z|²`.
pub fn exact_line_search_alpha(
    residual: &[f64],
    wstar_response: &[f64],
    ts: &TrainingSet,
) -> Result<f64> {
    let norm_sq = weighted_norm_sq(wstar_response, ts);
    if norm_sq == 0.0 {
        return Err(Error::DegenerateInput(
            "line search needs a nonzero extension response".into(),
        ));
    }
    Ok(weighted_dot(residual, wstar_response, ts) / norm_sq)
}

/// The rate-analysis step size `(1-κ) / (4 L √ratio) · √loss`.
pub fn theoretical_alpha(kappa: f64, l_assumed: f64, size_ratio: f64, loss_f: f64) -> f64 {
    (1.0 - kappa) / (4.0 * l_assumed * size_ratio.sqrt()) * loss_f.sqrt()
}

/// The reduction factor `1 - (1-κ)² / (8 L² ratio)` predicted alongside
/// [`theoretical_alpha`].
pub fn predicted_reduction_factor(kappa: f64, l_assumed: f64, size_ratio: f64) -> f64 {
    1.0 - (1.0 - kappa) * (1.0 - kappa) / (8.0 * l_assumed * l_assumed * size_ratio)
}

/// Solve `min_{α,β} |residual - β·old - α·new|²` through the 2x2 normal
/// equations.
pub fn joint_alpha_beta(
    residual: &[f64],
    old_response: &[f64],
    new_response: &[f64],
    ts: &TrainingSet,
) -> Result<(f64, f64)> {
    let a11 = weighted_norm_sq(new_response, ts);
    let a22 = weighted_norm_sq(old_response, ts);
    let a12 = weighted_dot(new_response, old_response, ts);
    let b1 = weighted_dot(new_response, residual, ts);
    let b2 = weighted_dot(old_response, residual, ts);
    let det = a11 * a22 - a12 * a12;
    let scale = a11 * a22;
    if scale == 0.0 || det <= 1e-12 * scale {
        return Err(Error::SingularSystem(format!(
            "near-parallel responses (det {det:e}, scale {scale:e})"
        )));
    }
    let alpha = (b1 * a22 - b2 * a12) / det;
    let beta = (b2 * a11 - b1 * a12) / det;
    Ok((alpha, beta))
}

/// Freeze mask for the inner loop: the round's entry parameters are frozen
/// together with the structural zero blocks that couple entry neurons with
/// extension neurons, so the grown network stays a direct sum of the entry
/// network and one trainable extension network. Extensions and the couplings
/// among them remain trainable, as does the shared output bias (its change is
/// attributable to the extension part).
pub fn inner_freeze_mask(entry: &Architecture, composite: &Architecture) -> Result<FrozenMask> {
    let old = entry.widths();
    let cur = composite.widths();
    if old.len() != cur.len() {
        return Err(Error::Composition(format!(
            "entry architecture {entry} and composite {composite} differ in depth"
        )));
    }
    if old[0] != cur[0] {
        return Err(Error::Composition(
            "entry and composite input widths differ".into(),
        ));
    }
    if old.iter().zip(cur).any(|(o, c)| o > c) {
        return Err(Error::Composition(
            "composite must contain the entry architecture".into(),
        ));
    }
    let d = composite.depth();
    let mut flags = Vec::with_capacity(composite.param_count());
    for layer in 0..=d {
        let rows = cur[layer + 1];
        let cols = cur[layer];
        let old_rows = old[layer + 1];
        let old_cols = old[layer];
        for r in 0..rows {
            for c in 0..cols {
                let frozen = if layer == 0 {
                    r < old_rows
                } else if layer == d {
                    c < old_cols
                } else {
                    r < old_rows || c < old_cols
                };
                flags.push(frozen);
            }
        }
        for r in 0..rows {
            let frozen = if layer == d { false } else { r < old_rows };
            flags.push(frozen);
        }
    }
    Ok(FrozenMask::from_flags(flags))
}

/// Outcome of one inner extension round.
#[derive(Debug, Clone)]
pub struct InnerOutcome {
    pub weights: WeightSet,
    pub extensions: Vec<ExtensionResult>,
    /// Optimizer epochs consumed by the round (including the final train).
    pub epochs: usize,
}

/// The inner loop: freeze the entry weights, then alternate training of the
/// unfrozen parameters, the extension search, and a direct-sum update with
/// the configured step rule, up to `l_max` extensions. Exits early when the
/// optimality indicator says further growth cannot pay off. Loss never
/// increases; each applied extension grows the parameter count by exactly the
/// extension architecture's parameter count.
pub fn inner_extend(
    w0: &WeightSet,
    act: Activation,
    ts: &TrainingSet,
    spec: &LossSpec,
    cfg: &GrowthConfig,
    opt_cfg: &OptimConfig,
    seed: u64,
) -> Result<InnerOutcome> {
    cfg.validate()?;
    if cfg.star_arch.depth() != w0.arch().depth() {
        return Err(Error::Composition(format!(
            "extension architecture {} does not match host depth {}",
            cfg.star_arch,
            w0.arch().depth()
        )));
    }
    if cfg.star_arch.input_width() != w0.arch().input_width() {
        return Err(Error::Composition(format!(
            "extension architecture {} does not match host input width {}",
            cfg.star_arch,
            w0.arch().input_width()
        )));
    }
    let entry_arch = w0.arch().clone();
    let mut current = w0.clone();
    let mut mask = FrozenMask::all(&entry_arch);
    let mut extensions = Vec::new();
    let mut epochs = 0usize;

    for ell in 0..=cfg.l_max {
        if mask.any_trainable() {
            let report = train(&current, act, ts, spec, &mask, opt_cfg)?;
            epochs += report.epochs;
            current = report.weights;
            if opt_cfg.grad_norm_tol > 0.0 {
                let polished = polish(
                    &current,
                    act,
                    ts,
                    spec,
                    &mask,
                    opt_cfg.grad_norm_tol,
                    50_000,
                )?;
                epochs += polished.epochs;
                current = polished.weights;
            }
        }
        if ell == cfg.l_max {
            break;
        }
        let residual = crate::loss::residual(&current, act, ts, spec)?;
        let loss_before = loss_of_residual(&residual, ts);
        if loss_before == 0.0 {
            break;
        }
        let cand = wstar_search(&residual, act, ts, spec, cfg, derive_seed(seed, ell as u64))?;
        let c_opt_now = 2.0 * cand.objective_value / loss_before.sqrt();
        if c_opt_now < cfg.copt_exit_threshold {
            log::debug!("inner loop: C_opt {c_opt_now:.3e} below threshold, stopping growth");
            break;
        }
        let z = crate::loss::response_vector(&cand.wstar, act, ts, spec)?;
        let (mut alpha, mut beta) = match cfg.step_rule {
            StepRule::ExactLineSearch => (exact_line_search_alpha(&residual, &z, ts)?, 1.0),
            StepRule::Theoretical {
                l_assumed,
                size_ratio,
            } => (
                theoretical_alpha(cfg.kappa, l_assumed, size_ratio, loss_before),
                1.0,
            ),
            StepRule::JointAlphaBeta => {
                let old_z = crate::loss::response_vector(&current, act, ts, spec)?;
                match joint_alpha_beta(&residual_plus(&old_z, &residual), &old_z, &z, ts) {
                    Ok(ab) => ab,
                    Err(Error::SingularSystem(_)) => {
                        (exact_line_search_alpha(&residual, &z, ts)?, 1.0)
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        // Backtracking on the update: the merged state must not be worse.
        let mut updated = apply_extension(&current, &cand.wstar, alpha, beta)?;
        let mut loss_after = crate::loss::loss(&updated, act, ts, spec)?;
        let mut shrink = 0;
        while loss_after > loss_before && shrink < 40 {
            alpha *= 0.5;
            beta = 1.0;
            if alpha.abs() < 1e-300 {
                alpha = 0.0;
            }
            updated = apply_extension(&current, &cand.wstar, alpha, beta)?;
            loss_after = crate::loss::loss(&updated, act, ts, spec)?;
            shrink += 1;
        }
        if loss_after > loss_before {
            alpha = 0.0;
            beta = 1.0;
            updated = apply_extension(&current, &cand.wstar, alpha, beta)?;
            loss_after = loss_before;
        }
        current = updated;
        mask = inner_freeze_mask(&entry_arch, current.arch())?;
        extensions.push(ExtensionResult {
            wstar: cand.wstar,
            objective_value: cand.objective_value,
            alpha,
            beta,
            loss_before,
            loss_after,
        });
    }
    Ok(InnerOutcome {
        weights: current,
        extensions,
        epochs,
    })
}

/// The joint rule minimizes `|y - βHF - αz|`, so its residual target is
/// `y = residual + HF`.
fn residual_plus(old_response: &[f64], residual: &[f64]) -> Vec<f64> {
    old_response
        .iter()
        .zip(residual)
        .map(|(o, r)| o + r)
        .collect()
}

fn apply_extension(
    current: &WeightSet,
    wstar: &WeightSet,
    alpha: f64,
    beta: f64,
) -> Result<WeightSet> {
    let base = if beta == 1.0 {
        current.clone()
    } else {
        current.scale_signed(beta)?
    };
    base.direct_sum(&wstar.scale_signed(alpha)?)
}

/// Where the adaptive loop grows the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrowthSite {
    /// Extend the whole network; the extension architecture must match its
    /// depth and input width.
    Whole,
    /// Extend only the last `d_prime + 1` weight layers over data mapped
    /// through the frozen prefix.
    FinalLayers { d_prime: usize },
}

/// Per-round record of the adaptive loop.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub wall_ms: u128,
    pub params: usize,
    pub loss: f64,
    pub error: f64,
    pub extensions: usize,
    /// Cumulative optimizer epochs through the end of this round.
    pub epochs: usize,
}

/// Outcome of the outer loop: the state after every round plus the records.
#[derive(Debug, Clone)]
pub struct AdaptiveOutcome {
    /// `states[r]` is the network after round `r`; `states[0]` is the input.
    pub states: Vec<WeightSet>,
    pub rounds: Vec<RoundRecord>,
}

/// The outer adaptive loop: alternate full training of all parameters with an
/// inner extension round, recording one entry per round. Round losses are
/// non-increasing by the backtracking contracts of both phases. `opt_full`
/// budgets the whole-network training phase of each round, `opt_inner` the
/// per-extension training inside the inner loop.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_train(
    w_init: &WeightSet,
    act: Activation,
    ts: &TrainingSet,
    spec: &LossSpec,
    cfg: &GrowthConfig,
    opt_full: &OptimConfig,
    opt_inner: &OptimConfig,
    rounds: usize,
    seed: u64,
    site: GrowthSite,
) -> Result<AdaptiveOutcome> {
    let mut current = w_init.clone();
    let initial_loss = crate::loss::loss(&current, act, ts, spec)?;
    let mut states = vec![current.clone()];
    let mut records = vec![RoundRecord {
        round: 0,
        wall_ms: 0,
        params: current.param_count(),
        loss: initial_loss,
        error: initial_loss.sqrt(),
        extensions: 0,
        epochs: 0,
    }];
    let mut cumulative_epochs = 0usize;

    for round in 1..=rounds {
        let start = Instant::now();
        let full = train(&current, act, ts, spec, &FrozenMask::none(current.arch()), opt_full)?;
        cumulative_epochs += full.epochs;
        current = full.weights;

        let round_seed = derive_seed(seed, round as u64);
        let (next, extension_count, inner_epochs) = match site {
            GrowthSite::Whole => {
                let inner = inner_extend(&current, act, ts, spec, cfg, opt_inner, round_seed)?;
                (inner.weights, inner.extensions.len(), inner.epochs)
            }
            GrowthSite::FinalLayers { d_prime } => {
                let (w, exts, ep) = partial_final_layers(
                    &current, d_prime, act, ts, spec, cfg, opt_inner, round_seed,
                )?;
                (w, exts.len(), ep)
            }
        };
        cumulative_epochs += inner_epochs;
        current = next;

        let loss_now = crate::loss::loss(&current, act, ts, spec)?;
        records.push(RoundRecord {
            round,
            wall_ms: start.elapsed().as_millis(),
            params: current.param_count(),
            loss: loss_now,
            error: loss_now.sqrt(),
            extensions: extension_count,
            epochs: cumulative_epochs,
        });
        states.push(current.clone());
    }
    Ok(AdaptiveOutcome {
        states,
        rounds: records,
    })
}

/// Grow only the final `d_prime + 1` weight layers: the data is mapped
/// through the frozen prefix (including the activation feeding the suffix),
/// the inner loop runs on the suffix network over the mapped data, and the
/// full network is reassembled. Before any extension the reassembled network
/// realizes exactly the original function; prefix parameters are never
/// touched.
#[allow(clippy::too_many_arguments)]
pub fn partial_final_layers(
    w: &WeightSet,
    d_prime: usize,
    act: Activation,
    ts: &TrainingSet,
    spec: &LossSpec,
    cfg: &GrowthConfig,
    opt_cfg: &OptimConfig,
    seed: u64,
) -> Result<(WeightSet, Vec<ExtensionResult>, usize)> {
    let d = w.arch().depth();
    if d_prime == 0 || d_prime >= d {
        return Err(Error::Domain(format!(
            "partial growth needs 0 < d_prime < depth (= {d}), got {d_prime}"
        )));
    }
    if !spec.is_pointwise() {
        return Err(Error::Composition(
            "the directional stencil operator is tied to the original input space; \
             partial-layer growth supports pointwise operators only"
                .into(),
        ));
    }
    let cut = d - d_prime; // number of prefix weight layers
    let prefix: Vec<LayerWeights> = w.layers()[..cut].to_vec();
    let suffix = WeightSet::from_layers(w.layers()[cut..].to_vec())?;
    let suffix_input = suffix.arch().input_width();

    let mapped = ts.map_inputs(suffix_input, |x| {
        let out = eval_layers(&prefix, act, x).expect("prefix evaluation cannot fail here");
        out.into_iter().map(|v| act.apply(v)).collect()
    })?;

    let inner = inner_extend(&suffix, act, &mapped, spec, cfg, opt_cfg, seed)?;

    let mut layers = prefix;
    layers.extend_from_slice(inner.weights.layers());
    let reassembled = WeightSet::from_layers(layers)?;
    Ok((reassembled, inner.extensions, inner.epochs))
}

/// Surrogate problem for growing the first layers: the loss is linearized
/// with respect to the prefix realization, which yields modified responses
/// and one sensitivity vector per sample (the operator-weighted gradient of
/// the suffix at the prefix output, chained through the activation).
#[derive(Debug, Clone)]
pub struct LinearizedPrefix {
    surrogate: TrainingSet,
    /// `n × w_prefix_out` sensitivities; row `i` maps a prefix perturbation at
    /// `x_i` to the first-order change of the sampled operator response.
    sensitivities: Vec<Vec<f64>>,
    prefix_layer_count: usize,
}

impl LinearizedPrefix {
    /// Inputs `x_i`, modified responses, original point weights.
    pub fn surrogate(&self) -> &TrainingSet {
        &self.surrogate
    }

    pub fn sensitivities(&self) -> &[Vec<f64>] {
        &self.sensitivities
    }

    pub fn prefix_layer_count(&self) -> usize {
        self.prefix_layer_count
    }

    /// Surrogate loss `Σ γ_i (ỹ_i - J_i · P(x_i))²` for prefix layers `P`.
    pub fn loss(&self, prefix: &[LayerWeights], act: Activation) -> Result<f64> {
        let ts = &self.surrogate;
        let mut residuals = vec![0.0; ts.len()];
        for i in 0..ts.len() {
            let p = eval_layers(prefix, act, ts.input(i))?;
            let mut dot = 0.0;
            for (j, v) in self.sensitivities[i].iter().zip(&p) {
                dot += j * v;
            }
            residuals[i] = ts.responses()[i] - dot;
        }
        Ok(weighted_norm_sq(&residuals, ts))
    }

    /// Gradient of the surrogate loss with respect to the prefix parameters,
    /// in the prefix's own vectorization order. At the linearization point it
    /// equals the true loss gradient restricted to the prefix slots.
    pub fn gradient(&self, prefix: &[LayerWeights], act: Activation) -> Result<Vec<f64>> {
        let ts = &self.surrogate;
        let n_params: usize = prefix.iter().map(|l| l.rows * l.cols + l.rows).sum();
        let mut grad = vec![0.0; n_params];
        let mut ws = Workspace::for_layers(prefix);
        let out_width = prefix.last().map(|l| l.rows).unwrap_or(0);
        let mut cot = vec![0.0; out_width];
        for i in 0..ts.len() {
            let x = ts.input(i);
            forward_store(prefix, act, x, &mut ws);
            let p = eval_layers(prefix, act, x)?;
            let mut dot = 0.0;
            for (j, v) in self.sensitivities[i].iter().zip(&p) {
                dot += j * v;
            }
            let scale = -2.0 * ts.point_weights()[i] * (ts.responses()[i] - dot);
            if scale == 0.0 {
                continue;
            }
            for (c, j) in cot.iter_mut().zip(&self.sensitivities[i]) {
                *c = scale * j;
            }
            backward_accumulate(prefix, act, x, &mut ws, &cot, &mut grad, None);
        }
        Ok(grad)
    }

    /// When the prefix output is scalar, the sensitivities fold into a
    /// per-sample diagonal operator, so the surrogate can be driven through
    /// the standard machinery unchanged.
    pub fn as_pointwise_spec(&self) -> Option<LossSpec> {
        if self.sensitivities.iter().all(|j| j.len() == 1) {
            Some(LossSpec::diagonal(
                self.sensitivities.iter().map(|j| j[0]).collect(),
            ))
        } else {
            None
        }
    }
}

/// Linearize the loss around the current prefix: returns the surrogate
/// training set (modified responses) plus per-sample sensitivities. The
/// surrogate loss gradient with respect to prefix parameters matches the true
/// loss gradient at the linearization point.
pub fn first_layers_modified_data(
    w: &WeightSet,
    d_prime: usize,
    act: Activation,
    ts: &TrainingSet,
    spec: &LossSpec,
) -> Result<LinearizedPrefix> {
    let d = w.arch().depth();
    if d_prime == 0 || d_prime >= d {
        return Err(Error::Domain(format!(
            "prefix linearization needs 0 < d_prime < depth (= {d}), got {d_prime}"
        )));
    }
    if !spec.is_pointwise() {
        return Err(Error::Composition(
            "prefix linearization supports pointwise operators only".into(),
        ));
    }
    let factors: Vec<f64> = match &spec.operator {
        crate::loss::OutputOperator::Identity => vec![1.0; ts.len()],
        crate::loss::OutputOperator::Diagonal(h) => h.clone(),
        crate::loss::OutputOperator::DirectionalDerivative { .. } => unreachable!(),
    };
    let cut = d_prime + 1; // prefix weight layers 0..=d_prime
    let prefix = &w.layers()[..cut];
    let suffix = &w.layers()[cut..];
    let prefix_out = prefix.last().unwrap().rows;

    let mut responses = Vec::with_capacity(ts.len());
    let mut sensitivities = Vec::with_capacity(ts.len());
    let mut suffix_ws = Workspace::for_layers(suffix);
    for i in 0..ts.len() {
        let x = ts.input(i);
        let p = eval_layers(prefix, act, x)?;
        let u: Vec<f64> = p.iter().map(|&v| act.apply(v)).collect();
        forward_store(suffix, act, &u, &mut suffix_ws);
        let f_i = eval_layers(suffix, act, &u)?[0];
        let residual_i = ts.responses()[i] - factors[i] * f_i;

        // dS/du by backpropagation, then chain through the activation.
        let mut dummy_grad = vec![0.0; suffix.iter().map(|l| l.rows * l.cols + l.rows).sum()];
        let mut input_cot = vec![0.0; prefix_out];
        backward_accumulate(
            suffix,
            act,
            &u,
            &mut suffix_ws,
            &[1.0],
            &mut dummy_grad,
            Some(&mut input_cot),
        );
        let j: Vec<f64> = input_cot
            .iter()
            .zip(&p)
            .map(|(du, &pre)| factors[i] * du * act.slope(pre))
            .collect();
        if j.iter().any(|v| !v.is_finite()) || !residual_i.is_finite() {
            return Err(Error::Domain(
                "non-finite derivative in the prefix linearization".into(),
            ));
        }
        let mut dot = 0.0;
        for (jj, &pp) in j.iter().zip(&p) {
            dot += jj * pp;
        }
        responses.push(residual_i + dot);
        sensitivities.push(j);
    }
    Ok(LinearizedPrefix {
        surrogate: ts.with_responses(responses)?,
        sensitivities,
        prefix_layer_count: cut,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{loss, residual, response_vector, LossSpec};
    use crate::net::{hat_network, Architecture};
    use crate::optim::gradient;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn arch(widths: &[usize]) -> Architecture {
        Architecture::new(widths.to_vec()).unwrap()
    }

    fn grid_2d(k: usize) -> Vec<Vec<f64>> {
        let mut pts = Vec::new();
        for i in 0..k {
            for j in 0..k {
                pts.push(vec![
                    i as f64 / (k - 1) as f64,
                    j as f64 / (k - 1) as f64,
                ]);
            }
        }
        pts
    }

    fn small_cfg(star: &[usize]) -> GrowthConfig {
        GrowthConfig {
            search_restarts: 16,
            search_ascent_steps: 60,
            l_max: 4,
            ..GrowthConfig::new(arch(star))
        }
    }

    #[test]
    fn wstar_zero_residual_gives_zero_objective() {
        let xs = grid_2d(4);
        let n = xs.len();
        let ts = TrainingSet::uniform(xs, vec![0.0; n]).unwrap();
        let cand = wstar_search(
            &vec![0.0; n],
            Activation::default(),
            &ts,
            &LossSpec::identity(),
            &small_cfg(&[2, 3, 1]),
            1,
        )
        .unwrap();
        assert_eq!(cand.objective_value, 0.0);
    }

    #[test]
    fn wstar_objective_bounded_by_residual_norm_and_normalized() {
        let mut rng = StdRng::seed_from_u64(71);
        let xs = grid_2d(5);
        let n = xs.len();
        let ts = TrainingSet::uniform(xs, vec![0.0; n]).unwrap();
        let act = Activation::default();
        let spec = LossSpec::identity();
        for trial in 0..5 {
            let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cand = wstar_search(&r, act, &ts, &spec, &small_cfg(&[2, 3, 1]), trial).unwrap();
            let r_norm = weighted_norm(&r, &ts);
            assert!(cand.objective_value <= r_norm + 1e-9);
            let z = response_vector(&cand.wstar, act, &ts, &spec).unwrap();
            assert!((weighted_norm(&z, &ts) - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn line_search_examples() {
        let ts = TrainingSet::uniform(vec![vec![0.0], vec![1.0]], vec![0.0, 0.0]).unwrap();
        let r = vec![1.0, 2.0];
        assert!((exact_line_search_alpha(&r, &r, &ts).unwrap() - 1.0).abs() < 1e-15);
        let perp = vec![2.0, -1.0];
        assert!(exact_line_search_alpha(&r, &perp, &ts).unwrap().abs() < 1e-15);
        let half: Vec<f64> = r.iter().map(|v| v / 2.0).collect();
        assert!((exact_line_search_alpha(&r, &half, &ts).unwrap() - 2.0).abs() < 1e-15);
        assert!(exact_line_search_alpha(&r, &[0.0, 0.0], &ts).is_err());
    }

    #[test]
    fn theoretical_alpha_examples() {
        assert!((theoretical_alpha(0.9, 1.0, 4.0, 1.0) - 0.0125).abs() < 1e-15);
        assert!(
            (predicted_reduction_factor(0.9, 1.0, 4.0) - (1.0 - 3.125e-4)).abs() < 1e-15
        );
        assert_eq!(theoretical_alpha(0.9, 1.0, 4.0, 0.0), 0.0);
    }

    #[test]
    fn joint_alpha_beta_examples() {
        let ts = TrainingSet::uniform(vec![vec![0.0], vec![1.0]], vec![0.0, 0.0]).unwrap();
        let old = vec![1.0, 0.0];
        let new = vec![0.0, 1.0];
        let r = vec![2.0, 3.0];
        let (a, b) = joint_alpha_beta(&r, &old, &new, &ts).unwrap();
        assert_eq!(a, 3.0);
        assert_eq!(b, 2.0);

        // residual orthogonal to both
        let (a, b) = joint_alpha_beta(&[0.0, 0.0], &old, &new, &ts).unwrap();
        assert_eq!((a, b), (0.0, 0.0));

        // new = residual, old orthogonal
        let (a, b) = joint_alpha_beta(&new, &old, &new, &ts).unwrap();
        assert_eq!((a, b), (1.0, 0.0));

        // parallel responses
        assert!(matches!(
            joint_alpha_beta(&r, &old, &old, &ts),
            Err(Error::SingularSystem(_))
        ));
    }

    #[test]
    fn mask_structure_matches_direct_sum() {
        let entry = arch(&[2, 3, 2, 1]);
        let composite = arch(&[2, 5, 4, 1]);
        let mask = inner_freeze_mask(&entry, &composite).unwrap();
        assert_eq!(mask.len(), composite.param_count());
        // First layer: rows < 3 frozen entirely.
        assert!(mask.is_frozen(0)); // W0[0,0]
        assert!(!mask.is_frozen(3 * 2)); // W0[3,0] new row
        // Middle layer entries: offset of layer 1 = (2+1)*5 = 15.
        let l1 = 15;
        assert!(mask.is_frozen(l1)); // W1[0,0] old-old
        assert!(mask.is_frozen(l1 + 3)); // W1[0,3] old row, new col
        assert!(mask.is_frozen(l1 + 2 * 5)); // W1[2,0] new row, old col
        assert!(!mask.is_frozen(l1 + 2 * 5 + 3)); // W1[2,3] new-new
        // Output layer: offset = 15 + (5+1)*4 = 39; columns < 2 frozen.
        let l2 = 39;
        assert!(mask.is_frozen(l2));
        assert!(!mask.is_frozen(l2 + 2));
        // Output bias trainable.
        assert!(!mask.is_frozen(composite.param_count() - 1));
    }

    #[test]
    fn inner_extend_zero_budget_returns_input() {
        let mut rng = StdRng::seed_from_u64(73);
        let w = WeightSet::random_uniform(arch(&[2, 2, 1]), 0.5, &mut rng);
        let ts = TrainingSet::uniform(grid_2d(4), vec![1.0; 16]).unwrap();
        let cfg = GrowthConfig {
            l_max: 0,
            ..small_cfg(&[2, 3, 1])
        };
        let out = inner_extend(
            &w,
            Activation::default(),
            &ts,
            &LossSpec::identity(),
            &cfg,
            &OptimConfig::default(),
            5,
        )
        .unwrap();
        assert_eq!(out.weights, w);
        assert!(out.extensions.is_empty());
    }

    #[test]
    fn inner_extend_grows_param_count_exactly() {
        let mut rng = StdRng::seed_from_u64(79);
        let w = WeightSet::random_uniform(arch(&[2, 2, 1]), 0.5, &mut rng);
        let xs = grid_2d(5);
        let ys: Vec<f64> = xs.iter().map(|x| (x[0] + x[1]).powi(2) / 2.0).collect();
        let ts = TrainingSet::uniform(xs, ys).unwrap();
        let cfg = GrowthConfig {
            l_max: 3,
            ..small_cfg(&[2, 3, 1])
        };
        let opt = OptimConfig {
            max_epochs: 60,
            learning_rate: 1e-2,
            ..OptimConfig::default()
        };
        let act = Activation::default();
        let spec = LossSpec::identity();
        let before_params = w.param_count();
        let before_loss = loss(&w, act, &ts, &spec).unwrap();
        let out = inner_extend(&w, act, &ts, &spec, &cfg, &opt, 7).unwrap();
        let star_params = cfg.star_arch.param_count();
        assert_eq!(
            out.weights.param_count(),
            before_params + out.extensions.len() * star_params
        );
        let after_loss = loss(&out.weights, act, &ts, &spec).unwrap();
        assert!(after_loss <= before_loss);
        for ext in &out.extensions {
            assert!(ext.loss_after <= ext.loss_before);
        }
        // Entry weights bit-identical inside the grown network: realize the
        // entry block by zeroing extension columns is structural; check the
        // stored parameters directly via the mask.
        let mask = inner_freeze_mask(w.arch(), out.weights.arch()).unwrap();
        assert_eq!(mask.frozen_count() >= w.param_count() - 1, true);
    }

    #[test]
    fn planted_extension_halves_loss() {
        // Target representable as w0 ⊕ one extension network: the loss should
        // drop by at least half within a few extensions (median over seeds).
        let act = Activation::default();
        let spec = LossSpec::identity();
        let xs = grid_2d(6);
        let mut drops = Vec::new();
        for seed in 0..5u64 {
            let mut rng = StdRng::seed_from_u64(1000 + seed);
            let w0 = WeightSet::random_uniform(arch(&[2, 2, 1]), 0.5, &mut rng);
            let g = WeightSet::random_uniform(arch(&[2, 3, 1]), 1.0, &mut rng);
            let planted = w0.direct_sum(&g).unwrap();
            let ys: Vec<f64> = xs
                .iter()
                .map(|x| planted.realize(act, x).unwrap())
                .collect();
            let ts = TrainingSet::uniform(xs.clone(), ys).unwrap();
            let before = loss(&w0, act, &ts, &spec).unwrap();
            if before == 0.0 {
                continue;
            }
            let cfg = GrowthConfig {
                l_max: 10,
                search_restarts: 24,
                search_ascent_steps: 80,
                ..GrowthConfig::new(arch(&[2, 3, 1]))
            };
            let opt = OptimConfig {
                max_epochs: 200,
                learning_rate: 2e-2,
                ..OptimConfig::default()
            };
            let out = inner_extend(&w0, act, &ts, &spec, &cfg, &opt, seed).unwrap();
            let after = loss(&out.weights, act, &ts, &spec).unwrap();
            drops.push(after / before);
        }
        drops.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = drops[drops.len() / 2];
        assert!(median <= 0.5, "median loss ratio {median}");
    }

    #[test]
    fn adaptive_zero_rounds_records_initial_state() {
        let mut rng = StdRng::seed_from_u64(83);
        let w = WeightSet::random_uniform(arch(&[2, 2, 1]), 0.5, &mut rng);
        let ts = TrainingSet::uniform(grid_2d(4), vec![0.3; 16]).unwrap();
        let out = adaptive_train(
            &w,
            Activation::default(),
            &ts,
            &LossSpec::identity(),
            &small_cfg(&[2, 3, 1]),
            &OptimConfig::default(),
            &OptimConfig::default(),
            0,
            1,
            GrowthSite::Whole,
        )
        .unwrap();
        assert_eq!(out.states.len(), 1);
        assert_eq!(out.rounds.len(), 1);
        assert_eq!(out.rounds[0].round, 0);
    }

    #[test]
    fn adaptive_rounds_are_monotone() {
        let mut rng = StdRng::seed_from_u64(89);
        let w = WeightSet::random_uniform(arch(&[2, 2, 1]), 0.5, &mut rng);
        let xs = grid_2d(5);
        let ys: Vec<f64> = xs.iter().map(|x| (x[0] + x[1]).powi(2) / 2.0).collect();
        let ts = TrainingSet::uniform(xs, ys).unwrap();
        let cfg = GrowthConfig {
            l_max: 2,
            ..small_cfg(&[2, 3, 1])
        };
        let opt = OptimConfig {
            max_epochs: 80,
            learning_rate: 1e-2,
            ..OptimConfig::default()
        };
        let out = adaptive_train(
            &w,
            Activation::default(),
            &ts,
            &LossSpec::identity(),
            &cfg,
            &opt,
            &opt,
            3,
            2,
            GrowthSite::Whole,
        )
        .unwrap();
        for pair in out.rounds.windows(2) {
            assert!(pair[1].loss <= pair[0].loss + 1e-12);
            assert!(pair[1].params >= pair[0].params);
        }
    }

    #[test]
    fn partial_final_layers_preserves_prefix_and_composition() {
        let mut rng = StdRng::seed_from_u64(97);
        let act = Activation::default();
        let spec = LossSpec::identity();
        let w = WeightSet::random_uniform(arch(&[3, 4, 3, 1]), 0.7, &mut rng);
        let xs: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..3).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let ys: Vec<f64> = xs.iter().map(|x| x[0] * x[1] + x[2]).collect();
        let ts = TrainingSet::uniform(xs.clone(), ys).unwrap();

        // Composition identity on the untouched split.
        let cut = w.arch().depth() - 1;
        let prefix = &w.layers()[..cut];
        let suffix = WeightSet::from_layers(w.layers()[cut..].to_vec()).unwrap();
        for x in xs.iter().take(5) {
            let mapped: Vec<f64> = eval_layers(prefix, act, x)
                .unwrap()
                .into_iter()
                .map(|v| act.apply(v))
                .collect();
            let via_split = suffix.realize(act, &mapped).unwrap();
            let direct = w.realize(act, x).unwrap();
            assert!((via_split - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
        }

        let cfg = GrowthConfig {
            l_max: 2,
            ..small_cfg(&[4, 3, 1])
        };
        let opt = OptimConfig {
            max_epochs: 60,
            learning_rate: 1e-2,
            ..OptimConfig::default()
        };
        let (grown, exts, _) =
            partial_final_layers(&w, 1, act, &ts, &spec, &cfg, &opt, 3).unwrap();
        // Prefix parameters bit-identical.
        for (a, b) in grown.layers()[..cut].iter().zip(prefix) {
            assert_eq!(a, b);
        }
        // Only suffix widths grew.
        assert_eq!(grown.arch().widths()[0], 3);
        assert_eq!(grown.arch().widths()[1], 4);
        assert_eq!(
            grown.arch().widths()[2],
            3 + 3 * exts.len()
        );
        // Growth never increased the loss.
        let before = loss(&w, act, &ts, &spec).unwrap();
        let after = loss(&grown, act, &ts, &spec).unwrap();
        assert!(after <= before + 1e-12);

        assert!(partial_final_layers(&w, 2, act, &ts, &spec, &cfg, &opt, 3).is_err());
    }

    #[test]
    fn linearized_prefix_identity_suffix_recovers_targets() {
        // Suffix is a single pass-through layer; with positive prefix outputs
        // the modified responses are exactly the original ones.
        let mut first = LayerWeights::zeros(1, 1);
        first.matrix[0] = 1.0;
        first.bias[0] = 2.0; // keeps the prefix output positive on [0,1]
        let mut last = LayerWeights::zeros(1, 1);
        last.matrix[0] = 1.0;
        let w = WeightSet::from_layers(vec![first, last]).unwrap();
        let xs: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 / 7.0]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x[0] + 1.0).collect();
        let ts = TrainingSet::uniform(xs, ys.clone()).unwrap();
        let lin = first_layers_modified_data(
            &w,
            1,
            Activation::default(),
            &ts,
            &LossSpec::identity(),
        );
        // depth is 1 here, so d_prime must fail; build a 3-layer variant.
        assert!(lin.is_err());

        let mut l0 = LayerWeights::zeros(1, 1);
        l0.matrix[0] = 1.0;
        l0.bias[0] = 2.0;
        let mut l1 = LayerWeights::zeros(1, 1);
        l1.matrix[0] = 1.0;
        let w = WeightSet::from_layers(vec![l0, l1.clone(), l1]).unwrap();
        let lin = first_layers_modified_data(
            &w,
            1,
            Activation::default(),
            &ts,
            &LossSpec::identity(),
        )
        .unwrap();
        for (t, y) in lin.surrogate().responses().iter().zip(&ys) {
            assert!((t - y).abs() < 1e-12);
        }
    }

    #[test]
    fn linearized_prefix_gradient_matches_true_gradient() {
        let mut rng = StdRng::seed_from_u64(101);
        let act = Activation::default();
        let spec = LossSpec::identity();
        let a = arch(&[2, 3, 2, 1]);
        let w = WeightSet::random_uniform(a.clone(), 0.8, &mut rng);
        let xs: Vec<Vec<f64>> = (0..20)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let ys: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ts = TrainingSet::uniform(xs, ys).unwrap();
        let lin = first_layers_modified_data(&w, 1, act, &ts, &spec).unwrap();
        let prefix = &w.layers()[..lin.prefix_layer_count()];

        let surrogate_grad = lin.gradient(prefix, act).unwrap();
        let full_grad = gradient(&w, act, &ts, &spec, &FrozenMask::none(&a)).unwrap();
        let prefix_params = surrogate_grad.len();
        for k in 0..prefix_params {
            let denom = full_grad[k].abs().max(surrogate_grad[k].abs()).max(1e-9);
            assert!(
                (full_grad[k] - surrogate_grad[k]).abs() / denom <= 1e-6,
                "slot {k}: true {} vs surrogate {}",
                full_grad[k],
                surrogate_grad[k]
            );
        }
    }

    #[test]
    fn linearized_prefix_zero_residual_zero_gradient() {
        let mut rng = StdRng::seed_from_u64(103);
        let act = Activation::default();
        let spec = LossSpec::identity();
        let w = WeightSet::random_uniform(arch(&[2, 3, 2, 1]), 0.8, &mut rng);
        let xs: Vec<Vec<f64>> = (0..10)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let ys: Vec<f64> = xs.iter().map(|x| w.realize(act, x).unwrap()).collect();
        let ts = TrainingSet::uniform(xs, ys).unwrap();
        let lin = first_layers_modified_data(&w, 1, act, &ts, &spec).unwrap();
        let g = lin.gradient(&w.layers()[..2], act).unwrap();
        assert!(g.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn hat_direction_is_found_by_search() {
        // Plant a residual that IS a normalized extension response; the
        // search must align almost perfectly.
        let act = Activation::relu();
        let spec = LossSpec::identity();
        let xs = grid_2d(8);
        let n = xs.len();
        let ts = TrainingSet::uniform(xs, vec![0.0; n]).unwrap();
        let hat = hat_network(0.1, 0.5, 0.9, &[0.7, 0.3]).unwrap();
        let z = response_vector(&hat, act, &ts, &spec).unwrap();
        let norm = weighted_norm(&z, &ts);
        let r: Vec<f64> = z.iter().map(|v| v / norm).collect();
        let cfg = GrowthConfig {
            search_restarts: 48,
            search_ascent_steps: 200,
            ..GrowthConfig::new(arch(&[2, 3, 1]))
        };
        let cand = wstar_search(&r, act, &ts, &spec, &cfg, 11).unwrap();
        // alignment = objective since |r| = 1
        assert!(
            cand.objective_value >= 0.95,
            "search alignment {}",
            cand.objective_value
        );
    }

    #[test]
    fn residual_is_consistent_with_loss() {
        let mut rng = StdRng::seed_from_u64(107);
        let act = Activation::default();
        let spec = LossSpec::identity();
        let w = WeightSet::random_uniform(arch(&[2, 3, 1]), 0.8, &mut rng);
        let xs = grid_2d(4);
        let ys: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ts = TrainingSet::uniform(xs, ys).unwrap();
        let r = residual(&w, act, &ts, &spec).unwrap();
        let l = loss(&w, act, &ts, &spec).unwrap();
        assert!((loss_of_residual(&r, &ts) - l).abs() <= 1e-14 * (1.0 + l));
    }
}
