//! Exact loss gradients (backpropagation), full-batch Adam with backtracking
//! so optimization never ends worse than it started, a relative-progress
//! stall detector, and a line-search polish that drives the unfrozen
//! parameters to a small gradient norm.
//!
//! The flat gradient vector and the frozen mask follow the canonical
//! vectorization order of [`crate::net::WeightSet::to_flat`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::{weighted_norm_sq, KahanSum, LossSpec, TrainingSet};
use crate::net::{Activation, Architecture, LayerWeights, WeightSet};

/// Optimizer settings. Nothing here is architecture-specific.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Stall window in epochs.
    pub stall_window: usize,
    /// Relative loss improvement per window below which training stalls.
    pub stall_rel_tol: f64,
    /// `None` runs full-batch; acceptance runs use full-batch for determinism.
    pub batch_size: Option<usize>,
    /// Seed for mini-batch shuffling; ignored in full-batch mode.
    pub shuffle_seed: u64,
    /// When positive, stop as soon as the unfrozen gradient norm drops below
    /// this value; `0.0` disables the check.
    pub grad_norm_tol: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 2000,
            stall_window: 200,
            stall_rel_tol: 1e-3,
            batch_size: None,
            shuffle_seed: 0,
            grad_norm_tol: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if self.stall_window == 0 {
            return Err(Error::Config("stall_window must be positive".into()));
        }
        if !(self.stall_rel_tol > 0.0) {
            return Err(Error::Config("stall_rel_tol must be > 0".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-parameter freeze flags aligned with the canonical vectorization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrozenMask {
    flags: Vec<bool>,
}

impl FrozenMask {
    /// Everything trainable.
    pub fn none(arch: &Architecture) -> Self {
        Self {
            flags: vec![false; arch.param_count()],
        }
    }

    /// Everything frozen.
    pub fn all(arch: &Architecture) -> Self {
        Self {
            flags: vec![true; arch.param_count()],
        }
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    #[inline]
    pub fn is_frozen(&self, index: usize) -> bool {
        self.flags[index]
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn frozen_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn any_trainable(&self) -> bool {
        self.flags.iter().any(|&f| !f)
    }

    fn check(&self, arch: &Architecture) -> Result<()> {
        if self.flags.len() != arch.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} flags, architecture {} has {} parameters",
                self.flags.len(),
                arch,
                arch.param_count()
            )));
        }
        Ok(())
    }
}

/// Reusable forward/backward buffers for one layer chain.
pub(crate) struct Workspace {
    /// `pre[i]` holds the affine output of layer `i` (before activation).
    pre: Vec<Vec<f64>>,
    cot: Vec<f64>,
    cot_next: Vec<f64>,
    scratch_point: Vec<f64>,
}

impl Workspace {
    pub(crate) fn for_layers(layers: &[LayerWeights]) -> Self {
        let pre = layers.iter().map(|l| vec![0.0; l.rows]).collect();
        let widest = layers.iter().map(|l| l.rows.max(l.cols)).max().unwrap_or(1);
        Self {
            pre,
            cot: vec![0.0; widest],
            cot_next: vec![0.0; widest],
            scratch_point: Vec::new(),
        }
    }

    /// First component of the last stored affine output.
    #[inline]
    pub(crate) fn output_scalar(&self) -> f64 {
        self.pre.last().expect("workspace has layers")[0]
    }
}

/// Forward pass storing every layer's affine output in `ws.pre`.
pub(crate) fn forward_store(
    layers: &[LayerWeights],
    act: Activation,
    x: &[f64],
    ws: &mut Workspace,
) {
    layers[0].affine_into(x, &mut ws.pre[0]);
    for i in 1..layers.len() {
        ws.scratch_point.clear();
        ws.scratch_point
            .extend(ws.pre[i - 1].iter().map(|&v| act.apply(v)));
        let (_, tail) = ws.pre.split_at_mut(i);
        layers[i].affine_into(&ws.scratch_point, &mut tail[0]);
    }
}

/// Backward pass for a chain whose forward values are in `ws.pre`.
///
/// Accumulates parameter gradients (scaled by the output cotangent) into
/// `grad`, which must have one slot per parameter of `layers` in
/// vectorization order. When `input_cot` is given, the cotangent with respect
/// to the raw input is accumulated there.
pub(crate) fn backward_accumulate(
    layers: &[LayerWeights],
    act: Activation,
    x: &[f64],
    ws: &mut Workspace,
    out_cot: &[f64],
    grad: &mut [f64],
    mut input_cot: Option<&mut [f64]>,
) {
    let last = layers.len() - 1;
    ws.cot[..out_cot.len()].copy_from_slice(out_cot);
    // Offsets of each layer inside the flat gradient.
    let mut offset = grad.len();
    for i in (0..=last).rev() {
        let layer = &layers[i];
        offset -= layer.rows * layer.cols + layer.rows;
        let (w_grad, b_grad) = grad[offset..offset + layer.rows * layer.cols + layer.rows]
            .split_at_mut(layer.rows * layer.cols);
        // Gradient contributions of this layer.
        if i == 0 {
            for r in 0..layer.rows {
                let c_r = ws.cot[r];
                if c_r != 0.0 {
                    for (g, &v) in w_grad[r * layer.cols..(r + 1) * layer.cols]
                        .iter_mut()
                        .zip(x.iter())
                    {
                        *g += c_r * v;
                    }
                }
                b_grad[r] += c_r;
            }
        } else {
            let below = &ws.pre[i - 1];
            for r in 0..layer.rows {
                let c_r = ws.cot[r];
                if c_r != 0.0 {
                    for (g, &p) in w_grad[r * layer.cols..(r + 1) * layer.cols]
                        .iter_mut()
                        .zip(below.iter())
                    {
                        *g += c_r * act.apply(p);
                    }
                }
                b_grad[r] += c_r;
            }
        }
        // Cotangent for the previous stage.
        if i > 0 {
            let below = &ws.pre[i - 1];
            for c in 0..layer.cols {
                let mut acc = 0.0;
                for r in 0..layer.rows {
                    acc += layer.matrix[r * layer.cols + c] * ws.cot[r];
                }
                ws.cot_next[c] = acc * act.slope(below[c]);
            }
            std::mem::swap(&mut ws.cot, &mut ws.cot_next);
        } else if let Some(ic) = input_cot.as_deref_mut() {
            for c in 0..layer.cols {
                let mut acc = 0.0;
                for r in 0..layer.rows {
                    acc += layer.matrix[r * layer.cols + c] * ws.cot[r];
                }
                ic[c] += acc;
            }
        }
    }
}

/// Loss and its exact gradient, with frozen positions zeroed.
fn gradient_and_loss_impl(
    weights: &WeightSet,
    act: Activation,
    ts: &TrainingSet,
    spec: &LossSpec,
    mask: &FrozenMask,
    sample_subset: Option<&[usize]>,
) -> Result<(Vec<f64>, f64)> {
    mask.check(weights.arch())?;
    let layers = weights.layers();
    let mut ws = Workspace::for_layers(layers);

    // Residuals first (also yields the loss).
    let resp = crate::loss::response_vector(weights, act, ts, spec)?;
    let mut res = vec![0.0; ts.len()];
    for i in 0..ts.len() {
        res[i] = ts.responses()[i] - resp[i];
    }
    let loss = weighted_norm_sq(&res, ts);

    let mut grad = vec![0.0; weights.param_count()];
    let gammas = ts.point_weights();
    let mut scratch = Vec::new();
    let full_range: Vec<usize>;
    let indices: &[usize] = match sample_subset {
        Some(s) => s,
        None => {
            full_range = (0..ts.len()).collect();
            &full_range
        }
    };
    for &i in indices {
        let base_cot = -2.0 * gammas[i] * res[i];
        if base_cot == 0.0 {
            continue;
        }
        spec.for_each_point(ts, i, &mut scratch, |point, coeff| {
            forward_store(layers, act, point, &mut ws);
            backward_accumulate(
                layers,
                act,
                point,
                &mut ws,
                &[base_cot * coeff],
                &mut grad,
                None,
            );
            Ok(())
        })?;
    }
    for (g, &frozen) in grad.iter_mut().zip(mask.flags()) {
        if frozen {
            *g = 0.0;
        }
    }
    Ok((grad, loss))
}

/// Exact gradient of the loss at `weights`; frozen positions are zero.
pub fn gradient(
    weights: &WeightSet,
    act: Activation,
    ts: &TrainingSet,
    spec: &LossSpec,
    mask: &FrozenMask,
) -> Result<Vec<f64>> {
    gradient_and_loss_impl(weights, act, ts, spec, mask, None).map(|(g, _)| g)
}

/// Gradient together with the loss at the same point.
pub fn gradient_and_loss(
    weights: &WeightSet,
    act: Activation,
    ts: &TrainingSet,
    spec: &LossSpec,
    mask: &FrozenMask,
) -> Result<(Vec<f64>, f64)> {
    gradient_and_loss_impl(weights, act, ts, spec, mask, None)
}

/// Euclidean norm over the unfrozen gradient entries.
pub fn unfrozen_grad_norm(grad: &[f64], mask: &FrozenMask) -> f64 {
    let mut sum = KahanSum::default();
    for (g, &frozen) in grad.iter().zip(mask.flags()) {
        if !frozen {
            sum.add(g * g);
        }
    }
    sum.value().max(0.0).sqrt()
}

/// Outcome of a training phase.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub weights: WeightSet,
    /// Loss history: entry state, one value per epoch, and the final state.
    pub losses: Vec<f64>,
    /// Epochs actually run.
    pub epochs: usize,
    pub stalled: bool,
    /// Unfrozen gradient norm at the returned weights.
    pub final_grad_norm: f64,
}

/// True iff the relative loss improvement over the last window is below the
/// configured threshold.
pub fn is_stalled(losses: &[f64], cfg: &OptimConfig) -> bool {
    if losses.len() < cfg.stall_window + 1 {
        return false;
    }
    let t = losses.len() - 1;
    let prev = losses[t - cfg.stall_window];
    let improvement = prev - losses[t];
    improvement / prev.max(cfg.epsilon) < cfg.stall_rel_tol
}

/// Adam with backtracking: the best weights seen along the trajectory are
/// snapshotted every epoch and returned, so the outcome is never worse than
/// the input. Terminates at `max_epochs`, on stall, or at the gradient
/// tolerance when one is set.
pub fn train(
    weights: &WeightSet,
    act: Activation,
    ts: &TrainingSet,
    spec: &LossSpec,
    mask: &FrozenMask,
    cfg: &OptimConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    mask.check(weights.arch())?;
    let arch = weights.arch().clone();
    let n_params = arch.param_count();
    let mut flat = weights.to_flat();
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut step = 0usize;

    let mut losses = Vec::with_capacity(cfg.max_epochs + 2);
    let mut best_loss = f64::INFINITY;
    let mut best_flat = flat.clone();
    let mut stalled = false;
    let mut epochs = 0usize;

    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..ts.len()).collect();

    let adam_step = |flat: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: usize| {
        let bias1 = 1.0 - cfg.adam_beta1.powi(t as i32);
        let bias2 = 1.0 - cfg.adam_beta2.powi(t as i32);
        for i in 0..flat.len() {
            if mask.is_frozen(i) {
                continue;
            }
            let g = grad[i];
            m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g;
            v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            flat[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    };

    for epoch in 0..cfg.max_epochs {
        let current = WeightSet::from_flat(arch.clone(), &flat)?;
        match cfg.batch_size {
            None => {
                let (grad, loss_now) =
                    gradient_and_loss_impl(&current, act, ts, spec, mask, None)?;
                if !loss_now.is_finite() {
                    return Err(Error::NumericDivergence {
                        epoch,
                        last_finite: Box::new(WeightSet::from_flat(arch, &best_flat)?),
                    });
                }
                losses.push(loss_now);
                if loss_now < best_loss {
                    best_loss = loss_now;
                    best_flat.copy_from_slice(&flat);
                }
                if is_stalled(&losses, cfg) {
                    stalled = true;
                    break;
                }
                if cfg.grad_norm_tol > 0.0 && unfrozen_grad_norm(&grad, mask) <= cfg.grad_norm_tol
                {
                    break;
                }
                step += 1;
                adam_step(&mut flat, &grad, &mut m, &mut v, step);
            }
            Some(batch) => {
                // One epoch = one shuffled pass over the data in batches; the
                // full loss is evaluated once per epoch for the history.
                let loss_now = crate::loss::loss(&current, act, ts, spec)?;
                if !loss_now.is_finite() {
                    return Err(Error::NumericDivergence {
                        epoch,
                        last_finite: Box::new(WeightSet::from_flat(arch, &best_flat)?),
                    });
                }
                losses.push(loss_now);
                if loss_now < best_loss {
                    best_loss = loss_now;
                    best_flat.copy_from_slice(&flat);
                }
                if is_stalled(&losses, cfg) {
                    stalled = true;
                    break;
                }
                order.shuffle(&mut batch_rng);
                for chunk in order.chunks(batch) {
                    let w_now = WeightSet::from_flat(arch.clone(), &flat)?;
                    let (grad, _) =
                        gradient_and_loss_impl(&w_now, act, ts, spec, mask, Some(chunk))?;
                    step += 1;
                    adam_step(&mut flat, &grad, &mut m, &mut v, step);
                }
            }
        }
        epochs = epoch + 1;
    }

    // Account for the state after the last update.
    let final_ws = WeightSet::from_flat(arch.clone(), &flat)?;
    let final_loss = crate::loss::loss(&final_ws, act, ts, spec)?;
    losses.push(final_loss);
    if final_loss.is_finite() && final_loss < best_loss {
        best_flat.copy_from_slice(&flat);
    }

    let best = WeightSet::from_flat(arch, &best_flat)?;
    let final_grad = gradient(&best, act, ts, spec, mask)?;
    Ok(TrainReport {
        final_grad_norm: unfrozen_grad_norm(&final_grad, mask),
        weights: best,
        losses,
        epochs,
        stalled,
    })
}

/// Plain gradient descent with Armijo backtracking on the unfrozen
/// parameters, run until the gradient norm drops below `grad_tol` or the
/// iteration budget is exhausted. Monotone by construction; used to reach
/// the near-stationary states the identity diagnostics require.
pub fn polish(
    weights: &WeightSet,
    act: Activation,
    ts: &TrainingSet,
    spec: &LossSpec,
    mask: &FrozenMask,
    grad_tol: f64,
    max_iters: usize,
) -> Result<TrainReport> {
    mask.check(weights.arch())?;
    let arch = weights.arch().clone();
    let mut flat = weights.to_flat();
    let mut step = 1.0f64;
    let mut losses = Vec::new();
    let mut grad_norm = f64::INFINITY;
    let mut iters = 0usize;
    for _ in 0..max_iters {
        let current = WeightSet::from_flat(arch.clone(), &flat)?;
        let (grad, loss_now) = gradient_and_loss_impl(&current, act, ts, spec, mask, None)?;
        losses.push(loss_now);
        grad_norm = unfrozen_grad_norm(&grad, mask);
        if grad_norm <= grad_tol {
            break;
        }
        let g_sq = grad_norm * grad_norm;
        let mut accepted = false;
        let mut t = step;
        for _ in 0..64 {
            let mut candidate = flat.clone();
            for i in 0..candidate.len() {
                if !mask.is_frozen(i) {
                    candidate[i] -= t * grad[i];
                }
            }
            let cand_loss = crate::loss::loss(
                &WeightSet::from_flat(arch.clone(), &candidate)?,
                act,
                ts,
                spec,
            )?;
            if cand_loss <= loss_now - 1e-4 * t * g_sq {
                flat = candidate;
                step = (t * 2.0).min(1e6);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iters += 1;
        if !accepted {
            // Stuck at a kink; no descent along the negative gradient.
            break;
        }
    }
    let final_ws = WeightSet::from_flat(arch, &flat)?;
    let final_loss = crate::loss::loss(&final_ws, act, ts, spec)?;
    losses.push(final_loss);
    Ok(TrainReport {
        weights: final_ws,
        losses,
        epochs: iters,
        stalled: false,
        final_grad_norm: grad_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{loss, LossSpec, TrainingSet};
    use crate::net::{Architecture, WeightSet};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn arch(widths: &[usize]) -> Architecture {
        Architecture::new(widths.to_vec()).unwrap()
    }

    fn line_data(n: usize) -> TrainingSet {
        let xs: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / (n - 1) as f64]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x[0]).collect();
        TrainingSet::uniform(xs, ys).unwrap()
    }

    #[test]
    fn gradient_zero_at_interpolant() {
        let ts = TrainingSet::uniform(vec![vec![0.2], vec![0.8]], vec![4.0, 4.0]).unwrap();
        let mut layers = WeightSet::zeros(arch(&[1, 2, 1])).layers().to_vec();
        layers[1].bias[0] = 4.0;
        let w = WeightSet::from_layers(layers).unwrap();
        let g = gradient(
            &w,
            Activation::default(),
            &ts,
            &LossSpec::identity(),
            &FrozenMask::none(w.arch()),
        )
        .unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = StdRng::seed_from_u64(41);
        let act = Activation::default();
        let spec = LossSpec::identity();
        for &widths in &[&[1usize, 3, 1][..], &[2, 4, 1], &[2, 3, 2, 1]] {
            let a = arch(widths);
            let xs: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..widths[0]).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let ys: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ts = TrainingSet::uniform(xs, ys).unwrap();
            let w = WeightSet::random_uniform(a.clone(), 1.0, &mut rng);
            let mask = FrozenMask::none(&a);
            let g = gradient(&w, act, &ts, &spec, &mask).unwrap();
            let flat = w.to_flat();
            let h = 1e-6;
            for k in 0..flat.len() {
                let mut plus = flat.clone();
                plus[k] += h;
                let mut minus = flat.clone();
                minus[k] -= h;
                let lp = loss(
                    &WeightSet::from_flat(a.clone(), &plus).unwrap(),
                    act,
                    &ts,
                    &spec,
                )
                .unwrap();
                let lm = loss(
                    &WeightSet::from_flat(a.clone(), &minus).unwrap(),
                    act,
                    &ts,
                    &spec,
                )
                .unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let denom = fd.abs().max(g[k].abs()).max(1e-6);
                assert!(
                    (fd - g[k]).abs() / denom <= 1e-5,
                    "component {k}: fd {fd} vs analytic {}",
                    g[k]
                );
            }
        }
    }

    #[test]
    fn fully_frozen_mask_gives_zero_gradient() {
        let mut rng = StdRng::seed_from_u64(43);
        let a = arch(&[1, 3, 1]);
        let w = WeightSet::random_uniform(a.clone(), 1.0, &mut rng);
        let g = gradient(
            &w,
            Activation::default(),
            &line_data(8),
            &LossSpec::identity(),
            &FrozenMask::all(&a),
        )
        .unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_fits_linear_target() {
        let mut rng = StdRng::seed_from_u64(47);
        let a = arch(&[1, 2, 1]);
        let w = WeightSet::random_uniform(a.clone(), 0.5, &mut rng);
        let ts = line_data(16);
        let cfg = OptimConfig {
            learning_rate: 2e-2,
            max_epochs: 6000,
            stall_window: 800,
            stall_rel_tol: 1e-9,
            ..OptimConfig::default()
        };
        let report = train(
            &w,
            Activation::default(),
            &ts,
            &LossSpec::identity(),
            &FrozenMask::none(&a),
            &cfg,
        )
        .unwrap();
        let final_loss = loss(
            &report.weights,
            Activation::default(),
            &ts,
            &LossSpec::identity(),
        )
        .unwrap();
        assert!(final_loss < 1e-6, "final loss {final_loss}");
    }

    #[test]
    fn adversarial_learning_rate_never_ends_worse() {
        let mut rng = StdRng::seed_from_u64(53);
        let a = arch(&[1, 3, 1]);
        let w = WeightSet::random_uniform(a.clone(), 0.5, &mut rng);
        let ts = line_data(8);
        let act = Activation::default();
        let spec = LossSpec::identity();
        let start = loss(&w, act, &ts, &spec).unwrap();
        let cfg = OptimConfig {
            learning_rate: 1e3,
            max_epochs: 200,
            ..OptimConfig::default()
        };
        let report = train(&w, act, &ts, &spec, &FrozenMask::none(&a), &cfg).unwrap();
        let end = loss(&report.weights, act, &ts, &spec).unwrap();
        assert!(end <= start);
    }

    #[test]
    fn stationary_start_stalls_within_one_window() {
        let ts = TrainingSet::uniform(vec![vec![0.1], vec![0.9]], vec![1.0, 1.0]).unwrap();
        let mut layers = WeightSet::zeros(arch(&[1, 2, 1])).layers().to_vec();
        layers[1].bias[0] = 1.0;
        let w = WeightSet::from_layers(layers).unwrap();
        let cfg = OptimConfig {
            max_epochs: 1000,
            stall_window: 50,
            ..OptimConfig::default()
        };
        let report = train(
            &w,
            Activation::default(),
            &ts,
            &LossSpec::identity(),
            &FrozenMask::none(w.arch()),
            &cfg,
        )
        .unwrap();
        assert!(report.stalled);
        assert!(report.epochs <= cfg.stall_window + 1);
        assert_eq!(report.weights, w);
    }

    #[test]
    fn stall_detector_thresholds() {
        let cfg = OptimConfig {
            stall_window: 10,
            stall_rel_tol: 1e-3,
            ..OptimConfig::default()
        };
        let flat = vec![1.0; 12];
        assert!(is_stalled(&flat, &cfg));
        let halving: Vec<f64> = (0..12).map(|i| 0.5f64.powi(i)).collect();
        assert!(!is_stalled(&halving, &cfg));
        // decreasing by stall_rel_tol/2 per window
        let slow: Vec<f64> = (0..12)
            .map(|i| 1.0 - (cfg.stall_rel_tol / 2.0) * (i as f64 / 10.0))
            .collect();
        assert!(is_stalled(&slow, &cfg));
    }

    #[test]
    fn frozen_parameters_stay_bit_identical() {
        let mut rng = StdRng::seed_from_u64(59);
        let a = arch(&[1, 4, 1]);
        let w = WeightSet::random_uniform(a.clone(), 0.5, &mut rng);
        let mut flags = vec![false; a.param_count()];
        for (i, f) in flags.iter_mut().enumerate() {
            *f = i % 2 == 0;
        }
        let mask = FrozenMask::from_flags(flags.clone());
        let cfg = OptimConfig {
            learning_rate: 1e-2,
            max_epochs: 300,
            ..OptimConfig::default()
        };
        let report = train(
            &w,
            Activation::default(),
            &line_data(8),
            &LossSpec::identity(),
            &mask,
            &cfg,
        )
        .unwrap();
        let before = w.to_flat();
        let after = report.weights.to_flat();
        for i in 0..before.len() {
            if flags[i] {
                assert_eq!(before[i].to_bits(), after[i].to_bits());
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = StdRng::seed_from_u64(61);
        let a = arch(&[1, 3, 1]);
        let w = WeightSet::random_uniform(a.clone(), 0.5, &mut rng);
        let ts = line_data(8);
        let cfg = OptimConfig {
            learning_rate: 5e-3,
            max_epochs: 200,
            batch_size: Some(3),
            shuffle_seed: 9,
            ..OptimConfig::default()
        };
        let r1 = train(
            &w,
            Activation::default(),
            &ts,
            &LossSpec::identity(),
            &FrozenMask::none(&a),
            &cfg,
        )
        .unwrap();
        let r2 = train(
            &w,
            Activation::default(),
            &ts,
            &LossSpec::identity(),
            &FrozenMask::none(&a),
            &cfg,
        )
        .unwrap();
        assert_eq!(r1.weights, r2.weights);
        assert_eq!(r1.losses, r2.losses);
    }

    #[test]
    fn polish_reaches_small_gradient() {
        let mut rng = StdRng::seed_from_u64(67);
        let a = arch(&[1, 2, 1]);
        let w = WeightSet::random_uniform(a.clone(), 0.5, &mut rng);
        let ts = line_data(12);
        let report = polish(
            &w,
            Activation::default(),
            &ts,
            &LossSpec::identity(),
            &FrozenMask::none(&a),
            1e-8,
            20000,
        )
        .unwrap();
        assert!(
            report.final_grad_norm <= 1e-8 || report.epochs == 20000,
            "grad norm {}",
            report.final_grad_norm
        );
    }
}
