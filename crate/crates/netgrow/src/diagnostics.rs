//! Computable training diagnostics: the optimality indicator obtained from
//! the extension search, stability constants of network decompositions, the
//! vector-sum independence inequality, the stationarity identity residual of
//! the inner loop, and an empirical generalization-error estimator.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::growth::{wstar_search, GrowthConfig};
use crate::loss::{weighted_dot, weighted_norm, LossSpec, TrainingSet};
use crate::net::{Activation, WeightSet};

/// Optimality indicator `C_opt = 2·⟨residual, H R(W*)⟩ / √loss ∈ [0, 2]`.
///
/// Small values certify that even a large extension cannot substantially
/// reduce the loss; large values say a moderate extension pays off.
#[derive(Debug, Clone)]
pub struct OptimalityReport {
    pub c_opt: f64,
    /// Attained search objective `⟨residual, H R(W*)⟩`.
    pub objective_value: f64,
    pub loss: f64,
    /// For each assumed stability constant `L`, the size ratio bound
    /// `1/(16 L² C_opt²)`: extensions no larger than this ratio cannot better
    /// than halve the loss.
    pub implied_size_ratio_bound: Vec<(f64, f64)>,
    /// Which restart won and how many ascent steps it accepted, so an
    /// under-searched indicator is distinguishable from real near-optimality.
    pub restart_index: usize,
    pub ascent_steps: usize,
}

/// Assumed stability constants the size-ratio bound is reported over.
pub const ASSUMED_L_GRID: [f64; 4] = [1.0, 2.0, 5.0, 10.0];

/// Run the extension search on the current residual and report the
/// optimality indicator. Errors with [`Error::ZeroLoss`] when the network
/// already interpolates the data.
pub fn c_opt(
    w: &WeightSet,
    act: Activation,
    ts: &TrainingSet,
    spec: &LossSpec,
    cfg: &GrowthConfig,
    seed: u64,
) -> Result<OptimalityReport> {
    let residual = crate::loss::residual(w, act, ts, spec)?;
    let loss = crate::loss::loss_of_residual(&residual, ts);
    if loss == 0.0 {
        return Err(Error::ZeroLoss(
            "network already optimal on the data; the indicator is undefined".into(),
        ));
    }
    let cand = wstar_search(&residual, act, ts, spec, cfg, seed)?;
    let c_opt = 2.0 * cand.objective_value / loss.sqrt();
    let implied = ASSUMED_L_GRID
        .iter()
        .map(|&l| {
            let bound = if c_opt > 0.0 {
                1.0 / (16.0 * l * l * c_opt * c_opt)
            } else {
                f64::INFINITY
            };
            (l, bound)
        })
        .collect();
    Ok(OptimalityReport {
        c_opt,
        objective_value: cand.objective_value,
        loss,
        implied_size_ratio_bound: implied,
        restart_index: cand.restart_index,
        ascent_steps: cand.ascent_steps,
    })
}

/// Stability of a decomposition: `L = √(Σ|z_j|²) / |Σ z_j|`, the smallest
/// constant satisfying `L²|Σ z_j|² ≥ Σ|z_j|²`.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub l_constant: f64,
    pub part_count: usize,
    pub part_norms: Vec<f64>,
    /// `|Σ z_j|` in the weighted norm.
    pub aggregate_norm: f64,
    /// Whether the size coupling `w*·#χ* ≤ L·#χ` of the stability definition
    /// holds; decompositions violating it are flagged, never rejected.
    pub size_coupling_holds: Option<bool>,
}

/// Stability constant from raw part responses.
pub fn stability_from_responses(
    responses: &[Vec<f64>],
    ts: &TrainingSet,
) -> Result<StabilityReport> {
    if responses.is_empty() {
        return Err(Error::DegenerateInput("no parts given".into()));
    }
    let n = ts.len();
    if responses.iter().any(|z| z.len() != n) {
        return Err(Error::ShapeMismatch(
            "part responses must match the sample count".into(),
        ));
    }
    let mut total = vec![0.0; n];
    let mut sq_sum = 0.0;
    let mut part_norms = Vec::with_capacity(responses.len());
    for z in responses {
        for (t, v) in total.iter_mut().zip(z) {
            *t += v;
        }
        let norm = weighted_norm(z, ts);
        sq_sum += norm * norm;
        part_norms.push(norm);
    }
    let aggregate_norm = weighted_norm(&total, ts);
    if aggregate_norm == 0.0 {
        return Err(Error::TotalCancellation(
            "the part responses sum to zero; the stability constant is infinite".into(),
        ));
    }
    Ok(StabilityReport {
        l_constant: sq_sum.sqrt() / aggregate_norm,
        part_count: responses.len(),
        part_norms,
        aggregate_norm,
        size_coupling_holds: None,
    })
}

/// Stability constant of a list of part networks (for example from
/// [`crate::net::WeightSet::split_final_layer`]).
pub fn stability_constant(
    parts: &[WeightSet],
    act: Activation,
    ts: &TrainingSet,
    spec: &LossSpec,
) -> Result<StabilityReport> {
    if parts.is_empty() {
        return Err(Error::DegenerateInput("no parts given".into()));
    }
    let responses: Vec<Vec<f64>> = parts
        .iter()
        .map(|p| crate::loss::response_vector(p, act, ts, spec))
        .collect::<Result<_>>()?;
    let mut report = stability_from_responses(&responses, ts)?;
    // Size coupling w*·#χ* ≤ L·#χ, with #χ read off the reassembled widths.
    let star_params = parts[0].param_count() as f64;
    let w_star = parts.len() as f64;
    let mut whole_widths = parts[0].arch().widths().to_vec();
    let d = parts[0].arch().depth();
    whole_widths[d] = parts.iter().map(|p| p.arch().widths()[d]).sum();
    let whole_params: usize = whole_widths
        .windows(2)
        .map(|p| (p[0] + 1) * p[1])
        .sum();
    report.size_coupling_holds =
        Some(w_star * star_params <= report.l_constant * whole_params as f64);
    if report.size_coupling_holds == Some(false) {
        log::debug!(
            "stability size coupling violated: {} parts of {} params vs L·#χ = {:.3}",
            parts.len(),
            star_params,
            report.l_constant * whole_params as f64
        );
    }
    Ok(report)
}

/// Both sides of the independence inequality
/// `|y·Σz_j| / |Σz_j| ≤ L·√w·max_j |y·z_j| / |z_j|`.
#[derive(Debug, Clone, Copy)]
pub struct IndependenceCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Evaluate the independence inequality for part responses and a probe
/// vector, with `L` computed from the same responses.
pub fn independence_bound_check(
    responses: &[Vec<f64>],
    probe: &[f64],
    ts: &TrainingSet,
) -> Result<IndependenceCheck> {
    let report = stability_from_responses(responses, ts)?;
    if report.part_norms.iter().any(|&n| n == 0.0) {
        return Err(Error::DegenerateInput(
            "every part response must be nonzero".into(),
        ));
    }
    let n = ts.len();
    if probe.len() != n {
        return Err(Error::ShapeMismatch(
            "probe must match the sample count".into(),
        ));
    }
    let mut total = vec![0.0; n];
    for z in responses {
        for (t, v) in total.iter_mut().zip(z) {
            *t += v;
        }
    }
    let lhs = weighted_dot(probe, &total, ts).abs() / report.aggregate_norm;
    let mut max_ratio: f64 = 0.0;
    for (z, norm) in responses.iter().zip(&report.part_norms) {
        max_ratio = max_ratio.max(weighted_dot(probe, z, ts).abs() / norm);
    }
    let rhs = report.l_constant * (responses.len() as f64).sqrt() * max_ratio;
    // The inequality is proven; the slack only absorbs rounding.
    let holds = lhs <= rhs * (1.0 + 1e-12) + 1e-300;
    Ok(IndependenceCheck { lhs, rhs, holds })
}

/// Relative residual of the stationarity identity
/// `|H R(W_ℓ) - H R(W_0)|² = L(W_0) - L(W_ℓ)`; zero at exact stationarity of
/// the inner loop's final training phase.
pub fn stationarity_identity_residual(
    w0: &WeightSet,
    w_ell: &WeightSet,
    act: Activation,
    ts: &TrainingSet,
    spec: &LossSpec,
) -> Result<f64> {
    let z0 = crate::loss::response_vector(w0, act, ts, spec)?;
    let z1 = crate::loss::response_vector(w_ell, act, ts, spec)?;
    let diff: Vec<f64> = z1.iter().zip(&z0).map(|(a, b)| a - b).collect();
    let lhs = crate::loss::weighted_norm_sq(&diff, ts);
    let l0 = crate::loss::loss(w0, act, ts, spec)?;
    let l1 = crate::loss::loss(w_ell, act, ts, spec)?;
    Ok((lhs - (l0 - l1)).abs() / l0.max(1e-300))
}

/// Deterministic sampler over an axis-aligned box.
#[derive(Debug, Clone)]
pub struct BoxSampler {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl BoxSampler {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::ShapeMismatch("box bounds must match".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| a >= b) {
            return Err(Error::Domain("box must have positive volume".into()));
        }
        Ok(Self { lo, hi })
    }

    /// The unit cube `[0,1]^dim`.
    pub fn unit_cube(dim: usize) -> Self {
        Self {
            lo: vec![0.0; dim],
            hi: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn sample<R: Rng>(&self, rng: &mut R, out: &mut Vec<f64>) {
        out.clear();
        for (l, h) in self.lo.iter().zip(&self.hi) {
            out.push(rng.gen_range(*l..*h));
        }
    }
}

/// Monte-Carlo estimate of the generalization error
/// `G(F) = ∫ |F(x) - y(x)|² dμ(x)` over `m` fresh samples from the box.
pub fn generalization_estimate<F>(
    w: &WeightSet,
    act: Activation,
    target: F,
    sampler: &BoxSampler,
    m: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if sampler.dim() != w.arch().input_width() {
        return Err(Error::ShapeMismatch(format!(
            "sampler dimension {} does not match network input width {}",
            sampler.dim(),
            w.arch().input_width()
        )));
    }
    if m == 0 {
        return Err(Error::Domain("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(sampler.dim());
    let mut sum = crate::loss::KahanSum::default();
    for _ in 0..m {
        sampler.sample(&mut rng, &mut x);
        let diff = w.realize(act, &x)? - target(&x);
        sum.add(diff * diff);
    }
    Ok(sum.value() / m as f64)
}

/// Midpoint-rule estimate of the generalization error on a tensor grid;
/// intended for input widths up to 3.
pub fn generalization_estimate_grid<F>(
    w: &WeightSet,
    act: Activation,
    target: F,
    sampler: &BoxSampler,
    points_per_axis: usize,
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let dim = sampler.dim();
    if dim != w.arch().input_width() {
        return Err(Error::ShapeMismatch(
            "sampler dimension does not match network input width".into(),
        ));
    }
    if dim > 3 {
        return Err(Error::Domain(
            "quadrature grids are provided for input widths up to 3".into(),
        ));
    }
    if points_per_axis == 0 {
        return Err(Error::Domain("need at least one grid point".into()));
    }
    let total = points_per_axis.pow(dim as u32);
    let mut x = vec![0.0; dim];
    let mut sum = crate::loss::KahanSum::default();
    for flat in 0..total {
        let mut idx = flat;
        for k in 0..dim {
            let i = idx % points_per_axis;
            idx /= points_per_axis;
            let t = (i as f64 + 0.5) / points_per_axis as f64;
            x[k] = sampler.lo[k] + t * (sampler.hi[k] - sampler.lo[k]);
        }
        let diff = w.realize(act, &x)? - target(&x);
        sum.add(diff * diff);
    }
    Ok(sum.value() / total as f64)
}

/// Per-neuron stability of one layer transition: the output of each neuron in
/// layer `i` is decomposed into its `w_i` weighted inputs plus the bias, and
/// the stability constant of those vectors is reported.
#[derive(Debug, Clone)]
pub struct LayerStability {
    pub layer: usize,
    /// One report per output neuron of the layer; `None` where the
    /// decomposition cancels completely.
    pub per_neuron: Vec<Option<StabilityReport>>,
    pub max_l: f64,
}

/// Layerwise stability reports together with the scale constants
/// `C_stab = max |R_i(x)_j|` (over layers, neurons and samples) and
/// `C_W = max |entry|` over all weights and biases of layers `1..=d`.
pub fn layerwise_stability(
    w: &WeightSet,
    act: Activation,
    ts: &TrainingSet,
) -> Result<(Vec<LayerStability>, f64, f64)> {
    let layers = w.layers();
    let d = w.arch().depth();
    let n = ts.len();
    // Forward values per sample and layer.
    let mut values: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n); // [sample][layer][neuron]
    for i in 0..n {
        let x = ts.input(i);
        let mut per_layer = Vec::with_capacity(layers.len());
        let mut current = crate::net::eval_layers(&layers[..1], act, x)?;
        per_layer.push(current.clone());
        for l in 1..layers.len() {
            let activated: Vec<f64> = current.iter().map(|&v| act.apply(v)).collect();
            let mut next = vec![0.0; layers[l].rows];
            layers[l].affine_into(&activated, &mut next);
            per_layer.push(next.clone());
            current = next;
        }
        values.push(per_layer);
    }

    let mut c_stab: f64 = 0.0;
    for per_layer in &values {
        for layer_vals in per_layer.iter().skip(1) {
            for &v in layer_vals {
                c_stab = c_stab.max(v.abs());
            }
        }
    }
    let mut c_w: f64 = 0.0;
    for layer in layers.iter().skip(1) {
        for &v in layer.matrix.iter().chain(layer.bias.iter()) {
            c_w = c_w.max(v.abs());
        }
    }

    let mut reports = Vec::new();
    for l in 1..=d {
        let layer = &layers[l];
        let mut per_neuron = Vec::with_capacity(layer.rows);
        for r in 0..layer.rows {
            // Parts: one response per input neuron (weight times activated
            // value) plus the constant bias part.
            let mut responses: Vec<Vec<f64>> = Vec::with_capacity(layer.cols + 1);
            for c in 0..layer.cols {
                let weight = layer.entry(r, c);
                let z: Vec<f64> = (0..n)
                    .map(|i| weight * act.apply(values[i][l - 1][c]))
                    .collect();
                responses.push(z);
            }
            responses.push(vec![layer.bias[r]; n]);
            per_neuron.push(stability_from_responses(&responses, ts).ok());
        }
        let max_l = per_neuron
            .iter()
            .flatten()
            .map(|r| r.l_constant)
            .fold(0.0, f64::max);
        reports.push(LayerStability {
            layer: l,
            per_neuron,
            max_l,
        });
    }
    Ok((reports, c_stab, c_w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Architecture;
    use rand::rngs::StdRng;

    fn arch(widths: &[usize]) -> Architecture {
        Architecture::new(widths.to_vec()).unwrap()
    }

    fn flat_ts(n: usize) -> TrainingSet {
        TrainingSet::uniform(
            (0..n).map(|i| vec![i as f64 / n as f64]).collect(),
            vec![0.0; n],
        )
        .unwrap()
    }

    #[test]
    fn stability_of_identical_parts() {
        let ts = flat_ts(4);
        let z = vec![vec![1.0, 2.0, -1.0, 0.5]; 3];
        let report = stability_from_responses(&z, &ts).unwrap();
        assert!((report.l_constant - 1.0 / 3.0_f64.sqrt()).abs() < 1e-12);
        assert_eq!(report.part_count, 3);
    }

    #[test]
    fn stability_of_orthonormal_parts() {
        let ts = flat_ts(3);
        // Orthonormal in the weighted inner product: scale by √n.
        let s = 3.0_f64.sqrt();
        let z = vec![
            vec![s, 0.0, 0.0],
            vec![0.0, s, 0.0],
            vec![0.0, 0.0, s],
        ];
        let report = stability_from_responses(&z, &ts).unwrap();
        assert!((report.l_constant - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stability_blows_up_under_cancellation() {
        let ts = flat_ts(2);
        let z1 = vec![1.0, 0.5];
        let z2: Vec<f64> = z1.iter().map(|v| -0.999 * v).collect();
        let report = stability_from_responses(&[z1, z2], &ts).unwrap();
        assert!(report.l_constant > 100.0, "L = {}", report.l_constant);

        let z1 = vec![1.0, 0.5];
        let z2: Vec<f64> = z1.iter().map(|v| -v).collect();
        assert!(matches!(
            stability_from_responses(&[z1, z2], &ts),
            Err(Error::TotalCancellation(_))
        ));
    }

    #[test]
    fn stability_floor_from_triangle_inequality() {
        let mut rng = <StdRng as rand::SeedableRng>::seed_from_u64(5);
        let ts = flat_ts(6);
        for _ in 0..200 {
            let parts: Vec<Vec<f64>> = (0..4)
                .map(|_| {
                    (0..6)
                        .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
                        .collect()
                })
                .collect();
            if let Ok(report) = stability_from_responses(&parts, &ts) {
                assert!(report.l_constant >= 1.0 / (report.part_count as f64).sqrt() - 1e-12);
            }
        }
    }

    #[test]
    fn independence_inequality_holds() {
        let mut rng = <StdRng as rand::SeedableRng>::seed_from_u64(9);
        let ts = flat_ts(5);
        for _ in 0..300 {
            let parts: Vec<Vec<f64>> = (0..3)
                .map(|_| {
                    (0..5)
                        .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
                        .collect()
                })
                .collect();
            let probe: Vec<f64> = (0..5)
                .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
                .collect();
            match independence_bound_check(&parts, &probe, &ts) {
                Ok(check) => assert!(check.holds, "lhs {} rhs {}", check.lhs, check.rhs),
                Err(Error::TotalCancellation(_)) | Err(Error::DegenerateInput(_)) => {}
                Err(e) => panic!("unexpected error {e}"),
            }
        }
    }

    #[test]
    fn independence_probe_orthogonal_to_sum() {
        let ts = flat_ts(2);
        let parts = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        // Sum is (1,1); probe (1,-1) is weighted-orthogonal to it.
        let check = independence_bound_check(&parts, &[1.0, -1.0], &ts).unwrap();
        assert!(check.lhs.abs() < 1e-15);
        assert!(check.holds);
    }

    #[test]
    fn stationarity_residual_zero_for_silent_extension() {
        let mut rng = <StdRng as rand::SeedableRng>::seed_from_u64(13);
        let act = Activation::default();
        let spec = LossSpec::identity();
        let w0 = WeightSet::random_uniform(arch(&[1, 2, 1]), 0.5, &mut rng);
        let zero_ext = WeightSet::zeros(arch(&[1, 3, 1]));
        let w1 = w0.direct_sum(&zero_ext).unwrap();
        let ts = TrainingSet::uniform(
            (0..6).map(|i| vec![i as f64 / 5.0]).collect(),
            (0..6).map(|i| (i as f64).sin()).collect(),
        )
        .unwrap();
        let r = stationarity_identity_residual(&w0, &w1, act, &ts, &spec).unwrap();
        assert!(r < 1e-14);
    }

    #[test]
    fn generalization_of_constant_network() {
        let mut w = WeightSet::zeros(arch(&[2, 2, 1]));
        let mut layers = w.layers().to_vec();
        layers[1].bias[0] = 3.0;
        w = WeightSet::from_layers(layers).unwrap();
        let sampler = BoxSampler::unit_cube(2);
        let g = generalization_estimate(&w, Activation::default(), |_| 0.0, &sampler, 5000, 7)
            .unwrap();
        assert!((g - 9.0).abs() < 1e-9);
        let g_grid =
            generalization_estimate_grid(&w, Activation::default(), |_| 0.0, &sampler, 16)
                .unwrap();
        assert!((g_grid - 9.0).abs() < 1e-9);
    }

    #[test]
    fn generalization_zero_when_exact() {
        let mut rng = <StdRng as rand::SeedableRng>::seed_from_u64(17);
        let act = Activation::default();
        let w = WeightSet::random_uniform(arch(&[2, 3, 1]), 0.5, &mut rng);
        let wc = w.clone();
        let sampler = BoxSampler::unit_cube(2);
        let g = generalization_estimate(
            &w,
            act,
            move |x| wc.realize(act, x).unwrap(),
            &sampler,
            2000,
            3,
        )
        .unwrap();
        assert_eq!(g, 0.0);
    }

    #[test]
    fn layerwise_constants_are_max_abs() {
        let mut rng = <StdRng as rand::SeedableRng>::seed_from_u64(19);
        let w = WeightSet::random_uniform(arch(&[2, 3, 2, 1]), 0.9, &mut rng);
        let ts = TrainingSet::uniform(
            (0..8)
                .map(|i| vec![i as f64 / 8.0, (i as f64 / 8.0).powi(2)])
                .collect(),
            vec![0.0; 8],
        )
        .unwrap();
        let (reports, c_stab, c_w) = layerwise_stability(&w, Activation::default(), &ts).unwrap();
        assert_eq!(reports.len(), 2);
        let expected_cw = w.layers()[1..]
            .iter()
            .flat_map(|l| l.matrix.iter().chain(l.bias.iter()))
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        assert_eq!(c_w, expected_cw);
        assert!(c_stab >= 0.0);
    }
}
