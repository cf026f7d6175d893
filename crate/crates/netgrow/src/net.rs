//! Architecture and weight data model together with the network calculus the
//! growth machinery is built on: realization, homogeneous weight scaling,
//! direct sums, final-layer splits and hat networks.
//!
//! All values are immutable; every operation returns a fresh [`WeightSet`].
//! Parameters are identified with a flat vector through the canonical
//! vectorization order `W_0` (row-major), `B_0`, `W_1`, `B_1`, ... which is
//! also the order used by [`WeightSet::to_flat`], the frozen masks of the
//! optimizer and the on-disk weight format (see [`WeightSet::write_to`]).

use std::fmt;
use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};

/// Leaky-ReLU activation `x ↦ max(x, δ·x)` for a fixed `0 ≤ δ < 1`.
///
/// The activation is positively homogeneous of degree one, which is what the
/// whole weight-scaling calculus rests on. At the kink the derivative
/// convention is the right derivative (slope 1 at 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activation {
    delta_relu: f64,
}

impl Activation {
    /// Leaky-ReLU with the given negative-side slope.
    pub fn leaky_relu(delta_relu: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&delta_relu) {
            return Err(Error::Domain(format!(
                "delta_relu must lie in [0, 1), got {delta_relu}"
            )));
        }
        Ok(Self { delta_relu })
    }

    /// Plain ReLU (`δ = 0`). Hat networks are exact only in this case.
    pub fn relu() -> Self {
        Self { delta_relu: 0.0 }
    }

    pub fn delta_relu(&self) -> f64 {
        self.delta_relu
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        if x >= 0.0 {
            x
        } else {
            self.delta_relu * x
        }
    }

    /// Derivative of the activation; right derivative at the kink.
    #[inline]
    pub fn slope(&self, x: f64) -> f64 {
        if x >= 0.0 {
            1.0
        } else {
            self.delta_relu
        }
    }
}

impl Default for Activation {
    /// Default negative slope 0.01.
    fn default() -> Self {
        Self { delta_relu: 0.01 }
    }
}

/// Width tuple `(w_0, ..., w_{d+1})` of a dense scalar-output network.
///
/// The depth `d` (number of hidden transitions) is derived, never stored.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Architecture {
    widths: Vec<usize>,
}

impl Architecture {
    /// Validates: at least two entries, all positive, last width 1.
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArchitecture(format!(
                "need at least input and output width, got {} entries",
                widths.len()
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArchitecture(
                "all widths must be at least 1".into(),
            ));
        }
        if *widths.last().unwrap() != 1 {
            return Err(Error::InvalidArchitecture(format!(
                "output width must be 1, got {}",
                widths.last().unwrap()
            )));
        }
        Ok(Self { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Number of hidden transitions `d`; the network has `d + 1` weight layers.
    pub fn depth(&self) -> usize {
        self.widths.len() - 2
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    /// Number of weight layers, `d + 1`.
    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    /// Total trainable parameters `Σ_{i=0..d} (w_i + 1) · w_{i+1}`.
    pub fn param_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|pair| (pair[0] + 1) * pair[1])
            .sum()
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, w) in self.widths.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{w}")?;
        }
        write!(f, ")")
    }
}

/// One affine layer: row-major `rows × cols` matrix plus a bias of length `rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `rows * cols` entries.
    pub matrix: Vec<f64>,
    /// Length `rows`.
    pub bias: Vec<f64>,
}

impl LayerWeights {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            matrix: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    #[inline]
    pub fn entry(&self, row: usize, col: usize) -> f64 {
        self.matrix[row * self.cols + col]
    }

    /// `out = M·x + b`, written into `out` (length `rows`).
    pub fn affine_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for r in 0..self.rows {
            let row = &self.matrix[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(x.iter()) {
                acc += w * v;
            }
            out[r] = acc + self.bias[r];
        }
    }
}

/// Evaluate a chain of layers on `x`: the first layer is affine on the raw
/// input, every later layer is affine on the activation of its predecessor.
/// No activation is applied to the final output.
pub fn eval_layers(layers: &[LayerWeights], act: Activation, x: &[f64]) -> Result<Vec<f64>> {
    let first = layers
        .first()
        .ok_or_else(|| Error::ShapeMismatch("empty layer chain".into()))?;
    if x.len() != first.cols {
        return Err(Error::ShapeMismatch(format!(
            "input has {} entries, first layer expects {}",
            x.len(),
            first.cols
        )));
    }
    let mut value = vec![0.0; first.rows];
    first.affine_into(x, &mut value);
    let mut scratch = Vec::new();
    for layer in &layers[1..] {
        scratch.clear();
        scratch.extend(value.iter().map(|&v| act.apply(v)));
        value.resize(layer.rows, 0.0);
        layer.affine_into(&scratch, &mut value);
    }
    Ok(value)
}

/// Weight tuple `(W_0, B_0, ..., W_d, B_d)` conforming to an [`Architecture`].
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    arch: Architecture,
    layers: Vec<LayerWeights>,
}

impl WeightSet {
    /// All parameters zero.
    pub fn zeros(arch: Architecture) -> Self {
        let layers = arch
            .widths()
            .windows(2)
            .map(|pair| LayerWeights::zeros(pair[1], pair[0]))
            .collect();
        Self { arch, layers }
    }

    /// Assemble from explicit layers; the architecture is derived and validated.
    pub fn from_layers(layers: Vec<LayerWeights>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("no layers given".into()));
        }
        let mut widths = Vec::with_capacity(layers.len() + 1);
        widths.push(layers[0].cols);
        for (i, layer) in layers.iter().enumerate() {
            if layer.matrix.len() != layer.rows * layer.cols || layer.bias.len() != layer.rows {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} storage does not match its declared {}x{} shape",
                    layer.rows, layer.cols
                )));
            }
            if i > 0 && layer.cols != layers[i - 1].rows {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    layer.cols,
                    i - 1,
                    layers[i - 1].rows
                )));
            }
            widths.push(layer.rows);
        }
        let arch = Architecture::new(widths)?;
        Ok(Self { arch, layers })
    }

    /// Every parameter uniform on `[-half_range, half_range]`.
    pub fn random_uniform<R: Rng>(arch: Architecture, half_range: f64, rng: &mut R) -> Self {
        let mut w = Self::zeros(arch);
        for layer in &mut w.layers {
            for v in layer.matrix.iter_mut().chain(layer.bias.iter_mut()) {
                *v = rng.gen_range(-half_range..=half_range);
            }
        }
        w
    }

    /// Normal initialization with per-layer variance `fan_in^{-1/2}`,
    /// the scaling used for the directly trained baselines.
    pub fn random_normal_scaled<R: Rng>(arch: Architecture, rng: &mut R) -> Self {
        use rand::distributions::Distribution;
        let mut w = Self::zeros(arch);
        for layer in &mut w.layers {
            let std = (layer.cols as f64).powf(-0.25);
            let normal = rand::distributions::Uniform::new(0.0f64, 1.0);
            // Box-Muller keeps us independent of distribution-crate details.
            let sample = |rng: &mut R| {
                let u1: f64 = normal.sample(rng).max(f64::MIN_POSITIVE);
                let u2: f64 = normal.sample(rng);
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            };
            for v in layer.matrix.iter_mut().chain(layer.bias.iter_mut()) {
                *v = std * sample(rng);
            }
        }
        w
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    /// Canonical vectorization: `W_0` row-major, `B_0`, `W_1`, `B_1`, ...
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            flat.extend_from_slice(&layer.matrix);
            flat.extend_from_slice(&layer.bias);
        }
        flat
    }

    /// Inverse of [`WeightSet::to_flat`].
    pub fn from_flat(arch: Architecture, flat: &[f64]) -> Result<Self> {
        if flat.len() != arch.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector has {} entries, architecture {} needs {}",
                flat.len(),
                arch,
                arch.param_count()
            )));
        }
        let mut w = Self::zeros(arch);
        let mut offset = 0;
        for layer in &mut w.layers {
            let m = layer.matrix.len();
            layer.matrix.copy_from_slice(&flat[offset..offset + m]);
            offset += m;
            let b = layer.bias.len();
            layer.bias.copy_from_slice(&flat[offset..offset + b]);
            offset += b;
        }
        Ok(w)
    }

    /// Scalar realization `R_d(x, W)` by the layer recursion.
    pub fn realize(&self, act: Activation, x: &[f64]) -> Result<f64> {
        let out = eval_layers(&self.layers, act, x)?;
        Ok(out[0])
    }

    /// Homogeneous scaling `αW` with `R(αW, x) = α·R(W, x)` for `α ≥ 0`.
    ///
    /// Every matrix is scaled by `α^{1/(d+1)}`, the bias of layer `i` by
    /// `α^{(i+1)/(d+1)}`; in particular `0·W` is the zero weight set, which is
    /// what lets new neurons enter a network silently.
    pub fn scale(&self, alpha: f64) -> Result<WeightSet> {
        if !(alpha >= 0.0) {
            return Err(Error::Domain(format!(
                "homogeneous scaling needs alpha >= 0, got {alpha}"
            )));
        }
        let mut out = self.clone();
        if alpha == 0.0 {
            for layer in &mut out.layers {
                layer.matrix.iter_mut().for_each(|v| *v = 0.0);
                layer.bias.iter_mut().for_each(|v| *v = 0.0);
            }
            return Ok(out);
        }
        let steps = self.arch.layer_count() as f64; // d + 1
        let matrix_factor = alpha.powf(1.0 / steps);
        for (i, layer) in out.layers.iter_mut().enumerate() {
            let bias_factor = alpha.powf((i + 1) as f64 / steps);
            layer.matrix.iter_mut().for_each(|v| *v *= matrix_factor);
            layer.bias.iter_mut().for_each(|v| *v *= bias_factor);
        }
        Ok(out)
    }

    /// Flip the sign of the realization by negating the output layer.
    pub fn negate_output(&self) -> WeightSet {
        let mut out = self.clone();
        let last = out.layers.last_mut().unwrap();
        last.matrix.iter_mut().for_each(|v| *v = -*v);
        last.bias.iter_mut().for_each(|v| *v = -*v);
        out
    }

    /// Signed scaling: `scale(|alpha|)` composed with an output negation for
    /// negative factors. Realizes `α·R(W, ·)` for any real `α`.
    pub fn scale_signed(&self, alpha: f64) -> Result<WeightSet> {
        if alpha >= 0.0 {
            self.scale(alpha)
        } else {
            Ok(self.scale(-alpha)?.negate_output())
        }
    }

    /// Direct sum `W ⊕ W'`: first layers stack rows, middle layers are
    /// block-diagonal, final layers concatenate columns and add biases, so
    /// `R(W ⊕ W') = R(W) + R(W')`.
    pub fn direct_sum(&self, other: &WeightSet) -> Result<WeightSet> {
        let d = self.arch.depth();
        if d != other.arch.depth() {
            return Err(Error::Composition(format!(
                "direct sum needs equal depth, got {} and {}",
                d,
                other.arch.depth()
            )));
        }
        if self.arch.input_width() != other.arch.input_width() {
            return Err(Error::Composition(format!(
                "direct sum needs equal input width, got {} and {}",
                self.arch.input_width(),
                other.arch.input_width()
            )));
        }
        if d == 0 {
            // A depth-0 tuple has a single layer that would have to stack rows
            // and concatenate columns at once; growth never produces one.
            return Err(Error::Composition(
                "direct sum needs at least one hidden layer".into(),
            ));
        }
        let last = d; // index of the output layer
        let mut layers = Vec::with_capacity(d + 1);
        for i in 0..=last {
            let a = &self.layers[i];
            let b = &other.layers[i];
            let layer = if i == 0 {
                // stack rows over the shared input
                let mut l = LayerWeights::zeros(a.rows + b.rows, a.cols);
                l.matrix[..a.matrix.len()].copy_from_slice(&a.matrix);
                l.matrix[a.matrix.len()..].copy_from_slice(&b.matrix);
                l.bias[..a.rows].copy_from_slice(&a.bias);
                l.bias[a.rows..].copy_from_slice(&b.bias);
                l
            } else if i == last {
                // concatenate columns, add biases
                let mut l = LayerWeights::zeros(1, a.cols + b.cols);
                l.matrix[..a.cols].copy_from_slice(&a.matrix);
                l.matrix[a.cols..].copy_from_slice(&b.matrix);
                l.bias[0] = a.bias[0] + b.bias[0];
                l
            } else {
                // block diagonal
                let mut l = LayerWeights::zeros(a.rows + b.rows, a.cols + b.cols);
                for r in 0..a.rows {
                    l.matrix[r * l.cols..r * l.cols + a.cols]
                        .copy_from_slice(&a.matrix[r * a.cols..(r + 1) * a.cols]);
                }
                for r in 0..b.rows {
                    let dst = (a.rows + r) * l.cols + a.cols;
                    l.matrix[dst..dst + b.cols]
                        .copy_from_slice(&b.matrix[r * b.cols..(r + 1) * b.cols]);
                }
                l.bias[..a.rows].copy_from_slice(&a.bias);
                l.bias[a.rows..].copy_from_slice(&b.bias);
                l
            };
            layers.push(layer);
        }
        WeightSet::from_layers(layers)
    }

    /// Split the final hidden layer into `w_d / group_size` networks of
    /// architecture `(w_0, ..., w_{d-1}, group_size, 1)` over contiguous
    /// neuron groups, distributing the output bias equally, so that the part
    /// realizations sum back to the original realization.
    pub fn split_final_layer(&self, group_size: usize) -> Result<Vec<WeightSet>> {
        let d = self.arch.depth();
        if d == 0 {
            return Err(Error::Partition(
                "splitting needs at least one hidden layer".into(),
            ));
        }
        let w_d = self.arch.widths()[d];
        if group_size == 0 || w_d % group_size != 0 {
            return Err(Error::Partition(format!(
                "group size {group_size} does not divide the final hidden width {w_d}"
            )));
        }
        let parts = w_d / group_size;
        let hidden = &self.layers[d - 1];
        let output = &self.layers[d];
        let shared_bias = output.bias[0] / parts as f64;
        let mut out = Vec::with_capacity(parts);
        for j in 0..parts {
            let lo = j * group_size;
            let hi = lo + group_size;
            let mut layers: Vec<LayerWeights> = self.layers[..d - 1].to_vec();
            let mut h = LayerWeights::zeros(group_size, hidden.cols);
            h.matrix
                .copy_from_slice(&hidden.matrix[lo * hidden.cols..hi * hidden.cols]);
            h.bias.copy_from_slice(&hidden.bias[lo..hi]);
            layers.push(h);
            let mut o = LayerWeights::zeros(1, group_size);
            o.matrix.copy_from_slice(&output.matrix[lo..hi]);
            o.bias[0] = shared_bias;
            layers.push(o);
            out.push(WeightSet::from_layers(layers)?);
        }
        Ok(out)
    }

    /// Write the versioned textual weight container: negative-slope, widths,
    /// then all parameters in vectorization order, one per line, in a
    /// round-tripping decimal representation.
    pub fn write_to<W: Write>(&self, act: Activation, mut out: W) -> Result<()> {
        let flat = self.to_flat();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(
                "refusing to serialize non-finite parameters".into(),
            ));
        }
        writeln!(out, "netgrow-weights v1")?;
        writeln!(out, "delta_relu {:?}", act.delta_relu())?;
        let widths: Vec<String> = self.arch.widths().iter().map(|w| w.to_string()).collect();
        writeln!(out, "widths {}", widths.join(" "))?;
        writeln!(out, "params {}", flat.len())?;
        for v in &flat {
            writeln!(out, "{v:?}")?;
        }
        Ok(())
    }

    /// Read the container written by [`WeightSet::write_to`].
    pub fn read_from<R: BufRead>(input: R) -> Result<(WeightSet, Activation)> {
        let mut lines = input.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Parse("unexpected end of weight file".into()))?
                .map_err(Error::Io)
        };
        let header = next()?;
        if header.trim() != "netgrow-weights v1" {
            return Err(Error::Parse(format!("unknown weight header '{header}'")));
        }
        let delta_line = next()?;
        let delta = delta_line
            .strip_prefix("delta_relu ")
            .ok_or_else(|| Error::Parse("missing delta_relu line".into()))?
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::Parse(format!("bad delta_relu: {e}")))?;
        let act = Activation::leaky_relu(delta)?;
        let widths_line = next()?;
        let widths = widths_line
            .strip_prefix("widths ")
            .ok_or_else(|| Error::Parse("missing widths line".into()))?
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("bad widths: {e}")))?;
        let arch = Architecture::new(widths)?;
        let count_line = next()?;
        let count = count_line
            .strip_prefix("params ")
            .ok_or_else(|| Error::Parse("missing params line".into()))?
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::Parse(format!("bad param count: {e}")))?;
        if count != arch.param_count() {
            return Err(Error::Parse(format!(
                "param count {count} does not match architecture {arch}"
            )));
        }
        let mut flat = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next()?;
            flat.push(
                line.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad parameter: {e}")))?,
            );
        }
        Ok((WeightSet::from_flat(arch, &flat)?, act))
    }
}

/// Hat network of architecture `(w_0, 3, 1)` realizing `x ↦ hat(direction·x)`
/// with peak value 1 at `direction·x = b` and support `(a, c)`.
///
/// Exact compact support requires `δ_ReLU = 0`; for `δ_ReLU > 0` the tails
/// are linear with slope proportional to `δ_ReLU`.
pub fn hat_network(a: f64, b: f64, c: f64, direction: &[f64]) -> Result<WeightSet> {
    if !(a < b && b < c) {
        return Err(Error::Domain(format!(
            "hat nodes must satisfy a < b < c, got ({a}, {b}, {c})"
        )));
    }
    if direction.is_empty() {
        return Err(Error::ShapeMismatch("empty hat direction".into()));
    }
    let w0 = direction.len();
    let mut first = LayerWeights::zeros(3, w0);
    for r in 0..3 {
        first.matrix[r * w0..(r + 1) * w0].copy_from_slice(direction);
    }
    first.bias = vec![-a, -b, -c];
    let mut last = LayerWeights::zeros(1, 3);
    let left = 1.0 / (b - a);
    let right = 1.0 / (c - b);
    last.matrix = vec![left, -left - right, right];
    last.bias = vec![0.0];
    WeightSet::from_layers(vec![first, last])
}
