//! Weighted least-squares loss with an optional linear output operator,
//! residual vectors, and the quadratic expansion identities that drive the
//! extension search.
//!
//! The loss of a realization `F` is `|y - HF|²` in the `γ`-weighted norm
//! `|z|² = Σ γ_i z_i²`. `H` acts on the realization as a function before, not
//! after, sampling, which is what admits the finite-difference directional
//! stencil. Residual and loss sums use compensated (Neumaier) summation so
//! the identity tests stay meaningful at 1e-10 tolerances.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::net::{Activation, WeightSet};

/// Compensated (Neumaier) accumulator.
#[derive(Debug, Default, Clone, Copy)]
pub struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Training data: inputs in `R^{w_0}`, scalar responses, and point weights
/// `γ_i ≥ 0` summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    input_width: usize,
    /// Row-major `n × input_width`.
    inputs: Vec<f64>,
    responses: Vec<f64>,
    point_weights: Vec<f64>,
}

impl TrainingSet {
    pub fn new(
        inputs: Vec<Vec<f64>>,
        responses: Vec<f64>,
        point_weights: Vec<f64>,
    ) -> Result<Self> {
        let n = inputs.len();
        if n == 0 {
            return Err(Error::ShapeMismatch("training set needs n >= 1".into()));
        }
        if responses.len() != n || point_weights.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "inconsistent lengths: {} inputs, {} responses, {} weights",
                n,
                responses.len(),
                point_weights.len()
            )));
        }
        let input_width = inputs[0].len();
        if input_width == 0 {
            return Err(Error::ShapeMismatch("inputs must be non-empty".into()));
        }
        if inputs.iter().any(|x| x.len() != input_width) {
            return Err(Error::ShapeMismatch(
                "inputs have inconsistent dimensions".into(),
            ));
        }
        if point_weights.iter().any(|&g| !(g >= 0.0)) {
            return Err(Error::Domain("point weights must be >= 0".into()));
        }
        let mut total = KahanSum::default();
        point_weights.iter().for_each(|&g| total.add(g));
        if (total.value() - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "point weights must sum to 1 (got {})",
                total.value()
            )));
        }
        let mut flat = Vec::with_capacity(n * input_width);
        for x in &inputs {
            flat.extend_from_slice(x);
        }
        Ok(Self {
            input_width,
            inputs: flat,
            responses,
            point_weights,
        })
    }

    /// Uniform weights `γ_i = 1/n`, the normalized least-squares loss.
    pub fn uniform(inputs: Vec<Vec<f64>>, responses: Vec<f64>) -> Result<Self> {
        let n = inputs.len();
        if n == 0 {
            return Err(Error::ShapeMismatch("training set needs n >= 1".into()));
        }
        let gamma = vec![1.0 / n as f64; n];
        Self::new(inputs, responses, gamma)
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        false // n >= 1 by construction
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_width..(i + 1) * self.input_width]
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn point_weights(&self) -> &[f64] {
        &self.point_weights
    }

    /// Same inputs and weights, different responses.
    pub fn with_responses(&self, responses: Vec<f64>) -> Result<Self> {
        if responses.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} responses, got {}",
                self.len(),
                responses.len()
            )));
        }
        Ok(Self {
            responses,
            ..self.clone()
        })
    }

    /// Replace every input by its image under `map`, keeping responses and
    /// weights; used when data is pushed through frozen prefix layers.
    pub fn map_inputs<F>(&self, new_width: usize, mut map: F) -> Result<Self>
    where
        F: FnMut(&[f64]) -> Vec<f64>,
    {
        let mut flat = Vec::with_capacity(self.len() * new_width);
        for i in 0..self.len() {
            let mapped = map(self.input(i));
            if mapped.len() != new_width {
                return Err(Error::ShapeMismatch(format!(
                    "mapped input has {} entries, expected {new_width}",
                    mapped.len()
                )));
            }
            flat.extend_from_slice(&mapped);
        }
        Ok(Self {
            input_width: new_width,
            inputs: flat,
            responses: self.responses.clone(),
            point_weights: self.point_weights.clone(),
        })
    }

    /// Write the CSV interchange format: header `x_1,..,x_k,y,gamma` and one
    /// row per sample.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header: Vec<String> = (1..=self.input_width)
            .map(|i| format!("x_{i}"))
            .collect();
        header.push("y".into());
        header.push("gamma".into());
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.input(i).iter().map(|v| format!("{v:?}")).collect();
            row.push(format!("{:?}", self.responses[i]));
            row.push(format!("{:?}", self.point_weights[i]));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Read the CSV format written by [`TrainingSet::write_csv`]. The header
    /// row is required; a missing `gamma` column yields uniform weights.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty training CSV".into()))?
            .map_err(Error::Io)?;
        let cols: Vec<String> = header.split(',').map(|t| t.trim().to_string()).collect();
        let y_pos = cols
            .iter()
            .position(|c| c == "y")
            .ok_or_else(|| Error::Parse("training CSV header must contain a 'y' column".into()))?;
        if y_pos == 0 {
            return Err(Error::Parse(
                "training CSV needs at least one input column before 'y'".into(),
            ));
        }
        for (i, c) in cols[..y_pos].iter().enumerate() {
            if *c != format!("x_{}", i + 1) {
                return Err(Error::Parse(format!(
                    "expected input column 'x_{}', found '{c}'",
                    i + 1
                )));
            }
        }
        let has_gamma = match cols.len() - y_pos {
            1 => false,
            2 if cols[y_pos + 1] == "gamma" => true,
            _ => {
                return Err(Error::Parse(format!(
                    "unexpected trailing columns after 'y': {:?}",
                    &cols[y_pos + 1..]
                )))
            }
        };
        let mut inputs = Vec::new();
        let mut responses = Vec::new();
        let mut gammas = Vec::new();
        for (row_idx, line) in lines.enumerate() {
            let line = line.map_err(Error::Io)?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(|t| t.trim()).collect();
            if fields.len() != cols.len() {
                return Err(Error::Parse(format!(
                    "row {} has {} fields, header has {}",
                    row_idx + 2,
                    fields.len(),
                    cols.len()
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {}: {e}", row_idx + 2)))
            };
            let x: Vec<f64> = fields[..y_pos]
                .iter()
                .map(|s| parse(s))
                .collect::<Result<_>>()?;
            inputs.push(x);
            responses.push(parse(fields[y_pos])?);
            if has_gamma {
                gammas.push(parse(fields[y_pos + 1])?);
            }
        }
        if has_gamma {
            Self::new(inputs, responses, gammas)
        } else {
            Self::uniform(inputs, responses)
        }
    }
}

/// Linear operator applied to the realization as a function before sampling.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputOperator {
    /// `(HF)(x_i) = F(x_i)`.
    Identity,
    /// Fixed per-sample rescaling `(HF)(x_i) = h_i · F(x_i)`.
    Diagonal(Vec<f64>),
    /// Central finite-difference directional derivative
    /// `(HF)(x_i) = (F(x_i + s·v) - F(x_i - s·v)) / (2s)`.
    ///
    /// The realizations here are piecewise linear, so this is an approximation
    /// of the distributional derivative; it is linear in `F` but excluded from
    /// the bit-exact identities.
    DirectionalDerivative { direction: Vec<f64>, step: f64 },
}

/// Semi-norm specification: the operator `H`. The point weights live in the
/// [`TrainingSet`] they are shared with.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub operator: OutputOperator,
}

impl LossSpec {
    pub fn identity() -> Self {
        Self {
            operator: OutputOperator::Identity,
        }
    }

    pub fn diagonal(factors: Vec<f64>) -> Self {
        Self {
            operator: OutputOperator::Diagonal(factors),
        }
    }

    /// Directional-derivative stencil with the default step `1e-5`.
    pub fn directional(direction: Vec<f64>) -> Self {
        Self {
            operator: OutputOperator::DirectionalDerivative {
                direction,
                step: 1e-5,
            },
        }
    }

    fn validate(&self, ts: &TrainingSet) -> Result<()> {
        match &self.operator {
            OutputOperator::Identity => Ok(()),
            OutputOperator::Diagonal(h) => {
                if h.len() != ts.len() {
                    Err(Error::ShapeMismatch(format!(
                        "diagonal operator has {} factors, {} samples",
                        h.len(),
                        ts.len()
                    )))
                } else {
                    Ok(())
                }
            }
            OutputOperator::DirectionalDerivative { direction, step } => {
                if direction.len() != ts.input_width() {
                    Err(Error::ShapeMismatch(format!(
                        "stencil direction has {} entries, inputs have {}",
                        direction.len(),
                        ts.input_width()
                    )))
                } else if !(*step > 0.0) {
                    Err(Error::Domain("stencil step must be positive".into()))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Whether `(HF)(x_i)` depends only on `F(x_i)` (identity or diagonal).
    pub fn is_pointwise(&self) -> bool {
        !matches!(
            self.operator,
            OutputOperator::DirectionalDerivative { .. }
        )
    }

    /// Visit the evaluation points and coefficients of sample `i`, so that
    /// `(HF)_i = Σ_k coeff_k · F(point_k)`; `scratch` is reused for perturbed
    /// points.
    pub(crate) fn for_each_point<F>(
        &self,
        ts: &TrainingSet,
        i: usize,
        scratch: &mut Vec<f64>,
        mut visit: F,
    ) -> Result<()>
    where
        F: FnMut(&[f64], f64) -> Result<()>,
    {
        let x = ts.input(i);
        match &self.operator {
            OutputOperator::Identity => visit(x, 1.0),
            OutputOperator::Diagonal(h) => visit(x, h[i]),
            OutputOperator::DirectionalDerivative { direction, step } => {
                let coeff = 1.0 / (2.0 * step);
                scratch.clear();
                scratch.extend(x.iter().zip(direction).map(|(a, v)| a + step * v));
                visit(scratch, coeff)?;
                scratch.clear();
                scratch.extend(x.iter().zip(direction).map(|(a, v)| a - step * v));
                visit(scratch, -coeff)
            }
        }
    }
}

impl Default for LossSpec {
    fn default() -> Self {
        Self::identity()
    }
}

/// `γ`-weighted inner product with compensated summation.
pub fn weighted_dot(a: &[f64], b: &[f64], ts: &TrainingSet) -> f64 {
    debug_assert_eq!(a.len(), ts.len());
    debug_assert_eq!(b.len(), ts.len());
    let mut sum = KahanSum::default();
    for ((&x, &y), &g) in a.iter().zip(b).zip(ts.point_weights()) {
        sum.add(g * x * y);
    }
    sum.value()
}

/// `|v|²` in the `γ`-weighted norm; clamped at zero.
pub fn weighted_norm_sq(v: &[f64], ts: &TrainingSet) -> f64 {
    weighted_dot(v, v, ts).max(0.0)
}

/// `|v|` in the `γ`-weighted norm.
pub fn weighted_norm(v: &[f64], ts: &TrainingSet) -> f64 {
    weighted_norm_sq(v, ts).sqrt()
}

/// Sampled operator response `((H R(·,W))(x_i))_{i=1..n}`.
pub fn response_vector(
    weights: &WeightSet,
    act: Activation,
    ts: &TrainingSet,
    spec: &LossSpec,
) -> Result<Vec<f64>> {
    spec.validate(ts)?;
    if weights.arch().input_width() != ts.input_width() {
        return Err(Error::ShapeMismatch(format!(
            "network expects {} inputs, data has {}",
            weights.arch().input_width(),
            ts.input_width()
        )));
    }
    let mut out = vec![0.0; ts.len()];
    let mut scratch = Vec::new();
    for i in 0..ts.len() {
        let mut acc = 0.0;
        spec.for_each_point(ts, i, &mut scratch, |point, coeff| {
            acc += coeff * weights.realize(act, point)?;
            Ok(())
        })?;
        out[i] = acc;
    }
    Ok(out)
}

/// Residual `y - H F` on the samples.
pub fn residual(
    weights: &WeightSet,
    act: Activation,
    ts: &TrainingSet,
    spec: &LossSpec,
) -> Result<Vec<f64>> {
    let mut r = response_vector(weights, act, ts, spec)?;
    for (ri, &y) in r.iter_mut().zip(ts.responses()) {
        *ri = y - *ri;
    }
    Ok(r)
}

/// Loss `L(F) = |y - HF|² = Σ γ_i (y_i - (HF)_i)²`.
pub fn loss(
    weights: &WeightSet,
    act: Activation,
    ts: &TrainingSet,
    spec: &LossSpec,
) -> Result<f64> {
    let r = residual(weights, act, ts, spec)?;
    Ok(weighted_norm_sq(&r, ts))
}

/// Loss of a precomputed residual vector.
pub fn loss_of_residual(residual: &[f64], ts: &TrainingSet) -> f64 {
    weighted_norm_sq(residual, ts)
}

/// Both sides of the expansion
/// `L(F + αG) - L(F) = -2α (y - HF)·HG + α² |HG|²`.
///
/// `loss_delta` is measured directly through a direct sum; `inner_term` and
/// `norm_term` are the right-hand side ingredients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticExpansion {
    pub loss_delta: f64,
    pub inner_term: f64,
    pub norm_term: f64,
}

impl QuadraticExpansion {
    /// `-2α·inner + α²·norm`, the predicted delta.
    pub fn predicted_delta(&self, alpha: f64) -> f64 {
        -2.0 * alpha * self.inner_term + alpha * alpha * self.norm_term
    }
}

/// Evaluate the quadratic expansion for networks `F`, `G` and a scale `α`.
pub fn quadratic_expansion(
    f: &WeightSet,
    g: &WeightSet,
    alpha: f64,
    act: Activation,
    ts: &TrainingSet,
    spec: &LossSpec,
) -> Result<QuadraticExpansion> {
    let r = residual(f, act, ts, spec)?;
    let zg = response_vector(g, act, ts, spec)?;
    let inner_term = weighted_dot(&r, &zg, ts);
    let norm_term = weighted_norm_sq(&zg, ts);
    let combined = f.direct_sum(&g.scale_signed(alpha)?)?;
    let loss_delta = loss(&combined, act, ts, spec)? - loss_of_residual(&r, ts);
    Ok(QuadraticExpansion {
        loss_delta,
        inner_term,
        norm_term,
    })
}

/// Weighted cosine between the residual and a candidate response.
pub fn alignment(residual: &[f64], candidate_response: &[f64], ts: &TrainingSet) -> Result<f64> {
    let rn = weighted_norm(residual, ts);
    let cn = weighted_norm(candidate_response, ts);
    if rn == 0.0 || cn == 0.0 {
        return Err(Error::DegenerateInput(
            "alignment needs nonzero residual and candidate norms".into(),
        ));
    }
    Ok((weighted_dot(residual, candidate_response, ts) / (rn * cn)).clamp(-1.0, 1.0))
}
