//! Per-round run records, their CSV form, seed aggregation and the
//! convergence-rate fit.
//!
//! One trace file per run: `#`-prefixed metadata lines, a fixed header row
//! `round,wall_ms,params,loss,error,c_opt,stability_L,gen_estimate,extensions,epochs`,
//! then one row per outer round (direct runs have a single row). Reruns with
//! the same configuration and seed are bit-identical except for the
//! `wall_ms` column. Unavailable diagnostics are written as `NaN`.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const TRACE_HEADER: &str =
    "round,wall_ms,params,loss,error,c_opt,stability_L,gen_estimate,extensions,epochs";

/// Training mode of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Hierarchical,
    Direct,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Hierarchical => "hierarchical",
            Mode::Direct => "direct",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hierarchical" => Ok(Mode::Hierarchical),
            "direct" => Ok(Mode::Direct),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

/// Run metadata carried in the trace file's comment lines.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub mode: Mode,
    pub seed: u64,
    pub dataset_id: String,
    pub config_hash: String,
    /// Hidden width of the directly trained network, if applicable.
    pub direct_width: Option<usize>,
}

/// One per-round record.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub round: usize,
    pub wall_ms: u128,
    pub params: usize,
    pub loss: f64,
    pub error: f64,
    pub c_opt: f64,
    pub stability_l: f64,
    pub gen_estimate: f64,
    pub extensions: usize,
    /// Cumulative optimizer epochs through this round.
    pub epochs: usize,
}

/// A full run trace.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub meta: RunMeta,
    pub rows: Vec<TraceRow>,
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:?}")
    }
}

impl RunTrace {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# netgrow-trace v1")?;
        writeln!(out, "# mode {}", self.meta.mode.as_str())?;
        writeln!(out, "# seed {}", self.meta.seed)?;
        writeln!(out, "# dataset {}", self.meta.dataset_id)?;
        writeln!(out, "# config {}", self.meta.config_hash)?;
        if let Some(w) = self.meta.direct_width {
            writeln!(out, "# width {w}")?;
        }
        writeln!(out, "{TRACE_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.round,
                r.wall_ms,
                r.params,
                fmt_f64(r.loss),
                fmt_f64(r.error),
                fmt_f64(r.c_opt),
                fmt_f64(r.stability_l),
                fmt_f64(r.gen_estimate),
                r.extensions,
                r.epochs
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut mode = None;
        let mut seed = 0u64;
        let mut dataset_id = String::new();
        let mut config_hash = String::new();
        let mut direct_width = None;
        let mut rows = Vec::new();
        let mut header_seen = false;
        for line in input.lines() {
            let line = line.map_err(Error::Io)?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let mut parts = comment.trim().splitn(2, ' ');
                match (parts.next(), parts.next()) {
                    (Some("mode"), Some(v)) => mode = Some(Mode::parse(v.trim())?),
                    (Some("seed"), Some(v)) => {
                        seed = v.trim().parse().map_err(|e| Error::Parse(format!("{e}")))?
                    }
                    (Some("dataset"), Some(v)) => dataset_id = v.trim().to_string(),
                    (Some("config"), Some(v)) => config_hash = v.trim().to_string(),
                    (Some("width"), Some(v)) => {
                        direct_width =
                            Some(v.trim().parse().map_err(|e| Error::Parse(format!("{e}")))?)
                    }
                    _ => {}
                }
                continue;
            }
            if !header_seen {
                if line != TRACE_HEADER {
                    return Err(Error::Parse(format!("unexpected trace header '{line}'")));
                }
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 10 {
                return Err(Error::Parse(format!(
                    "trace row has {} fields, expected 10",
                    fields.len()
                )));
            }
            let pu = |s: &str| -> Result<usize> {
                s.parse().map_err(|e| Error::Parse(format!("{e}")))
            };
            let pf = |s: &str| -> Result<f64> {
                s.parse().map_err(|e| Error::Parse(format!("{e}")))
            };
            rows.push(TraceRow {
                round: pu(fields[0])?,
                wall_ms: fields[1].parse().map_err(|e| Error::Parse(format!("{e}")))?,
                params: pu(fields[2])?,
                loss: pf(fields[3])?,
                error: pf(fields[4])?,
                c_opt: pf(fields[5])?,
                stability_l: pf(fields[6])?,
                gen_estimate: pf(fields[7])?,
                extensions: pu(fields[8])?,
                epochs: pu(fields[9])?,
            });
        }
        let mode = mode.ok_or_else(|| Error::Parse("trace is missing its mode line".into()))?;
        Ok(RunTrace {
            meta: RunMeta {
                mode,
                seed,
                dataset_id,
                config_hash,
                direct_width,
            },
            rows,
        })
    }
}

/// Median of a slice (average of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// One aggregate row: per-round medians over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub round: usize,
    pub params: f64,
    pub loss: f64,
    pub error: f64,
    pub c_opt: f64,
    pub stability_l: f64,
    pub gen_estimate: f64,
}

pub const AGGREGATE_HEADER: &str = "round,params,loss,error,c_opt,stability_L,gen_estimate";

/// Per-round medians over a set of runs of equal length. Medians are taken
/// per round index over seeds, never across rounds.
pub fn aggregate_median(traces: &[&RunTrace]) -> Result<Vec<AggregateRow>> {
    let first = traces
        .first()
        .ok_or_else(|| Error::DegenerateInput("no traces to aggregate".into()))?;
    let rounds = first.rows.len();
    if traces.iter().any(|t| t.rows.len() != rounds) {
        return Err(Error::ShapeMismatch(
            "traces have different round counts".into(),
        ));
    }
    let mut out = Vec::with_capacity(rounds);
    for r in 0..rounds {
        let collect = |f: &dyn Fn(&TraceRow) -> f64| -> Vec<f64> {
            traces.iter().map(|t| f(&t.rows[r])).collect()
        };
        out.push(AggregateRow {
            round: first.rows[r].round,
            params: median(&collect(&|row| row.params as f64)),
            loss: median(&collect(&|row| row.loss)),
            error: median(&collect(&|row| row.error)),
            c_opt: median(&collect(&|row| row.c_opt)),
            stability_l: median(&collect(&|row| row.stability_l)),
            gen_estimate: median(&collect(&|row| row.gen_estimate)),
        });
    }
    Ok(out)
}

pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], mut out: W) -> Result<()> {
    writeln!(out, "{AGGREGATE_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.round,
            fmt_f64(r.params),
            fmt_f64(r.loss),
            fmt_f64(r.error),
            fmt_f64(r.c_opt),
            fmt_f64(r.stability_l),
            fmt_f64(r.gen_estimate)
        )?;
    }
    Ok(())
}

pub fn read_aggregate_csv<R: BufRead>(input: R) -> Result<Vec<AggregateRow>> {
    let mut rows = Vec::new();
    let mut header_seen = false;
    for line in input.lines() {
        let line = line.map_err(Error::Io)?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            if line != AGGREGATE_HEADER {
                return Err(Error::Parse(format!(
                    "unexpected aggregate header '{line}'"
                )));
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Parse("aggregate row needs 7 fields".into()));
        }
        let pf = |s: &str| -> Result<f64> {
            s.parse().map_err(|e| Error::Parse(format!("{e}")))
        };
        rows.push(AggregateRow {
            round: fields[0]
                .parse()
                .map_err(|e| Error::Parse(format!("{e}")))?,
            params: pf(fields[1])?,
            loss: pf(fields[2])?,
            error: pf(fields[3])?,
            c_opt: pf(fields[4])?,
            stability_l: pf(fields[5])?,
            gen_estimate: pf(fields[6])?,
        });
    }
    Ok(rows)
}

/// Least-squares fit of `log(error)` against `log(params)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    /// Empirical convergence rate (negative for converging runs).
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Points actually used by the fit.
    pub points: usize,
}

/// Fit the empirical convergence rate from `(params, error)` pairs. Needs at
/// least four usable points with distinct parameter counts and positive
/// errors.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<RateFit> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(p, e)| *p > 0.0 && *e > 0.0 && p.is_finite() && e.is_finite())
        .map(|&(p, e)| (p.ln(), e.ln()))
        .collect();
    let mut distinct: Vec<f64> = usable.iter().map(|(p, _)| *p).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    if distinct.len() < 4 {
        return Err(Error::DegenerateInput(format!(
            "rate fit needs at least 4 points with distinct parameter counts and positive errors, got {}",
            distinct.len()
        )));
    }
    let n = usable.len() as f64;
    let mean_x = usable.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_y = usable.iter().map(|(_, y)| y).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in &usable {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        let ss_res: f64 = usable
            .iter()
            .map(|(x, y)| {
                let resid = y - (intercept + slope * x);
                resid * resid
            })
            .sum();
        1.0 - ss_res / syy
    };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        points: usable.len(),
    })
}

/// Convenience: fit from aggregate rows.
pub fn fit_rate_from_aggregate(rows: &[AggregateRow]) -> Result<RateFit> {
    fit_rate(
        &rows
            .iter()
            .map(|r| (r.params, r.error))
            .collect::<Vec<_>>(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_trace(seed: u64, rounds: usize) -> RunTrace {
        RunTrace {
            meta: RunMeta {
                mode: Mode::Hierarchical,
                seed,
                dataset_id: "sq2d".into(),
                config_hash: "deadbeef".into(),
                direct_width: None,
            },
            rows: (0..rounds)
                .map(|r| TraceRow {
                    round: r,
                    wall_ms: 5,
                    params: 9 + 13 * r,
                    loss: 1.0 / (r + 1) as f64,
                    error: (1.0 / (r + 1) as f64).sqrt(),
                    c_opt: 0.5,
                    stability_l: 1.2,
                    gen_estimate: f64::NAN,
                    extensions: if r == 0 { 0 } else { 2 },
                    epochs: 100 * r,
                })
                .collect(),
        }
    }

    #[test]
    fn trace_round_trips() {
        let t = sample_trace(3, 4);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = RunTrace::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.meta, t.meta);
        assert_eq!(back.rows.len(), t.rows.len());
        for (a, b) in back.rows.iter().zip(&t.rows) {
            assert_eq!(a.params, b.params);
            assert_eq!(a.loss, b.loss);
            assert!(a.gen_estimate.is_nan());
        }
    }

    #[test]
    fn medians_are_per_round() {
        let t1 = sample_trace(0, 3);
        let mut t2 = sample_trace(1, 3);
        for row in &mut t2.rows {
            row.loss *= 3.0;
            row.error = row.loss.sqrt();
        }
        let agg = aggregate_median(&[&t1, &t2]).unwrap();
        assert_eq!(agg.len(), 3);
        for (r, row) in agg.iter().enumerate() {
            let a = 1.0 / (r + 1) as f64;
            assert!((row.loss - 2.0 * a).abs() < 1e-12); // median of {a, 3a}
        }
    }

    #[test]
    fn rate_fit_exact_power_law() {
        let pts: Vec<(f64, f64)> = (1..=8)
            .map(|k| {
                let p = (10 * k) as f64;
                (p, p.powi(-2))
            })
            .collect();
        let fit = fit_rate(&pts).unwrap();
        assert!((fit.slope + 2.0).abs() < 1e-9);
        assert!((fit.r_squared - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rate_fit_constant_error() {
        let pts: Vec<(f64, f64)> = (1..=6).map(|k| ((10 * k) as f64, 0.5)).collect();
        let fit = fit_rate(&pts).unwrap();
        assert!(fit.slope.abs() < 1e-12);
    }

    #[test]
    fn rate_fit_needs_four_points() {
        let pts = vec![(10.0, 1.0), (20.0, 0.5), (30.0, 0.25)];
        assert!(fit_rate(&pts).is_err());
        let degenerate = vec![(10.0, 1.0); 10];
        assert!(fit_rate(&degenerate).is_err());
    }
}
