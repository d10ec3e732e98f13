//! Quantities bounded by the convergence estimates, their running ergodic
//! averages, and Monte-Carlo aggregation over replicas.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::operators::{BilinearProblem, Operator, Vector};

/// Neumaier-compensated running mean.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedMean {
    sum: f64,
    compensation: f64,
    count: u64,
}

impl CompensatedMean {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
        self.count += 1;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn sum(&self) -> f64 {
        self.sum + self.compensation
    }

    /// `None` before the first value.
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum() / self.count as f64)
    }
}

/// Streaming mean of vectors (for the ergodic iterate).
#[derive(Debug, Clone)]
pub struct VectorMean {
    parts: Vec<CompensatedMean>,
}

impl VectorMean {
    pub fn new(dim: usize) -> Self {
        Self {
            parts: vec![CompensatedMean::new(); dim],
        }
    }

    pub fn push(&mut self, x: &Vector) {
        for (acc, v) in self.parts.iter_mut().zip(x.iter()) {
            acc.push(*v);
        }
    }

    pub fn count(&self) -> u64 {
        self.parts.first().map_or(0, |p| p.count())
    }

    pub fn mean(&self) -> Option<Vector> {
        if self.count() == 0 {
            return None;
        }
        Some(Vector::from_iterator(
            self.parts.len(),
            self.parts.iter().map(|p| p.mean().unwrap_or(0.0)),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "norm_M_sq")]
    NormMSq,
    #[serde(rename = "gap")]
    Gap,
    #[serde(rename = "dist_sq")]
    DistSq,
    #[serde(rename = "ergodic_norm_M_sq")]
    ErgodicNormMSq,
    #[serde(rename = "ergodic_gap")]
    ErgodicGap,
    #[serde(rename = "min_norm_M_sq")]
    MinNormMSq,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::NormMSq,
        Metric::Gap,
        Metric::DistSq,
        Metric::ErgodicNormMSq,
        Metric::ErgodicGap,
        Metric::MinNormMSq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::NormMSq => "norm_M_sq",
            Metric::Gap => "gap",
            Metric::DistSq => "dist_sq",
            Metric::ErgodicNormMSq => "ergodic_norm_M_sq",
            Metric::ErgodicGap => "ergodic_gap",
            Metric::MinNormMSq => "min_norm_M_sq",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::param("metric", format!("unknown metric `{name}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndexKind {
    /// Iteration counter `k`.
    Iteration,
    /// Continuous time `t`.
    Time,
}

/// How the ergodic columns average the raw columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErgodicRule {
    /// `(1/(k−s+1)) Σ_{j=s..k} f_j` for a window starting at `s`.
    Inclusive { sqnorm_start: u64, gap_start: u64 },
    /// Left-endpoint Riemann sum `(1/t_i) Σ_{j<i} h f_j` on a uniform grid,
    /// i.e. the mean of `f_0..f_{i−1}`; the first row holds `f_0`.
    LeftEndpoint,
}

/// Per-record-step metric trace of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub index_kind: IndexKind,
    pub index: Vec<f64>,
    pub norm_m_sq: Vec<f64>,
    pub gap: Vec<f64>,
    pub dist_sq: Vec<f64>,
    pub ergodic_norm_m_sq: Vec<f64>,
    pub ergodic_gap: Vec<f64>,
    pub min_norm_m_sq: Vec<f64>,
}

impl RunRecord {
    pub fn new(index_kind: IndexKind) -> Self {
        Self {
            index_kind,
            index: Vec::new(),
            norm_m_sq: Vec::new(),
            gap: Vec::new(),
            dist_sq: Vec::new(),
            ergodic_norm_m_sq: Vec::new(),
            ergodic_gap: Vec::new(),
            min_norm_m_sq: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn series(&self, metric: Metric) -> &[f64] {
        match metric {
            Metric::NormMSq => &self.norm_m_sq,
            Metric::Gap => &self.gap,
            Metric::DistSq => &self.dist_sq,
            Metric::ErgodicNormMSq => &self.ergodic_norm_m_sq,
            Metric::ErgodicGap => &self.ergodic_gap,
            Metric::MinNormMSq => &self.min_norm_m_sq,
        }
    }

    /// Row whose index equals `value` exactly.
    pub fn position(&self, value: f64) -> Option<usize> {
        self.index.iter().position(|v| *v == value)
    }

    /// Solver trace CSV: `k, norm_M_sq, gap, dist_sq, ergodic_norm_M_sq,
    /// ergodic_gap, min_norm_M_sq_so_far`. Time traces use `t` and drop the
    /// running minimum.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        match self.index_kind {
            IndexKind::Iteration => w.write_record([
                "k",
                "norm_M_sq",
                "gap",
                "dist_sq",
                "ergodic_norm_M_sq",
                "ergodic_gap",
                "min_norm_M_sq_so_far",
            ])?,
            IndexKind::Time => w.write_record([
                "t",
                "norm_M_sq",
                "gap",
                "dist_sq",
                "ergodic_norm_M_sq",
                "ergodic_gap",
            ])?,
        }
        for i in 0..self.len() {
            let mut row = vec![format_index(self.index_kind, self.index[i])];
            row.extend(
                [
                    self.norm_m_sq[i],
                    self.gap[i],
                    self.dist_sq[i],
                    self.ergodic_norm_m_sq[i],
                    self.ergodic_gap[i],
                ]
                .map(format_float),
            );
            if self.index_kind == IndexKind::Iteration {
                row.push(format_float(self.min_norm_m_sq[i]));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// 17 significant digits; parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn format_index(kind: IndexKind, v: f64) -> String {
    match kind {
        IndexKind::Iteration => format!("{}", v as u64),
        IndexKind::Time => format_float(v),
    }
}

/// Single-writer builder for a [`RunRecord`].
#[derive(Debug, Clone)]
pub struct RunRecorder {
    record: RunRecord,
    rule: ErgodicRule,
    stride: u64,
    sq: CompensatedMean,
    gap: CompensatedMean,
    min_sq: f64,
}

impl RunRecorder {
    pub fn new(index_kind: IndexKind, rule: ErgodicRule, stride: u64) -> Self {
        Self {
            record: RunRecord::new(index_kind),
            rule,
            stride: stride.max(1),
            sq: CompensatedMean::new(),
            gap: CompensatedMean::new(),
            min_sq: f64::INFINITY,
        }
    }

    /// Feed step `step` (0-based position on the integration grid). The row is
    /// stored when `step` is a multiple of the stride or `force` is set.
    pub fn push(
        &mut self,
        step: u64,
        index: f64,
        norm_sq: f64,
        gap: f64,
        dist_sq: f64,
        force: bool,
    ) {
        self.min_sq = self.min_sq.min(norm_sq);
        let (erg_sq, erg_gap) = match self.rule {
            ErgodicRule::Inclusive {
                sqnorm_start,
                gap_start,
            } => {
                if step >= sqnorm_start {
                    self.sq.push(norm_sq);
                }
                if step >= gap_start {
                    self.gap.push(gap);
                }
                (
                    self.sq.mean().unwrap_or(norm_sq),
                    self.gap.mean().unwrap_or(gap),
                )
            }
            ErgodicRule::LeftEndpoint => {
                let out = (
                    self.sq.mean().unwrap_or(norm_sq),
                    self.gap.mean().unwrap_or(gap),
                );
                self.sq.push(norm_sq);
                self.gap.push(gap);
                out
            }
        };
        if force || step.is_multiple_of(self.stride) {
            let r = &mut self.record;
            if r.index.last() == Some(&index) {
                return;
            }
            r.index.push(index);
            r.norm_m_sq.push(norm_sq);
            r.gap.push(gap);
            r.dist_sq.push(dist_sq);
            r.ergodic_norm_m_sq.push(erg_sq);
            r.ergodic_gap.push(erg_gap);
            r.min_norm_m_sq.push(self.min_sq);
        }
    }

    pub fn finish(self) -> RunRecord {
        self.record
    }
}

/// `‖M(x)‖²`, `⟨M(x), x − x*⟩` and `‖x − x*‖²` from one noise-free evaluation.
pub fn point_metrics<O: Operator + ?Sized>(op: &O, x: &Vector, x_star: &Vector) -> (f64, f64, f64) {
    let mx = op.apply(x);
    let diff = x - x_star;
    (mx.norm_squared(), mx.dot(&diff), diff.norm_squared())
}

/// `Φ(x̄, y*) − Φ(x*, ȳ)`.
pub fn primal_dual_gap(
    problem: &BilinearProblem,
    x_bar: &Vector,
    y_bar: &Vector,
    x_star: &Vector,
    y_star: &Vector,
) -> Result<f64> {
    check_dim(problem.n(), x_star.len())?;
    check_dim(problem.n(), y_star.len())?;
    Ok(problem.phi(x_bar, y_star)? - problem.phi(x_star, y_bar)?)
}

/// Pointwise mean, standard error, min and max of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub replicas: usize,
    pub index_kind: IndexKind,
    pub index: Vec<f64>,
    pub metrics: BTreeMap<Metric, SeriesSummary>,
}

impl EnsembleSummary {
    pub fn series(&self, metric: Metric) -> &SeriesSummary {
        &self.metrics[&metric]
    }

    /// Long format: `step, metric, mean, stderr, min, max`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(["step", "metric", "mean", "stderr", "min", "max"])?;
        for (metric, s) in &self.metrics {
            for i in 0..self.index.len() {
                w.write_record([
                    format_index(self.index_kind, self.index[i]),
                    metric.name().to_string(),
                    format_float(s.mean[i]),
                    format_float(s.stderr[i]),
                    format_float(s.min[i]),
                    format_float(s.max[i]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads back the long-format CSV. The replica count is not stored and is
    /// reported as 0.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        let expected = ["step", "metric", "mean", "stderr", "min", "max"];
        if headers.iter().ne(expected) {
            return Err(Error::GridMismatch(format!(
                "unexpected ensemble CSV header {:?}",
                headers.iter().collect::<Vec<_>>()
            )));
        }
        let mut index: Option<Vec<f64>> = None;
        let mut current: BTreeMap<Metric, (Vec<f64>, SeriesSummary)> = BTreeMap::new();
        let mut time_like = false;
        for rec in r.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| Error::GridMismatch(format!("bad number `{}`: {e}", &rec[i])))
            };
            time_like |= rec[0].contains(['.', 'e', 'E']);
            let metric = Metric::parse(&rec[1])?;
            let entry = current.entry(metric).or_insert_with(|| {
                (
                    Vec::new(),
                    SeriesSummary {
                        mean: Vec::new(),
                        stderr: Vec::new(),
                        min: Vec::new(),
                        max: Vec::new(),
                    },
                )
            });
            entry.0.push(parse(0)?);
            entry.1.mean.push(parse(2)?);
            entry.1.stderr.push(parse(3)?);
            entry.1.min.push(parse(4)?);
            entry.1.max.push(parse(5)?);
        }
        let mut metrics = BTreeMap::new();
        for (metric, (steps, summary)) in current {
            match &index {
                None => index = Some(steps),
                Some(existing) if *existing != steps => {
                    return Err(Error::GridMismatch(format!(
                        "metric {} uses a different step grid",
                        metric.name()
                    )))
                }
                Some(_) => {}
            }
            metrics.insert(metric, summary);
        }
        let index = index.ok_or_else(|| Error::GridMismatch("empty ensemble CSV".into()))?;
        Ok(Self {
            replicas: 0,
            index_kind: if time_like {
                IndexKind::Time
            } else {
                IndexKind::Iteration
            },
            index,
            metrics,
        })
    }
}

#[derive(Debug, Clone, Default)]
struct Welford {
    mean: f64,
    m2: f64,
    min: f64,
    max: f64,
}

/// Order-sensitive streaming aggregation; feed replicas in a fixed order to
/// get bitwise-reproducible summaries.
#[derive(Debug, Clone)]
pub struct EnsembleAccumulator {
    index_kind: IndexKind,
    index: Vec<f64>,
    count: usize,
    cells: BTreeMap<Metric, Vec<Welford>>,
}

impl EnsembleAccumulator {
    pub fn new(first: &RunRecord) -> Self {
        let cells = Metric::ALL
            .into_iter()
            .map(|m| (m, vec![Welford::default(); first.len()]))
            .collect();
        Self {
            index_kind: first.index_kind,
            index: first.index.clone(),
            count: 0,
            cells,
        }
    }

    pub fn add(&mut self, record: &RunRecord) -> Result<()> {
        if record.index != self.index || record.index_kind != self.index_kind {
            return Err(Error::GridMismatch(format!(
                "replica has {} rows, expected {}",
                record.len(),
                self.index.len()
            )));
        }
        self.count += 1;
        let n = self.count as f64;
        for (metric, cells) in self.cells.iter_mut() {
            for (cell, &x) in cells.iter_mut().zip(record.series(*metric)) {
                if self.count == 1 {
                    *cell = Welford {
                        mean: x,
                        m2: 0.0,
                        min: x,
                        max: x,
                    };
                    continue;
                }
                let delta = x - cell.mean;
                cell.mean += delta / n;
                cell.m2 += delta * (x - cell.mean);
                cell.min = cell.min.min(x);
                cell.max = cell.max.max(x);
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<EnsembleSummary> {
        if self.count == 0 {
            return Err(Error::GridMismatch("no replicas to aggregate".into()));
        }
        let r = self.count as f64;
        let metrics = self
            .cells
            .into_iter()
            .map(|(metric, cells)| {
                let mut s = SeriesSummary {
                    mean: Vec::with_capacity(cells.len()),
                    stderr: Vec::with_capacity(cells.len()),
                    min: Vec::with_capacity(cells.len()),
                    max: Vec::with_capacity(cells.len()),
                };
                for c in cells {
                    // Welford can land a hair outside [min, max] for constant data.
                    s.mean.push(c.mean.clamp(c.min, c.max));
                    let var = if self.count > 1 {
                        c.m2 / (r - 1.0)
                    } else {
                        0.0
                    };
                    s.stderr.push((var.max(0.0) / r).sqrt());
                    s.min.push(c.min);
                    s.max.push(c.max);
                }
                (metric, s)
            })
            .collect();
        Ok(EnsembleSummary {
            replicas: self.count,
            index_kind: self.index_kind,
            index: self.index,
            metrics,
        })
    }
}

pub fn aggregate(traces: &[RunRecord]) -> Result<EnsembleSummary> {
    let first = traces
        .first()
        .ok_or_else(|| Error::GridMismatch("no replicas to aggregate".into()))?;
    let mut acc = EnsembleAccumulator::new(first);
    for t in traces {
        acc.add(t)?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_record(value: f64, len: usize) -> RunRecord {
        let mut rec = RunRecorder::new(
            IndexKind::Iteration,
            ErgodicRule::Inclusive {
                sqnorm_start: 0,
                gap_start: 0,
            },
            1,
        );
        for k in 0..len as u64 {
            rec.push(k, k as f64, value, value, value, false);
        }
        rec.finish()
    }

    #[test]
    fn compensated_mean_handles_cancellation() {
        let mut m = CompensatedMean::new();
        for v in [1e16, 1.0, -1e16, 1.0] {
            m.push(v);
        }
        assert_eq!(m.sum(), 2.0);
        assert_eq!(m.mean(), Some(0.5));
        assert_eq!(CompensatedMean::new().mean(), None);
    }

    #[test]
    fn single_replica_summary_is_the_trace() {
        let r = constant_record(3.0, 5);
        let s = aggregate(std::slice::from_ref(&r)).unwrap();
        let gap = s.series(Metric::Gap);
        assert_eq!(gap.mean, r.gap);
        assert_eq!(gap.min, r.gap);
        assert_eq!(gap.max, r.gap);
        assert!(gap.stderr.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_constant_traces() {
        let s = aggregate(&[constant_record(1.0, 4), constant_record(3.0, 4)]).unwrap();
        let m = s.series(Metric::NormMSq);
        assert!(m.mean.iter().all(|v| *v == 2.0));
        assert!(m.min.iter().all(|v| *v == 1.0));
        assert!(m.max.iter().all(|v| *v == 3.0));
        // sample std of {1,3} is √2, stderr √2/√2 = 1
        assert!(m.stderr.iter().all(|v| (*v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let err = aggregate(&[constant_record(1.0, 4), constant_record(1.0, 5)]).unwrap_err();
        assert!(matches!(err, Error::GridMismatch(_)));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn stride_and_forced_rows() {
        let mut rec = RunRecorder::new(
            IndexKind::Iteration,
            ErgodicRule::Inclusive {
                sqnorm_start: 1,
                gap_start: 2,
            },
            3,
        );
        for k in 0..8u64 {
            rec.push(k, k as f64, k as f64, 10.0 * k as f64, 0.0, k == 7);
        }
        let r = rec.finish();
        assert_eq!(r.index, vec![0.0, 3.0, 6.0, 7.0]);
        // sqnorm window from k=1: mean(1..=6) = 3.5, mean(1..=7) = 4
        assert_eq!(r.ergodic_norm_m_sq[2], 3.5);
        assert_eq!(r.ergodic_norm_m_sq[3], 4.0);
        // gap window from k=2: mean(20..=70) = 45
        assert_eq!(r.ergodic_gap[3], 45.0);
        // before the window opens the ergodic column holds the raw value
        assert_eq!(r.ergodic_norm_m_sq[0], 0.0);
        assert_eq!(r.min_norm_m_sq, vec![0.0; 4]);
    }

    #[test]
    fn left_endpoint_rule_lags_by_one() {
        let mut rec = RunRecorder::new(IndexKind::Time, ErgodicRule::LeftEndpoint, 1);
        for (i, f) in [4.0, 2.0, 0.0].into_iter().enumerate() {
            rec.push(i as u64, i as f64 * 0.5, f, f, f, false);
        }
        let r = rec.finish();
        assert_eq!(r.ergodic_norm_m_sq, vec![4.0, 4.0, 3.0]);
    }

    #[test]
    fn ensemble_csv_round_trips() {
        let s = aggregate(&[constant_record(0.1, 3), constant_record(0.7, 3)]).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,metric,mean,stderr,min,max\n"));
        assert!(!text.contains('\r'));
        let back = EnsembleSummary::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.index, s.index);
        assert_eq!(back.metrics, s.metrics);
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        constant_record(1.0, 2).write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "k,norm_M_sq,gap,dist_sq,ergodic_norm_M_sq,ergodic_gap,min_norm_M_sq_so_far\n0,"
        ));
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, 1e-300, 12345.678901234567, -2.5e17] {
            assert_eq!(format_float(v).parse::<f64>().unwrap(), v);
        }
    }
}
