//! Evaluation quantities and their CSV / JSON-lines serialization.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::experiments::EstimateEnsemble;
use crate::sim::trial::{StepRecord, TrialTrace};
use crate::world::Position;

/// Which position of an [`AgentEstimate`](crate::sim::AgentEstimate) to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateKind {
    Raw,
    Refined,
    RefinedProjected,
}

/// Mean absolute position error per outer step. For each trial the errors
/// of all agents holding an estimate are averaged; trials without any
/// estimate at `t` are excluded and counted out of `m_effective`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaeSeries {
    pub t: Vec<usize>,
    pub mae: Vec<Option<f64>>,
    pub m_effective: Vec<usize>,
    pub trials: usize,
}

pub fn mae(traces: &[TrialTrace], target: usize, kind: EstimateKind) -> Result<MaeSeries> {
    let len = traces.first().map_or(0, |t| t.steps.len());
    if traces.iter().any(|t| t.steps.len() != len) {
        return Err(Error::InvalidArgument("traces differ in length".into()));
    }
    let mut out = MaeSeries {
        t: Vec::with_capacity(len),
        mae: Vec::with_capacity(len),
        m_effective: Vec::with_capacity(len),
        trials: traces.len(),
    };
    for s in 0..len {
        let mut sum = 0.0;
        let mut count = 0;
        for tr in traces {
            if let Some(e) = trial_error(&tr.steps[s], target, kind)? {
                sum += e;
                count += 1;
            }
        }
        out.t.push(traces[0].steps[s].t);
        out.mae.push((count > 0).then(|| sum / count as f64));
        out.m_effective.push(count);
    }
    Ok(out)
}

fn trial_error(step: &StepRecord, target: usize, kind: EstimateKind) -> Result<Option<f64>> {
    let truth = step
        .targets
        .get(target)
        .ok_or_else(|| Error::InvalidArgument(format!("no target {target}")))?;
    let mut sum = 0.0;
    let mut count = 0;
    for est in step.estimates[target].iter().flatten() {
        let p = match kind {
            EstimateKind::Raw => Some(&est.p_hat),
            EstimateKind::Refined => est.refined.as_ref(),
            EstimateKind::RefinedProjected => est.refined_projected.as_ref(),
        };
        if let Some(p) = p {
            sum += p.distance(truth);
            count += 1;
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

/// Mean of the present MAE values at steps `from..=to` (1-based `t`).
pub fn window_mean(series: &MaeSeries, from: usize, to: usize) -> Option<f64> {
    let vals: Vec<f64> = series
        .t
        .iter()
        .zip(&series.mae)
        .filter(|(t, _)| (from..=to).contains(*t))
        .filter_map(|(_, m)| *m)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCdf {
    values: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empirical CDF needs at least one sample".into()));
        }
        if samples.iter().any(|x| x.is_nan()) {
            return Err(Error::InvalidArgument("NaN sample".into()));
        }
        let mut values = samples.to_vec();
        values.sort_by(f64::total_cmp);
        Ok(EmpiricalCdf { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `i/N` for the `i`-th sorted sample (1-based).
    pub fn fractions(&self) -> Vec<f64> {
        let n = self.values.len() as f64;
        (1..=self.values.len()).map(|i| i as f64 / n).collect()
    }

    /// `F(x) = #{samples ≤ x} / N`.
    pub fn eval(&self, x: f64) -> f64 {
        self.values.partition_point(|&v| v <= x) as f64 / self.values.len() as f64
    }

    /// Lower median.
    pub fn median(&self) -> f64 {
        self.values[(self.values.len() - 1) / 2]
    }

    /// True iff `self(x) ≥ other(x)` at every point of the merged support.
    pub fn dominates(&self, other: &EmpiricalCdf) -> bool {
        self.values
            .iter()
            .chain(&other.values)
            .all(|&x| self.eval(x) >= other.eval(x))
    }
}

pub fn cdf_of_info_errors(errors: &[f64]) -> Result<EmpiricalCdf> {
    EmpiricalCdf::new(errors)
}

/// `tr(Cov)` with the `M − 1` denominator; `None` below two samples.
pub fn sample_trace_cov(samples: &[DVector<f64>]) -> Option<f64> {
    let m = samples.len();
    if m < 2 {
        return None;
    }
    let mut mean = DVector::zeros(samples[0].len());
    for s in samples {
        mean += s;
    }
    mean /= m as f64;
    let ss: f64 = samples.iter().map(|s| (s - &mean).norm_squared()).sum();
    Some(ss / (m - 1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceTrace {
    pub tau: Vec<u32>,
    pub var: Vec<Option<f64>>,
    pub m_effective: Vec<usize>,
}

impl VarianceTrace {
    pub fn scaled(&self) -> Vec<Option<f64>> {
        self.tau
            .iter()
            .zip(&self.var)
            .map(|(&t, v)| v.map(|v| t as f64 * v))
            .collect()
    }

    /// First `τ` from which `τ·var` stays within `rel` of its final value.
    pub fn settling_round(&self, rel: f64) -> Option<u32> {
        let scaled = self.scaled();
        let last = (*scaled.last()?)?;
        let mut settled = None;
        for (&t, v) in self.tau.iter().zip(&scaled).rev() {
            match v {
                Some(v) if (v - last).abs() <= rel * last.abs() => settled = Some(t),
                _ => break,
            }
        }
        settled
    }

    /// First `τ` at which `τ·var` is within `rel` of its final value.
    pub fn first_within(&self, rel: f64) -> Option<u32> {
        let scaled = self.scaled();
        let last = (*scaled.last()?)?;
        self.tau
            .iter()
            .zip(&scaled)
            .find(|(_, v)| v.is_some_and(|v| (v - last).abs() <= rel * last.abs()))
            .map(|(&t, _)| t)
    }
}

/// Per-round trace of the sample covariance of `samples[round]`.
pub fn variance_trace(tau: &[u32], samples: &[Vec<DVector<f64>>]) -> VarianceTrace {
    VarianceTrace {
        tau: tau.to_vec(),
        var: samples.iter().map(|s| sample_trace_cov(s)).collect(),
        m_effective: samples.iter().map(Vec::len).collect(),
    }
}

/// Variance trace of one agent (by position in `ens.agents`).
pub fn ensemble_variance(ens: &EstimateEnsemble, agent: usize) -> VarianceTrace {
    let per_round: Vec<Vec<DVector<f64>>> = ens.samples.iter().map(|r| r[agent].clone()).collect();
    variance_trace(&ens.rounds, &per_round)
}

/// Per-coordinate sample mean against the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterRow {
    pub round: u32,
    pub agent: usize,
    pub coord: usize,
    pub mean: f64,
    pub se: f64,
    pub truth: f64,
    pub samples: usize,
}

impl CenterRow {
    /// `|mean − truth| / SE`; infinite when SE is zero and the mean is off.
    pub fn z_score(&self) -> f64 {
        let d = (self.mean - self.truth).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.se
        }
    }
}

pub fn centeredness(ens: &EstimateEnsemble) -> Vec<CenterRow> {
    let mut out = Vec::new();
    for (r, &round) in ens.rounds.iter().enumerate() {
        for (a, &agent) in ens.agents.iter().enumerate() {
            let xs = &ens.samples[r][a];
            let m = xs.len();
            if m < 2 {
                continue;
            }
            for c in 0..ens.truth.len() {
                let mean = xs.iter().map(|x| x[c]).sum::<f64>() / m as f64;
                let var = xs.iter().map(|x| (x[c] - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
                out.push(CenterRow {
                    round,
                    agent,
                    coord: c,
                    mean,
                    se: (var / m as f64).sqrt(),
                    truth: ens.truth[c],
                    samples: m,
                });
            }
        }
    }
    out
}



#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        }
    }
}

/// A flat record with a fixed CSV header.
pub trait Record: Serialize + DeserializeOwned {
    const HEADER: &'static [&'static str];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeRow {
    pub t: usize,
    pub mae: Option<f64>,
    pub m_effective: usize,
}

impl Record for MaeRow {
    const HEADER: &'static [&'static str] = &["t", "mae", "m_effective"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfRow {
    pub value: f64,
    pub fraction: f64,
}

impl Record for CdfRow {
    const HEADER: &'static [&'static str] = &["value", "fraction"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub tau: u32,
    pub var: Option<f64>,
    pub tau_var: Option<f64>,
    pub m_effective: usize,
}

impl Record for VarianceRow {
    const HEADER: &'static [&'static str] = &["tau", "var", "tau_var", "m_effective"];
}

impl Record for CenterRow {
    const HEADER: &'static [&'static str] = &["round", "agent", "coord", "mean", "se", "truth", "samples"];
}

/// One agent's estimate of one target at one step. Coordinates beyond the
/// scenario dimension are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub trial: usize,
    pub t: usize,
    pub target_id: usize,
    pub agent_id: usize,
    pub agent_x: f64,
    pub agent_y: f64,
    pub agent_z: Option<f64>,
    pub target_x: f64,
    pub target_y: f64,
    pub target_z: Option<f64>,
    pub p_hat_x: Option<f64>,
    pub p_hat_y: Option<f64>,
    pub p_hat_z: Option<f64>,
    pub volume: Option<f64>,
}

impl Record for EstimateRow {
    const HEADER: &'static [&'static str] = &[
        "trial", "t", "target_id", "agent_id", "agent_x", "agent_y", "agent_z", "target_x",
        "target_y", "target_z", "p_hat_x", "p_hat_y", "p_hat_z", "volume",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRow {
    pub trial: usize,
    pub t: usize,
    pub agent_id: usize,
    pub from_x: f64,
    pub from_y: f64,
    pub from_z: Option<f64>,
    pub to_x: f64,
    pub to_y: f64,
    pub to_z: Option<f64>,
    /// Empty when the agent's information was singular.
    pub old_volume: Option<f64>,
    pub new_volume: Option<f64>,
    pub singular: bool,
}

impl Record for DecisionRow {
    const HEADER: &'static [&'static str] = &[
        "trial", "t", "agent_id", "from_x", "from_y", "from_z", "to_x", "to_y", "to_z",
        "old_volume", "new_volume", "singular",
    ];
}

pub fn mae_rows(s: &MaeSeries) -> Vec<MaeRow> {
    s.t.iter()
        .zip(&s.mae)
        .zip(&s.m_effective)
        .map(|((&t, &mae), &m_effective)| MaeRow { t, mae, m_effective })
        .collect()
}

pub fn mae_from_rows(rows: &[MaeRow], trials: usize) -> MaeSeries {
    MaeSeries {
        t: rows.iter().map(|r| r.t).collect(),
        mae: rows.iter().map(|r| r.mae).collect(),
        m_effective: rows.iter().map(|r| r.m_effective).collect(),
        trials,
    }
}

pub fn cdf_rows(c: &EmpiricalCdf) -> Vec<CdfRow> {
    c.values()
        .iter()
        .zip(c.fractions())
        .map(|(&value, fraction)| CdfRow { value, fraction })
        .collect()
}

pub fn variance_rows(v: &VarianceTrace) -> Vec<VarianceRow> {
    v.tau
        .iter()
        .zip(&v.var)
        .zip(v.scaled())
        .zip(&v.m_effective)
        .map(|(((&tau, &var), tau_var), &m_effective)| VarianceRow {
            tau,
            var,
            tau_var,
            m_effective,
        })
        .collect()
}

fn xyz(p: &Position) -> (f64, f64, Option<f64>) {
    let c = p.coords();
    (c[0], c[1], c.get(2).copied())
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

pub fn estimate_rows(traces: &[TrialTrace]) -> Vec<EstimateRow> {
    let mut out = Vec::new();
    for tr in traces {
        for s in &tr.steps {
            for (k, per_agent) in s.estimates.iter().enumerate() {
                let (tx, ty, tz) = xyz(&s.targets[k]);
                for (i, est) in per_agent.iter().enumerate() {
                    let (ax, ay, az) = xyz(&s.agents[i]);
                    let (px, py, pz) = match est {
                        Some(e) => {
                            let (x, y, z) = xyz(&e.p_hat);
                            (Some(x), Some(y), z)
                        }
                        None => (None, None, None),
                    };
                    out.push(EstimateRow {
                        trial: tr.trial,
                        t: s.t,
                        target_id: k,
                        agent_id: i,
                        agent_x: ax,
                        agent_y: ay,
                        agent_z: az,
                        target_x: tx,
                        target_y: ty,
                        target_z: tz,
                        p_hat_x: px,
                        p_hat_y: py,
                        p_hat_z: pz,
                        volume: est.as_ref().and_then(|e| finite(e.volume)),
                    });
                }
            }
        }
    }
    out
}

pub fn decision_rows(traces: &[TrialTrace]) -> Vec<DecisionRow> {
    let mut out = Vec::new();
    for tr in traces {
        for s in &tr.steps {
            for d in &s.decisions {
                let (fx, fy, fz) = xyz(&d.from);
                let (tx, ty, tz) = xyz(&d.chosen_pos);
                out.push(DecisionRow {
                    trial: tr.trial,
                    t: s.t,
                    agent_id: d.agent_id,
                    from_x: fx,
                    from_y: fy,
                    from_z: fz,
                    to_x: tx,
                    to_y: ty,
                    to_z: tz,
                    old_volume: finite(d.old_volume),
                    new_volume: finite(d.new_volume),
                    singular: d.singular,
                });
            }
        }
    }
    out
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(e.to_string())
}

/// Writes a header row (even for no records) followed by the records.
pub fn write_records<T: Record, W: Write>(out: W, rows: &[T], format: Format) -> Result<()> {
    match format {
        Format::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
            w.write_record(T::HEADER).map_err(csv_err)?;
            for r in rows {
                w.serialize(r).map_err(csv_err)?;
            }
            w.flush().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        Format::Jsonl => {
            let mut w = out;
            for r in rows {
                serde_json::to_writer(&mut w, r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                w.write_all(b"\n").map_err(|e| Error::InvalidArgument(e.to_string()))?;
            }
        }
    }
    Ok(())
}

pub fn read_records<T: Record, R: Read>(inp: R, format: Format) -> Result<Vec<T>> {
    match format {
        Format::Csv => {
            let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(inp);
            let header = r.headers().map_err(csv_err)?.clone();
            if header.iter().ne(T::HEADER.iter().copied()) {
                return Err(Error::InvalidArgument(format!(
                    "unexpected header {:?}, expected {:?}",
                    header.iter().collect::<Vec<_>>(),
                    T::HEADER
                )));
            }
            r.deserialize().map(|x| x.map_err(csv_err)).collect()
        }
        Format::Jsonl => BufReader::new(inp)
            .lines()
            .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
            .map(|l| {
                let l = l.map_err(|e| Error::InvalidArgument(e.to_string()))?;
                serde_json::from_str(&l).map_err(|e| Error::InvalidArgument(e.to_string()))
            })
            .collect(),
    }
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::InvalidArgument(message) => Error::Parse {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    }
}

pub fn export<T: Record>(path: &Path, rows: &[T], format: Format) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_records(&mut w, rows, format).map_err(|e| with_path(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn import<T: Record>(path: &Path, format: Format) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(f, format).map_err(|e| with_path(path, e))
}

/// One JSON object per `(trial, t)` with the full step record.
pub fn write_trace_jsonl<W: Write>(mut out: W, traces: &[TrialTrace]) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        trial: usize,
        #[serde(flatten)]
        step: &'a StepRecord,
    }
    for tr in traces {
        for step in &tr.steps {
            serde_json::to_writer(&mut out, &Line { trial: tr.trial, step })?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::trial::{AgentEstimate, StepFlags};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn est(x: f64, y: f64) -> Option<AgentEstimate> {
        Some(AgentEstimate {
            p_hat: Position::xy(x, y),
            cov: vec![],
            volume: 1.0,
            refined: None,
            refined_projected: None,
        })
    }

    fn trace(trial: usize, ests: Vec<Option<AgentEstimate>>) -> TrialTrace {
        TrialTrace {
            trial,
            steps: vec![StepRecord {
                t: 1,
                agents: ests.iter().map(|_| Position::xy(0.0, 0.0)).collect(),
                targets: vec![Position::xy(0.0, 0.0)],
                estimates: vec![ests],
                decisions: vec![],
                measurements: 0,
                flags: StepFlags::default(),
            }],
            measurement_log: vec![],
            message_log: vec![],
        }
    }

    #[test]
    fn mae_basic_values() {
        let exact = mae(&[trace(0, vec![est(0.0, 0.0)])], 0, EstimateKind::Raw).unwrap();
        assert_eq!(exact.mae, vec![Some(0.0)]);
        let two = mae(
            &[trace(0, vec![est(1.0, 0.0)]), trace(1, vec![est(0.0, 3.0)])],
            0,
            EstimateKind::Raw,
        )
        .unwrap();
        assert_eq!(two.mae, vec![Some(2.0)]);
        assert_eq!(two.m_effective, vec![2]);
    }

    #[test]
    fn mae_excludes_missing() {
        let s = mae(
            &[trace(0, vec![None, est(3.0, 4.0)]), trace(1, vec![None])],
            0,
            EstimateKind::Raw,
        )
        .unwrap();
        assert_eq!(s.mae, vec![Some(5.0)]);
        assert_eq!(s.m_effective, vec![1]);
        let none = mae(&[trace(0, vec![None])], 0, EstimateKind::Raw).unwrap();
        assert_eq!(none.mae, vec![None]);
        assert_eq!(
            mae(&[trace(0, vec![est(1.0, 1.0)])], 0, EstimateKind::Refined).unwrap().mae,
            vec![None]
        );
    }

    #[test]
    fn cdf_values() {
        let c = EmpiricalCdf::new(&[0.0]).unwrap();
        assert_eq!(c.eval(-1e-12), 0.0);
        assert_eq!(c.eval(0.0), 1.0);
        let c = EmpiricalCdf::new(&[3.0, 1.0, 2.0]).unwrap();
        assert!((c.eval(2.0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.fractions().last(), Some(&1.0));
        assert_eq!(c.median(), 2.0);
        assert!(EmpiricalCdf::new(&[]).is_err());
    }

    #[test]
    fn dominance() {
        let small = EmpiricalCdf::new(&[0.1, 0.2, 0.3]).unwrap();
        let big = EmpiricalCdf::new(&[0.2, 0.5, 0.9]).unwrap();
        assert!(small.dominates(&big));
        assert!(!big.dominates(&small));
        assert!(small.dominates(&small));
    }

    #[test]
    fn variance_values() {
        let constant = vec![DVector::from_vec(vec![1.0, 2.0, 3.0]); 10];
        assert_eq!(sample_trace_cov(&constant), Some(0.0));
        assert_eq!(sample_trace_cov(&constant[..1]), None);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<DVector<f64>> = (0..100_000)
            .map(|_| DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng)))
            .collect();
        let v = sample_trace_cov(&xs).unwrap();
        assert!((v - 3.0).abs() < 0.06, "{v}");
    }

    #[test]
    fn settling() {
        let v = VarianceTrace {
            tau: vec![1, 2, 3, 4],
            var: vec![Some(0.1), Some(0.5), Some(0.25), Some(0.25)],
            m_effective: vec![5; 4],
        };
        // τ·var = 0.1, 1.0, 0.75, 1.0
        assert_eq!(v.settling_round(0.1), Some(4));
        assert_eq!(v.first_within(0.1), Some(2));
    }

    #[test]
    fn round_trips() {
        let rows = vec![
            MaeRow { t: 1, mae: Some(0.1 + 0.2), m_effective: 3 },
            MaeRow { t: 2, mae: None, m_effective: 0 },
            MaeRow { t: 3, mae: Some(1e-300), m_effective: 1 },
        ];
        for fmt in [Format::Csv, Format::Jsonl] {
            let mut buf = Vec::new();
            write_records(&mut buf, &rows, fmt).unwrap();
            let back: Vec<MaeRow> = read_records(buf.as_slice(), fmt).unwrap();
            assert_eq!(back, rows);
        }
    }

    #[test]
    fn empty_csv_is_header_only() {
        let mut buf = Vec::new();
        write_records::<MaeRow, _>(&mut buf, &[], Format::Csv).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,mae,m_effective\n");
        let mut buf = Vec::new();
        write_records::<VarianceRow, _>(&mut buf, &[], Format::Csv).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "tau,var,tau_var,m_effective\n");
    }

    #[test]
    fn wrong_header_is_rejected() {
        let r: Result<Vec<MaeRow>> = read_records("a,b\n1,2\n".as_bytes(), Format::Csv);
        assert!(r.is_err());
    }
}
