//! On-disk run format: `trace.csv` (one row per `(t, subsystem)`, values at
//! 17 significant digits), `columns.json` (scenario, deduplicated column sets
//! as sparse triplets, selection history) and `reports.json`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::analysis::{ChainReport, ClosedLoopReport, ErrorSeries, StabilityReport};
use crate::controller::ColumnSet;
use crate::error::{Error, Result};
use crate::sim::{RunStatus, Scenario, ScenarioFile, TraceLog};
use crate::sls::ClosedLoopColumn;

pub const TRACE_CSV: &str = "trace.csv";
pub const COLUMNS_JSON: &str = "columns.json";
pub const REPORTS_JSON: &str = "reports.json";

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// Local widths of each field block, padded to the widest subsystem.
struct Widths {
    x: usize,
    u: usize,
    theta: usize,
}

fn widths(s: &Scenario) -> Widths {
    let t = &s.topology;
    Widths {
        x: (0..t.len()).map(|i| t.state_dim(i)).max().unwrap_or(0),
        u: (0..t.len()).map(|i| t.input_dim(i)).max().unwrap_or(0),
        theta: (0..t.len()).map(|i| crate::dynamics::param_len(t, i)).max().unwrap_or(0),
    }
}

fn header(w: &Widths) -> Vec<String> {
    let mut h = vec!["t".to_string(), "subsystem".to_string()];
    for (name, n) in [("x", w.x), ("u", w.u), ("w", w.x), ("what", w.x), ("theta", w.theta)] {
        h.extend((0..n).map(|k| format!("{name}{k}")));
    }
    h
}

fn push_block(row: &mut Vec<String>, values: Option<&[f64]>, width: usize) {
    for k in 0..width {
        row.push(values.and_then(|v| v.get(k)).map(|&v| fmt(v)).unwrap_or_default());
    }
}

pub fn write_trace_csv<W: Write>(trace: &TraceLog, out: W) -> Result<()> {
    let s = &trace.scenario;
    let w = widths(s);
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record(header(&w))?;
    for t in 0..trace.x.len() {
        for i in 0..s.topology.len() {
            let (xr, ur) = (s.topology.state_range(i), s.topology.input_range(i));
            let mut row = vec![t.to_string(), i.to_string()];
            push_block(&mut row, Some(&trace.x[t].as_slice()[xr.clone()]), w.x);
            push_block(&mut row, trace.u.get(t).map(|u| &u.as_slice()[ur.clone()]), w.u);
            push_block(&mut row, trace.w.get(t).map(|v| &v.as_slice()[xr.clone()]), w.x);
            push_block(&mut row, trace.what.get(t).map(|v| &v.as_slice()[xr.clone()]), w.x);
            push_block(&mut row, trace.theta.get(t).map(|th| th[i].as_slice()), w.theta);
            wr.write_record(&row)?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Numeric series recovered from `trace.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSeries {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
    pub what: Vec<DVector<f64>>,
    pub theta: Vec<Vec<Vec<f64>>>,
}

pub fn read_trace_csv<R: Read>(scenario: &Scenario, input: R) -> Result<TraceSeries> {
    let topo = &scenario.topology;
    let n = topo.len();
    let w = widths(scenario);
    let mut rd = csv::Reader::from_reader(input);
    let expected = header(&w);
    let got: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if got != expected {
        return Err(Error::Parse(format!("trace header mismatch: expected {} columns, got {}", expected.len(), got.len())));
    }
    // per t: Option<local blocks> per subsystem
    type Blocks = [Option<Vec<f64>>; 5];
    let mut rows: Vec<Vec<Option<Blocks>>> = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Parse(format!("trace row {}: {what}", line + 2));
        let t: usize = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad t"))?;
        let i: usize = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad subsystem"))?;
        if i >= n {
            return Err(bad("subsystem out of range"));
        }
        let lens = [topo.state_dim(i), topo.input_dim(i), topo.state_dim(i), topo.state_dim(i), crate::dynamics::param_len(topo, i)];
        let pads = [w.x, w.u, w.x, w.x, w.theta];
        let mut col = 2;
        let mut blocks: Blocks = Default::default();
        for b in 0..5 {
            let cells: Vec<&str> = (col..col + pads[b]).map(|c| rec.get(c).unwrap_or("")).collect();
            col += pads[b];
            if cells.iter().all(|c| c.is_empty()) {
                continue;
            }
            let vals = cells[..lens[b]]
                .iter()
                .map(|c| c.parse::<f64>().map_err(|_| bad(&format!("unparsable value {c:?}"))))
                .collect::<Result<Vec<f64>>>()?;
            blocks[b] = Some(vals);
        }
        if rows.len() <= t {
            rows.resize(t + 1, vec![None; n]);
        }
        rows[t][i] = Some(blocks);
    }
    let mut out = TraceSeries { x: vec![], u: vec![], w: vec![], what: vec![], theta: vec![] };
    for (t, row) in rows.into_iter().enumerate() {
        let row: Vec<Blocks> = row
            .into_iter()
            .enumerate()
            .map(|(i, b)| b.ok_or_else(|| Error::Parse(format!("missing row for t={t}, subsystem {i}"))))
            .collect::<Result<_>>()?;
        let gather = |b: usize| -> Result<Option<DVector<f64>>> {
            let present = row.iter().filter(|r| r[b].is_some()).count();
            if present == 0 {
                return Ok(None);
            }
            if present != n {
                return Err(Error::Parse(format!("partially missing block {b} at t={t}")));
            }
            Ok(Some(DVector::from_iterator(
                row.iter().map(|r| r[b].as_ref().unwrap().len()).sum(),
                row.iter().flat_map(|r| r[b].as_ref().unwrap().iter().copied()),
            )))
        };
        out.x.push(gather(0)?.ok_or_else(|| Error::Parse(format!("missing state at t={t}")))?);
        if let Some(u) = gather(1)? {
            out.u.push(u);
        }
        if let Some(w) = gather(2)? {
            out.w.push(w);
        }
        if let Some(v) = gather(3)? {
            out.what.push(v);
        }
        if row.iter().all(|r| r[4].is_some()) {
            out.theta.push(row.iter().map(|r| r[4].clone().unwrap()).collect());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnRecord {
    pub index: usize,
    pub horizon: usize,
    pub objective: f64,
    pub residual: f64,
    pub kkt_residual: f64,
    pub model_stamp: u64,
    pub synthesized_at: usize,
    /// `(k, global state index, value)` for the nonzero entries of `φx[k]`.
    pub x: Vec<(usize, usize, f64)>,
    pub u: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSetRecord {
    pub owner: usize,
    pub columns: Vec<ColumnRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnsFile {
    pub scenario: ScenarioFile,
    pub status: RunStatus,
    #[serde(default)]
    pub switch_time: Option<usize>,
    pub sets: Vec<ColumnSetRecord>,
    /// `at[t][i]`: index into `sets` of the set subsystem `i` ran at `t`.
    pub at: Vec<Vec<usize>>,
    pub prior: Vec<usize>,
    pub prior_theta: Vec<Vec<f64>>,
    pub movement: Vec<Vec<f64>>,
    pub initial_diameter: Vec<f64>,
}

fn column_record(c: &ClosedLoopColumn) -> ColumnRecord {
    let triplets = |vs: &[DVector<f64>]| -> Vec<(usize, usize, f64)> {
        vs.iter()
            .enumerate()
            .flat_map(|(k, v)| v.iter().enumerate().filter(|(_, x)| **x != 0.0).map(move |(p, x)| (k, p, *x)))
            .collect()
    };
    ColumnRecord {
        index: c.index,
        horizon: c.horizon,
        objective: c.objective,
        residual: c.residual,
        kkt_residual: c.kkt_residual,
        model_stamp: c.model_stamp,
        synthesized_at: c.synthesized_at,
        x: triplets(&c.phi_x),
        u: triplets(&c.phi_u),
    }
}

fn column_from_record(owner: usize, r: &ColumnRecord, n_x: usize, n_u: usize) -> Result<ClosedLoopColumn> {
    let mut phi_x = vec![DVector::zeros(n_x); r.horizon + 1];
    let mut phi_u = vec![DVector::zeros(n_u); r.horizon];
    for &(k, p, v) in &r.x {
        *phi_x.get_mut(k).and_then(|c| c.get_mut(p)).ok_or_else(|| Error::Parse(format!("column entry ({k}, {p}) out of range")))? = v;
    }
    for &(k, p, v) in &r.u {
        *phi_u.get_mut(k).and_then(|c| c.get_mut(p)).ok_or_else(|| Error::Parse(format!("column entry ({k}, {p}) out of range")))? = v;
    }
    Ok(ClosedLoopColumn {
        owner,
        index: r.index,
        horizon: r.horizon,
        phi_x,
        phi_u,
        objective: r.objective,
        residual: r.residual,
        kkt_residual: r.kkt_residual,
        model_stamp: r.model_stamp,
        synthesized_at: r.synthesized_at,
    })
}

pub fn columns_file(trace: &TraceLog) -> ColumnsFile {
    let mut sets = Vec::new();
    let mut ids: HashMap<*const Vec<Arc<ClosedLoopColumn>>, usize> = HashMap::new();
    let mut id_of = |owner: usize, set: &ColumnSet, sets: &mut Vec<ColumnSetRecord>| -> usize {
        *ids.entry(Arc::as_ptr(set)).or_insert_with(|| {
            sets.push(ColumnSetRecord { owner, columns: set.iter().map(|c| column_record(c)).collect() });
            sets.len() - 1
        })
    };
    let prior = trace.prior_columns.iter().enumerate().map(|(i, s)| id_of(i, s, &mut sets)).collect();
    let at = trace
        .columns
        .iter()
        .map(|row| row.iter().enumerate().map(|(i, s)| id_of(i, s, &mut sets)).collect())
        .collect();
    ColumnsFile {
        scenario: trace.scenario.file.clone(),
        status: trace.status,
        switch_time: trace.switch_time,
        sets,
        at,
        prior,
        prior_theta: trace.prior_theta.iter().map(|t| t.as_ref().clone()).collect(),
        movement: trace.movement.clone(),
        initial_diameter: trace.initial_diameter.clone(),
    }
}

/// Rebuilds a trace from its CSV series and column sidecar.
pub fn assemble_trace(cf: ColumnsFile, series: TraceSeries, scenario: Arc<Scenario>) -> Result<TraceLog> {
    let (n_x, n_u) = (scenario.topology.n_x(), scenario.topology.n_u());
    let sets: Vec<ColumnSet> = cf
        .sets
        .iter()
        .map(|s| {
            s.columns
                .iter()
                .map(|c| column_from_record(s.owner, c, n_x, n_u).map(Arc::new))
                .collect::<Result<Vec<_>>>()
                .map(Arc::new)
        })
        .collect::<Result<_>>()?;
    let pick = |id: usize| sets.get(id).cloned().ok_or_else(|| Error::Parse(format!("unknown column set {id}")));
    let mut trace = TraceLog::empty(scenario);
    trace.columns = cf.at.iter().map(|row| row.iter().map(|&id| pick(id)).collect()).collect::<Result<_>>()?;
    trace.prior_columns = cf.prior.iter().map(|&id| pick(id)).collect::<Result<_>>()?;
    trace.prior_theta = cf.prior_theta.into_iter().map(Arc::new).collect();
    trace.movement = cf.movement;
    trace.initial_diameter = cf.initial_diameter;
    trace.status = cf.status;
    trace.switch_time = cf.switch_time;
    trace.x = series.x;
    trace.u = series.u;
    trace.w = series.w;
    trace.what = series.what;
    trace.theta = series.theta.into_iter().map(|row| row.into_iter().map(Arc::new).collect()).collect();
    if !trace.columns.is_empty() && trace.columns.len() != trace.u.len() {
        return Err(Error::Parse(format!("{} column rows for {} steps", trace.columns.len(), trace.u.len())));
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reports {
    pub status: RunStatus,
    pub stability: StabilityReport,
    #[serde(default)]
    pub identity: Option<ClosedLoopReport>,
    #[serde(default)]
    pub chain: Option<ChainReport>,
    #[serde(default)]
    pub error_series: Option<ErrorSeries>,
    pub path_lengths: Vec<f64>,
    #[serde(default)]
    pub switch_time: Option<usize>,
}

pub fn write_run(dir: &Path, trace: &TraceLog, reports: &Reports) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_trace_csv(trace, BufWriter::new(File::create(dir.join(TRACE_CSV))?))?;
    serde_json::to_writer(BufWriter::new(File::create(dir.join(COLUMNS_JSON))?), &columns_file(trace))?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join(REPORTS_JSON))?), reports)?;
    Ok(())
}

pub fn load_run(dir: &Path) -> Result<TraceLog> {
    let cf: ColumnsFile = serde_json::from_reader(BufReader::new(File::open(dir.join(COLUMNS_JSON))?))
        .map_err(|e| Error::Parse(format!("{}: {e}", dir.join(COLUMNS_JSON).display())))?;
    let scenario = Arc::new(Scenario::from_file(cf.scenario.clone())?);
    let series = read_trace_csv(&scenario, BufReader::new(File::open(dir.join(TRACE_CSV))?))?;
    assemble_trace(cf, series, scenario)
}
