//! Routing-trace analytics: per-token trace records, module transition
//! probabilities between consecutive assembly steps, and module loads.
//!
//! Statistics aggregate over every token and every step transition. Chunks
//! with different pool sizes share one index space whose last entry is SKIP.

use std::io::{Read, Write};

use crate::assembly::AssemblyTrace;
use crate::routing::Kind;
use crate::{MomError, Result};

/// One token's decision in one sub-round.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub seq: usize,
    pub pos: usize,
    pub chunk: usize,
    pub step: usize,
    pub kind: Kind,
    /// Pool size of this kind; a selection equal to it is SKIP.
    pub n_modules: usize,
    pub selected: Vec<usize>,
    pub gates: Vec<f64>,
}

pub const TRACE_HEADER: [&str; 8] = ["seq", "pos", "chunk", "step", "kind", "n_modules", "selected", "gates"];

/// Flattens a forward-pass trace into per-token records in execution order.
pub fn records_from_trace(trace: &AssemblyTrace) -> Vec<TraceRecord> {
    let mut out = Vec::new();
    for r in &trace.rounds {
        let rows = r.selected.len() / r.k.max(1);
        for row in 0..rows {
            out.push(TraceRecord {
                seq: row / trace.seq_len,
                pos: row % trace.seq_len,
                chunk: r.chunk,
                step: r.step,
                kind: r.kind,
                n_modules: r.n_modules,
                selected: r.selected[row * r.k..(row + 1) * r.k].to_vec(),
                gates: r.gates[row * r.k..(row + 1) * r.k].to_vec(),
            });
        }
    }
    out
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join("|")
}

pub fn write_trace_csv(w: impl Write, records: &[TraceRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| MomError::Data(format!("writing trace: {e}"));
    out.write_record(TRACE_HEADER).map_err(err)?;
    for r in records {
        out.write_record([
            r.seq.to_string(),
            r.pos.to_string(),
            r.chunk.to_string(),
            r.step.to_string(),
            r.kind.to_string(),
            r.n_modules.to_string(),
            join(&r.selected),
            join(&r.gates),
        ])
        .map_err(err)?;
    }
    out.flush().map_err(|e| MomError::Data(format!("writing trace: {e}")))
}

fn split_list<T: std::str::FromStr>(s: &str, line: u64, what: &str) -> Result<Vec<T>> {
    s.split('|')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| MomError::Data(format!("trace line {line}: bad {what} entry {p:?}")))
        })
        .collect()
}

/// Reads and validates a trace CSV. An empty trace is an error.
pub fn read_trace_csv(r: impl Read) -> Result<Vec<TraceRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr
        .headers()
        .map_err(|e| MomError::Data(format!("reading trace header: {e}")))?
        .clone();
    if header.iter().ne(TRACE_HEADER) {
        return Err(MomError::Data(format!("trace header must be {}", TRACE_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| MomError::Data(format!("reading trace: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<usize> {
            rec[i]
                .parse()
                .map_err(|_| MomError::Data(format!("trace line {line}: bad {} {:?}", TRACE_HEADER[i], &rec[i])))
        };
        let kind: Kind = rec[4]
            .parse()
            .map_err(|_| MomError::Data(format!("trace line {line}: bad kind {:?}", &rec[4])))?;
        let r = TraceRecord {
            seq: num(0)?,
            pos: num(1)?,
            chunk: num(2)?,
            step: num(3)?,
            kind,
            n_modules: num(5)?,
            selected: split_list(&rec[6], line, "selected")?,
            gates: split_list(&rec[7], line, "gate")?,
        };
        if r.selected.is_empty() || r.selected.len() != r.gates.len() {
            return Err(MomError::Data(format!("trace line {line}: selections and gates differ in length")));
        }
        if let Some(&bad) = r.selected.iter().find(|&&s| s > r.n_modules) {
            return Err(MomError::Data(format!(
                "trace line {line}: module {bad} outside a pool of {} plus SKIP",
                r.n_modules
            )));
        }
        out.push(r);
    }
    if out.is_empty() {
        return Err(MomError::Data("trace is empty".into()));
    }
    Ok(out)
}

/// Width of the shared index space for `kind` (largest pool, plus SKIP).
fn index_space(records: &[&TraceRecord]) -> usize {
    records.iter().map(|r| r.n_modules).max().unwrap_or(0) + 1
}

fn remap(r: &TraceRecord, width: usize, s: usize) -> usize {
    if s == r.n_modules {
        width - 1
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub kind: Kind,
    /// `probs[i][j] = P(next step selects j | this step selected i)`; the last index is SKIP.
    pub probs: Vec<Vec<f64>>,
    /// Total transition weight leaving each row; zero marks an unsupported row.
    pub support: Vec<f64>,
}

impl TransitionMatrix {
    pub fn size(&self) -> usize {
        self.probs.len()
    }

    pub fn is_supported(&self, row: usize) -> bool {
        self.support[row] > 0.0
    }
}

/// Conditional frequencies of consecutive-step selections for one kind.
/// With `K` selections at step `h` and `K'` at `h+1`, each of the `K·K'`
/// pairs carries weight `1/(K·K')`.
pub fn transition_matrix(records: &[TraceRecord], kind: Kind) -> Result<TransitionMatrix> {
    let rel: Vec<&TraceRecord> = records.iter().filter(|r| r.kind == kind).collect();
    if rel.is_empty() {
        return Err(MomError::Data(format!("trace has no {kind} records")));
    }
    let n = index_space(&rel);
    let mut counts = vec![vec![0.0; n]; n];
    let mut by_token: std::collections::BTreeMap<(usize, usize, usize), Vec<&TraceRecord>> = Default::default();
    for r in &rel {
        by_token.entry((r.seq, r.pos, r.chunk)).or_default().push(r);
    }
    for path in by_token.values_mut() {
        path.sort_by_key(|r| r.step);
        for pair in path.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b.step != a.step + 1 {
                continue;
            }
            let w = 1.0 / (a.selected.len() * b.selected.len()) as f64;
            for &i in &a.selected {
                for &j in &b.selected {
                    counts[remap(a, n, i)][remap(b, n, j)] += w;
                }
            }
        }
    }
    let support: Vec<f64> = counts.iter().map(|row| row.iter().sum()).collect();
    let probs = counts
        .into_iter()
        .zip(&support)
        .map(|(row, &s)| {
            if s > 0.0 {
                row.into_iter().map(|c| c / s).collect()
            } else {
                row
            }
        })
        .collect();
    Ok(TransitionMatrix { kind, probs, support })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadStats {
    pub kind: Kind,
    /// Share of selections per module over all tokens and steps; the last entry is SKIP.
    pub freq: Vec<f64>,
    /// The same shares per step index.
    pub per_step: Vec<Vec<f64>>,
    pub skip_rate: f64,
}

/// Module loads for each kind present in the trace.
pub fn load_stats(records: &[TraceRecord]) -> Result<Vec<LoadStats>> {
    if records.is_empty() {
        return Err(MomError::Data("trace is empty".into()));
    }
    let mut out = Vec::new();
    for kind in [Kind::Attention, Kind::Ffn] {
        let rel: Vec<&TraceRecord> = records.iter().filter(|r| r.kind == kind).collect();
        if rel.is_empty() {
            continue;
        }
        let n = index_space(&rel);
        let steps = rel.iter().map(|r| r.step).max().unwrap_or(0) + 1;
        let mut total = vec![0.0; n];
        let mut per_step = vec![vec![0.0; n]; steps];
        for r in &rel {
            let w = 1.0 / r.selected.len() as f64;
            for &s in &r.selected {
                let i = remap(r, n, s);
                total[i] += w;
                per_step[r.step][i] += w;
            }
        }
        let normalize = |v: &mut Vec<f64>| {
            let s: f64 = v.iter().sum();
            if s > 0.0 {
                v.iter_mut().for_each(|x| *x /= s);
            }
        };
        normalize(&mut total);
        per_step.iter_mut().for_each(normalize);
        out.push(LoadStats {
            kind,
            skip_rate: total[n - 1],
            freq: total,
            per_step,
        });
    }
    Ok(out)
}

pub fn write_transitions_csv(w: impl Write, matrices: &[TransitionMatrix]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| MomError::Data(format!("writing transitions: {e}"));
    out.write_record(["kind", "from", "to", "prob"]).map_err(err)?;
    for m in matrices {
        for (i, row) in m.probs.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                out.write_record([m.kind.to_string(), i.to_string(), j.to_string(), p.to_string()])
                    .map_err(err)?;
            }
        }
    }
    out.flush().map_err(|e| MomError::Data(format!("writing transitions: {e}")))
}

pub fn write_loads_csv(w: impl Write, loads: &[LoadStats]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| MomError::Data(format!("writing loads: {e}"));
    out.write_record(["kind", "module", "freq"]).map_err(err)?;
    for l in loads {
        for (i, f) in l.freq.iter().enumerate() {
            out.write_record([l.kind.to_string(), i.to_string(), f.to_string()]).map_err(err)?;
        }
    }
    out.flush().map_err(|e| MomError::Data(format!("writing loads: {e}")))
}
