use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Header line of exported trace files.
pub const TRACE_HEADER: &str = "t,elapsed_seconds,phi,gap,kkt,nnz,rho";

/// One solver iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub t: usize,
    pub elapsed: f64,
    pub phi: f64,
    /// `max(Φ_t - Φ*, 0)` when a reference optimum is known.
    pub gap: Option<f64>,
    pub kkt: f64,
    pub nnz: usize,
    /// Step used for `β`; NaN for step-free methods.
    pub rho: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolverTrace {
    records: Vec<TraceRecord>,
}

impl SolverTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record. Iteration indices must increase and elapsed time must not decrease.
    pub fn push(&mut self, rec: TraceRecord) {
        if let Some(last) = self.records.last() {
            assert!(rec.t > last.t, "trace iterations must increase");
            assert!(rec.elapsed >= last.elapsed, "trace time must not decrease");
        }
        self.records.push(rec);
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// Recomputes the gap column against a reference optimum.
    pub fn set_reference(&mut self, phi_star: f64) {
        for r in &mut self.records {
            r.gap = Some((r.phi - phi_star).max(0.0));
        }
    }

    /// First elapsed time at which the gap is at or below `threshold`.
    pub fn time_to_gap(&self, threshold: f64) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.gap.is_some_and(|g| g <= threshold))
            .map(|r| r.elapsed)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.records {
            let gap = r.gap.map(|g| format!("{g:e}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:e},{:e},{},{:e},{},{:e}",
                r.t, r.elapsed, r.phi, gap, r.kkt, r.nnz, r.rho
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, path)
    }

    pub(crate) fn parse_csv(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut trace = SolverTrace::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if idx == 0 {
                if line != TRACE_HEADER {
                    return Err(err(1, format!("expected header `{TRACE_HEADER}`")));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(err(idx + 1, format!("expected 7 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(idx + 1, format!("`{s}`: {e}")));
            let int = |s: &str| s.parse::<usize>().map_err(|e| err(idx + 1, format!("`{s}`: {e}")));
            let rec = TraceRecord {
                t: int(f[0])?,
                elapsed: num(f[1])?,
                phi: num(f[2])?,
                gap: if f[3].is_empty() { None } else { Some(num(f[3])?) },
                kkt: num(f[4])?,
                nnz: int(f[5])?,
                rho: num(f[6])?,
            };
            if trace.last().is_some_and(|l| rec.t <= l.t || rec.elapsed < l.elapsed) {
                return Err(err(idx + 1, "records out of order".into()));
            }
            trace.records.push(rec);
        }
        Ok(trace)
    }
}
