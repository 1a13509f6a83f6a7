use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use super::{AuditEntry, RunObserver, RunResult, TrajectoryRow};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "iter,queries,best_latent,abs_error,wall_ms,refit_ms";

/// Formats like C's `%.9g`.
pub fn format_sig9(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

pub fn write_csv<W: Write>(rows: &[TrajectoryRow], mut out: W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iter,
            r.queries,
            format_sig9(r.best_latent),
            format_sig9(r.abs_error),
            format_sig9(r.wall_ms),
            format_sig9(r.refit_ms)
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn emit_csv(result: &RunResult, path: &Path) -> Result<()> {
    write_csv(&result.rows, BufWriter::new(File::create(path)?))
}

pub fn parse_csv<R: BufRead>(input: R) -> Result<Vec<TrajectoryRow>> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim_end() != CSV_HEADER {
        return Err(Error::Parse(format!("missing header `{CSV_HEADER}`")));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Parse(format!("line {}: {what}", n + 2));
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number `{s}`")));
        rows.push(TrajectoryRow {
            iter: f[0].parse().map_err(|_| bad("bad iter"))?,
            queries: f[1].parse().map_err(|_| bad("bad queries"))?,
            best_latent: num(f[2])?,
            abs_error: num(f[3])?,
            wall_ms: num(f[4])?,
            refit_ms: num(f[5])?,
        });
    }
    Ok(rows)
}

/// Appends each audited duel as one JSON line.
pub struct JsonlAuditWriter<W: Write> {
    out: W,
    error: Option<std::io::Error>,
}

impl JsonlAuditWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self::new(BufWriter::new(File::create(path)?)))
    }
}

impl<W: Write> JsonlAuditWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out, error: None }
    }

    /// Flushes and surfaces the first write error, if any.
    pub fn finish(mut self) -> Result<W> {
        if let Some(e) = self.error.take() {
            return Err(e.into());
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

impl<W: Write> RunObserver for JsonlAuditWriter<W> {
    fn on_duel(&mut self, entry: &AuditEntry) {
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(entry).expect("audit entries serialize");
        if let Err(e) = writeln!(self.out, "{line}") {
            self.error = Some(e);
        }
    }
}
