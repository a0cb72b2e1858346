use std::io::Write;

use super::Model;
use crate::episodes::Split;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "episode,split,loss,accuracy,lambda,alpha,beta,lr,wall_ms";

/// One row of the metrics stream.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub episode: u64,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    /// Effective `λ`, averaged over dimensions for a per-dimension `λ`.
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

impl MetricsRecord {
    pub fn new(
        episode: u64,
        split: Split,
        loss: f64,
        accuracy: f64,
        model: &Model,
        lr: f64,
        wall_ms: f64,
    ) -> Self {
        Self {
            episode,
            split,
            loss,
            accuracy,
            lambda: model.hp.lambda_mean(),
            alpha: model.hp.alpha,
            beta: model.hp.beta,
            lr,
            wall_ms,
        }
    }

    /// CSV row without a trailing newline. Floats use Rust's shortest
    /// round-trip formatting, which is locale independent.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.3}",
            self.episode,
            self.split,
            self.loss,
            self.accuracy,
            self.lambda,
            self.alpha,
            self.beta,
            self.lr,
            self.wall_ms
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 9 {
            return Err(Error::validation(format!(
                "metrics row has {} fields, expected 9: {line:?}",
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::validation(format!("bad number {:?} in metrics row", fields[i])))
        };
        Ok(Self {
            episode: fields[0]
                .parse()
                .map_err(|_| Error::validation(format!("bad episode {:?}", fields[0])))?,
            split: fields[1].parse()?,
            loss: num(2)?,
            accuracy: num(3)?,
            lambda: num(4)?,
            alpha: num(5)?,
            beta: num(6)?,
            lr: num(7)?,
            wall_ms: num(8)?,
        })
    }

    /// Row with `wall_ms` blanked, for reproducibility comparisons.
    pub fn without_time(&self) -> String {
        let row = self.to_csv();
        row[..row.rfind(',').expect("nine fields")].to_string()
    }
}

/// Parses a metrics file body, header included.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == METRICS_HEADER => {}
        other => {
            return Err(Error::validation(format!(
                "metrics header mismatch: {other:?}"
            )))
        }
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRecord::from_csv).collect()
}

pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(Self { out })
    }

    /// Continues an existing stream without writing a header.
    pub fn append(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.out, "{}", record.to_csv())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
