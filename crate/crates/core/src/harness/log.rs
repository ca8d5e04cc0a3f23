//! CSV run log. The header and column order are fixed.

use std::io::{Read, Write};

use thiserror::Error;

pub const COLUMNS: [&str; 15] = [
    "run_id",
    "wall_step",
    "epoch",
    "event",
    "layer",
    "neurons_added",
    "gamma",
    "params",
    "macs",
    "train_loss",
    "train_acc",
    "test_loss",
    "test_acc",
    "psi_per_growable",
    "lambda_sum_sq",
];

#[derive(Debug, Error)]
pub enum LogError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("bad log: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Train,
    Grow,
}

impl Event {
    pub fn name(&self) -> &'static str {
        match self {
            Event::Train => "train",
            Event::Grow => "grow",
        }
    }
}

/// One row of the log. Metrics that do not apply are NaN; `layer` is `None`
/// for training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLogRecord {
    pub run_id: String,
    pub wall_step: u64,
    pub epoch: u64,
    pub event: Event,
    pub layer: Option<usize>,
    pub neurons_added: usize,
    pub gamma: f64,
    pub params: usize,
    pub macs: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub psi_per_growable: Vec<f64>,
    pub lambda_sum_sq: f64,
}

impl RunLogRecord {
    fn fields(&self) -> Vec<String> {
        vec![
            self.run_id.clone(),
            self.wall_step.to_string(),
            self.epoch.to_string(),
            self.event.name().to_string(),
            self.layer.map_or(String::new(), |l| l.to_string()),
            self.neurons_added.to_string(),
            self.gamma.to_string(),
            self.params.to_string(),
            self.macs.to_string(),
            self.train_loss.to_string(),
            self.train_acc.to_string(),
            self.test_loss.to_string(),
            self.test_acc.to_string(),
            self.psi_per_growable.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
            self.lambda_sum_sq.to_string(),
        ]
    }

    fn from_fields(r: &csv::StringRecord) -> Result<Self, LogError> {
        let bad = |c: &str, v: &str| LogError::Format(format!("column {c}: cannot parse {v:?}"));
        let f = |i: usize| -> Result<f64, LogError> { r[i].parse().map_err(|_| bad(COLUMNS[i], &r[i])) };
        let u = |i: usize| -> Result<u64, LogError> { r[i].parse().map_err(|_| bad(COLUMNS[i], &r[i])) };
        if r.len() != COLUMNS.len() {
            return Err(LogError::Format(format!("expected {} columns, got {}", COLUMNS.len(), r.len())));
        }
        Ok(RunLogRecord {
            run_id: r[0].to_string(),
            wall_step: u(1)?,
            epoch: u(2)?,
            event: match &r[3] {
                "train" => Event::Train,
                "grow" => Event::Grow,
                v => return Err(bad("event", v)),
            },
            layer: if r[4].is_empty() { None } else { Some(u(4)? as usize) },
            neurons_added: u(5)? as usize,
            gamma: f(6)?,
            params: u(7)? as usize,
            macs: u(8)? as usize,
            train_loss: f(9)?,
            train_acc: f(10)?,
            test_loss: f(11)?,
            test_acc: f(12)?,
            psi_per_growable: if r[13].is_empty() {
                Vec::new()
            } else {
                r[13].split(';').map(|s| s.parse().map_err(|_| bad("psi_per_growable", s))).collect::<Result<_, _>>()?
            },
            lambda_sum_sq: f(14)?,
        })
    }
}

pub fn write_log<W: Write>(out: W, records: &[RunLogRecord]) -> Result<(), LogError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLUMNS)?;
    for r in records {
        w.write_record(r.fields())?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_log<R: Read>(input: R) -> Result<Vec<RunLogRecord>, LogError> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers()?.clone();
    if header.iter().ne(COLUMNS.iter().copied()) {
        return Err(LogError::Format(format!("unexpected header {header:?}")));
    }
    rd.records().map(|r| RunLogRecord::from_fields(&r?)).collect()
}
