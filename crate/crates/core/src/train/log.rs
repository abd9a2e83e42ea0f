use std::io::Write;

use crate::distill::LossBreakdown;
use crate::error::{Error, Result};

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: LossBreakdown,
}

impl LossRecord {
    /// `step  soft_label  cosine  mlm  total`, tab-separated.
    pub fn to_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.step, l.soft_label, l.cosine, l.mlm, l.total
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed loss-log line {line:?}"));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(bad());
        }
        let num = |i: usize| fields[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: fields[0].parse().map_err(|_| bad())?,
            loss: LossBreakdown {
                soft_label: num(1)?,
                cosine: num(2)?,
                mlm: num(3)?,
                total: num(4)?,
                ..Default::default()
            },
        })
    }
}

pub fn format_log(records: &[LossRecord]) -> String {
    records.iter().map(|r| r.to_line() + "\n").collect()
}

pub fn parse_log(text: &str) -> Result<Vec<LossRecord>> {
    text.lines().map(LossRecord::parse_line).collect()
}

/// Append-only sink that writes each record as it arrives.
pub struct LossLog<W: Write> {
    sink: W,
}

impl<W: Write> LossLog<W> {
    pub fn new(sink: W) -> Self {
        Self { sink }
    }

    pub fn append(&mut self, record: &LossRecord) -> std::io::Result<()> {
        writeln!(self.sink, "{}", record.to_line())?;
        self.sink.flush()
    }

    pub fn into_inner(self) -> W {
        self.sink
    }
}
