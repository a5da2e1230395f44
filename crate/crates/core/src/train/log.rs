use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One training iteration. Loss parts a stage does not use are left empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    pub stage: u8,
    pub loss_total: f64,
    pub loss_seg: Option<f64>,
    pub loss_pu: Option<f64>,
    pub loss_self_da: Option<f64>,
    pub loss_self_box: Option<f64>,
    pub lr: f64,
    /// Wall time since the start of the stage.
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    rows: Vec<LogRow>,
}

impl RunLog {
    pub fn rows(&self) -> &[LogRow] {
        &self.rows
    }

    pub fn push(&mut self, row: LogRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: RunLog) {
        self.rows.extend(other.rows);
    }

    /// Mean total loss over rows `[from, to)`.
    pub fn mean_loss(&self, from: usize, to: usize) -> f64 {
        let rows = &self.rows[from..to];
        rows.iter().map(|r| r.loss_total).sum::<f64>() / rows.len() as f64
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record([
                "iteration",
                "stage",
                "loss_total",
                "loss_seg",
                "loss_pu",
                "loss_self_da",
                "loss_self_box",
                "lr",
                "seconds",
            ])?;
        }
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_schema_and_round_trip() {
        let mut log = RunLog::default();
        log.push(LogRow {
            iteration: 0,
            stage: 1,
            loss_total: 1.5,
            loss_seg: Some(1.0),
            loss_pu: Some(0.5),
            loss_self_da: None,
            loss_self_box: None,
            lr: 2e-4,
            seconds: 0.25,
        });
        let text = log.to_csv().unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iteration,stage,loss_total,loss_seg,loss_pu,loss_self_da,loss_self_box,lr,seconds"
        );
        assert_eq!(lines.next().unwrap(), "0,1,1.5,1.0,0.5,,,0.0002,0.25");
        assert_eq!(RunLog::from_csv(&text).unwrap(), log);

        let empty = RunLog::default().to_csv().unwrap();
        assert!(empty.starts_with("iteration,stage,"));
    }
}
