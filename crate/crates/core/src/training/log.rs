//! Per-epoch training log, written as CSV:
//! `epoch,lr,train_loss,val_dsc_c1..val_dsc_c{K-1},seconds`.
//! Validation columns are empty for epochs without validation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{contract, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean DSC of classes `1..K`.
    pub val_dsc: Option<Vec<f64>>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub num_classes: usize,
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: EpochRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            contract!(
                row.epoch > last.epoch,
                "epoch {} logged after epoch {}",
                row.epoch,
                last.epoch
            );
        }
        if let Some(d) = &row.val_dsc {
            contract!(
                d.len() + 1 == self.num_classes,
                "expected {} validation scores, got {}",
                self.num_classes - 1,
                d.len()
            );
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn header(&self) -> String {
        let mut h = String::from("epoch,lr,train_loss");
        for c in 1..self.num_classes {
            let _ = write!(h, ",val_dsc_c{c}");
        }
        h.push_str(",seconds");
        h
    }

    /// CSV text. With `timing = false` the seconds column is left empty, so
    /// logs of identical runs compare equal.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{}", r.epoch, r.lr, r.train_loss);
            for c in 0..self.num_classes.saturating_sub(1) {
                out.push(',');
                if let Some(d) = &r.val_dsc {
                    let _ = write!(out, "{}", d[c]);
                }
            }
            out.push(',');
            if timing {
                let _ = write!(out, "{:.3}", r.seconds);
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv(true)).map_err(|e| Error::io(path, e))
    }

    /// Last logged validation scores, if any.
    pub fn final_val_dsc(&self) -> Option<&[f64]> {
        self.rows.iter().rev().find_map(|r| r.val_dsc.as_deref())
    }
}
