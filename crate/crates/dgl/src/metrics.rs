//! Append-only metric records with a fixed, versioned CSV schema. Plots are
//! out of band: any plotting tool consumes the CSV.

use crate::error::{Error, Result};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: &str = "schema_version,step,module_id,epoch_equivalent,train_loss,train_acc,test_acc,grad_norm,drift,bits_sent,buffer_bytes,starvation_count";

/// One evaluation-point row for one module.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    /// Global trainer step (batches for synchronous modes, ticks for async).
    pub step: u64,
    /// 1-based module index.
    pub module_id: usize,
    /// This module's own update count divided by batches per epoch.
    pub epoch_equivalent: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub grad_norm: f64,
    pub drift: f64,
    /// Cumulative bits sent downstream of this module (exact accounting).
    pub bits_sent: f64,
    pub buffer_bytes: u64,
    pub starvation_count: u64,
}

impl MetricRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            SCHEMA_VERSION,
            self.step,
            self.module_id,
            self.epoch_equivalent,
            self.train_loss,
            self.train_acc,
            self.test_acc,
            self.grad_norm,
            self.drift,
            self.bits_sent,
            self.buffer_bytes,
            self.starvation_count
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct MetricsTrace {
    pub records: Vec<MetricRecord>,
}

impl MetricsTrace {
    pub fn push(&mut self, r: MetricRecord) {
        self.records.push(r);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Last test accuracy recorded for each module, indexed by module - 1.
    pub fn final_test_acc(&self, modules: usize) -> Vec<f64> {
        let mut acc = vec![f64::NAN; modules];
        for r in &self.records {
            acc[r.module_id - 1] = r.test_acc;
        }
        acc
    }

    /// Chronological (epoch_equivalent, value) series of one column for one
    /// module.
    pub fn series(&self, module_id: usize, field: impl Fn(&MetricRecord) -> f64) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .filter(|r| r.module_id == module_id)
            .map(|r| (r.epoch_equivalent, field(r)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> MetricRecord {
        MetricRecord {
            step: 10,
            module_id: 2,
            epoch_equivalent: 0.5,
            train_loss: 1.25,
            train_acc: 0.5,
            test_acc: 0.4375,
            grad_norm: 0.125,
            drift: 0.0,
            bits_sent: 34_627_584.0,
            buffer_bytes: 4096,
            starvation_count: 3,
        }
    }

    #[test]
    fn csv_rows_are_stable() {
        assert_eq!(
            record().csv_row(),
            "1,10,2,0.5,1.25,0.5,0.4375,0.125,0,34627584,4096,3"
        );
    }

    #[test]
    fn header_matches_row_arity() {
        let fields = CSV_HEADER.split(',').count();
        let row = record().csv_row();
        assert_eq!(row.split(',').count(), fields);
    }

    #[test]
    fn final_test_acc_takes_last_row_per_module() {
        let mut t = MetricsTrace::default();
        let mut r = record();
        r.module_id = 1;
        r.test_acc = 0.25;
        t.push(r.clone());
        r.test_acc = 0.75;
        t.push(r);
        let acc = t.final_test_acc(2);
        assert_eq!(acc[0], 0.75);
        assert!(acc[1].is_nan());
    }
}
