use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::distill::KDConfig;
use crate::metrics::MetricsReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub val: MetricsReport,
}

/// Everything one training run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kd: KDConfig,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the lowest validation loss (first one on ties).
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Test metrics of the best-epoch weights.
    pub test: Option<MetricsReport>,
    pub step_losses: Vec<f64>,
}

pub const RUN_CSV_HEADER: &str =
    "split,epoch,accuracy,f1,mcc,tp,fp,fn,tn,train_loss,val_loss,lr";

impl RunRecord {
    pub fn new(kd: KDConfig, seed: u64) -> Self {
        RunRecord {
            kd,
            seed,
            epochs: Vec::new(),
            best_epoch: 0,
            stopped_early: false,
            test: None,
            step_losses: Vec::new(),
        }
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    /// One `val` row per epoch, then a `test` row for the best epoch.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{RUN_CSV_HEADER}")?;
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{}",
                e.val.csv_row("val", e.epoch),
                e.train_loss,
                e.val_loss,
                e.lr
            )?;
        }
        if let (Some(t), Some(b)) = (&self.test, self.best()) {
            writeln!(
                out,
                "{},{},{},{}",
                t.csv_row("test", b.epoch),
                b.train_loss,
                b.val_loss,
                b.lr
            )?;
        }
        Ok(())
    }

    pub fn summary_line(&self) -> String {
        let val = self.best().map(|e| e.val.mcc).unwrap_or(f64::NAN);
        let (acc, f1, mcc) = self
            .test
            .map(|t| (t.accuracy, t.f1, t.mcc))
            .unwrap_or((f64::NAN, f64::NAN, f64::NAN));
        format!(
            "best_epoch={} epochs={} stopped_early={} val_mcc={val:.6} test_accuracy={acc:.6} \
             test_f1={f1:.6} test_mcc={mcc:.6} temperature={} alpha={} kl_direction={} seed={}",
            self.best_epoch,
            self.epochs.len(),
            self.stopped_early,
            self.kd.temperature,
            self.kd.alpha,
            self.kd.kl_direction,
            self.seed
        )
    }
}
