//! Per-epoch training records and their CSV form.

use std::path::Path;

use crate::error::{Error, Result};

/// One row per epoch. `epoch` is global and 1-based across all stages;
/// values that were not produced that epoch are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ndcg: f64,
    pub val_recall: f64,
    pub critic_mse: f64,
    pub wall_seconds: f64,
}

pub const CSV_HEADER: &str = "stage,epoch,train_loss,val_ndcg,val_recall,critic_mse,wall_seconds";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<EpochRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, r: EpochRecord) {
        if let Some(last) = self.records.last() {
            assert!(r.epoch > last.epoch, "epochs must increase");
        }
        self.records.push(r);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.stage, r.epoch, r.train_loss, r.val_ndcg, r.val_recall, r.critic_mse, r.wall_seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == CSV_HEADER => {}
            other => {
                return Err(Error::Data(format!(
                    "unexpected metrics header: {other:?}"
                )))
            }
        }
        let mut log = MetricsLog::default();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Data(format!("bad metrics row `{line}`")));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Data(format!("bad number `{s}` in metrics row")))
            };
            log.records.push(EpochRecord {
                stage: f[0]
                    .parse()
                    .map_err(|_| Error::Data(format!("bad stage `{}`", f[0])))?,
                epoch: f[1]
                    .parse()
                    .map_err(|_| Error::Data(format!("bad epoch `{}`", f[1])))?,
                train_loss: num(f[2])?,
                val_ndcg: num(f[3])?,
                val_recall: num(f[4])?,
                critic_mse: num(f[5])?,
                wall_seconds: num(f[6])?,
            });
        }
        Ok(log)
    }

    /// Best validation score among records of one stage, by `val_ndcg`.
    pub fn best_val_ndcg_in_stage(&self, stage: u8) -> Option<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.stage == stage && r.val_ndcg.is_finite())
            .map(|r| (r.epoch, r.val_ndcg))
            .fold(None, |acc, (e, v)| match acc {
                Some((_, best)) if best >= v => acc,
                _ => Some((e, v)),
            })
    }
}

/// The CSV with the wall_seconds column removed. Wall time is the one
/// non-deterministic field; determinism comparisons strip it.
pub fn csv_without_wall(csv: &str) -> String {
    csv.lines()
        .map(|line| match line.rfind(',') {
            Some(pos) => &line[..pos],
            None => line,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(stage: u8, epoch: usize, ndcg: f64) -> EpochRecord {
        EpochRecord {
            stage,
            epoch,
            train_loss: 1.5,
            val_ndcg: ndcg,
            val_recall: 0.4,
            critic_mse: f64::NAN,
            wall_seconds: 0.25,
        }
    }

    #[test]
    fn csv_round_trip_preserves_values() {
        let mut log = MetricsLog::default();
        log.push(rec(1, 1, 0.123456789012345));
        log.push(rec(1, 2, f64::NAN));
        log.push(rec(2, 3, 0.2));
        let parsed = MetricsLog::parse_csv(&log.to_csv()).unwrap();
        assert_eq!(parsed.records.len(), 3);
        assert_eq!(
            parsed.records[0].val_ndcg.to_bits(),
            log.records[0].val_ndcg.to_bits()
        );
        assert!(parsed.records[1].val_ndcg.is_nan());
        // re-serialization is byte-identical
        assert_eq!(parsed.to_csv(), log.to_csv());
    }

    #[test]
    fn best_in_stage_ignores_nan_and_other_stages() {
        let mut log = MetricsLog::default();
        log.push(rec(1, 1, 0.1));
        log.push(rec(1, 2, f64::NAN));
        log.push(rec(1, 3, 0.3));
        log.push(rec(3, 4, 0.9));
        assert_eq!(log.best_val_ndcg_in_stage(1), Some((3, 0.3)));
        assert_eq!(log.best_val_ndcg_in_stage(2), None);
    }

    #[test]
    #[should_panic(expected = "epochs must increase")]
    fn non_increasing_epoch_panics() {
        let mut log = MetricsLog::default();
        log.push(rec(1, 2, 0.1));
        log.push(rec(1, 2, 0.2));
    }
}
