//! Per-epoch metrics CSVs and their aggregation across seeded runs into
//! median and interquartile bands.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

pub const METRIC_NAMES: [&str; 6] = ["train_loss", "train_acc", "test_loss", "test_acc", "lr", "wall_seconds"];

impl MetricsRecord {
    pub fn values(&self) -> [f64; 6] {
        [
            self.train_loss,
            self.train_acc,
            self.test_loss,
            self.test_acc,
            self.lr,
            self.wall_seconds,
        ]
    }
}

fn check_increasing(run: &[MetricsRecord]) -> Result<()> {
    for pair in run.windows(2) {
        if pair[1].epoch <= pair[0].epoch {
            return Err(Error::Format(format!(
                "epochs must increase strictly, found {} after {}",
                pair[1].epoch, pair[0].epoch
            )));
        }
    }
    Ok(())
}

/// Writes the header and one row per record.
pub fn write_metrics_csv<W: Write>(out: W, run: &[MetricsRecord]) -> Result<()> {
    check_increasing(run)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["epoch"].iter().chain(METRIC_NAMES.iter()))?;
    for r in run {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let expected: Vec<&str> = ["epoch"].into_iter().chain(METRIC_NAMES).collect();
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Format(format!("unexpected metrics header {:?}", headers)));
    }
    let run = rdr.deserialize().collect::<std::result::Result<Vec<MetricsRecord>, _>>()?;
    check_increasing(&run)?;
    Ok(run)
}

/// Quantile of sorted data by linear interpolation between the order
/// statistics around position `q * (n - 1)`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    if lo == hi || t == 0.0 {
        sorted[lo]
    } else {
        // Written so the result never leaves [sorted[lo], sorted[hi]].
        (sorted[lo] + t * (sorted[hi] - sorted[lo])).clamp(sorted[lo], sorted[hi])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
}

impl Band {
    pub fn of(values: &[f64]) -> Band {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Band {
            p25: quantile(&v, 0.25),
            p50: quantile(&v, 0.5),
            p75: quantile(&v, 0.75),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandRow {
    pub epoch: usize,
    /// Bands in [`METRIC_NAMES`] order.
    pub bands: [Band; 6],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateBand {
    pub runs: usize,
    pub rows: Vec<BandRow>,
}

/// Point-wise 25th/50th/75th percentiles of every metric at every epoch.
pub fn aggregate(runs: &[Vec<MetricsRecord>]) -> Result<AggregateBand> {
    let first = runs.first().ok_or_else(|| Error::Config("aggregation needs at least one run".into()))?;
    let grid: Vec<usize> = first.iter().map(|r| r.epoch).collect();
    let misaligned: Vec<usize> = runs
        .iter()
        .enumerate()
        .filter(|(_, run)| !run.iter().map(|r| r.epoch).eq(grid.iter().copied()))
        .map(|(i, _)| i)
        .collect();
    if !misaligned.is_empty() {
        return Err(Error::MisalignedEpochs { runs: misaligned });
    }
    let rows = grid
        .iter()
        .enumerate()
        .map(|(row, &epoch)| BandRow {
            epoch,
            bands: std::array::from_fn(|m| {
                let values: Vec<f64> = runs.iter().map(|run| run[row].values()[m]).collect();
                Band::of(&values)
            }),
        })
        .collect();
    Ok(AggregateBand { runs: runs.len(), rows })
}

/// Columns: `epoch,runs`, then `<metric>_p25,<metric>_p50,<metric>_p75`
/// for each metric.
pub fn write_aggregate_csv<W: Write>(out: W, agg: &AggregateBand) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["epoch".to_string(), "runs".to_string()];
    for m in METRIC_NAMES {
        header.extend(["p25", "p50", "p75"].map(|p| format!("{m}_{p}")));
    }
    w.write_record(&header)?;
    for row in &agg.rows {
        let mut fields = vec![row.epoch.to_string(), agg.runs.to_string()];
        for b in &row.bands {
            fields.extend([b.p25, b.p50, b.p75].map(|v| v.to_string()));
        }
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize, v: f64) -> MetricsRecord {
        MetricsRecord {
            epoch,
            train_loss: v,
            train_acc: v / 10.0,
            test_loss: v,
            test_acc: v / 10.0,
            lr: 0.1,
            wall_seconds: 0.0,
        }
    }

    #[test]
    fn five_values() {
        let b = Band::of(&[5.0, 1.0, 4.0, 2.0, 3.0]);
        assert_eq!((b.p25, b.p50, b.p75), (2.0, 3.0, 4.0));
    }

    #[test]
    fn interpolates_between_order_statistics() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert_eq!(quantile(&[0.0, 10.0], 0.25), 2.5);
        assert_eq!(quantile(&[7.0], 0.75), 7.0);
    }

    #[test]
    fn misaligned_runs_are_listed() {
        let a = vec![record(1, 1.0), record(2, 1.0)];
        let b = vec![record(1, 1.0)];
        let c = vec![record(1, 1.0), record(3, 1.0)];
        match aggregate(&[a.clone(), b, a, c]) {
            Err(Error::MisalignedEpochs { runs }) => assert_eq!(runs, vec![1, 3]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_round_trip_and_header() {
        let run = vec![record(1, 2.5), record(2, 1.25)];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &run).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("epoch,train_loss,train_acc,test_loss,test_acc,lr,wall_seconds\n"));
        assert!(text.ends_with('\n'));
        assert_eq!(read_metrics_csv(buf.as_slice()).unwrap(), run);
    }

    #[test]
    fn decreasing_epochs_rejected() {
        assert!(write_metrics_csv(Vec::new(), &[record(2, 1.0), record(2, 1.0)]).is_err());
    }

    #[test]
    fn aggregate_header() {
        let agg = aggregate(&[vec![record(1, 1.0)]]).unwrap();
        let mut buf = Vec::new();
        write_aggregate_csv(&mut buf, &agg).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.starts_with("epoch,runs,train_loss_p25,train_loss_p50,train_loss_p75,train_acc_p25"));
        assert_eq!(text.lines().nth(1).unwrap().split(',').count(), 2 + 18);
    }
}
