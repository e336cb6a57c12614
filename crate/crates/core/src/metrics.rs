//! Training metrics as CSV with a mandatory header row.

use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};
use crate::training::EpochRecord;

pub const HEADER: [&str; 7] = ["epoch", "split", "loss", "residual_mean", "reg_value", "lr", "wallclock_ms"];

/// Appends one row per record and flushes after each, so the file is
/// complete up to the last record even if training aborts.
pub struct MetricsWriter<W: std::io::Write> {
    inner: csv::Writer<W>,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

impl MetricsWriter<File> {
    /// Creates (truncating) `path` and writes the header.
    pub fn create(path: &Path) -> Result<Self> {
        Self::new(File::create(path)?)
    }
}

impl<W: std::io::Write> MetricsWriter<W> {
    pub fn new(sink: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
        inner.write_record(HEADER).map_err(csv_err)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn append(&mut self, r: &EpochRecord) -> Result<()> {
        self.inner
            .write_record([
                r.epoch.to_string(),
                r.split.clone(),
                format!("{:e}", r.loss),
                format!("{:e}", r.residual_mean),
                format!("{:e}", r.reg_value),
                format!("{:e}", r.lr),
                r.wallclock_ms.to_string(),
            ])
            .map_err(csv_err)?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

/// Reads a metrics file back.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(Error::invalid("metrics", format!("unexpected header {header:?}")));
    }
    rd.deserialize().map(|r| r.map_err(csv_err)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, loss: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            split: "train".into(),
            loss,
            residual_mean: 1e-7,
            reg_value: 0.0,
            lr: 0.1,
            wallclock_ms: 0,
        }
    }

    #[test]
    fn header_and_rows() {
        let mut w = MetricsWriter::new(Vec::new()).unwrap();
        w.append(&rec(0, 0.5)).unwrap();
        w.append(&rec(1, 0.25)).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,split,loss,residual_mean,reg_value,lr,wallclock_ms");
        assert_eq!(lines[1], "0,train,5e-1,1e-7,0e0,1e-1,0");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&p).unwrap();
        let r = rec(3, 0.123456789012345);
        w.append(&r).unwrap();
        drop(w);
        assert_eq!(read_metrics(&p).unwrap(), vec![r]);
    }
}
