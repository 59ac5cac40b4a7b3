use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, SyncSender};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub epoch: usize,
    pub step: u64,
    pub split: String,
    pub loss: f64,
    pub perplexity: f64,
    pub lr: f64,
    pub occlusion_prob: f64,
    pub wall_ms: u64,
}

pub trait MetricsSink {
    fn record(&mut self, record: &MetricRecord) -> Result<()>;

    /// Flushes buffered records; called once when a run ends.
    fn finish(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
#[derive(Debug, Default)]
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &MetricRecord) -> Result<()> {
        Ok(())
    }
}

/// Keeps records in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub records: Vec<MetricRecord>,
}

impl MetricsSink for MemorySink {
    fn record(&mut self, record: &MetricRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }
}

/// Appends one JSON object per line.
pub struct JsonlSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlSink {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::options()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

impl MetricsSink for JsonlSink {
    fn record(&mut self, record: &MetricRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Forwards records to another sink on a background thread through a
/// bounded queue. A full queue blocks the sender rather than dropping.
pub struct ChannelSink {
    tx: Option<SyncSender<MetricRecord>>,
    worker: Option<JoinHandle<Result<()>>>,
}

impl ChannelSink {
    pub fn spawn<S: MetricsSink + Send + 'static>(mut inner: S, capacity: usize) -> Self {
        let (tx, rx) = sync_channel::<MetricRecord>(capacity.max(1));
        let worker = std::thread::spawn(move || {
            for rec in rx {
                inner.record(&rec)?;
            }
            inner.finish()
        });
        Self {
            tx: Some(tx),
            worker: Some(worker),
        }
    }

    fn join(&mut self) -> Result<()> {
        self.tx.take();
        match self.worker.take() {
            Some(h) => h
                .join()
                .map_err(|_| Error::Contract("metrics writer thread panicked".into()))?,
            None => Ok(()),
        }
    }
}

impl MetricsSink for ChannelSink {
    fn record(&mut self, record: &MetricRecord) -> Result<()> {
        let sent = self.tx.as_ref().map(|tx| tx.send(record.clone()));
        match sent {
            Some(Ok(())) => Ok(()),
            // the writer stopped early; surface its error
            _ => self.join().and(Err(Error::Contract("metrics writer is closed".into()))),
        }
    }

    fn finish(&mut self) -> Result<()> {
        self.join()
    }
}

impl Drop for ChannelSink {
    fn drop(&mut self) {
        let _ = self.join();
    }
}

impl<S: MetricsSink + ?Sized> MetricsSink for &mut S {
    fn record(&mut self, record: &MetricRecord) -> Result<()> {
        (**self).record(record)
    }

    fn finish(&mut self) -> Result<()> {
        (**self).finish()
    }
}
