use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::data::Metrics;
use crate::error::{Error, Result};
use crate::models::{Architecture, ModelConfig};

pub const REPORT_COLUMNS: [&str; 13] = [
    "model", "D", "fine_tune", "accuracy", "f1", "folds", "lr", "batch", "epochs", "seed", "seconds", "max_len", "macro_f1",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub metrics: Metrics,
    pub train_size: usize,
    pub test_size: usize,
    pub final_loss: f64,
    pub seconds: f64,
}

/// Cross-validated scores of one configuration, with the settings that
/// produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: Architecture,
    pub dim: usize,
    pub fine_tune: bool,
    /// Unweighted means over folds.
    pub accuracy: f64,
    pub f1: f64,
    pub macro_f1: f64,
    pub folds: Vec<FoldResult>,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub max_len: usize,
    pub coverage: f64,
    pub seconds: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0);
    for v in values {
        sum += v;
        n += 1;
    }
    sum / n as f64
}

impl ReportRow {
    pub fn new(model: &ModelConfig, folds: Vec<FoldResult>, cfg: &RunConfig, max_len: usize, coverage: f64) -> Self {
        ReportRow {
            model: model.architecture,
            dim: model.embedding_dim,
            fine_tune: model.fine_tune,
            accuracy: mean(folds.iter().map(|f| f.metrics.accuracy)),
            f1: mean(folds.iter().map(|f| f.metrics.f1)),
            macro_f1: mean(folds.iter().map(|f| f.metrics.macro_f1)),
            seconds: folds.iter().map(|f| f.seconds).sum(),
            folds,
            lr: cfg.lr,
            batch: cfg.batch_size,
            epochs: cfg.epochs,
            seed: cfg.seed,
            max_len,
            coverage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
}

/// `report.csv` → `report.<suffix>.csv`
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(format!("{suffix}.csv"))
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(Error::from)
}

impl RunReport {
    /// The main table. `seconds` stays empty unless `timing` is set, so
    /// repeated runs write identical bytes.
    pub fn to_csv(&self, timing: bool) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        self.write_rows(&mut w, timing)?;
        let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Contract(e.to_string()))
    }

    fn write_rows<W: std::io::Write>(&self, w: &mut csv::Writer<W>, timing: bool) -> Result<()> {
        w.write_record(REPORT_COLUMNS)?;
        for r in &self.rows {
            w.write_record([
                r.model.to_string(),
                r.dim.to_string(),
                r.fine_tune.to_string(),
                r.accuracy.to_string(),
                r.f1.to_string(),
                r.folds.len().to_string(),
                r.lr.to_string(),
                r.batch.to_string(),
                r.epochs.to_string(),
                r.seed.to_string(),
                if timing { format!("{:.3}", r.seconds) } else { String::new() },
                r.max_len.to_string(),
                r.macro_f1.to_string(),
            ])?;
        }
        Ok(())
    }

    /// Writes the report, its per-fold table and the per-model summary
    /// next to it, plus a timing table.
    pub fn write(&self, path: &Path, timing: bool) -> Result<()> {
        let mut w = writer(path)?;
        self.write_rows(&mut w, timing)?;
        w.flush().map_err(|e| Error::io(path, e))?;

        let folds = sidecar(path, "folds");
        let mut w = writer(&folds)?;
        w.write_record([
            "model", "D", "fine_tune", "fold", "accuracy", "f1", "precision", "recall", "tp", "fp", "fn", "tn", "train", "test", "final_loss",
        ])?;
        for r in &self.rows {
            for f in &r.folds {
                let m = &f.metrics;
                w.write_record([
                    r.model.to_string(),
                    r.dim.to_string(),
                    r.fine_tune.to_string(),
                    (f.fold + 1).to_string(),
                    m.accuracy.to_string(),
                    m.f1.to_string(),
                    m.precision.to_string(),
                    m.recall.to_string(),
                    m.tp.to_string(),
                    m.fp.to_string(),
                    m.fn_.to_string(),
                    m.tn.to_string(),
                    f.train_size.to_string(),
                    f.test_size.to_string(),
                    f.final_loss.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(&folds, e))?;

        let summary = sidecar(path, "summary");
        let mut w = writer(&summary)?;
        w.write_record(["model", "accuracy", "f1", "D", "fine_tune"])?;
        for r in self.best_per_model() {
            w.write_record([
                r.model.to_string(),
                r.accuracy.to_string(),
                r.f1.to_string(),
                r.dim.to_string(),
                r.fine_tune.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&summary, e))?;

        let times = sidecar(path, "timing");
        let mut w = writer(&times)?;
        w.write_record(["model", "D", "fine_tune", "seconds"])?;
        for r in &self.rows {
            w.write_record([r.model.to_string(), r.dim.to_string(), r.fine_tune.to_string(), format!("{:.3}", r.seconds)])?;
        }
        w.flush().map_err(|e| Error::io(&times, e))?;
        Ok(())
    }

    /// Highest mean accuracy per architecture (then F1, then grid order),
    /// in order of first appearance.
    pub fn best_per_model(&self) -> Vec<&ReportRow> {
        let mut best: Vec<&ReportRow> = Vec::new();
        for r in &self.rows {
            match best.iter_mut().find(|b| b.model == r.model) {
                Some(b) => {
                    if (r.accuracy, r.f1) > (b.accuracy, b.f1) {
                        *b = r;
                    }
                }
                None => best.push(r),
            }
        }
        best
    }

    /// Plain-text table of [`RunReport::best_per_model`].
    pub fn summary_table(&self) -> String {
        let mut out = format!("{:<8} {:>8} {:>8} {:>5} {:>9}\n", "model", "accuracy", "f1", "D", "fine_tune");
        for r in self.best_per_model() {
            out.push_str(&format!(
                "{:<8} {:>8.4} {:>8.4} {:>5} {:>9}\n",
                r.model.name(),
                r.accuracy,
                r.f1,
                r.dim,
                if r.fine_tune { "yes" } else { "no" }
            ));
        }
        out
    }
}
