use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use super::{precondition, redirected, required, usage, Env, Outputs, Runnable};
use crate::args::CompareArgs;

/// Columns every report must carry.
pub const REQUIRED_COLUMNS: [&str; 7] = [
    "model",
    "resampled",
    "accuracy",
    "recall",
    "precision",
    "f1",
    "auc_macro",
];

#[derive(Debug, Serialize, Deserialize)]
pub struct CompareSettings {
    pub reports: Vec<PathBuf>,
    pub out: PathBuf,
}

impl CompareSettings {
    pub fn resolve(a: CompareArgs, env: &Env) -> Result<Self> {
        let reports = required(a.reports, "reports")?;
        if reports.len() < 2 {
            return Err(usage("compare needs at least two reports"));
        }
        Ok(Self {
            reports,
            out: a.out.unwrap_or_else(|| env.default_path("comparison.csv")),
        })
    }
}

impl Runnable for CompareSettings {
    const NAME: &'static str = "compare";

    fn seed(&self) -> Option<u64> {
        None
    }

    fn inputs(&self) -> Vec<PathBuf> {
        self.reports.clone()
    }

    fn primary(&self) -> (PathBuf, bool) {
        (self.out.clone(), false)
    }

    fn redirect(&mut self, dir: &Path) {
        self.out = redirected(&self.out, dir);
    }

    fn run(&self) -> Result<Outputs> {
        let mut header: Option<csv::StringRecord> = None;
        let mut rows = Vec::new();
        let mut seen = BTreeSet::new();
        for path in &self.reports {
            let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
            let h = r.headers()?.clone();
            let missing: Vec<&str> = REQUIRED_COLUMNS
                .iter()
                .copied()
                .filter(|c| !h.iter().any(|x| x == *c))
                .collect();
            if !missing.is_empty() {
                return Err(precondition(format!(
                    "{} lacks column(s) {}",
                    path.display(),
                    missing.join(", ")
                )));
            }
            match &header {
                None => header = Some(h.clone()),
                Some(first) if first != &h => {
                    return Err(precondition(format!(
                        "{} has columns {:?}, expected {:?}",
                        path.display(),
                        h.iter().collect::<Vec<_>>(),
                        first.iter().collect::<Vec<_>>()
                    )))
                }
                Some(_) => {}
            }
            for rec in r.records() {
                let rec = rec?;
                if rec.iter().any(str::is_empty) {
                    return Err(precondition(format!("{} has an empty cell", path.display())));
                }
                let col = |name: &str| h.iter().position(|x| x == name).expect("checked above");
                let key = (rec[col("model")].to_string(), rec[col("resampled")].to_string());
                if !seen.insert(key.clone()) {
                    return Err(precondition(format!(
                        "duplicate row for model {} resampled={}",
                        key.0, key.1
                    )));
                }
                rows.push(rec);
            }
        }
        let mut w = csv::Writer::from_path(&self.out)?;
        w.write_record(header.as_ref().expect("at least two reports"))?;
        for rec in &rows {
            w.write_record(rec)?;
        }
        w.flush()?;
        log::info!("{} rows in {}", rows.len(), self.out.display());
        Ok(Outputs::files(vec![self.out.clone()]))
    }
}
