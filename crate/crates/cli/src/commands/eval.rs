use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use admri::data::LabeledImageSet;
use admri::models::{CheckpointMeta, Model};
use admri::train::evaluate;
use anyhow::Result;
use serde::{Deserialize, Serialize};

use super::{precondition, redirected, required, Env, Outputs, Runnable};
use crate::args::EvalArgs;

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalSettings {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub samples: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub model_name: Option<String>,
    pub out: PathBuf,
    pub confusion: Option<PathBuf>,
}

impl EvalSettings {
    pub fn resolve(a: EvalArgs, env: &Env) -> Result<Self> {
        Ok(Self {
            checkpoint: required(a.checkpoint, "checkpoint")?,
            data: required(a.data, "data")?,
            samples: a.samples.unwrap_or(10),
            batch_size: a.batch_size.unwrap_or(64),
            seed: a.seed.unwrap_or(0),
            model_name: a.model_name,
            out: a.out.unwrap_or_else(|| env.default_path("report.csv")),
            confusion: a.confusion,
        })
    }
}

/// Load a checkpoint and a dataset that agree on classes and image shape.
pub fn load_pair(checkpoint: &Path, data: &Path) -> Result<(Model, CheckpointMeta, LabeledImageSet)> {
    let (model, meta) = Model::load(checkpoint)?;
    let ds = LabeledImageSet::load(data)?;
    if ds.class_names != meta.class_names {
        return Err(precondition(format!(
            "checkpoint classes {:?} do not match dataset classes {:?}",
            meta.class_names, ds.class_names
        )));
    }
    if ds.image_shape() != model.spec.input_shape {
        return Err(precondition(format!(
            "checkpoint expects {:?} images, dataset has {:?}",
            model.spec.input_shape,
            ds.image_shape()
        )));
    }
    Ok((model, meta, ds))
}

impl Runnable for EvalSettings {
    const NAME: &'static str = "eval";

    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }

    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.checkpoint.clone(), self.data.clone()]
    }

    fn primary(&self) -> (PathBuf, bool) {
        (self.out.clone(), false)
    }

    fn redirect(&mut self, dir: &Path) {
        self.out = redirected(&self.out, dir);
        self.confusion = self.confusion.as_deref().map(|p| redirected(p, dir));
    }

    fn run(&self) -> Result<Outputs> {
        let (model, meta, ds) = load_pair(&self.checkpoint, &self.data)?;
        let report = evaluate(&model, &ds, self.batch_size, self.samples, self.seed)?;
        let name = self.model_name.clone().unwrap_or_else(|| meta.architecture.to_string());
        report.write_csv(&name, meta.resampled, BufWriter::new(File::create(&self.out)?))?;
        log::info!(
            "{name}: accuracy {:.4} macro F1 {:.4} macro AUC {:.4}",
            report.accuracy,
            report.macro_f1,
            report.macro_auc
        );
        let mut files = vec![self.out.clone()];
        if let Some(path) = &self.confusion {
            report.write_confusion_csv(BufWriter::new(File::create(path)?))?;
            files.push(path.clone());
        }
        Ok(Outputs::files(files))
    }
}
