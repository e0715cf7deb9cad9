use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use admri::data::{stratified_split, LabeledImageSet, SplitSpec};
use admri::models::{Architecture, CheckpointMeta, Model, ModelSpec};
use admri::resample::ResamplePlan;
use admri::rng::derive_seed;
use admri::train::{train, KlWeight, TrainConfig};
use anyhow::Result;
use serde::{Deserialize, Serialize};

use super::data::resample_set;
use super::{redirected, required, Env, Outputs, Runnable};
use crate::args::TrainArgs;

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSettings {
    pub data: PathBuf,
    pub architecture: Architecture,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// `None` keeps the architecture's default rate.
    pub dropout: Option<f64>,
    pub patience: usize,
    pub epochs: usize,
    pub seed: u64,
    pub split: SplitSpec,
    pub resample: bool,
    pub k_neighbors: usize,
    pub filters: Option<Vec<usize>>,
    pub dense_units: Option<usize>,
    pub kl_weight: KlWeight,
    pub train_samples: usize,
    pub out: PathBuf,
}

impl TrainSettings {
    pub fn resolve(a: TrainArgs, env: &Env) -> Result<Self> {
        let d = TrainConfig::default();
        Ok(Self {
            data: required(a.data, "data")?,
            architecture: a.arch.as_deref().unwrap_or("addnet").parse()?,
            learning_rate: a.lr.unwrap_or(d.learning_rate),
            batch_size: a.batch_size.unwrap_or(d.batch_size),
            dropout: a.dropout,
            patience: a.patience.unwrap_or(d.patience),
            epochs: a.epochs.unwrap_or(d.max_epochs),
            seed: a.seed.unwrap_or(0),
            split: a.split.as_deref().unwrap_or("0.8,0.2").parse()?,
            resample: a.resample.unwrap_or(false),
            k_neighbors: a.k_neighbors.unwrap_or(ResamplePlan::default().k_neighbors),
            filters: a.filters,
            dense_units: a.dense_units,
            kl_weight: a.kl_weight.map_or(d.kl_weight, KlWeight::Fixed),
            train_samples: a.train_samples.unwrap_or(d.train_samples),
            out: a.out.unwrap_or_else(|| env.default_path("run")),
        })
    }

    fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            patience: self.patience,
            kl_weight: self.kl_weight,
            train_samples: self.train_samples,
            seed: derive_seed(self.seed, "train"),
            ..TrainConfig::default()
        }
    }

    /// The model as initialized before any update.
    pub fn initial_model(&self, image_shape: [usize; 3], n_classes: usize) -> Result<Model> {
        let mut spec = ModelSpec::for_architecture(self.architecture, image_shape, n_classes);
        if let Some(p) = self.dropout {
            spec.dropout = p;
        }
        if let Some(f) = &self.filters {
            spec.filters = f.clone();
        }
        if let Some(u) = self.dense_units {
            spec.dense_units = u;
        }
        Ok(Model::new(spec, derive_seed(self.seed, "init"))?)
    }
}

impl Runnable for TrainSettings {
    const NAME: &'static str = "train";

    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }

    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.data.clone()]
    }

    fn primary(&self) -> (PathBuf, bool) {
        (self.out.clone(), true)
    }

    fn redirect(&mut self, dir: &Path) {
        self.out = redirected(&self.out, dir);
    }

    fn run(&self) -> Result<Outputs> {
        let config = self.config();
        config.validate()?;
        let ds = LabeledImageSet::load(&self.data)?;
        let parts = stratified_split(&ds.labels, ds.n_classes(), &self.split, derive_seed(self.seed, "split"))?;
        let mut train_set = ds.subset(&parts.train)?;
        let test_set = ds.subset(&parts.test)?;
        // A two-way split monitors early stopping on the held-out part.
        let val_set = if parts.val.is_empty() {
            test_set.clone()
        } else {
            ds.subset(&parts.val)?
        };

        let mut files = Vec::new();
        if self.resample {
            let plan = ResamplePlan {
                k_neighbors: self.k_neighbors,
                seed: derive_seed(self.seed, "resample"),
                ..ResamplePlan::default()
            };
            let (balanced, csv) = resample_set(&train_set, &plan)?;
            train_set = balanced;
            let path = self.out.join("resample_report.csv");
            fs::write(&path, csv)?;
            files.push(path);
        }

        let mut model = self.initial_model(ds.image_shape(), ds.n_classes())?;
        log::info!(
            "{} with {} trainable parameters; {} train / {} val / {} test",
            self.architecture,
            model.trainable_param_count(),
            train_set.len(),
            val_set.len(),
            test_set.len()
        );
        let outcome = train(&mut model, &train_set, &val_set, &config)?;

        let mut meta = CheckpointMeta::new(&model, ds.class_names.clone(), self.seed);
        meta.resampled = self.resample;
        let ckpt = self.out.join("model.bnnm");
        model.save(&ckpt, &meta)?;
        let hist = self.out.join("history.csv");
        outcome.history.write_csv(BufWriter::new(File::create(&hist)?))?;
        let test = self.out.join("test.imds");
        test_set.save(&test)?;
        files.extend([ckpt, hist, test]);
        log::info!(
            "best epoch {} (val loss {:.4}){}",
            outcome.best_epoch,
            outcome.best_val_loss,
            if outcome.stopped_early { ", stopped early" } else { "" }
        );
        Ok(Outputs {
            files,
            diverged: outcome.diverged,
        })
    }
}
