use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use admri::data::{flatten, load_image_folder, synth_dataset, unflatten, LabeledImageSet, LoadOptions, SynthSpec};
use admri::resample::{smote_tomek, LinkRemoval, ResamplePlan};
use anyhow::Result;
use serde::{Deserialize, Serialize};

use super::{redirected, required, usage, Env, Outputs, Runnable};
use crate::args::{IngestArgs, ResampleArgs, SynthArgs};

#[derive(Debug, Serialize, Deserialize)]
pub struct SynthSettings {
    pub spec: SynthSpec,
    pub out: PathBuf,
}

impl SynthSettings {
    pub fn resolve(a: SynthArgs, env: &Env) -> Result<Self> {
        let d = SynthSpec::default();
        let size = a.size;
        let spec = SynthSpec {
            n_classes: a.classes.unwrap_or(d.n_classes),
            n_per_class: a.per_class.unwrap_or(d.n_per_class),
            height: a.height.or(size).unwrap_or(d.height),
            width: a.width.or(size).unwrap_or(d.width),
            channels: a.channels.unwrap_or(d.channels),
            pattern: a.pattern.as_deref().map(str::parse).transpose()?.unwrap_or(d.pattern),
            noise: a.noise.unwrap_or(d.noise),
            seed: a.seed.unwrap_or(d.seed),
        };
        Ok(Self {
            spec,
            out: a.out.unwrap_or_else(|| env.default_path("synth.imds")),
        })
    }
}

impl Runnable for SynthSettings {
    const NAME: &'static str = "synth";

    fn seed(&self) -> Option<u64> {
        Some(self.spec.seed)
    }

    fn inputs(&self) -> Vec<PathBuf> {
        Vec::new()
    }

    fn primary(&self) -> (PathBuf, bool) {
        (self.out.clone(), false)
    }

    fn redirect(&mut self, dir: &Path) {
        self.out = redirected(&self.out, dir);
    }

    fn run(&self) -> Result<Outputs> {
        let ds = synth_dataset(&self.spec)?;
        ds.save(&self.out)?;
        log::info!(
            "{} images of {:?} in {}",
            ds.len(),
            ds.image_shape(),
            self.out.display()
        );
        Ok(Outputs::files(vec![self.out.clone()]))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IngestSettings {
    pub input: PathBuf,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub out: PathBuf,
}

impl IngestSettings {
    pub fn resolve(a: IngestArgs, env: &Env) -> Result<Self> {
        let d = LoadOptions::default();
        let channels = a.channels.unwrap_or(d.channels);
        if channels != 1 && channels != 3 {
            return Err(usage("--channels must be 1 or 3"));
        }
        Ok(Self {
            input: required(a.input, "input")?,
            height: a.size.unwrap_or(d.height),
            width: a.size.unwrap_or(d.width),
            channels,
            out: a.out.unwrap_or_else(|| env.default_path("ingest.imds")),
        })
    }
}

impl Runnable for IngestSettings {
    const NAME: &'static str = "ingest";

    fn seed(&self) -> Option<u64> {
        None
    }

    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.input.clone()]
    }

    fn primary(&self) -> (PathBuf, bool) {
        (self.out.clone(), false)
    }

    fn redirect(&mut self, dir: &Path) {
        self.out = redirected(&self.out, dir);
    }

    fn run(&self) -> Result<Outputs> {
        let opts = LoadOptions {
            height: self.height,
            width: self.width,
            channels: self.channels,
        };
        let load = load_image_folder(&self.input, &opts)?;
        for p in &load.skipped {
            log::warn!("skipped unreadable image {}", p.display());
        }
        let ds = load.dataset;
        log::info!("classes {:?} with counts {:?}", ds.class_names, ds.class_counts());
        ds.save(&self.out)?;
        Ok(Outputs::files(vec![self.out.clone()]))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResampleSettings {
    pub input: PathBuf,
    pub plan: ResamplePlan,
    pub out: PathBuf,
    pub report: PathBuf,
}

impl ResampleSettings {
    pub fn resolve(a: ResampleArgs, env: &Env) -> Result<Self> {
        let d = ResamplePlan::default();
        let out = a.out.unwrap_or_else(|| env.default_path("resampled.imds"));
        let report = a.report.unwrap_or_else(|| out.with_extension("report.csv"));
        Ok(Self {
            input: required(a.input, "input")?,
            plan: ResamplePlan {
                k_neighbors: a.k_neighbors.unwrap_or(d.k_neighbors),
                target_count: a.target_count.or(d.target_count),
                link_removal: a
                    .link_removal
                    .as_deref()
                    .map(str::parse::<LinkRemoval>)
                    .transpose()?
                    .unwrap_or(d.link_removal),
                seed: a.seed.unwrap_or(d.seed),
            },
            out,
            report,
        })
    }
}

/// Rebalance `ds`, returning the new set and the report CSV bytes.
pub fn resample_set(ds: &LabeledImageSet, plan: &ResamplePlan) -> Result<(LabeledImageSet, Vec<u8>)> {
    let (x, y, report) = smote_tomek(&flatten(ds), &ds.labels, plan)?;
    let out = unflatten(&x, y, ds.class_names.clone(), ds.image_shape())?;
    let mut csv = Vec::new();
    report.write_csv(&ds.class_names, &mut csv)?;
    log::info!(
        "resampled {:?} -> {:?} -> {:?} ({} synthesized, {} link members removed)",
        report.before,
        report.after_smote,
        report.after_tomek,
        report.synthesized(),
        report.removed.len()
    );
    Ok((out, csv))
}

impl Runnable for ResampleSettings {
    const NAME: &'static str = "resample";

    fn seed(&self) -> Option<u64> {
        Some(self.plan.seed)
    }

    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.input.clone()]
    }

    fn primary(&self) -> (PathBuf, bool) {
        (self.out.clone(), false)
    }

    fn redirect(&mut self, dir: &Path) {
        self.out = redirected(&self.out, dir);
        self.report = redirected(&self.report, dir);
    }

    fn run(&self) -> Result<Outputs> {
        let ds = LabeledImageSet::load(&self.input)?;
        let (out, csv) = resample_set(&ds, &self.plan)?;
        out.save(&self.out)?;
        std::io::Write::write_all(&mut BufWriter::new(File::create(&self.report)?), &csv)?;
        Ok(Outputs::files(vec![self.out.clone(), self.report.clone()]))
    }
}
