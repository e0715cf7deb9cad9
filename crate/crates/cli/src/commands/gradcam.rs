use std::path::{Path, PathBuf};

use admri::bayes::Noise;
use admri::gradcam::{bayes_gradcam, colorize_overlay, overlay_file_name, save_png, CamMode};
use anyhow::Result;
use serde::{Deserialize, Serialize};

use super::eval::load_pair;
use super::{redirected, required, usage, Env, Outputs, Runnable};
use crate::args::GradcamArgs;

/// Which class a map explains.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassChoice {
    Predicted,
    True,
    Fixed(String),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GradcamSettings {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    /// Empty means the first `count` samples.
    pub indices: Vec<usize>,
    pub count: usize,
    pub class: ClassChoice,
    pub layer: Option<String>,
    pub mode: CamMode,
    pub alpha: f64,
    pub seed: u64,
    pub out: PathBuf,
}

impl GradcamSettings {
    pub fn resolve(a: GradcamArgs, env: &Env) -> Result<Self> {
        let class = match a.class.as_deref().unwrap_or("pred") {
            "pred" | "predicted" => ClassChoice::Predicted,
            "true" | "label" => ClassChoice::True,
            other => ClassChoice::Fixed(other.to_string()),
        };
        let alpha = a.alpha.unwrap_or(0.5);
        if !(0.0..=1.0).contains(&alpha) {
            return Err(usage("--alpha must lie in [0, 1]"));
        }
        Ok(Self {
            checkpoint: required(a.checkpoint, "checkpoint")?,
            data: required(a.data, "data")?,
            indices: a.indices.unwrap_or_default(),
            count: a.count.unwrap_or(8),
            class,
            layer: a.layer,
            mode: a.mode.as_deref().map(str::parse).transpose()?.unwrap_or_default(),
            alpha,
            seed: a.seed.unwrap_or(0),
            out: a.out.unwrap_or_else(|| env.default_path("gradcam")),
        })
    }
}

/// Keep file names portable.
fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '-' })
        .collect()
}

impl Runnable for GradcamSettings {
    const NAME: &'static str = "gradcam";

    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }

    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.checkpoint.clone(), self.data.clone()]
    }

    fn primary(&self) -> (PathBuf, bool) {
        (self.out.clone(), true)
    }

    fn redirect(&mut self, dir: &Path) {
        self.out = redirected(&self.out, dir);
    }

    fn run(&self) -> Result<Outputs> {
        let (model, _, ds) = load_pair(&self.checkpoint, &self.data)?;
        let indices: Vec<usize> = if self.indices.is_empty() {
            (0..self.count.min(ds.len())).collect()
        } else {
            self.indices.clone()
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
            return Err(usage(format!(
                "sample index {bad} out of range for {} samples",
                ds.len()
            )));
        }
        let fixed = match &self.class {
            ClassChoice::Fixed(s) => Some(
                ds.class_names
                    .iter()
                    .position(|n| n == s)
                    .or_else(|| s.parse().ok())
                    .filter(|&c| c < ds.n_classes())
                    .ok_or_else(|| usage(format!("unknown class {s:?}; classes are {:?}", ds.class_names)))?,
            ),
            _ => None,
        };
        let layer = self.layer.clone().unwrap_or_else(|| model.last_conv_layer());
        let mut files = Vec::new();
        for &i in &indices {
            let image = ds.image(i)?;
            let class = match (&self.class, fixed) {
                (_, Some(c)) => c,
                (ClassChoice::True, _) => ds.labels[i],
                _ => {
                    let probs = model.predict_proba(&ds.images.select_outer(&[i])?, 1, 1, Noise::Mean, self.seed)?;
                    probs.argmax_rows()[0]
                }
            };
            let heat = bayes_gradcam(&model, &image, class, Some(&layer), self.mode, self.seed)?;
            let img = colorize_overlay(&heat, &image, self.alpha)?;
            let name = overlay_file_name(
                &format!("s{i:05}"),
                &sanitize(&ds.class_names[class]),
                &sanitize(&layer),
            );
            let path = self.out.join(name);
            save_png(&img, &path)?;
            files.push(path);
        }
        log::info!("{} overlays for layer {layer} in {}", files.len(), self.out.display());
        Ok(Outputs::files(files))
    }
}
