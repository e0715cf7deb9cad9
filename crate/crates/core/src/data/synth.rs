//! Synthetic stand-in datasets with planted, class-specific patterns.

use serde::{Deserialize, Serialize};

use super::{LabeledImageSet, CLASS_NAMES};
use crate::error::{invalid, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const BACKGROUND: f64 = 0.1;
pub const FOREGROUND: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    /// Class `c` is a filled disk (radius `min(H,W)/8`) centred in quadrant
    /// `c`: top-left, top-right, bottom-left, bottom-right.
    #[default]
    Quadrants,
    /// Class `c` has horizontal (even `c`) or vertical (odd `c`) stripes of
    /// period `4 * 2^(c/2)`.
    Stripes,
}

impl std::str::FromStr for Pattern {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadrants" => Ok(Pattern::Quadrants),
            "stripes" => Ok(Pattern::Stripes),
            _ => Err(invalid!("unknown pattern {s:?} (expected quadrants or stripes)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pattern: Pattern,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            n_per_class: 200,
            height: 64,
            width: 64,
            channels: 1,
            pattern: Pattern::Quadrants,
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Noise-free image of class `c` as `[H*W]` intensities.
pub fn template(pattern: Pattern, class: usize, h: usize, w: usize) -> Vec<f64> {
    let mut img = vec![BACKGROUND; h * w];
    match pattern {
        Pattern::Quadrants => {
            let (qy, qx) = (class / 2, class % 2);
            let cy = (qy * h) as f64 / 2.0 + h as f64 / 4.0;
            let cx = (qx * w) as f64 / 2.0 + w as f64 / 4.0;
            let r = h.min(w) as f64 / 8.0;
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    if dy * dy + dx * dx <= r * r {
                        img[y * w + x] = FOREGROUND;
                    }
                }
            }
        }
        Pattern::Stripes => {
            let period = 4 << (class / 2);
            for y in 0..h {
                for x in 0..w {
                    let t = if class % 2 == 0 { y } else { x };
                    if t % period < period / 2 {
                        img[y * w + x] = FOREGROUND;
                    }
                }
            }
        }
    }
    img
}

/// Generate `n_per_class` images per class, grouped by class. Pixels are
/// clamped to `[0,1]` and rounded to f32 precision so that datasets survive
/// a save/load cycle bit for bit.
pub fn synth_dataset(spec: &SynthSpec) -> Result<LabeledImageSet> {
    let &SynthSpec {
        n_classes,
        n_per_class,
        height: h,
        width: w,
        channels,
        pattern,
        noise,
        seed,
    } = spec;
    if h < 8 || w < 8 {
        return Err(invalid!("synthetic images must be at least 8x8"));
    }
    if n_per_class == 0 || channels == 0 {
        return Err(invalid!("need at least one image per class and one channel"));
    }
    if !(noise >= 0.0) {
        return Err(invalid!("noise must be non-negative"));
    }
    let max_classes = match pattern {
        Pattern::Quadrants => 4,
        Pattern::Stripes => 8,
    };
    if n_classes < 2 || n_classes > max_classes {
        return Err(invalid!(
            "{pattern:?} supports 2..={max_classes} classes, got {n_classes}"
        ));
    }
    let mut rng = SeededRng::new(seed);
    let n = n_classes * n_per_class;
    let mut data = Vec::with_capacity(n * h * w * channels);
    let mut labels = Vec::with_capacity(n);
    for class in 0..n_classes {
        let base = template(pattern, class, h, w);
        for _ in 0..n_per_class {
            for &v in &base {
                for _ in 0..channels {
                    let px = if noise > 0.0 { v + noise * rng.normal() } else { v };
                    data.push(px.clamp(0.0, 1.0) as f32 as f64);
                }
            }
            labels.push(class);
        }
    }
    let class_names = (0..n_classes)
        .map(|c| CLASS_NAMES.get(c).map_or_else(|| format!("C{c}"), |s| s.to_string()))
        .collect();
    LabeledImageSet::new(Tensor::new([n, h, w, channels], data)?, labels, class_names)
}
