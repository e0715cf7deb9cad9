//! Gradient-weighted class activation maps and colour overlays.
//!
//! The map for class `c` at layer `A` is `ReLU(sum_k w_k A_k)` where `w_k`
//! is the spatial mean of `d logit_c / d A_k`. It is bilinearly resized to
//! the input size and min-max normalised per image.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::bayes::Noise;
use crate::error::{invalid, shape_err, Error, Result};
use crate::models::{Model, RunOptions};
use crate::nn::Mode;
use crate::rng::SeededRng;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `[H, W]`, in `[0, 1]`.
    pub values: Tensor,
    /// Pre-normalisation map at layer resolution, `[h, w]`, non-negative.
    pub raw: Tensor,
    pub target_class: usize,
    pub target_layer: String,
}

impl Heatmap {
    pub fn is_zero(&self) -> bool {
        self.values.data().iter().all(|&v| v == 0.0)
    }
}

/// How a Bayesian model is explained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamMode {
    /// One pass with the posterior means.
    #[default]
    MeanWeights,
    /// Average of the raw maps of `samples` stochastic passes.
    Averaged { samples: usize },
}

impl std::str::FromStr for CamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_weights" | "mean" => Ok(CamMode::MeanWeights),
            _ => match s.strip_prefix("averaged") {
                Some("") => Ok(CamMode::Averaged { samples: 10 }),
                Some(rest) => rest
                    .trim_start_matches([':', '='])
                    .parse()
                    .map(|samples| CamMode::Averaged { samples })
                    .map_err(|_| invalid!("bad sample count in {s:?}")),
                None => Err(invalid!(
                    "unknown Grad-CAM mode {s:?}; use mean_weights or averaged[:S]"
                )),
            },
        }
    }
}

fn check_layer(model: &Model, layer: &str) -> Result<()> {
    let layers = model.conv_layers();
    if layers.iter().any(|l| l == layer) {
        Ok(())
    } else {
        Err(invalid!(
            "{layer:?} is not a convolutional layer; choose one of {}",
            layers.join(", ")
        ))
    }
}

fn image_batch(model: &Model, image: &Tensor) -> Result<Tensor> {
    let want = model.spec.input_shape;
    if image.shape() != want {
        return Err(shape_err!(
            "expected an image of shape {want:?}, got {:?}",
            image.shape()
        ));
    }
    image.reshape([1, want[0], want[1], want[2]])
}

/// One forward/backward pass; returns the ReLU'd class activation map at
/// layer resolution, `[h, w]`.
pub fn cam_pass(
    model: &Model,
    image: &Tensor,
    class: usize,
    layer: &str,
    noise: Noise,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    check_layer(model, layer)?;
    let k = model.n_classes();
    if class >= k {
        return Err(invalid!("class {class} out of range for {k} classes"));
    }
    let mut g = Graph::new();
    let x = g.leaf(image_batch(model, image)?.with_requires_grad(true));
    let opts = RunOptions {
        mode: Mode::Eval,
        noise,
        track_params: false,
    };
    let f = model.forward(&mut g, x, opts, rng)?;
    let mut select = vec![0.0; k];
    select[class] = 1.0;
    let picked = g.mul_const(f.logits, select)?;
    let score = g.sum(picked);
    let act = f.features[layer];
    let grads = g.backward(score)?;
    let a = g.value(act);
    let (h, w, c) = (a.shape()[1], a.shape()[2], a.shape()[3]);
    let zeros = Tensor::zeros(a.shape().to_vec());
    let da = grads.get(act).unwrap_or(&zeros);
    let mut weights = vec![0.0; c];
    for px in da.data().chunks(c) {
        for (wk, d) in weights.iter_mut().zip(px) {
            *wk += d;
        }
    }
    for wk in &mut weights {
        *wk /= (h * w) as f64;
    }
    let map = a
        .data()
        .chunks(c)
        .map(|px| px.iter().zip(&weights).map(|(v, wk)| v * wk).sum::<f64>().max(0.0))
        .collect();
    Tensor::new([h, w], map)
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn bilinear_resize(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if map.rank() != 2 || out_h == 0 || out_w == 0 {
        return Err(shape_err!("bilinear_resize needs a 2-D map, got {:?}", map.shape()));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let src = map.data();
    let coord = |dst: usize, n_in: usize, n_out: usize| {
        let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let (y0, y1, fy) = coord(i, h, out_h);
        for j in 0..out_w {
            let (x0, x1, fx) = coord(j, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Tensor::new([out_h, out_w], out)
}

/// Min-max normalise to `[0, 1]`. All-zero maps stay zero and constant
/// positive maps become all ones.
pub fn normalize(map: &Tensor) -> Tensor {
    let d = map.data();
    let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) {
        return map.map(|_| 0.0);
    }
    if max == min {
        return map.map(|_| 1.0);
    }
    map.map(|v| (v - min) / (max - min))
}

fn finish(model: &Model, raw: Tensor, class: usize, layer: &str) -> Result<Heatmap> {
    let [h, w, _] = model.spec.input_shape;
    let values = normalize(&bilinear_resize(&raw, h, w)?);
    Ok(Heatmap {
        values,
        raw,
        target_class: class,
        target_layer: layer.to_string(),
    })
}

/// Grad-CAM of a deterministic model (Bayesian models use their means).
/// `layer` defaults to the last convolutional layer.
pub fn gradcam(model: &Model, image: &Tensor, class: usize, layer: Option<&str>) -> Result<Heatmap> {
    bayes_gradcam(model, image, class, layer, CamMode::MeanWeights, 0)
}

/// Grad-CAM with an explicit treatment of weight uncertainty.
pub fn bayes_gradcam(
    model: &Model,
    image: &Tensor,
    class: usize,
    layer: Option<&str>,
    mode: CamMode,
    seed: u64,
) -> Result<Heatmap> {
    let default = model.last_conv_layer();
    let layer = layer.unwrap_or(&default);
    let mut rng = SeededRng::new(seed).fork("gradcam");
    let raw = match mode {
        CamMode::MeanWeights => cam_pass(model, image, class, layer, Noise::Mean, &mut rng)?,
        CamMode::Averaged { samples } => {
            if samples == 0 {
                return Err(invalid!("averaged Grad-CAM needs at least one sample"));
            }
            let mut acc = cam_pass(model, image, class, layer, Noise::Sample, &mut rng)?;
            for _ in 1..samples {
                let m = cam_pass(model, image, class, layer, Noise::Sample, &mut rng)?;
                for (a, v) in acc.data_mut().iter_mut().zip(m.data()) {
                    *a += v;
                }
            }
            acc.map(|v| v / samples as f64)
        }
    };
    finish(model, raw, class, layer)
}

/// Key colours of the ramp at table indices 0, 85, 170 and 255.
pub const RAMP_KEYS: [(usize, [u8; 3]); 4] = [
    (0, [0, 0, 255]),
    (85, [0, 255, 0]),
    (170, [255, 255, 0]),
    (255, [255, 0, 0]),
];

/// 256-entry blue, green, yellow, red ramp, linear per channel between
/// [`RAMP_KEYS`] and rounded to the nearest integer.
///
/// ```
/// let lut = admri::gradcam::color_lut();
/// assert_eq!(lut[0], [0, 0, 255]);
/// assert_eq!(lut[128], [129, 255, 0]);
/// assert_eq!(lut[255], [255, 0, 0]);
/// ```
pub fn color_lut() -> [[u8; 3]; 256] {
    let mut lut = [[0u8; 3]; 256];
    for (i, entry) in lut.iter_mut().enumerate() {
        let seg = RAMP_KEYS.windows(2).find(|k| i <= k[1].0).expect("keys cover 0..=255");
        let ((i0, c0), (i1, c1)) = (seg[0], seg[1]);
        let t = (i - i0) as f64 / (i1 - i0) as f64;
        for ch in 0..3 {
            entry[ch] = (c0[ch] as f64 + t * (c1[ch] as f64 - c0[ch] as f64)).round() as u8;
        }
    }
    lut
}

/// Colour of a normalised heat value: `lut[round(v * 255)]`.
pub fn heat_color(lut: &[[u8; 3]; 256], v: f64) -> [u8; 3] {
    lut[(v.clamp(0.0, 1.0) * 255.0).round() as usize]
}

/// Blend the coloured heatmap over the grayscale image:
/// `alpha * colour + (1 - alpha) * gray`. Multi-channel images are averaged
/// to gray; intensities are expected in `[0, 1]`.
pub fn colorize_overlay(heatmap: &Heatmap, image: &Tensor, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid!("alpha must be in [0, 1], got {alpha}"));
    }
    let (h, w) = (heatmap.values.shape()[0], heatmap.values.shape()[1]);
    if image.rank() != 3 || image.shape()[..2] != [h, w] {
        return Err(shape_err!("heatmap {h}x{w} does not match image {:?}", image.shape()));
    }
    let c = image.shape()[2];
    let lut = color_lut();
    let mut img = RgbImage::new(w as u32, h as u32);
    for (idx, (px, &v)) in image.data().chunks(c).zip(heatmap.values.data()).enumerate() {
        let gray = (px.iter().sum::<f64>() / c as f64).clamp(0.0, 1.0) * 255.0;
        let color = heat_color(&lut, v);
        let mix = color.map(|col| (alpha * col as f64 + (1.0 - alpha) * gray).round().clamp(0.0, 255.0) as u8);
        img.put_pixel((idx % w) as u32, (idx / w) as u32, Rgb(mix));
    }
    Ok(img)
}

/// `<sample-id>_<class>_<layer>.png`
pub fn overlay_file_name(sample_id: &str, class_name: &str, layer: &str) -> String {
    format!("{sample_id}_{class_name}_{layer}.png")
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Share of the top `fraction` of heat mass (by pixel value) that lies in
/// the region selected by `inside(row, col)`. NaN for an all-zero map.
pub fn top_mass_fraction(heatmap: &Heatmap, fraction: f64, inside: impl Fn(usize, usize) -> bool) -> f64 {
    let w = heatmap.values.shape()[1];
    let mut px: Vec<(usize, f64)> = heatmap.values.data().iter().cloned().enumerate().collect();
    px.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep = ((px.len() as f64 * fraction).ceil() as usize).clamp(1, px.len());
    let top = &px[..keep];
    let total: f64 = top.iter().map(|p| p.1).sum();
    if total <= 0.0 {
        return f64::NAN;
    }
    top.iter()
        .filter(|(i, _)| inside(i / w, i % w))
        .map(|p| p.1)
        .sum::<f64>()
        / total
}
