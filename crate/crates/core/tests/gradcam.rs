//! Grad-CAM maps, Bayesian modes and overlays.

use admri::gradcam::*;
use admri::models::{Model, ModelSpec};
use admri::{SeededRng, Tensor};

fn image(shape: [usize; 3], seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform()).collect()).unwrap()
}

#[test]
fn maps_cover_the_input_for_every_layer() {
    let models = [
        Model::new(ModelSpec::addnet([64, 64, 1], 4), 1).unwrap(),
        Model::new(ModelSpec::bayescnn([32, 32, 1], 4), 1).unwrap(),
        Model::new(ModelSpec::unet([32, 32, 1], 4), 1).unwrap(),
    ];
    for m in &models {
        let [h, w, c] = m.spec.input_shape;
        let img = image([h, w, c], 2);
        for layer in m.conv_layers() {
            let hm = gradcam(m, &img, 1, Some(&layer)).unwrap();
            assert_eq!(hm.values.shape(), &[h, w], "{layer}");
            assert!(hm.raw.data().iter().all(|&v| v >= 0.0));
            let max = hm.values.data().iter().cloned().fold(0.0, f64::max);
            assert!(hm.is_zero() || max == 1.0);
            assert!(hm.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(hm, gradcam(m, &img, 1, Some(&layer)).unwrap());
        }
        assert_eq!(gradcam(m, &img, 0, None).unwrap().target_layer, m.last_conv_layer());
    }
}

#[test]
fn zero_head_gives_zero_maps() {
    let mut m = Model::new(ModelSpec::addnet([64, 64, 1], 4), 3).unwrap();
    for name in ["dense2.w", "dense2.b"] {
        let shape = m.params[name].value.shape().to_vec();
        m.params[name].value = Tensor::zeros(shape);
    }
    let img = image([64, 64, 1], 4);
    for layer in m.conv_layers() {
        for class in 0..4 {
            let hm = gradcam(&m, &img, class, Some(&layer)).unwrap();
            assert!(hm.is_zero());
            assert!(hm.raw.data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn bad_targets_are_rejected() {
    let m = Model::new(ModelSpec::addnet([64, 64, 1], 4), 5).unwrap();
    let img = image([64, 64, 1], 6);
    let err = gradcam(&m, &img, 0, Some("dense1")).unwrap_err().to_string();
    assert!(err.contains("conv4"), "{err}");
    assert!(gradcam(&m, &img, 4, None).is_err());
    assert!(gradcam(&m, &image([32, 32, 1], 6), 0, None).is_err());
}

#[test]
fn collapsed_bayesian_modes_match_the_twin() {
    let mut m = Model::new(ModelSpec::bayescnn([32, 32, 1], 4), 7).unwrap();
    m.collapse_variance();
    let twin = m.mean_network().unwrap();
    let img = image([32, 32, 1], 8);
    for layer in m.conv_layers() {
        let reference = gradcam(&twin, &img, 2, Some(&layer)).unwrap();
        for mode in [CamMode::MeanWeights, CamMode::Averaged { samples: 3 }] {
            let hm = bayes_gradcam(&m, &img, 2, Some(&layer), mode, 9).unwrap();
            let diff = hm
                .values
                .data()
                .iter()
                .zip(reference.values.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff <= 1e-10, "{layer} {mode:?}: {diff:e}");
        }
    }
}

#[test]
fn single_sample_average_is_one_stochastic_map() {
    let m = Model::new(ModelSpec::bayescnn([32, 32, 1], 4), 10).unwrap();
    let img = image([32, 32, 1], 11);
    let hm = bayes_gradcam(&m, &img, 1, None, CamMode::Averaged { samples: 1 }, 12).unwrap();
    let mut rng = SeededRng::new(12).fork("gradcam");
    let raw = cam_pass(&m, &img, 1, &m.last_conv_layer(), admri::bayes::Noise::Sample, &mut rng).unwrap();
    assert_eq!(hm.raw, raw);
}

#[test]
fn averaging_more_samples_reduces_spread() {
    let mut m = Model::new(ModelSpec::bayescnn([32, 32, 1], 4), 13).unwrap();
    for (name, p) in m.params.iter_mut() {
        if name.ends_with("_rho") {
            p.value = p.value.map(|_| -1.0);
        }
    }
    let img = image([32, 32, 1], 14);
    let layer = "conv2";
    let spread = |samples: usize| {
        let maps: Vec<Tensor> = (0..8)
            .map(|r| {
                bayes_gradcam(&m, &img, 0, Some(layer), CamMode::Averaged { samples }, 100 + r)
                    .unwrap()
                    .raw
            })
            .collect();
        let n = maps[0].numel();
        (0..n)
            .map(|i| {
                let mean = maps.iter().map(|t| t.data()[i]).sum::<f64>() / 8.0;
                maps.iter().map(|t| (t.data()[i] - mean).powi(2)).sum::<f64>() / 7.0
            })
            .sum::<f64>()
            / n as f64
    };
    let (s1, s10, s100) = (spread(1), spread(10), spread(100));
    assert!(s1 > s10 && s10 > s100, "{s1:e} {s10:e} {s100:e}");
}

/// The ramp evaluated directly from its key colours.
fn ramp(i: usize) -> [u8; 3] {
    let t = i as f64 / 255.0;
    let (a, b, f) = if t <= 1.0 / 3.0 {
        ([0.0, 0.0, 255.0], [0.0, 255.0, 0.0], t * 3.0)
    } else if t <= 2.0 / 3.0 {
        ([0.0, 255.0, 0.0], [255.0, 255.0, 0.0], t * 3.0 - 1.0)
    } else {
        ([255.0, 255.0, 0.0], [255.0, 0.0, 0.0], t * 3.0 - 2.0)
    };
    [0, 1, 2].map(|c| (a[c] + f * (b[c] - a[c])).round() as u8)
}

#[test]
fn lookup_table_matches_ramp() {
    let lut = color_lut();
    for (i, entry) in lut.iter().enumerate() {
        assert_eq!(*entry, ramp(i), "entry {i}");
    }
    assert_eq!(heat_color(&lut, 0.5), [129, 255, 0]);
}

fn flat(values: f64, size: usize) -> Heatmap {
    Heatmap {
        values: Tensor::full([size, size], values),
        raw: Tensor::full([2, 2], values),
        target_class: 0,
        target_layer: "conv4".into(),
    }
}

#[test]
fn overlay_colours_and_png() {
    let img = image([8, 8, 1], 15);
    let blue = colorize_overlay(&flat(0.0, 8), &img, 1.0).unwrap();
    assert!(blue.pixels().all(|p| p.0 == [0, 0, 255]));
    let red = colorize_overlay(&flat(1.0, 8), &img, 1.0).unwrap();
    assert!(red.pixels().all(|p| p.0 == [255, 0, 0]));
    let gray = colorize_overlay(&flat(1.0, 8), &img, 0.0).unwrap();
    for (p, v) in gray.pixels().zip(img.data()) {
        let g = (v * 255.0).round() as u8;
        assert_eq!(p.0, [g, g, g]);
    }
    assert!(colorize_overlay(&flat(0.5, 4), &img, 0.5).is_err());
    assert!(colorize_overlay(&flat(0.5, 8), &img, 1.5).is_err());

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join(overlay_file_name("s0007", "NOD", "conv4"));
    assert!(path.ends_with("s0007_NOD_conv4.png"));
    let mixed = colorize_overlay(&flat(0.3, 8), &img, 0.4).unwrap();
    save_png(&mixed, &path).unwrap();
    assert_eq!(image::open(&path).unwrap().to_rgb8(), mixed);
}
