mod common;

use msstnet_core::backbone::Backbone;
use msstnet_core::config::{BackboneConfig, StageSpec};
use msstnet_core::{Error, Parameters, Rng, Tape, Tensor};
use proptest::prelude::*;

fn single_conv_backbone(in_channels: usize, out_channels: usize, size: usize, stride: usize) -> Backbone {
    let out = (size + 2 - 3) / stride + 1;
    let config = BackboneConfig {
        in_channels,
        input_size: (size, size),
        stages: vec![StageSpec {
            out_channels,
            stride,
            kernel: 3,
            depth: 0,
        }],
        taps: vec![0],
        target_grids: vec![(out, out)],
    };
    Backbone::new(config, &mut Rng::new(0))
}

/// `relu(conv(x) + b)` with zero padding 1, computed by direct summation.
fn direct_conv_relu(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let (t, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = w.shape()[0];
    let (oh, ow) = ((h + 2 - 3) / stride + 1, (wd + 2 - 3) / stride + 1);
    let mut out = Tensor::zeros(&[t, cout, oh, ow]);
    for f in 0..t {
        for o in 0..cout {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (y * stride + ky) as isize - 1;
                                let ix = (xo * stride + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.at(&[o, c, ky, kx]) * x.at(&[f, c, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    let i = out.offset(&[f, o, y, xo]);
                    out.data_mut()[i] = acc.max(0.0);
                }
            }
        }
    }
    out
}

#[test]
fn default_pyramid_shapes() {
    let bb = Backbone::default_tiny(1);
    let clip = common::random_clip(&mut Rng::new(2), &[4, 3, 32, 32]);
    let pyramid = bb.extract_pyramid(&clip).unwrap();
    let shapes: Vec<Vec<usize>> = pyramid.scales.iter().map(|s| s.shape().to_vec()).collect();
    assert_eq!(shapes, vec![vec![4, 16, 8, 8], vec![4, 32, 4, 4], vec![4, 64, 4, 4]]);
    assert_eq!(bb.config.tap_channels(), vec![16, 32, 64]);
}

#[test]
fn hand_set_kernel_matches_direct_convolution() {
    for stride in [1, 2] {
        let mut bb = single_conv_backbone(1, 2, 5, stride);
        let w = Tensor::from_fn(&[2, 1, 3, 3], |i| [1.0, -2.0, 0.5, 0.0, 3.0, -1.0, 0.25, 1.5, -0.75][i % 9] * if i < 9 { 1.0 } else { -0.5 });
        let b = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        bb.stages[0].stem.weight.set(w.clone());
        bb.stages[0].stem.bias.set(b.clone());
        let x = Tensor::from_fn(&[1, 1, 5, 5], |i| (i as f64 * 0.37).sin());
        let got = &bb.extract_pyramid(&x).unwrap().scales[0];
        let want = direct_conv_relu(&x, &w, &b, stride);
        assert!(got.max_abs_diff(&want) < 1e-12, "stride {stride}");
    }
}

#[test]
fn random_multichannel_conv_matches_direct_oracle() {
    let mut rng = Rng::new(8);
    for _ in 0..10 {
        let (cin, cout, size) = (1 + rng.below(3), 1 + rng.below(3), 3 + rng.below(5));
        let mut bb = single_conv_backbone(cin, cout, size, 1);
        let w = rng.normal_tensor(&[cout, cin, 3, 3], 1.0);
        let b = rng.normal_tensor(&[cout], 1.0);
        bb.stages[0].stem.weight.set(w.clone());
        bb.stages[0].stem.bias.set(b.clone());
        let x = rng.normal_tensor(&[2, cin, size, size], 1.0);
        let got = &bb.extract_pyramid(&x).unwrap().scales[0];
        assert!(got.max_abs_diff(&direct_conv_relu(&x, &w, &b, 1)) < 1e-12);
    }
}

#[test]
fn same_seed_gives_bitwise_identical_weights() {
    let values = |bb: &Backbone| bb.named_params("b").into_iter().map(|(_, p)| p.value().clone()).collect::<Vec<_>>();
    assert_eq!(values(&Backbone::default_tiny(42)), values(&Backbone::default_tiny(42)));
    assert_ne!(values(&Backbone::default_tiny(42)), values(&Backbone::default_tiny(43)));
}

/// Hand-propagates per-channel constants through a conv layer whose input
/// is spatially constant, as seen by pixels whose window avoids padding.
fn propagate(c: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (cout, cin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    (0..cout)
        .map(|o| {
            b.data()[o]
                + (0..cin)
                    .map(|i| c[i] * (0..k * k).map(|j| w.data()[(o * cin + i) * k * k + j]).sum::<f64>())
                    .sum::<f64>()
        })
        .collect()
}

#[test]
fn zero_input_propagates_biases() {
    let mut bb = Backbone::default_tiny(5);
    let mut rng = Rng::new(6);
    bb.visit_mut("b", &mut |name, p| {
        if name.ends_with(".bias") {
            let shape = p.value().shape().to_vec();
            p.set(rng.normal_tensor(&shape, 0.5));
        }
    });
    let mut tape = Tape::no_grad();
    let x = tape.constant(Tensor::zeros(&[2, 3, 32, 32]));
    let outputs = bb.stage_outputs(&mut tape, x).unwrap();

    let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
    let mut constant = vec![0.0; 3];
    // Pixels in [lo, hi) × [lo, hi) of the current map never see zero padding
    // through a non-zero constant. The all-zero input matches its own padding,
    // so the first stem output is constant everywhere.
    let (mut lo, mut hi, mut size) = (0i64, 0i64, 32i64);
    for (s, stage) in bb.stages.iter().enumerate() {
        let stem_out = (size + 2 - 3) / 2 + 1;
        (lo, hi) = if s == 0 {
            (0, stem_out)
        } else {
            ((lo + 2) / 2, (hi - 2) / 2 + 1)
        };
        size = stem_out;
        constant = relu(propagate(&constant, stage.stem.weight.value(), stage.stem.bias.value()));
        for unit in &stage.units {
            let inner = relu(propagate(&constant, unit.conv1.weight.value(), unit.conv1.bias.value()));
            let outer = propagate(&inner, unit.conv2.weight.value(), unit.conv2.bias.value());
            constant = relu(constant.iter().zip(&outer).map(|(a, b)| a + b).collect());
            lo += 2;
            hi -= 2;
        }
        if lo >= hi {
            break;
        }
        let map = tape.value(outputs[s]);
        let channels = map.shape()[1];
        let mut checked = 0;
        for f in 0..2 {
            for c in 0..channels {
                for y in lo..hi {
                    for x in lo..hi {
                        let v = map.at(&[f, c, y as usize, x as usize]);
                        assert!((v - constant[c]).abs() < 1e-12, "stage {s} channel {c} at ({y},{x}): {v} vs {}", constant[c]);
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 0);
    }
}

#[test]
fn size_and_grid_errors() {
    let bb = Backbone::default_tiny(0);
    assert!(matches!(bb.extract_pyramid(&Tensor::zeros(&[2, 3, 16, 16])), Err(Error::ShapeMismatch { .. })));
    let config = BackboneConfig::tiny_residual((32, 32), vec![0, 1, 2], vec![(6, 6), (4, 4), (4, 4)]);
    assert!(config.validate(16).is_err());
    let config = BackboneConfig::tiny_residual((32, 32), vec![0, 1, 2], vec![(8, 8), (4, 4), (4, 4)]);
    config.validate(16).unwrap();
}

#[test]
fn identical_frames_give_identical_features() {
    let bb = Backbone::default_tiny(3);
    let frame = common::random_clip(&mut Rng::new(4), &[1, 3, 32, 32]);
    let clip = Tensor::from_fn(&[4, 3, 32, 32], |i| frame.data()[i % frame.numel()]);
    for scale in bb.extract_pyramid(&clip).unwrap().scales {
        let per = scale.numel() / 4;
        for t in 1..4 {
            assert_eq!(&scale.data()[..per], &scale.data()[t * per..(t + 1) * per]);
        }
    }
}

fn permute_frames(x: &Tensor, order: &[usize]) -> Tensor {
    let per = x.numel() / x.shape()[0];
    let data = order.iter().flat_map(|&t| x.data()[t * per..(t + 1) * per].iter().copied()).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn frame_permutation_permutes_every_scale(seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let bb = Backbone::default_tiny(seed);
        let clip = common::random_clip(&mut rng, &[3, 3, 32, 32]);
        let order = rng.permutation(3);
        let base = bb.extract_pyramid(&clip).unwrap();
        let permuted = bb.extract_pyramid(&permute_frames(&clip, &order)).unwrap();
        for (a, b) in base.scales.iter().zip(&permuted.scales) {
            prop_assert_eq!(&permute_frames(a, &order), b);
        }
    }

    #[test]
    fn pooling_preserves_channel_means(
        seed in 0u64..1000,
        (out, factor) in (1usize..5, 1usize..4),
        channels in 1usize..4,
    ) {
        let size = out * factor;
        let x = Rng::new(seed).normal_tensor(&[2, channels, size, size], 1.0);
        let mut tape = Tape::no_grad();
        let v = tape.constant(x.clone());
        let pooled = tape.adaptive_avg_pool2d(v, out, out).unwrap();
        let pooled = tape.value(pooled);
        for plane in 0..2 * channels {
            let mean = |t: &Tensor, n: usize| t.data()[plane * n..(plane + 1) * n].iter().sum::<f64>() / n as f64;
            prop_assert!((mean(&x, size * size) - mean(pooled, out * out)).abs() < 1e-10);
        }
    }
}

#[test]
fn backbone_pyramid_preserves_native_channel_means() {
    let bb = Backbone::default_tiny(11);
    let clip = common::random_clip(&mut Rng::new(12), &[2, 3, 32, 32]);
    let mut tape = Tape::no_grad();
    let x = tape.constant(clip.clone());
    let native = bb.stage_outputs(&mut tape, x).unwrap();
    let pyramid = bb.extract_pyramid(&clip).unwrap();
    for (s, pooled) in pyramid.scales.iter().enumerate() {
        let full = tape.value(native[s]);
        let (np, pp) = (full.shape()[2] * full.shape()[3], pooled.shape()[2] * pooled.shape()[3]);
        for plane in 0..full.numel() / np {
            let a = full.data()[plane * np..(plane + 1) * np].iter().sum::<f64>() / np as f64;
            let b = pooled.data()[plane * pp..(plane + 1) * pp].iter().sum::<f64>() / pp as f64;
            assert!((a - b).abs() < 1e-10);
        }
    }
}
