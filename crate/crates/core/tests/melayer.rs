mod common;

use msstnet_core::melayer::{patchify, unpatchify, PatchLayout};
use msstnet_core::{Error, MELayer, ModelConfig, Rng, Tape, Tensor};
use proptest::prelude::*;

fn embed(layer: &MELayer, patches: &Tensor, scale: usize) -> msstnet_core::Result<Tensor> {
    let mut tape = Tape::no_grad();
    let x = tape.constant(patches.clone());
    let z = layer.embed_patches(&mut tape, x, scale)?;
    Ok(tape.value(z).clone())
}

fn tiny_layer(seed: u64) -> (ModelConfig, MELayer) {
    let cfg = ModelConfig::tiny();
    let layer = MELayer::new(&cfg, &mut Rng::new(seed));
    (cfg, layer)
}

#[test]
fn patch_extent_follows_grid() {
    let fmap = Tensor::zeros(&[3, 5, 8, 8]);
    assert_eq!(patchify(&fmap, 16).unwrap().shape(), &[16, 3, 4 * 5]);
    let layout = PatchLayout::from_shape(&[3, 5, 8, 8], 16).unwrap();
    assert_eq!(layout.patch_size(), (2, 2));
}

#[test]
fn small_map_raster_partition() {
    let fmap = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
    let p = patchify(&fmap, 4).unwrap();
    let rows: Vec<&[f64]> = p.data().chunks(4).collect();
    assert_eq!(rows, vec![&[0.0, 1.0, 4.0, 5.0][..], &[2.0, 3.0, 6.0, 7.0], &[8.0, 9.0, 12.0, 13.0], &[10.0, 11.0, 14.0, 15.0]]);
}

#[test]
fn channel_major_flattening_within_patch() {
    let fmap = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64);
    let p = patchify(&fmap, 1).unwrap();
    assert_eq!(p.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
}

#[test]
fn constant_map_gives_identical_patches() {
    let p = patchify(&Tensor::full(&[2, 4, 8, 8], -1.25), 16).unwrap();
    let len = 2 * 16;
    assert!(p.data().chunks(len).all(|c| c == &p.data()[..len]));
}

#[test]
fn divisibility_error_names_grid_and_patches() {
    let err = patchify(&Tensor::zeros(&[1, 2, 6, 6]), 16).unwrap_err();
    assert!(matches!(err, Error::PatchDivisibility { height: 6, width: 6, patches: 16 }));
    let msg = err.to_string();
    assert!(msg.contains("6x6") && msg.contains("16"), "{msg}");
    assert!(patchify(&Tensor::zeros(&[1, 1, 8, 8]), 8).is_err());
}

#[test]
fn zero_patches_give_positional_rows() {
    let (cfg, layer) = tiny_layer(1);
    let z = embed(&layer, &Tensor::zeros(&[cfg.patches, cfg.frames, cfg.patch_lens()[0]]), 0).unwrap();
    let pos = layer.pos[0].value();
    for p in 0..cfg.patches {
        for t in 0..cfg.frames {
            let off = (p * cfg.frames + t) * cfg.dim;
            assert_eq!(&z.data()[off..off + cfg.dim], &pos.data()[t * cfg.dim..(t + 1) * cfg.dim]);
        }
    }
}

#[test]
fn equal_patches_with_zero_positions_give_equal_tokens() {
    let (cfg, mut layer) = tiny_layer(2);
    layer.pos[0].value_mut().data_mut().fill(0.0);
    let len = cfg.patch_lens()[0];
    let content = Rng::new(3).normal_tensor(&[len], 1.0);
    let patches = Tensor::from_fn(&[2, 1, len], |i| content.data()[i % len]);
    let z = embed(&layer, &patches, 0).unwrap();
    assert_eq!(&z.data()[..cfg.dim], &z.data()[cfg.dim..]);
}

#[test]
fn matches_matrix_vector_oracle() {
    let (cfg, layer) = tiny_layer(4);
    let len = cfg.patch_lens()[0];
    let x = Rng::new(5).normal_tensor(&[2, 2, len], 1.0);
    let z = embed(&layer, &x, 0).unwrap();
    let (e, pos) = (layer.embed[0].value(), layer.pos[0].value());
    for p in 0..2 {
        for t in 0..2 {
            for j in 0..cfg.dim {
                let mut want = pos.at(&[t, j]);
                for k in 0..len {
                    want += e.at(&[j, k]) * x.at(&[p, t, k]);
                }
                assert!((z.at(&[p, t, j]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn too_many_frames_and_width_mismatch_are_errors() {
    let (cfg, layer) = tiny_layer(6);
    let len = cfg.patch_lens()[0];
    assert!(embed(&layer, &Tensor::zeros(&[cfg.patches, cfg.frames + 1, len]), 0).is_err());
    assert!(matches!(
        embed(&layer, &Tensor::zeros(&[cfg.patches, cfg.frames, len + 1]), 0),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn tied_table_has_one_row_used_for_every_frame() {
    let cfg = ModelConfig {
        tie_epos: true,
        ..ModelConfig::tiny()
    };
    let layer = MELayer::new(&cfg, &mut Rng::new(7));
    assert_eq!(layer.pos[0].value().shape(), &[1, cfg.dim]);
    let z = embed(&layer, &Tensor::zeros(&[cfg.patches, cfg.frames, cfg.patch_lens()[0]]), 0).unwrap();
    assert_eq!(&z.data()[..cfg.dim], &z.data()[cfg.dim..2 * cfg.dim]);
}

#[test]
fn shared_and_per_scale_tables() {
    let shared = MELayer::new(&ModelConfig::desk(), &mut Rng::new(0));
    assert_eq!(shared.pos.len(), 1);
    let per_scale = MELayer::new(
        &ModelConfig {
            shared_epos: false,
            ..ModelConfig::desk()
        },
        &mut Rng::new(0),
    );
    assert_eq!(per_scale.pos.len(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn unpatchify_inverts_patchify(
        seed in 0u64..10_000,
        side in 1usize..4,
        patch in 1usize..4,
        frames in 1usize..3,
        channels in 1usize..4,
    ) {
        let size = side * patch;
        let fmap = Rng::new(seed).normal_tensor(&[frames, channels, size, size], 1.0);
        let layout = PatchLayout::from_shape(fmap.shape(), side * side).unwrap();
        prop_assert_eq!(unpatchify(&patchify(&fmap, side * side).unwrap(), &layout).unwrap(), fmap);
    }

    #[test]
    fn patch_permutation_permutes_tokens(seed in 0u64..10_000) {
        let (cfg, layer) = tiny_layer(seed);
        let mut rng = Rng::new(seed + 1);
        let len = cfg.patch_lens()[0];
        let x = rng.normal_tensor(&[cfg.patches, cfg.frames, len], 1.0);
        let order = rng.permutation(cfg.patches);
        let row = cfg.frames * len;
        let permuted = Tensor::new(
            x.shape().to_vec(),
            order.iter().flat_map(|&p| x.data()[p * row..(p + 1) * row].iter().copied()).collect(),
        ).unwrap();
        let (z, zp) = (embed(&layer, &x, 0).unwrap(), embed(&layer, &permuted, 0).unwrap());
        let trow = cfg.frames * cfg.dim;
        for (i, &p) in order.iter().enumerate() {
            prop_assert_eq!(&zp.data()[i * trow..(i + 1) * trow], &z.data()[p * trow..(p + 1) * trow]);
        }
    }

    #[test]
    fn identical_content_at_different_frames_is_distinguishable(seed in 0u64..10_000) {
        let (cfg, layer) = tiny_layer(seed);
        let len = cfg.patch_lens()[0];
        let content = Rng::new(seed + 9).normal_tensor(&[len], 1.0);
        let x = Tensor::from_fn(&[1, cfg.frames, len], |i| content.data()[i % len]);
        let z = embed(&layer, &x, 0).unwrap();
        prop_assert_ne!(&z.data()[..cfg.dim], &z.data()[cfg.dim..2 * cfg.dim]);
    }
}
