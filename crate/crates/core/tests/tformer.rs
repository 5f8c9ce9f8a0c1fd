mod common;

use msstnet_core::tformer::{temporal_attention, tformer_forward};
use msstnet_core::{Rng, TFormerBlock, Tape, Tensor, Var};
use proptest::prelude::*;

const EPS: f64 = 1e-5;

// ---------------------------------------------------------------- oracles

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + EPS).sqrt();
    x.iter().zip(gamma).zip(beta).map(|((v, g), b)| (v - mean) * inv * g + b).collect()
}

/// `w (rows, cols) · x (cols)`
fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = w.shape()[1];
    w.data().chunks(cols).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Token `(p, t)` of an `(N, T, D)` tensor.
fn token(z: &Tensor, p: usize, t: usize) -> &[f64] {
    let (tt, d) = (z.shape()[1], z.shape()[2]);
    &z.data()[(p * tt + t) * d..(p * tt + t + 1) * d]
}

/// Full block evaluated token by token with explicit loops.
fn block_oracle(block: &TFormerBlock, z: &Tensor) -> (Tensor, Tensor) {
    let (n, t, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let (a, dh) = (block.heads, block.head_dim());
    let g1 = block.norm1.gamma.value().data();
    let b1 = block.norm1.beta.value().data();
    let mut out = Tensor::zeros(&[n, t, d]);
    let mut alpha = Tensor::zeros(&[a, n, t, t]);
    for p in 0..n {
        let normed: Vec<Vec<f64>> = (0..t).map(|ti| layer_norm(token(z, p, ti), g1, b1)).collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|h| matvec(block.w_q.value(), h)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|h| matvec(block.w_k.value(), h)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|h| matvec(block.w_v.value(), h)).collect();
        for tq in 0..t {
            let mut concat = vec![0.0; d];
            for head in 0..a {
                let r = head * dh..(head + 1) * dh;
                let scores: Vec<f64> = (0..t)
                    .map(|tk| {
                        q[tq][r.clone()].iter().zip(&k[tk][r.clone()]).map(|(x, y)| x / (dh as f64).sqrt() * y).sum()
                    })
                    .collect();
                let w = softmax(&scores);
                for tk in 0..t {
                    let i = alpha.offset(&[head, p, tq, tk]);
                    alpha.data_mut()[i] = w[tk];
                    for j in r.clone() {
                        concat[j] += w[tk] * v[tk][j];
                    }
                }
            }
            let proj = matvec(block.w_o.value(), &concat);
            let hidden: Vec<f64> = proj.iter().zip(token(z, p, tq)).map(|(x, y)| x + y).collect();
            let n2 = layer_norm(&hidden, block.norm2.gamma.value().data(), block.norm2.beta.value().data());
            let m: Vec<f64> = matvec(block.fc1.value(), &n2)
                .iter()
                .zip(block.fc1_bias.value().data())
                .map(|(x, b)| gelu(x + b))
                .collect();
            let m2 = matvec(block.fc2.value(), &m);
            for j in 0..d {
                let i = out.offset(&[p, tq, j]);
                out.data_mut()[i] = m2[j] + block.fc2_bias.value().data()[j] + hidden[j];
            }
        }
    }
    (out, alpha)
}

// ---------------------------------------------------------------- helpers

fn random_block(seed: u64, dim: usize, heads: usize) -> TFormerBlock {
    let mut rng = Rng::new(seed);
    let mut block = TFormerBlock::new(dim, heads, 4 * dim, EPS, &mut rng);
    for ln in [&mut block.norm1, &mut block.norm2] {
        ln.gamma.set(rng.uniform_tensor(&[dim], 0.5, 1.5));
        ln.beta.set(rng.normal_tensor(&[dim], 0.3));
    }
    for w in [&mut block.w_q, &mut block.w_k, &mut block.w_v, &mut block.w_o] {
        w.set(rng.normal_tensor(&[dim, dim], 0.4));
    }
    block.fc1_bias.set(rng.normal_tensor(&[4 * dim], 0.3));
    block.fc2_bias.set(rng.normal_tensor(&[dim], 0.3));
    block
}

fn run_block(block: &TFormerBlock, z: &Tensor) -> (Tensor, Tensor) {
    let mut tape = Tape::no_grad();
    let x = tape.constant(z.clone());
    let (out, alpha) = block.forward(&mut tape, x).unwrap();
    (tape.value(out).clone(), tape.value(alpha).clone())
}

fn run_stack(blocks: &[TFormerBlock], z: &Tensor) -> Tensor {
    let mut tape = Tape::no_grad();
    let x = tape.constant(z.clone());
    let (out, _) = tformer_forward(&mut tape, x, blocks, false).unwrap();
    tape.value(out).clone()
}

fn qkv(block: &TFormerBlock, z: &Tensor) -> [Tensor; 3] {
    let mut tape = Tape::no_grad();
    let x = tape.constant(z.clone());
    let (q, k, v) = block.qkv_project(&mut tape, x).unwrap();
    [q, k, v].map(|var: Var| tape.value(var).clone())
}

fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> (Tensor, Tensor) {
    let mut tape = Tape::no_grad();
    let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let (s, alpha) = temporal_attention(&mut tape, q, k, v).unwrap();
    (tape.value(s).clone(), tape.value(alpha).clone())
}

fn permute_axis(z: &Tensor, axis: usize, order: &[usize]) -> Tensor {
    let shape = z.shape().to_vec();
    Tensor::from_fn(&shape, |flat| {
        let mut idx = Vec::with_capacity(shape.len());
        let mut rem = flat;
        for &s in shape.iter().rev() {
            idx.push(rem % s);
            rem /= s;
        }
        idx.reverse();
        idx[axis] = order[idx[axis]];
        z.at(&idx)
    })
}

// ---------------------------------------------------------------- qkv

#[test]
fn zero_query_weights_give_zero_queries() {
    let mut block = random_block(1, 8, 2);
    block.w_q.set(Tensor::zeros(&[8, 8]));
    let [q, _, _] = qkv(&block, &Rng::new(2).normal_tensor(&[3, 4, 8], 1.0));
    assert_eq!(q.shape(), &[2, 3, 4, 4]);
    assert!(q.data().iter().all(|&v| v == 0.0));
}

#[test]
fn constant_over_time_gives_constant_queries() {
    let block = random_block(3, 8, 2);
    let frame = Rng::new(4).normal_tensor(&[2, 1, 8], 1.0);
    let z = Tensor::from_fn(&[2, 3, 8], |i| {
        let (p, j) = (i / 24, i % 8);
        frame.data()[p * 8 + j]
    });
    let [q, _, _] = qkv(&block, &z);
    for a in 0..2 {
        for p in 0..2 {
            for t in 1..3 {
                for j in 0..4 {
                    assert_eq!(q.at(&[a, p, t, j]), q.at(&[a, p, 0, j]));
                }
            }
        }
    }
}

#[test]
fn single_head_projection_matches_layer_norm_then_matmul() {
    let block = random_block(5, 4, 1);
    let z = Rng::new(6).normal_tensor(&[2, 3, 4], 1.5);
    let [q, k, v] = qkv(&block, &z);
    for (got, w) in [(&q, &block.w_q), (&k, &block.w_k), (&v, &block.w_v)] {
        for p in 0..2 {
            for t in 0..3 {
                let h = layer_norm(token(&z, p, t), block.norm1.gamma.value().data(), block.norm1.beta.value().data());
                let want = matvec(w.value(), &h);
                for j in 0..4 {
                    assert!((got.at(&[0, p, t, j]) - want[j]).abs() < 1e-12);
                }
            }
        }
    }
}

// ---------------------------------------------------------------- attention

#[test]
fn equal_keys_give_uniform_weights_and_mean_values() {
    let mut rng = Rng::new(7);
    let q = rng.normal_tensor(&[2, 3, 4, 2], 1.0);
    let key = rng.normal_tensor(&[2], 1.0);
    let k = Tensor::from_fn(&[2, 3, 4, 2], |i| key.data()[i % 2]);
    let v = rng.normal_tensor(&[2, 3, 4, 2], 1.0);
    let (s, alpha) = attention(&q, &k, &v);
    assert!(alpha.data().iter().all(|&w| (w - 0.25).abs() < 1e-15));
    for a in 0..2 {
        for p in 0..3 {
            for j in 0..2 {
                let mean = (0..4).map(|t| v.at(&[a, p, t, j])).sum::<f64>() / 4.0;
                for t in 0..4 {
                    assert!((s.at(&[a, p, t, j]) - mean).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn single_frame_attention_passes_values_through() {
    let mut rng = Rng::new(8);
    let (q, k, v) = (rng.normal_tensor(&[3, 2, 1, 4], 1.0), rng.normal_tensor(&[3, 2, 1, 4], 1.0), rng.normal_tensor(&[3, 2, 1, 4], 1.0));
    let (s, alpha) = attention(&q, &k, &v);
    assert!(alpha.data().iter().all(|&w| w == 1.0));
    assert_eq!(s, v);
}

#[test]
fn small_case_matches_brute_force_loops() {
    let mut rng = Rng::new(9);
    let (t, n, dh) = (3, 2, 2);
    let (q, k, v) = (
        rng.normal_tensor(&[1, n, t, dh], 1.0),
        rng.normal_tensor(&[1, n, t, dh], 1.0),
        rng.normal_tensor(&[1, n, t, dh], 1.0),
    );
    let (s, alpha) = attention(&q, &k, &v);
    for p in 0..n {
        for tq in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|tk| (0..dh).map(|j| q.at(&[0, p, tq, j]) * k.at(&[0, p, tk, j])).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let w = softmax(&scores);
            for tk in 0..t {
                assert!((alpha.at(&[0, p, tq, tk]) - w[tk]).abs() < 1e-14);
            }
            for j in 0..dh {
                let want: f64 = (0..t).map(|tk| w[tk] * v.at(&[0, p, tk, j])).sum();
                assert!((s.at(&[0, p, tq, j]) - want).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn attention_rejects_mismatched_shapes() {
    let mut tape = Tape::no_grad();
    let q = tape.constant(Tensor::zeros(&[1, 2, 3, 4]));
    let k = tape.constant(Tensor::zeros(&[1, 2, 2, 4]));
    assert!(temporal_attention(&mut tape, q, k, q).is_err());
}

// ---------------------------------------------------------------- block and stack

#[test]
fn zeroed_outputs_make_the_block_an_exact_identity() {
    let mut block = random_block(10, 8, 2);
    block.make_identity();
    let z = Rng::new(11).normal_tensor(&[4, 3, 8], 2.0);
    assert_eq!(run_block(&block, &z).0, z);
}

#[test]
fn perturbing_another_patch_leaves_a_patch_bitwise_unchanged() {
    let block = random_block(12, 8, 2);
    let z = Rng::new(13).normal_tensor(&[3, 4, 8], 1.0);
    let mut perturbed = z.clone();
    for t in 0..4 {
        for j in 0..8 {
            let i = perturbed.offset(&[2, t, j]);
            perturbed.data_mut()[i] += 10.0 * (j as f64 + 1.0);
        }
    }
    let (a, b) = (run_block(&block, &z).0, run_block(&block, &perturbed).0);
    let per = 4 * 8;
    assert_eq!(&a.data()[per..2 * per], &b.data()[per..2 * per]);
    assert_ne!(&a.data()[2 * per..], &b.data()[2 * per..]);
}

#[test]
fn block_matches_composed_oracle() {
    for (seed, n, t, d, a) in [(14, 2, 2, 4, 1), (15, 2, 2, 4, 2), (16, 3, 5, 8, 4)] {
        let block = random_block(seed, d, a);
        let z = Rng::new(seed + 100).normal_tensor(&[n, t, d], 1.0);
        let (out, alpha) = run_block(&block, &z);
        let (want_out, want_alpha) = block_oracle(&block, &z);
        assert!(out.max_abs_diff(&want_out) < 1e-12, "seed {seed}");
        assert!(alpha.max_abs_diff(&want_alpha) < 1e-14, "seed {seed}");
    }
}

#[test]
fn stack_composes_blocks_in_order() {
    let blocks = [random_block(17, 8, 2), random_block(18, 8, 2)];
    let z = Rng::new(19).normal_tensor(&[2, 3, 8], 1.0);
    assert_eq!(run_stack(&blocks[..1], &z), run_block(&blocks[0], &z).0);
    let manual = run_block(&blocks[1], &run_block(&blocks[0], &z).0).0;
    assert_eq!(run_stack(&blocks, &z), manual);

    let mut tape = Tape::no_grad();
    let x = tape.constant(z.clone());
    let (_, records) = tformer_forward(&mut tape, x, &blocks, true).unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0].weights, run_block(&blocks[0], &z).1);
    let (_, none) = tformer_forward(&mut tape, x, &blocks, false).unwrap();
    assert!(none.is_empty());
}

#[test]
fn identity_stack_returns_its_input() {
    let mut blocks = vec![random_block(20, 8, 2), random_block(21, 8, 2), random_block(22, 8, 2)];
    blocks.iter_mut().for_each(TFormerBlock::make_identity);
    let z = Rng::new(23).normal_tensor(&[4, 2, 8], 1.0);
    assert_eq!(run_stack(&blocks, &z), z);
}

#[test]
fn empty_stack_is_an_error() {
    let mut tape = Tape::no_grad();
    let x = tape.constant(Tensor::zeros(&[1, 1, 8]));
    assert!(tformer_forward(&mut tape, x, &[], false).is_err());
}

#[test]
fn block_gradients_match_finite_differences() {
    let block = random_block(24, 8, 2);
    let z = Rng::new(25).normal_tensor(&[2, 3, 8], 1.0);
    let check = common::param_gradcheck(
        &block,
        |b, tape| {
            let x = tape.constant(z.clone());
            let (out, _) = b.forward(tape, x)?;
            common::weighted_sum(tape, out, 26)
        },
        120,
        27,
    );
    assert!(check.worst < 1e-4, "{check:?}");

    let worst = common::gradcheck(std::slice::from_ref(&z), |tape, vars| {
        let (out, _) = block.forward(tape, vars[0])?;
        common::weighted_sum(tape, out, 28)
    });
    assert!(worst < 1e-4, "input gradient rel err {worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_rows_are_stochastic(seed in 0u64..10_000, t in 1usize..7, scale in 0.1f64..20.0) {
        let block = random_block(seed, 8, 2);
        let z = Rng::new(seed + 1).normal_tensor(&[3, t, 8], scale);
        let (_, alpha) = run_block(&block, &z);
        for row in alpha.data().chunks(t) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn stack_is_equivariant_to_patch_permutation(seed in 0u64..10_000) {
        let blocks = [random_block(seed, 8, 2), random_block(seed + 1, 8, 2)];
        let mut rng = Rng::new(seed + 2);
        let z = rng.normal_tensor(&[5, 3, 8], 1.0);
        let order = rng.permutation(5);
        let a = permute_axis(&run_stack(&blocks, &z), 0, &order);
        let b = run_stack(&blocks, &permute_axis(&z, 0, &order));
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn block_is_equivariant_to_frame_permutation(seed in 0u64..10_000) {
        let block = random_block(seed, 8, 2);
        let mut rng = Rng::new(seed + 3);
        let z = rng.normal_tensor(&[3, 5, 8], 1.0);
        let order = rng.permutation(5);
        let a = permute_axis(&run_block(&block, &z).0, 1, &order);
        let b = run_block(&block, &permute_axis(&z, 1, &order)).0;
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
