#![allow(dead_code)]

use msstnet_core::{Param, Parameters, Result, Rng, Tape, Tensor, Var};

/// Central-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with a small floor so exact zeros compare cleanly.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Evaluates `build` on fresh leaves and returns the scalar loss value.
pub fn eval_loss<F>(inputs: &[Tensor], build: &F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let loss = build(&mut tape, &vars).expect("forward");
    tape.value(loss).item()
}

/// Worst elementwise relative error between tape gradients and central
/// finite differences over every input element.
pub fn gradcheck<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars).expect("forward");
    tape.backward(loss).expect("backward");

    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[which]).expect("leaf gradient").clone();
        for i in 0..input.numel() {
            let mut probe = inputs.to_vec();
            probe[which].data_mut()[i] = input.data()[i] + FD_STEP;
            let plus = eval_loss(&probe, &build);
            probe[which].data_mut()[i] = input.data()[i] - FD_STEP;
            let minus = eval_loss(&probe, &build);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Reduces a tensor to a scalar through a fixed random weighting so that
/// every output element carries a distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let weights = tape.constant(Rng::new(seed ^ 0xA5A5).normal_tensor(&shape, 1.0));
    let prod = tape.mul(x, weights)?;
    Ok(tape.sum(prod))
}

/// Outcome of a parameter-level gradient check.
#[derive(Debug)]
pub struct ParamCheck {
    pub checked: usize,
    pub worst: f64,
}

/// Compares tape gradients of `loss` with central differences on `samples`
/// parameter elements drawn uniformly over every element of `model`.
pub fn param_gradcheck<M, F>(model: &M, loss: F, samples: usize, seed: u64) -> ParamCheck
where
    M: Parameters + Clone,
    F: Fn(&M, &mut Tape) -> Result<Var>,
{
    let params: Vec<Param> = model.named_params("m").into_iter().map(|(_, p)| p).collect();
    let mut tape = Tape::new();
    let l = loss(model, &mut tape).expect("forward");
    tape.backward(l).expect("backward");
    let analytic: Vec<Option<Tensor>> = params.iter().map(|p| tape.param_grad(p).cloned()).collect();

    let sizes: Vec<usize> = params.iter().map(|p| p.value().numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = Rng::new(seed);
    let eval = |m: &M| {
        let mut tape = Tape::no_grad();
        let l = loss(m, &mut tape).expect("forward");
        tape.value(l).item()
    };
    let perturbed = |which: usize, elem: usize, delta: f64| {
        let mut m = model.clone();
        let mut index = 0;
        m.visit_mut("m", &mut |_, p| {
            if index == which {
                p.value_mut().data_mut()[elem] += delta;
            }
            index += 1;
        });
        m
    };

    let mut worst = 0.0f64;
    for _ in 0..samples {
        let mut flat = rng.below(total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let a = analytic[which].as_ref().map_or(0.0, |g| g.data()[flat]);
        let numeric = (eval(&perturbed(which, flat, FD_STEP)) - eval(&perturbed(which, flat, -FD_STEP))) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(a, numeric));
    }
    ParamCheck { checked: samples, worst }
}

/// Uniform `[0, 1)` clip of the given shape.
pub fn random_clip(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.uniform_tensor(shape, 0.0, 1.0)
}

/// WAR and UAR in percent by enumerating every individual sample of a
/// row-major `classes × classes` count matrix.
pub fn brute_force_recalls(counts: &[u64], classes: usize) -> (f64, f64) {
    let mut samples = Vec::new();
    for label in 0..classes {
        for pred in 0..classes {
            for _ in 0..counts[label * classes + pred] {
                samples.push((label, pred));
            }
        }
    }
    let hits = samples.iter().filter(|(l, p)| l == p).count();
    let war = 100.0 * hits as f64 / samples.len() as f64;
    let mut recalls = Vec::new();
    for class in 0..classes {
        let members: Vec<_> = samples.iter().filter(|(l, _)| *l == class).collect();
        if !members.is_empty() {
            let right = members.iter().filter(|(l, p)| l == p).count();
            recalls.push(right as f64 / members.len() as f64);
        }
    }
    let uar = 100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64;
    (war, uar)
}

/// Random confusion matrix with at least one sample; some rows may be empty.
pub fn random_counts(rng: &mut Rng) -> (usize, Vec<u64>) {
    let classes = 2 + rng.below(7);
    loop {
        let counts: Vec<u64> = (0..classes * classes)
            .map(|_| if rng.below(4) == 0 { 0 } else { rng.below(20) as u64 })
            .collect();
        if counts.iter().any(|&c| c > 0) {
            return (classes, counts);
        }
    }
}
