//! Finite-difference harnesses shared by the gradient tests and the
//! acceptance run.

use asl::backbone::Mode;
use asl::gradcheck::{central_difference, relative_error};
use asl::model::{forward_episode, Ablation, EpisodeBatch, LossConfig, ModelConfig, ModelParams};
use asl::ops::PoolMode;
use asl::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TRIALS: u64 = 20;
pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-5;
/// Conv biases feeding batch normalisation cancel exactly, so their gradient
/// is zero; the numeric estimate there is pure rounding noise (about 1e-9 at
/// this step) and is bounded separately instead of divided by a floor.
pub const ZERO_GRADIENT_NOISE: f64 = 1e-8;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Builds `Σ w ⊙ op(inputs)` with fixed random weights `w` so every output
/// cell contributes, then compares the gradient of every input against
/// central differences.
pub fn check(name: &str, inputs: &[Tensor], op: impl Fn(&mut Graph, &[Var]) -> Var, seed: u64) -> f64 {
    let eval = |vals: &[Tensor], want_grad: bool| -> (f64, Vec<Option<Tensor>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = op(&mut g, &vars);
        let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let w = Tensor::from_fn(g.shape(out), |_| wrng.random_range(-1.0..1.0));
        let wv = g.constant(w);
        let weighted = g.mul(out, wv).unwrap();
        let loss = g.sum(weighted);
        let value = g.value(loss).item();
        if !want_grad {
            return (value, Vec::new());
        }
        let grads = g.backward(loss).unwrap();
        (value, vars.iter().map(|&v| grads.get(v)).collect())
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = (0..input.len()).collect();
        let numeric = central_difference(input.data(), &coords, STEP, |x| {
            let mut vals = inputs.to_vec();
            vals[i] = Tensor::new(input.shape(), x.to_vec()).unwrap();
            eval(&vals, false).0
        });
        let a = analytic[i].clone().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for (an, nu) in a.data().iter().zip(&numeric) {
            worst = worst.max(relative_error(*an, *nu));
        }
    }
    let _ = name;
    worst
}

/// Worst relative error of `op` over [`TRIALS`] random inputs.
pub fn op_worst(name: &str, shapes: &[&[usize]], op: impl Fn(&mut Graph, &[Var]) -> Var + Copy) -> f64 {
    (0..TRIALS)
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(trial * 7919 + name.len() as u64);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            check(name, &inputs, op, trial)
        })
        .fold(0.0, f64::max)
}

pub fn run(name: &str, shapes: &[&[usize]], op: impl Fn(&mut Graph, &[Var]) -> Var + Copy) {
    let worst = op_worst(name, shapes, op);
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

/// Every differentiable op with its input shapes; `(name, worst error)`.
pub fn all_ops() -> Vec<(String, f64)> {
    let mut out = vec![
        ("conv2d".to_string(), op_worst("conv2d", &[&[2, 4, 4, 2], &[3, 3, 2, 3], &[3]], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2])).unwrap()
        })),
        ("conv2d_k5".into(), op_worst("conv2d_k5", &[&[1, 3, 5, 2], &[5, 5, 2, 1]], |g, v| g.conv2d(v[0], v[1], None).unwrap())),
        ("add".into(), op_worst("add_broadcast", &[&[2, 3, 3, 4], &[4]], |g, v| g.add(v[0], v[1]).unwrap())),
        ("mul_channel".into(), op_worst("mul_channel_gate", &[&[2, 3, 3, 4], &[2, 1, 1, 4]], |g, v| g.mul(v[0], v[1]).unwrap())),
        ("mul_spatial".into(), op_worst("mul_spatial_gate", &[&[2, 3, 3, 4], &[2, 3, 3, 1]], |g, v| g.mul(v[0], v[1]).unwrap())),
        ("sub".into(), op_worst("sub", &[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]).unwrap())),
        ("scale".into(), op_worst("scale", &[&[5]], |g, v| g.scale(v[0], -1.7))),
        ("square".into(), op_worst("square", &[&[2, 3]], |g, v| g.square(v[0]))),
        ("sigmoid".into(), op_worst("sigmoid", &[&[2, 5]], |g, v| g.sigmoid(v[0]))),
        ("relu".into(), op_worst("relu", &[&[3, 7]], |g, v| g.relu(v[0]))),
        ("max_pool2".into(), op_worst("max_pool2", &[&[2, 4, 4, 3]], |g, v| g.max_pool2(v[0]).unwrap())),
        ("linear".into(), op_worst("linear", &[&[3, 1, 1, 4], &[4, 2], &[2]], |g, v| g.linear(v[0], v[1], v[2]).unwrap())),
        ("matmul".into(), op_worst("matmul", &[&[3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1]).unwrap())),
        ("broadcast_concat".into(), op_worst("broadcast_concat", &[&[2, 2, 3, 2], &[2, 3]], |g, v| g.broadcast_concat(v[0], v[1]).unwrap())),
        ("concat_channels".into(), op_worst("concat_channels", &[&[2, 2, 2, 1], &[2, 2, 2, 3]], |g, v| g.concat_channels(&[v[0], v[1]]).unwrap())),
        ("concat_rows".into(), op_worst("concat_rows", &[&[2, 3], &[1, 3]], |g, v| g.concat_rows(&[v[0], v[1]]).unwrap())),
        ("slice_rows".into(), op_worst("slice_rows", &[&[5, 2]], |g, v| g.slice_rows(v[0], 1, 4).unwrap())),
        ("reshape".into(), op_worst("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]).unwrap())),
        ("batch_norm".into(), op_worst("batch_norm", &[&[3, 2, 2, 3], &[3], &[3]], |g, v| g.batch_norm(v[0], v[1], v[2], 1e-5).unwrap().0)),
        ("neg_sq_dist".into(), op_worst("neg_sq_dist", &[&[4, 3], &[2, 3]], |g, v| g.neg_sq_dist(v[0], v[1]).unwrap())),
        ("softmax".into(), op_worst("softmax", &[&[3, 4]], |g, v| g.softmax(v[0]))),
        ("mean".into(), op_worst("mean", &[&[3, 4]], |g, v| g.mean(v[0]))),
        ("sum".into(), op_worst("sum", &[&[3, 4]], |g, v| g.sum(v[0]))),
    ];
    for mode in [PoolMode::Avg, PoolMode::Max] {
        out.push((format!("global_pool_{mode:?}"), op_worst("global_pool", &[&[2, 3, 3, 4]], move |g, v| g.global_pool(v[0], mode).unwrap())));
        out.push((format!("channel_pool_{mode:?}"), op_worst("channel_pool", &[&[2, 3, 3, 4]], move |g, v| g.channel_pool(v[0], mode).unwrap())));
    }
    out.push(("softmax_nll".into(), nll_worst()));
    out
}

pub fn nll_worst() -> f64 {
    (0..TRIALS)
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let logits = random(&[3, 4], &mut rng);
            let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
            check(
                "softmax_nll",
                &[logits],
                |g, v| {
                    let p = g.softmax(v[0]);
                    g.nll(p, &labels, 1e-12, 1.0).unwrap()
                },
                trial,
            )
        })
        .fold(0.0, f64::max)
}

pub fn episode(rng: &mut ChaCha8Rng) -> EpisodeBatch {
    // 2 support images then 2 queries
    EpisodeBatch {
        images: Tensor::from_fn(&[4, 16, 16, 3], |_| rng.random_range(0.0..1.0)),
        attributes: Tensor::from_fn(&[4, 4], |_| rng.random_range(0.0..1.0)),
        n_way: 2,
        support_labels: vec![0, 1],
        query_labels: vec![1, 0],
    }
}

pub fn config(ablation: Ablation) -> ModelConfig {
    ModelConfig {
        image_shape: [16, 16, 3],
        channels: 8,
        num_attributes: 4,
        kernel_sizes: vec![3, 5, 7, 9],
        ablation,
    }
}

pub fn loss_of(params: &ModelParams, batch: &EpisodeBatch) -> f64 {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let out = forward_episode(&mut g, params, &vars, batch, Mode::Train, LossConfig::default()).unwrap();
    g.value(out.loss).item()
}

/// Largest relative error over `per_tensor` random coordinates of every
/// trainable tensor (all coordinates when the tensor is smaller).
pub fn worst_error(params: &ModelParams, batch: &EpisodeBatch, per_tensor: usize, rng: &mut ChaCha8Rng) -> (f64, String) {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let out = forward_episode(&mut g, params, &vars, batch, Mode::Train, LossConfig::default()).unwrap();
    let grads = g.backward(out.loss).unwrap();
    let names: Vec<String> = params.named_trainable().into_iter().map(|(n, _)| n).collect();
    let mut worst = (0.0, String::new());
    for (t, (&leaf, name)) in vars.leaves.iter().zip(&names).enumerate() {
        let analytic = grads.get_or_zero(leaf);
        let len = analytic.len();
        let coords: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        let base = params.named_trainable()[t].1.clone();
        let numeric = central_difference(base.data(), &coords, STEP, |x| {
            let mut p = params.clone();
            p.trainable_mut()[t].data_mut().copy_from_slice(x);
            loss_of(&p, batch)
        });
        let cancelled = name.starts_with("backbone.") && name.ends_with(".bias");
        for (&c, nu) in coords.iter().zip(&numeric) {
            let e = if cancelled {
                // must vanish on both sides; any leak counts as a total mismatch
                if analytic.data()[c].abs() < 1e-12 && nu.abs() < ZERO_GRADIENT_NOISE {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                relative_error(analytic.data()[c], *nu)
            };
            if e > worst.0 {
                worst = (e, format!("{name}[{c}] analytic {} numeric {nu}", analytic.data()[c]));
            }
        }
    }
    worst
}

/// Worst relative error of the joint loss over [`TRIALS`] seeded 2-way
/// 1-shot episodes.
pub fn joint_loss_worst() -> (f64, String) {
    let mut worst = (0.0, String::new());
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let params = ModelParams::init(config(Ablation::default()), trial).unwrap();
        let batch = episode(&mut rng);
        let (err, at) = worst_error(&params, &batch, 6, &mut rng);
        if err > worst.0 {
            worst = (err, format!("trial {trial}: {at}"));
        }
    }
    worst
}
