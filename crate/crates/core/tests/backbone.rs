//! Encoder wiring: every block receives gradient, outputs react to input
//! changes and the two normalisation modes agree once statistics settle.

use asl::backbone::{BackboneParams, Mode};
use asl::seed::stream_rng;
use asl::{Graph, Tensor};
use rand::Rng;

fn images(seed: u64, b: usize) -> Tensor {
    let mut rng = stream_rng(seed, "images");
    Tensor::from_fn(&[b, 32, 32, 3], |_| rng.random_range(0.0..1.0))
}

fn encode(net: &BackboneParams, x: &Tensor, mode: Mode) -> Tensor {
    let mut g = Graph::new();
    let vars = net.bind(&mut g);
    let x = g.constant(x.clone());
    let (y, _) = net.encode(&mut g, &vars, x, mode).unwrap();
    g.value(y).clone()
}

#[test]
fn every_block_receives_gradient() {
    for seed in 0..5 {
        let net = BackboneParams::init(3, 8, &mut stream_rng(seed, "net"));
        let mut g = Graph::new();
        let vars = net.bind(&mut g);
        let x = g.constant(images(seed, 4));
        let (y, stats) = net.encode(&mut g, &vars, x, Mode::Train).unwrap();
        assert_eq!(stats.len(), 4);
        assert_eq!(g.shape(y), &[4, 2, 2, 8]);
        // an asymmetric readout so batch normalisation cannot cancel it
        let w = g.constant(Tensor::from_fn(&[4, 2, 2, 8], |i| ((i * 7919) % 13) as f64 - 6.0));
        let prod = g.mul(y, w).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        for (i, v) in vars.iter().enumerate() {
            for (name, var) in [("kernel", v.kernel), ("gamma", v.gamma), ("beta", v.beta)] {
                let norm: f64 = grads.get_or_zero(var).data().iter().map(|x| x * x).sum();
                assert!(norm > 1e-12, "seed {seed} block {i} {name} has no gradient");
            }
        }
    }
}

#[test]
fn outputs_respond_to_each_input_quadrant() {
    let net = BackboneParams::init(3, 8, &mut stream_rng(1, "net"));
    let base = images(1, 1);
    let reference = encode(&net, &base, Mode::Eval);
    for (qy, qx) in [(0, 0), (0, 16), (16, 0), (16, 16)] {
        let mut probe = base.clone();
        for y in qy..qy + 16 {
            for x in qx..qx + 16 {
                for c in 0..3 {
                    let o = probe.offset(&[0, y, x, c]);
                    probe.data_mut()[o] += 0.5;
                }
            }
        }
        let moved = encode(&net, &probe, Mode::Eval);
        assert!(moved.max_abs_diff(&reference) > 1e-6, "quadrant ({qy},{qx}) ignored");
    }
}

#[test]
fn settled_running_statistics_match_batch_statistics() {
    let mut net = BackboneParams::init(3, 4, &mut stream_rng(2, "net"));
    let x = images(2, 6);
    // the same batch over and over drives running averages to its statistics
    for _ in 0..400 {
        let mut g = Graph::new();
        let vars = net.bind(&mut g);
        let xv = g.constant(x.clone());
        let (_, stats) = net.encode(&mut g, &vars, xv, Mode::Train).unwrap();
        net.update_running(&stats);
    }
    let train = encode(&net, &x, Mode::Train);
    let eval = encode(&net, &x, Mode::Eval);
    // eval uses the unbiased variance, so agreement is close but not exact
    assert!(train.max_abs_diff(&eval) < 0.1, "{}", train.max_abs_diff(&eval));
}
