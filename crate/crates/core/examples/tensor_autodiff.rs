//! Builds a small graph by hand, runs reverse mode and checks one gradient
//! against central differences.
//!
//!     cargo run --example tensor_autodiff

use asl::gradcheck::{central_difference, relative_error};
use asl::{Graph, Tensor};

fn loss_of(x: &Tensor, k: &Tensor) -> (Graph, asl::Var, asl::Var) {
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let kv = g.param(k.clone());
    let y = g.conv2d(xv, kv, None).unwrap();
    let y = g.sigmoid(y);
    let sq = g.square(y);
    let loss = g.sum(sq);
    (g, kv, loss)
}

fn main() -> asl::Result<()> {
    // one 4×4 single-channel image and a 3×3 kernel
    let x = Tensor::from_fn(&[1, 4, 4, 1], |i| (i as f64 * 0.37).sin());
    let k = Tensor::from_fn(&[3, 3, 1, 1], |i| 0.1 * i as f64 - 0.4);

    let (g, kv, loss) = loss_of(&x, &k);
    let grads = g.backward(loss)?;
    let analytic = grads.get_or_zero(kv);
    println!("loss = {:.6}", g.value(loss).item());

    let coords: Vec<usize> = (0..k.len()).collect();
    let numeric = central_difference(k.data(), &coords, 1e-5, |probe| {
        let k = Tensor::new(k.shape(), probe.to_vec()).unwrap();
        let (g, _, loss) = loss_of(&x, &k);
        g.value(loss).item()
    });
    let worst = analytic
        .data()
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max);
    println!("dL/dK = {:?}", analytic.data().iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());
    println!("max relative error vs finite differences: {worst:.2e}");
    Ok(())
}
