//! Brute-force loop oracles for convolution and both attention maps.

use asl::graph::Graph;
use asl::model::{channel_attention, pyramid_spatial_attention, AffineVars, PsamVars};
use asl::ops::sigmoid_scalar as sig;
use asl::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct zero-padded convolution of a `[H,W,2]` map with a `[k,k,2,1]` kernel.
pub fn conv_map(x: &Tensor, k: &Tensor, bias: f64) -> Vec<f64> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let ks = k.shape()[0] as isize;
    let p = ks / 2;
    let mut out = vec![bias; h * w];
    for y in 0..h as isize {
        for xx in 0..w as isize {
            for dy in 0..ks {
                for dx in 0..ks {
                    let (iy, ix) = (y + dy - p, xx + dx - p);
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    for c in 0..2 {
                        out[(y * w as isize + xx) as usize] +=
                            x.at(&[iy as usize, ix as usize, c]) * k.at(&[dy as usize, dx as usize, c, 0]);
                    }
                }
            }
        }
    }
    out
}

/// `[H,W,C]` → `[H,W,2]` of channel mean and max.
pub fn channel_stats(x: &Tensor) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Tensor::from_fn(&[h, w, 2], |i| {
        let (pos, which) = (i / 2, i % 2);
        let cell = &x.data()[pos * c..(pos + 1) * c];
        if which == 0 {
            cell.iter().sum::<f64>() / c as f64
        } else {
            cell.iter().copied().fold(f64::MIN, f64::max)
        }
    })
}

/// Zero-padded "same" convolution of `[H,W,Cin]` with `[k,k,Cin,Cout]`.
pub fn conv_full(x: &Tensor, k: &Tensor, bias: &[f64]) -> Vec<f64> {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ks, cout) = (k.shape()[0], k.shape()[3]);
    let p = (ks / 2) as isize;
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            for o in 0..cout {
                let mut acc = bias[o];
                for dy in 0..ks {
                    for dx in 0..ks {
                        let iy = y as isize + dy as isize - p;
                        let ix = xx as isize + dx as isize - p;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for c in 0..cin {
                            acc += x.at(&[iy as usize, ix as usize, c]) * k.at(&[dy, dx, c, o]);
                        }
                    }
                }
                out[(y * w + xx) * cout + o] = acc;
            }
        }
    }
    out
}

/// `σ(W·avg + b + W·max + b)` computed channel by channel.
pub fn cam_loops(x: &Tensor, w: &Tensor, b: &[f64]) -> Vec<f64> {
    let (h, wd, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let out = w.shape()[1];
    let mut avg = vec![0.0; c];
    let mut max = vec![f64::MIN; c];
    for p in 0..h * wd {
        for i in 0..c {
            let v = x.data()[p * c + i];
            avg[i] += v / (h * wd) as f64;
            max[i] = max[i].max(v);
        }
    }
    (0..out)
        .map(|o| {
            let za: f64 = (0..c).map(|i| avg[i] * w.at(&[i, o])).sum::<f64>() + b[o];
            let zm: f64 = (0..c).map(|i| max[i] * w.at(&[i, o])).sum::<f64>() + b[o];
            sig(za + zm)
        })
        .collect()
}

/// Largest gap between the library and the loop oracles over `trials`
/// random tiny problems: `(conv2d, channel attention, single-kernel spatial
/// attention, multi-kernel spatial attention)`.
pub fn oracle_gaps(trials: u64) -> [f64; 4] {
    let mut gaps = [0.0f64; 4];
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + t);
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let cin = rng.random_range(1..4);
        let cout = rng.random_range(1..4);
        let ks = [1, 3, 5, 7][rng.random_range(0..4)];

        let x = random(&[h, w, cin], &mut rng);
        let k = random(&[ks, ks, cin, cout], &mut rng);
        let bias = random(&[cout], &mut rng);
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.constant(x.clone().batched()), g.constant(k.clone()), g.constant(bias.clone()));
        let y = g.conv2d(xv, kv, Some(bv)).unwrap();
        let want = conv_full(&x, &k, bias.data());
        gaps[0] = gaps[0].max(max_gap(g.value(y).data(), &want));

        let cw = random(&[cin, cout], &mut rng);
        let cb = random(&[cout], &mut rng);
        let cam = AffineVars {
            weights: g.constant(cw.clone()),
            bias: g.constant(cb.clone()),
        };
        let m = channel_attention(&mut g, xv, &cam).unwrap();
        gaps[1] = gaps[1].max(max_gap(g.value(m).data(), &cam_loops(&x, &cw, cb.data())));

        let sizes: Vec<usize> = match t % 2 {
            0 => vec![ks.max(3)],
            _ => vec![3, 5, 7, 9],
        };
        let levels: Vec<(Tensor, f64)> = sizes
            .iter()
            .map(|&s| (random(&[s, s, 2, 1], &mut rng), rng.random_range(-1.0..1.0)))
            .collect();
        let stats = channel_stats(&x);
        let mut z = vec![0.0; h * w];
        for (k, b) in &levels {
            for (acc, v) in z.iter_mut().zip(conv_map(&stats, k, *b)) {
                *acc += v;
            }
        }
        let want: Vec<f64> = z.into_iter().map(sig).collect();
        let psam = PsamVars {
            levels: levels
                .iter()
                .map(|(k, b)| AffineVars {
                    weights: g.constant(k.clone()),
                    bias: g.constant(Tensor::new(&[1], vec![*b]).unwrap()),
                })
                .collect(),
        };
        let m = pyramid_spatial_attention(&mut g, xv, &psam).unwrap();
        let slot = if sizes.len() == 1 { 2 } else { 3 };
        gaps[slot] = gaps[slot].max(max_gap(g.value(m).data(), &want));
    }
    gaps
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
