#![allow(dead_code)]

use dcst::model::Dcst;
use dcst::nn::{Module, Slot};
use dcst::tensor::{
    finite_diff_grad, finite_diff_grad_at, max_relative_error, relative_error, BatchNormMode, NoGradGuard, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> Vec<f32> {
    let n: usize = shape.iter().product();
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn param(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::parameter(uniform(rng, shape, -1.0, 1.0), shape).unwrap()
}

/// Max relative error between backward and central differences (h = 1e-3)
/// of `sum(r * f(inputs))` for a fixed random projection `r`, over every
/// coordinate of every input (or at most `max_coords` per input).
pub fn grad_check(
    inputs: &[Tensor],
    f: impl Fn(&[Tensor]) -> Tensor,
    seed: u64,
    max_coords: usize,
) -> f64 {
    let mut r = rng(seed);
    let probe = {
        let _g = NoGradGuard::new();
        f(inputs)
    };
    let proj: Vec<f32> = uniform(&mut r, probe.shape(), -1.0, 1.0);
    let proj_t = Tensor::new(proj.clone(), probe.shape()).unwrap();
    for x in inputs {
        x.zero_grad();
    }
    f(inputs).mul(&proj_t).unwrap().sum().unwrap().backward().unwrap();
    let objective = |_: &Tensor| -> f64 {
        let _g = NoGradGuard::new();
        let y = f(inputs);
        let d = y.data();
        d.iter().zip(&proj).map(|(&a, &b)| a as f64 * b as f64).sum()
    };
    let mut worst = 0.0f64;
    for x in inputs {
        let n = x.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| r.random_range(0..n)).collect()
        };
        let numeric = finite_diff_grad_at(&objective, x, 1e-3, &coords);
        let grad = x.grad().unwrap_or_else(|| vec![0.0; n]);
        let analytic: Vec<f32> = coords.iter().map(|&i| grad[i]).collect();
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}

/// Input positions whose perturbation moves output pixel `(oy, ox)` of channel 0.
pub fn footprint(f: impl Fn(&Tensor) -> Tensor, x: &Tensor, oy: usize, ox: usize) -> Vec<(usize, usize)> {
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let ow = {
        let _g = NoGradGuard::new();
        f(x).shape()[3]
    };
    let g = finite_diff_grad(
        |x| {
            let _g = NoGradGuard::new();
            f(x).data()[oy * ow + ox] as f64
        },
        x,
        1e-2,
    );
    let mut hits = Vec::new();
    for y in 0..h {
        for xx in 0..w {
            if (0..c).any(|ch| g[(ch * h + y) * w + xx].abs() > 1e-4) {
                hits.push((y, xx));
            }
        }
    }
    hits
}

/// Height and width of the bounding box of a footprint.
pub fn span(hits: &[(usize, usize)]) -> (usize, usize) {
    let ys = hits.iter().map(|h| h.0);
    let xs = hits.iter().map(|h| h.1);
    (
        ys.clone().max().unwrap() - ys.min().unwrap() + 1,
        xs.clone().max().unwrap() - xs.min().unwrap() + 1,
    )
}

/// Recursive flood fill; labels in raster order of first pixel.
pub fn flood_fill(fg: &[bool], h: usize, w: usize, offsets: &[(isize, isize)]) -> (Vec<u32>, usize) {
    fn fill(fg: &[bool], labels: &mut [u32], h: usize, w: usize, y: usize, x: usize, id: u32, offsets: &[(isize, isize)]) {
        labels[y * w + x] = id;
        for &(dy, dx) in offsets {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            if fg[j] && labels[j] == 0 {
                fill(fg, labels, h, w, ny as usize, nx as usize, id, offsets);
            }
        }
    }
    let mut labels = vec![0u32; h * w];
    let mut next = 0;
    for y in 0..h {
        for x in 0..w {
            if fg[y * w + x] && labels[y * w + x] == 0 {
                next += 1;
                fill(fg, &mut labels, h, w, y, x, next, offsets);
            }
        }
    }
    (labels, next as usize)
}

/// Best `(matches, total distance)` over every injective partial assignment
/// of preds to gts within radius, by enumeration.
pub fn exhaustive_match(preds: &[(f64, f64)], gts: &[(f64, f64, f64)]) -> (usize, f64) {
    fn go(i: usize, preds: &[(f64, f64)], gts: &[(f64, f64, f64)], used: &mut Vec<bool>, acc: (usize, f64), best: &mut (usize, f64)) {
        if i == preds.len() {
            if acc.0 > best.0 || (acc.0 == best.0 && acc.1 < best.1) {
                *best = acc;
            }
            return;
        }
        go(i + 1, preds, gts, used, acc, best);
        for j in 0..gts.len() {
            if used[j] {
                continue;
            }
            let d = ((preds[i].0 - gts[j].0).powi(2) + (preds[i].1 - gts[j].1).powi(2)).sqrt();
            if d <= gts[j].2 {
                used[j] = true;
                go(i + 1, preds, gts, used, (acc.0 + 1, acc.1 + d), best);
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0.0);
    go(0, preds, gts, &mut vec![false; gts.len()], (0, 0.0), &mut best);
    best
}

/// Pipeline configuration for full-network gradient checks: C = 8,
/// depths 1/1/1/1, DCB after stages 3 and 4, 8-wide FPN.
pub fn tiny_pipeline() -> dcst::model::DcstConfig {
    let mut cfg = dcst::model::DcstConfig::toy();
    cfg.encoder.embed_dim = 8;
    cfg.encoder.depths = [1, 1, 1, 1];
    cfg.encoder.img_size = (32, 32);
    cfg.fpn.lateral_dim = 8;
    cfg
}

/// Backward vs Richardson-extrapolated central differences on 20 random
/// coordinates drawn from the input and every parameter of the network.
/// Returns the worst error and where it occurred.
pub fn pipeline_gradient_error(mode: BatchNormMode, side: usize, seed: u64) -> (f64, String) {
    let mut r = rng(seed);
    let model = Dcst::new(&mut r, tiny_pipeline()).unwrap();
    let x = param(&mut r, &[1, 3, side, side]);
    let mut tensors = vec![("input".to_string(), x.clone())];
    model.visit("", &mut |n, t, s| {
        if s == Slot::Param {
            tensors.push((n, t.clone()));
        }
    });
    let probe = {
        let _g = NoGradGuard::new();
        model.forward(&x, mode).unwrap()
    };
    let proj = uniform(&mut r, probe.shape(), -1.0, 1.0);
    let proj_t = Tensor::new(proj.clone(), probe.shape()).unwrap();
    model.forward(&x, mode).unwrap().mul(&proj_t).unwrap().sum().unwrap().backward().unwrap();
    let objective = |_: &Tensor| -> f64 {
        let _g = NoGradGuard::new();
        let y = model.forward(&x, mode).unwrap();
        let d = y.data();
        d.iter().zip(&proj).map(|(&a, &b)| a as f64 * b as f64).sum()
    };
    let mut worst = (0.0f64, String::new());
    for _ in 0..20 {
        let (name, t) = &tensors[r.random_range(0..tensors.len())];
        let i = r.random_range(0..t.numel());
        let analytic = t.grad().map_or(0.0, |g| g[i]) as f64;
        // a ReLU kink inside the stencil spoils one step size but not all of them
        let (e, numeric) = [1e-3, 3e-4, 1e-4]
            .iter()
            .map(|&h| {
                let coarse = finite_diff_grad_at(&objective, t, 2.0 * h, &[i])[0];
                let fine = finite_diff_grad_at(&objective, t, h, &[i])[0];
                let numeric = (4.0 * fine - coarse) / 3.0;
                (relative_error(analytic, numeric), numeric)
            })
            .fold((f64::INFINITY, 0.0), |a, b| if b.0 < a.0 { b } else { a });
        if e > worst.0 {
            worst = (e, format!("{name}[{i}] analytic {analytic:.6} numeric {numeric:.6}"));
        }
    }
    worst
}
