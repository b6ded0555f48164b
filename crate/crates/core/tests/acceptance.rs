//! One pass/fail line per acceptance criterion. Runs as a plain binary
//! (`harness = false`) so the lines appear in `cargo test` output.

mod common;

use std::time::{Duration, Instant};

use common::{exhaustive_match, flood_fill, footprint, grad_check, param, pipeline_gradient_error, rng, span, uniform};
use dcst::dcb::{map_to_tokens, tokens_to_map, DcbConfig, DilatedConvBlock};
use dcst::instance::{connected_components, BinaryMap, Connectivity};
use dcst::metrics::{match_points, HeadAnnotation};
use dcst::model::DcstConfig;
use dcst::swin::{window_partition, window_reverse, TokenGrid};
use dcst::tensor::{Activation, BatchNormMode, ConvSpec, RunningStats, Tensor};
use dcst::train::{
    default_thresholds, evaluate, predict_scores, prepare_data, threshold_sweep_scores, window_means, TrainConfig,
    Trainer,
};
use rand::Rng;

const OP_TOL: f64 = 1e-3;
const PIPELINE_TOL: f64 = 1e-2;
const TARGET_F1: f64 = 0.85;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_ITERS: u64 = 600;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn toy_config() -> TrainConfig {
    let mut c = TrainConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.cfg")).expect("toy config");
    c.checkpoint = None;
    c
}

fn criterion_1() -> Outcome {
    let rows = [((0.822, 0.734), 77.5), ((0.841, 0.790), 81.4)];
    let mut pass = true;
    let mut parts = Vec::new();
    for ((p, r), want) in rows {
        let f1 = 100.0 * dcst::metrics::f1_score(p, r);
        pass &= (f1 - want).abs() <= 0.1;
        parts.push(format!("P={p} R={r} -> F1={f1:.2} (want {want} +- 0.1)"));
    }
    outcome(pass, parts.join("; "))
}

fn op_errors() -> Vec<(&'static str, f64)> {
    let mut r = rng(100);
    let mut out = Vec::new();
    let (a, b) = (param(&mut r, &[3, 4]), param(&mut r, &[4, 5]));
    out.push(("matmul", grad_check(&[a, b], |t| t[0].matmul(&t[1]).unwrap(), 1, 64)));
    let (a, b) = (param(&mut r, &[2, 3, 4]), param(&mut r, &[2, 5, 4]));
    out.push(("bmm", grad_check(&[a, b], |t| t[0].bmm(&t[1], true).unwrap(), 2, 64)));
    let (x, y, bias) = (param(&mut r, &[2, 3, 4]), param(&mut r, &[2, 3, 4]), param(&mut r, &[4]));
    out.push((
        "add/sub/mul/bias/scale",
        grad_check(
            &[x.clone(), y.clone(), bias],
            |t| t[0].mul(&t[1]).unwrap().sub(&t[0]).unwrap().add(&t[1]).unwrap().add_bias(&t[2]).unwrap().scale(0.7).unwrap(),
            3,
            64,
        ),
    ));
    out.push((
        "reshape/permute/gather",
        grad_check(
            &[x.clone()],
            |t| {
                let idx: std::rc::Rc<[usize]> = (0..30).map(|i| if i % 7 == 0 { usize::MAX } else { (i * 5) % 24 }).collect();
                t[0].permute(&[2, 0, 1]).unwrap().reshape(&[4, 6]).unwrap().gather(idx, &[5, 6]).unwrap()
            },
            4,
            64,
        ),
    ));
    out.push(("sum/mean", grad_check(&[x.clone()], |t| t[0].sum().unwrap().add(&t[0].mean().unwrap()).unwrap(), 5, 64)));
    out.push(("mse", grad_check(&[x.clone()], |t| t[0].mse(&y).unwrap(), 6, 64)));
    for (name, kind) in [("gelu", Activation::Gelu), ("sigmoid", Activation::Sigmoid), ("relu", Activation::Relu)] {
        out.push((name, grad_check(&[x.clone()], |t| t[0].activation(kind).unwrap(), 7, 64)));
    }
    out.push(("softmax", grad_check(&[x.clone()], |t| t[0].softmax(2).unwrap(), 8, 64)));
    let (x2, g, b2) = (param(&mut r, &[4, 6]), param(&mut r, &[6]), param(&mut r, &[6]));
    out.push(("layer_norm", grad_check(&[x2, g, b2], |t| t[0].layer_norm(&t[1], &t[2]).unwrap(), 9, 64)));
    let (x4, g, b2) = (param(&mut r, &[2, 3, 3, 3]), param(&mut r, &[3]), param(&mut r, &[3]));
    for (name, mode) in [("batch_norm train", BatchNormMode::Train), ("batch_norm eval", BatchNormMode::Eval)] {
        let stats = RunningStats::new(3);
        out.push((
            name,
            grad_check(&[x4.clone(), g.clone(), b2.clone()], |t| t[0].batch_norm(&t[1], &t[2], &stats, mode).unwrap(), 10, 64),
        ));
    }
    let spec = ConvSpec::new(2, 3, 3).padding(3).dilation(3);
    let (xc, w, bc) = (param(&mut r, &[2, 2, 7, 7]), param(&mut r, &[3, 2, 3, 3]), param(&mut r, &[3]));
    out.push(("conv2d dilated", grad_check(&[xc, w, bc], |t| t[0].conv2d(&t[1], Some(&t[2]), spec).unwrap(), 11, 80)));
    let spec = ConvSpec::upsample(3, 2, 2).unwrap();
    let (xt, wt, bt) = (param(&mut r, &[2, 3, 3, 3]), param(&mut r, &[3, 2, 4, 4]), param(&mut r, &[2]));
    out.push((
        "conv_transpose2d",
        grad_check(&[xt, wt, bt], |t| t[0].conv_transpose2d(&t[1], Some(&t[2]), spec).unwrap(), 12, 80),
    ));
    out
}

fn criterion_2() -> Outcome {
    let ops = op_errors();
    let (worst_op, worst) = ops.iter().fold(("", 0.0f64), |a, &(n, e)| if e > a.1 { (n, e) } else { a });
    let mut pass = worst < OP_TOL;
    let mut parts = vec![format!("{} ops, worst {worst_op} {worst:.2e} (< {OP_TOL:.0e})", ops.len())];
    for mode in [BatchNormMode::Eval, BatchNormMode::Train] {
        let (e, at) = pipeline_gradient_error(mode, 8, 0);
        pass &= e < PIPELINE_TOL;
        parts.push(format!("pipeline 8x8 {mode:?} {e:.2e} (< {PIPELINE_TOL:.0e}) at {at}"));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_3() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (rates, want) in [((2, 2), 9), ((2, 3), 11), ((2, 5), 15)] {
        let mut r = rng(200);
        let block = DilatedConvBlock::new(&mut r, 1, rates);
        for conv in [&block.conv1, &block.conv2] {
            let v = uniform(&mut r, conv.weight.shape(), 0.5, 1.0);
            conv.weight.data_mut().copy_from_slice(&v);
        }
        let x = Tensor::new(uniform(&mut r, &[1, 1, 17, 17], 0.5, 1.0), &[1, 1, 17, 17]).unwrap();
        let hits = footprint(|x| block.forward_map(x, BatchNormMode::Eval).unwrap(), &x, 8, 8);
        let got = span(&hits);
        pass &= got == (want, want) && DcbConfig { rates, stages: vec![] }.span() == want;
        parts.push(format!("rates {rates:?} -> {}x{}", got.0, got.1));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_4() -> Outcome {
    let mut r = rng(300);
    let mut pass = true;
    let trials = 200;
    for _ in 0..trials {
        let (n, h, w, c, m) = (r.random_range(1..3), r.random_range(1..15), r.random_range(1..15), r.random_range(1..5), r.random_range(1..8));
        let t = Tensor::new(uniform(&mut r, &[n, h * w, c], -1.0, 1.0), &[n, h * w, c]).unwrap();
        let g = TokenGrid::new(t, h, w).unwrap();
        let back = window_reverse(&window_partition(&g, m).unwrap(), m, h, w).unwrap();
        pass &= back.tokens.to_vec() == g.tokens.to_vec();
        let map = tokens_to_map(&g).unwrap();
        pass &= map.shape() == [n, c, h, w];
        pass &= map_to_tokens(&map).unwrap().tokens.to_vec() == g.tokens.to_vec();
    }
    let cfg = DcstConfig::toy().encoder;
    let mut stages = Vec::new();
    for s in 0..4 {
        let st = cfg.stage(s);
        let (h, w) = (cfg.img_size.0 / (cfg.patch_size << s), cfg.img_size.1 / (cfg.patch_size << s));
        let t = Tensor::new(uniform(&mut r, &[2, h * w, st.channels], -1.0, 1.0), &[2, h * w, st.channels]).unwrap();
        let g = TokenGrid::new(t, h, w).unwrap();
        let block = DilatedConvBlock::new(&mut r, st.channels, (2, 3));
        let out = block.forward_grid(&g, BatchNormMode::Train).unwrap();
        pass &= out.tokens.shape() == g.tokens.shape() && (out.height, out.width) == (h, w);
        stages.push(format!("{}x{}", h * w, st.channels));
    }
    outcome(pass, format!("{trials} random partition/reverse and token/map roundtrips bit-exact; DCB keeps tokens x dim on stages {}", stages.join(", ")))
}

fn criterion_5() -> Outcome {
    let mut r = rng(500);
    let mut cc_ok = 0;
    for _ in 0..200 {
        let (h, w) = (r.random_range(1..=64), r.random_range(1..=64));
        let d = r.random_range(0.05..0.7);
        let data: Vec<bool> = (0..h * w).map(|_| r.random_bool(d)).collect();
        let m = BinaryMap::new(h, w, data).unwrap();
        let ok = [Connectivity::Four, Connectivity::Eight].iter().all(|&conn| {
            let cc = connected_components(&m, conn);
            let (labels, count) = flood_fill(&m.data, h, w, conn.offsets());
            cc.count == count && cc.labels == labels
        });
        cc_ok += ok as usize;
    }
    let mut match_ok = 0;
    for _ in 0..500 {
        let (np, ng) = (r.random_range(0..=6), r.random_range(0..=6));
        let preds: Vec<(f64, f64)> = (0..np).map(|_| (r.random_range(0.0..20.0), r.random_range(0.0..20.0))).collect();
        let gts: Vec<HeadAnnotation> = (0..ng)
            .map(|_| HeadAnnotation::new(r.random_range(0.0..20.0), r.random_range(0.0..20.0), r.random_range(1.0..8.0), r.random_range(1.0..8.0)))
            .collect();
        let m = match_points(&preds, &gts);
        let oracle: Vec<(f64, f64, f64)> = gts.iter().map(|g| (g.x, g.y, g.sigma())).collect();
        let (count, dist) = exhaustive_match(&preds, &oracle);
        let got: f64 = m
            .matched
            .iter()
            .map(|&(i, j)| ((preds[i].0 - gts[j].x).powi(2) + (preds[i].1 - gts[j].y).powi(2)).sqrt())
            .sum();
        match_ok += (m.tp() == count && (got - dist).abs() < 1e-9) as usize;
    }
    outcome(cc_ok == 200 && match_ok == 500, format!("components {cc_ok}/200 maps; matching {match_ok}/500 trials"))
}

/// Least-squares slope of `ys` against their index.
fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = ys.iter().enumerate().map(|(i, y)| (i as f64 - mx) * (y - my)).sum();
    let den: f64 = (0..ys.len()).map(|i| (i as f64 - mx).powi(2)).sum();
    num / den
}

/// Kendall rank correlation of `ys` with their index.
fn kendall_tau(ys: &[f64]) -> f64 {
    let n = ys.len();
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            s += (ys[j] > ys[i]) as i64 - (ys[j] < ys[i]) as i64;
        }
    }
    s as f64 / (n * (n - 1) / 2) as f64
}

struct Trained {
    trainer: Trainer,
    val: Vec<dcst::data::SceneSample>,
}

fn train_toy(config: TrainConfig) -> (Trained, Duration) {
    let (train, val) = prepare_data(&config).expect("data");
    let start = Instant::now();
    let mut trainer = Trainer::new(config).expect("trainer");
    trainer.run(&train, |_, _| {}).expect("training");
    (Trained { trainer, val }, start.elapsed())
}

fn best_val_f1(t: &Trained) -> (f64, f32, f32) {
    let scores = predict_scores(&t.trainer.model, &t.val).unwrap();
    let sweep = threshold_sweep_scores(&scores, &t.val, &t.trainer.config.thresholds).unwrap();
    (sweep.best_f1_row().report.localization.f1, sweep.best_f1, sweep.best_mae)
}

fn criterion_6() -> (Outcome, Trained) {
    let config = toy_config();
    let iters = config.iters;
    let (t, elapsed) = train_toy(config);
    let (f1, t_f1, t_mae) = best_val_f1(&t);
    let means = window_means(&t.trainer.losses, 50);
    let (first, last) = (means[0], means[means.len() - 1]);
    let (k, tau) = (slope(&means), kendall_tau(&means));
    let trend = last < first && k < 0.0 && tau < 0.0;
    let fast = elapsed < Duration::from_secs(30 * 60);
    let pass = f1 >= TARGET_F1 && trend && fast;
    let detail = format!(
        "val F1 {f1:.3} at t={t_f1:.2} (>= {TARGET_F1}) after {iters} iters in {:.0}s; 50-iter loss means {first:.4} -> {last:.4}, slope {k:.2e}, Kendall tau {tau:.2}; argmin-MAE t={t_mae:.2} {} argmax-F1 t={t_f1:.2}",
        elapsed.as_secs_f64(),
        if t_mae <= t_f1 { "<=" } else { ">" },
    );
    (outcome(pass, detail), t)
}

fn criterion_7() -> Outcome {
    let mut arms = Vec::new();
    for (name, dcb) in [("DCST+FPN", DcbConfig::default()), ("ST+FPN", DcbConfig::disabled())] {
        let f1s: Vec<f64> = ABLATION_SEEDS
            .iter()
            .map(|&seed| {
                let c = TrainConfig { seed, iters: ABLATION_ITERS, ..toy_config() }.with_dcb(dcb.clone());
                best_val_f1(&train_toy(c).0).0
            })
            .collect();
        let mean = f1s.iter().sum::<f64>() / f1s.len() as f64;
        arms.push((name, f1s, mean));
    }
    let margin = arms[0].2 - arms[1].2;
    let detail = format!(
        "seeds {ABLATION_SEEDS:?}, {ABLATION_ITERS} iters each; {}; margin {margin:+.3} (soft)",
        arms.iter()
            .map(|(n, f, m)| format!("{n} F1 {} mean {m:.3}", f.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("/")))
            .collect::<Vec<_>>()
            .join("; ")
    );
    outcome(margin >= 0.0, detail)
}

fn criterion_8(t: &Trained) -> Outcome {
    let grid = default_thresholds();
    let scores = predict_scores(&t.trainer.model, &t.val).unwrap();
    let sweep = threshold_sweep_scores(&scores, &t.val, &grid).unwrap();
    let mut agree = 0;
    for row in &sweep.rows {
        agree += (evaluate(&t.trainer.model, &t.val, row.threshold).unwrap() == row.report) as usize;
    }
    let f1s: Vec<f64> = sweep.rows.iter().map(|r| r.report.localization.f1).collect();
    let maes: Vec<f64> = sweep.rows.iter().map(|r| r.report.counting.mae).collect();
    let max_f1 = f1s.iter().cloned().fold(f64::MIN, f64::max);
    let min_mae = maes.iter().cloned().fold(f64::MAX, f64::min);
    let argmax = grid[f1s.iter().position(|&v| v == max_f1).unwrap()];
    let argmin = grid[maes.iter().position(|&v| v == min_mae).unwrap()];
    let pass = sweep.rows.len() == 11 && agree == 11 && sweep.best_f1 == argmax && sweep.best_mae == argmin;
    outcome(
        pass,
        format!(
            "{} rows over {:.2}..{:.2}; {agree}/11 rows equal a separate evaluate call; argmax-F1 {:.2}, argmin-MAE {:.2}",
            sweep.rows.len(),
            grid[0],
            grid[grid.len() - 1],
            sweep.best_f1,
            sweep.best_mae
        ),
    )
}

fn report(n: usize, o: &Outcome, took: Duration, soft: bool) {
    let verdict = if o.pass { "PASS" } else if soft { "FAIL (soft)" } else { "FAIL" };
    println!("criterion {n}: {verdict} [{:.1}s] {}", took.as_secs_f64(), o.detail);
}

fn main() {
    // `cargo test -- --list` and filtered runs probe test binaries; stay quiet for those
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let mut hard_fail = false;
    let timed = |f: &mut dyn FnMut() -> Outcome| {
        let s = Instant::now();
        let o = f();
        (o, s.elapsed())
    };
    let checks: [fn() -> Outcome; 5] = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5];
    for (i, f) in checks.iter().enumerate() {
        let (o, d) = timed(&mut || f());
        report(i + 1, &o, d, false);
        hard_fail |= !o.pass;
    }
    let s = Instant::now();
    let (o6, trained) = criterion_6();
    report(6, &o6, s.elapsed(), false);
    hard_fail |= !o6.pass;
    let (o7, d7) = timed(&mut criterion_7);
    report(7, &o7, d7, true);
    let (o8, d8) = timed(&mut || criterion_8(&trained));
    report(8, &o8, d8, false);
    hard_fail |= !o8.pass;
    if hard_fail {
        std::process::exit(1);
    }
}
