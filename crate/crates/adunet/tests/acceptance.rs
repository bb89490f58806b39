//! Acceptance suite: one test per criterion, each printing a PASS line
//! (visible with `cargo test --test acceptance -- --nocapture`).
//!
//! The expensive training runs are shared between criteria through
//! `OnceLock` so the suite stays within its time budget.

use std::sync::OnceLock;
use std::time::Instant;

use autograd::check::{max_rel_error, numerical_grad};
use autograd::{Tape, Var};
use ndarray::{Array1, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use adunet::attention::{attention_probs, window_partition, window_reverse, AttentionParams, AttnVars};
use adunet::config::{DecoderMode, NetworkConfig};
use adunet::data::{synth_dataset, PairedDataset, SynthParams};
use adunet::fusion::{cff, cff_tape, gcff, gcff_tape, FusionParams, FusionVars};
use adunet::image::{FeatureMap, Image};
use adunet::metrics::{
    gaussian_kernel, loss_tape, psnr, ssim, ssim_window_for, Metrics, PSNR_CAP, SSIM_C1, SSIM_C2,
    SSIM_SIGMA,
};
use adunet::network::{count_parameters, forward, shape_trace};
use adunet::nn::{BnUpdates, BnVars, Mode};
use adunet::params::ParameterStore;
use adunet::trainer::{evaluate, input_metrics, train, PlateauSchedule, TrainConfig, TrainReport};
use adunet::config::LossMode;

fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let data: Vec<f32> = (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    Image::new(Array3::from_shape_vec((3, h, w), data).unwrap()).unwrap()
}

fn rand_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    let data: Vec<f32> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureMap::new(Array3::from_shape_vec((c, h, w), data).unwrap(), 0)
}

// ---- criterion 1 ----------------------------------------------------------

#[test]
fn criterion_01_structural_fidelity() {
    let started = Instant::now();
    let cfg = NetworkConfig::adu_net();
    let trace = shape_trace(&cfg, 512, 256).unwrap();
    let get = |label: &str| -> Vec<usize> {
        trace
            .iter()
            .find(|(l, _)| l == label)
            .unwrap_or_else(|| panic!("missing stage {label}"))
            .1
            .clone()
    };
    assert_eq!(get("input"), vec![1, 3, 512, 256]);
    assert_eq!(get("encoder.F0"), vec![1, 32, 512, 256]);
    assert_eq!(get("encoder.F1"), vec![1, 64, 256, 128]);
    assert_eq!(get("encoder.F2"), vec![1, 128, 128, 64]);
    assert_eq!(get("encoder.F3"), vec![1, 256, 64, 32]);
    assert_eq!(get("encoder.F4"), vec![1, 256, 32, 16]);
    assert_eq!(get("adb0.Zc"), vec![1, 128, 64, 32]);
    assert_eq!(get("adb0.Zs"), vec![1, 128, 64, 32]);
    assert_eq!(get("adb1.Zc"), vec![1, 64, 128, 64]);
    assert_eq!(get("adb2.Zc"), vec![1, 32, 256, 128]);
    assert_eq!(get("adb3.Zc"), vec![1, 16, 512, 256]);
    assert_eq!(get("adb3.Zs"), vec![1, 16, 512, 256]);
    assert_eq!(get("head.Yc"), vec![1, 3, 512, 256]);
    assert_eq!(get("head.Ys"), vec![1, 3, 512, 256]);
    assert_eq!(get("output.Y"), vec![1, 3, 512, 256]);
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "shape trace took {secs:.1}s, budget 60s");
    println!("criterion 1 (structural fidelity at 512x256): PASS ({secs:.1}s)");
}

// ---- criterion 2 ----------------------------------------------------------

fn conv_params(cin: usize, cout: usize) -> usize {
    cout * cin * 9 + cout
}

/// Independent arithmetic over the kernel table rows: every 3x3 convolution
/// in the encoder, decoder blocks, and heads, weights plus biases.
fn table_conv_subtotal(c: [usize; 5]) -> usize {
    let mut total = conv_params(3, c[0]) + conv_params(c[0], c[0]);
    for i in 1..5 {
        total += conv_params(c[i - 1], c[i]) + conv_params(c[i], c[i]);
    }
    let mut stream = conv_params(c[3], c[2]) + conv_params(c[2], c[2]); // adb0 out
    stream += conv_params(2 * c[2], c[2]) + conv_params(c[2], c[2]); // adb1 in
    stream += conv_params(c[2], c[1]) + conv_params(c[1], c[1]); // adb1 out
    stream += conv_params(2 * c[1], c[1]) + conv_params(c[1], c[1]); // adb2 in
    stream += conv_params(c[1], c[0]) + conv_params(c[0], c[0]); // adb2 out
    stream += conv_params(2 * c[0], c[0]) + conv_params(c[0], c[0]); // adb3 in
    stream += conv_params(c[0], c[0] / 2) + conv_params(c[0] / 2, c[0] / 2); // adb3 out
    stream += conv_params(c[0] / 2, 3) + conv_params(3, 3); // head
    total + 2 * stream
}

#[test]
fn criterion_02_parameter_count() {
    let base = count_parameters(&NetworkConfig::adu_net());
    let plus = count_parameters(&NetworkConfig::adu_net_plus());

    let base_conv_oracle = table_conv_subtotal([32, 64, 128, 256, 256]);
    let plus_conv_oracle = table_conv_subtotal([64, 128, 256, 512, 512]);
    assert_eq!(
        base.conv, base_conv_oracle,
        "base conv subtotal must match the kernel table exactly"
    );
    assert_eq!(
        plus.conv, plus_conv_oracle,
        "plus conv subtotal must match the kernel table exactly"
    );

    let base_total = base.total as f64;
    let plus_total = plus.total as f64;
    assert!(
        (0.6 * 6.63e6..=1.5 * 6.63e6).contains(&base_total),
        "base total {base_total} outside [0.6, 1.5] x 6.63e6"
    );
    assert!(
        (0.6 * 26.45e6..=1.5 * 26.45e6).contains(&plus_total),
        "plus total {plus_total} outside [0.6, 1.5] x 26.45e6"
    );
    let ratio = plus_total / base_total;
    assert!(
        (3.6..=4.4).contains(&ratio),
        "plus/base ratio {ratio:.3} outside [3.6, 4.4]"
    );
    // the census must agree with an actually instantiated store
    assert_eq!(
        base.total,
        ParameterStore::init(&NetworkConfig::adu_net()).num_scalars()
    );
    println!(
        "criterion 2 (parameter count): PASS (conv {} exact, base {:.2}M, plus {:.2}M, ratio {:.2})",
        base.conv,
        base_total / 1e6,
        plus_total / 1e6,
        ratio
    );
}

// ---- criterion 3 ----------------------------------------------------------

fn ulps_apart(a: f32, b: f32) -> u64 {
    if a == b {
        return 0;
    }
    if a.is_nan() || b.is_nan() {
        return u64::MAX;
    }
    let (ba, bb) = (a.to_bits() as i64, b.to_bits() as i64);
    (ba - bb).unsigned_abs()
}

#[test]
fn criterion_03_residual_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut worst = 0u64;
    for draw in 0..100 {
        let mut cfg = NetworkConfig::tiny();
        cfg.init_seed = draw;
        let store = ParameterStore::init(&cfg);
        let img = rand_image(&mut rng, 16, 16);
        let out = forward(&img, &store, &cfg).unwrap();
        for ((&i, (&yc, &ys)), &pre) in img
            .data()
            .iter()
            .zip(
                out.contamination_residual
                    .iter()
                    .zip(out.scene_residual.iter()),
            )
            .zip(out.pre_clamp.iter())
        {
            let ulps = ulps_apart(i - yc - ys, pre);
            worst = worst.max(ulps);
            assert!(
                ulps <= 2,
                "draw {draw}: recomposition {} vs {} differs by {} ulp",
                i - yc - ys,
                pre,
                ulps
            );
        }
    }
    println!("criterion 3 (residual identity, 100 draws): PASS (worst {worst} ulp)");
}

// ---- criterion 4 ----------------------------------------------------------

fn rand_fusion_params(rng: &mut ChaCha8Rng, c: usize) -> FusionParams {
    let mut p = FusionParams::identity(c);
    for v in p.conv1_w.iter_mut().chain(p.conv2_w.iter_mut()) {
        *v = rng.random_range(-0.5..0.5);
    }
    for v in p.conv1_b.iter_mut().chain(p.conv2_b.iter_mut()) {
        *v = rng.random_range(-0.2..0.2);
    }
    p
}

#[test]
fn criterion_04_fusion_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for trial in 0..100 {
        let c = [2usize, 4, 8][trial % 3];
        let f = rand_map(&mut rng, c, 6, 6);
        let p = rand_fusion_params(&mut rng, c);
        let cf = cff(&f, &f, &p).unwrap();
        let gf = gcff(&f, &f, &p).unwrap();
        for (a, b) in f.data.iter().zip(cf.data.iter()) {
            assert!((a - b).abs() < 1e-6, "trial {trial}: CFF(F,F) != F");
        }
        for (a, b) in f.data.iter().zip(gf.data.iter()) {
            assert!((a - b).abs() < 1e-6, "trial {trial}: GCFF(F,F) != F");
        }
        // convex combination bound on distinct inputs
        let fb = rand_map(&mut rng, c, 6, 6);
        for out in [cff(&f, &fb, &p).unwrap(), gcff(&f, &fb, &p).unwrap()] {
            for ((&a, &b), &y) in f.data.iter().zip(fb.data.iter()).zip(out.data.iter()) {
                let (lo, hi) = (a.min(b), a.max(b));
                assert!(
                    y >= lo - 1e-5 && y <= hi + 1e-5,
                    "trial {trial}: {y} outside convex hull [{lo}, {hi}]"
                );
            }
        }
    }
    println!("criterion 4 (fusion identities + convexity, 100 trials): PASS");
}

// ---- criterion 5 ----------------------------------------------------------

#[test]
fn criterion_05_attention_correctness() {
    // partition/reverse round trip on 20 sizes, many non-divisible
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for trial in 0..20 {
        let c = rng.random_range(1..6usize);
        let h = rng.random_range(1..30usize);
        let w = rng.random_range(1..30usize);
        let win = rng.random_range(1..9usize);
        let x = rand_map(&mut rng, c, h, w);
        let (windows, info) = window_partition(&x.data, win);
        let expected_windows = h.div_ceil(win) * w.div_ceil(win);
        assert_eq!(windows.shape()[0], expected_windows, "trial {trial}");
        let back = window_reverse(&windows, &info, win);
        assert_eq!(back, x.data, "trial {trial}: round trip not exact");
    }

    // SW-MSA cross-boundary leakage on a labeled 2w x 2w input
    let win = 4usize;
    let (h, w) = (2 * win, 2 * win);
    let shift = win / 2;
    let heads = 2usize;
    let x = rand_map(&mut rng, 8, h, w);
    let mut p = AttentionParams::zeros(8, win, heads);
    for m in [&mut p.q_w, &mut p.k_w, &mut p.v_w, &mut p.proj_w] {
        for v in m.iter_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    let probs = attention_probs(&x, &p, win, heads, true).unwrap();
    let nww = w / win;
    let mut leaks_checked = 0usize;
    let mut max_leak = 0f32;
    for wk in 0..(h / win) * nww {
        let (wy, wx) = (wk / nww, wk % nww);
        for ti in 0..win * win {
            let (iy, ix) = (wy * win + ti / win, wx * win + ti % win);
            let (oy, ox) = ((iy + shift) % h, (ix + shift) % w);
            for tj in 0..win * win {
                let (jy, jx) = (wy * win + tj / win, wx * win + tj % win);
                let (py, px) = ((jy + shift) % h, (jx + shift) % w);
                let wrapped_y =
                    (oy < shift) != (py < shift) && (iy >= h - shift || jy >= h - shift);
                let wrapped_x =
                    (ox < shift) != (px < shift) && (ix >= w - shift || jx >= w - shift);
                if wrapped_y || wrapped_x {
                    for hd in 0..heads {
                        let pr = probs[[wk * heads + hd, ti, tj]];
                        max_leak = max_leak.max(pr);
                        assert!(pr < 1e-6, "wrapped pair got weight {pr}");
                        leaks_checked += 1;
                    }
                }
            }
        }
    }
    assert!(leaks_checked > 0);

    // softmax normalization
    let probs = attention_probs(&x, &p, win, heads, false).unwrap();
    for b in 0..probs.shape()[0] {
        for i in 0..probs.shape()[1] {
            let sum: f32 = (0..probs.shape()[2]).map(|j| probs[[b, i, j]]).sum();
            assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
        }
    }
    println!(
        "criterion 5 (attention correctness): PASS ({leaks_checked} wrapped pairs, max leak {max_leak:.1e})"
    );
}

// ---- criterion 6 ----------------------------------------------------------

fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .unwrap()
}

/// Gradient-check a scalar tape program against central finite differences
/// for every input, at the criterion tolerance 1e-3.
fn gradcheck<F>(inputs: Vec<ArrayD<f64>>, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let scalar = |xs: &[ArrayD<f64>]| -> f64 {
        let mut t = Tape::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let out = build(&mut t, &vars);
        t.scalar(out)
    };
    let mut t = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
    let out = build(&mut t, &vars);
    let grads = t.backward(out);
    let mut worst = 0.0f64;
    for which in 0..inputs.len() {
        let analytic = grads
            .get(vars[which])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(inputs[which].raw_dim()));
        let numeric = numerical_grad(&scalar, &inputs, which, 1e-5);
        let err = max_rel_error(&analytic, &numeric, 1e-7);
        assert!(
            err < 1e-3,
            "input {which}: gradient rel err {err:.3e} >= 1e-3"
        );
        worst = worst.max(err);
    }
    worst
}

fn fusion_vars_from(inputs: &[Var]) -> FusionVars<f64> {
    // layout: [fa, fb, w1, b1, g1, be1, w2, b2, g2, be2]
    let bn = |g: Var, b: Var, name: &str| BnVars {
        name: name.to_string(),
        gamma: g,
        beta: b,
        running_mean: Array1::zeros(8),
        running_var: Array1::ones(8),
    };
    FusionVars {
        conv1_w: inputs[2],
        conv1_b: inputs[3],
        bn1: bn(inputs[4], inputs[5], "bn1"),
        conv2_w: inputs[6],
        conv2_b: inputs[7],
        bn2: bn(inputs[8], inputs[9], "bn2"),
    }
}

#[test]
fn criterion_06_gradient_checks() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(60);

    // (a) negative-SSIM loss w.r.t. the restored image, 8x8 float64
    let gt = rand_arr(&mut rng, &[1, 3, 8, 8], 0.1, 0.9);
    let y = rand_arr(&mut rng, &[1, 3, 8, 8], 0.1, 0.9);
    let gt_fixed = gt.clone();
    let err_a = gradcheck(vec![y], move |t, v| {
        let g = t.leaf(gt_fixed.clone(), false);
        loss_tape(t, g, v[0], LossMode::Ssim)
    });

    // shared fusion input/parameter layout (train-mode batch norms, batch 2)
    let fusion_inputs = |rng: &mut ChaCha8Rng| -> Vec<ArrayD<f64>> {
        vec![
            rand_arr(rng, &[2, 8, 8, 8], -1.0, 1.0),          // fa
            rand_arr(rng, &[2, 8, 8, 8], -1.0, 1.0),          // fb
            rand_arr(rng, &[8, 8, 1, 1], -0.5, 0.5),          // conv1 w
            rand_arr(rng, &[8], -0.2, 0.2),                   // conv1 b
            rand_arr(rng, &[8], 0.8, 1.2),                    // bn1 gamma
            rand_arr(rng, &[8], -0.2, 0.2),                   // bn1 beta
            rand_arr(rng, &[8, 8, 1, 1], -0.5, 0.5),          // conv2 w
            rand_arr(rng, &[8], -0.2, 0.2),                   // conv2 b
            rand_arr(rng, &[8], 0.8, 1.2),                    // bn2 gamma
            rand_arr(rng, &[8], -0.2, 0.2),                   // bn2 beta
        ]
    };

    // (b) CFF
    let err_b = gradcheck(fusion_inputs(&mut rng), |t, v| {
        let p = fusion_vars_from(v);
        let mut updates = BnUpdates::default();
        let y = cff_tape(t, v[0], v[1], &p, Mode::Train, &mut updates);
        let sq = t.mul(y, y);
        t.mean_all(sq)
    });

    // (c) GCFF
    let err_c = gradcheck(fusion_inputs(&mut rng), |t, v| {
        let p = fusion_vars_from(v);
        let mut updates = BnUpdates::default();
        let y = gcff_tape(t, v[0], v[1], &p, Mode::Train, &mut updates);
        let sq = t.mul(y, y);
        t.mean_all(sq)
    });

    // (d) W-MSA on an 8x8x8 input, window 4, 2 heads
    let attn_inputs: Vec<ArrayD<f64>> = {
        let mut v = vec![rand_arr(&mut rng, &[1, 8, 8, 8], -1.0, 1.0)];
        v.push(rand_arr(&mut rng, &[8], 0.8, 1.2)); // ln gamma
        v.push(rand_arr(&mut rng, &[8], -0.2, 0.2)); // ln beta
        for _ in 0..4 {
            v.push(rand_arr(&mut rng, &[8, 8], -0.4, 0.4)); // q/k/v/proj w
            v.push(rand_arr(&mut rng, &[8], -0.2, 0.2)); // biases
        }
        v.push(rand_arr(&mut rng, &[49, 2], -0.2, 0.2)); // rel bias (2*4-1)^2 x heads
        v
    };
    let err_d = gradcheck(attn_inputs, |t, v| {
        let p = AttnVars {
            ln_gamma: v[1],
            ln_beta: v[2],
            q_w: v[3],
            q_b: v[4],
            k_w: v[5],
            k_b: v[6],
            v_w: v[7],
            v_b: v[8],
            proj_w: v[9],
            proj_b: v[10],
            rel_bias: v[11],
        };
        let out = adunet::attention::window_attention_tape(t, v[0], &p, 4, 2, false);
        let sq = t.mul(out.out, out.out);
        t.mean_all(sq)
    });

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 300.0, "gradient checks took {secs:.0}s, budget 300s");
    println!(
        "criterion 6 (gradient checks): PASS (ssim {err_a:.1e}, cff {err_b:.1e}, gcff {err_c:.1e}, wmsa {err_d:.1e}; {secs:.0}s)"
    );
}

// ---- criterion 7 ----------------------------------------------------------

/// Direct per-window SSIM evaluation, independent of the tape path.
fn ssim_scalar_reference(a: &Image, b: &Image) -> f64 {
    let (h, w) = (a.height(), a.width());
    let win = ssim_window_for(h, w);
    let k = gaussian_kernel::<f64>(win, SSIM_SIGMA);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for oy in 0..h - win + 1 {
            for ox in 0..w - win + 1 {
                let (mut ma, mut mb) = (0.0f64, 0.0f64);
                let (mut saa, mut sbb, mut sab) = (0.0f64, 0.0, 0.0);
                for dy in 0..win {
                    for dx in 0..win {
                        let wgt = k[dy] * k[dx];
                        let va = a.data()[[c, oy + dy, ox + dx]] as f64;
                        let vb = b.data()[[c, oy + dy, ox + dx]] as f64;
                        ma += wgt * va;
                        mb += wgt * vb;
                        saa += wgt * va * va;
                        sbb += wgt * vb * vb;
                        sab += wgt * va * vb;
                    }
                }
                let (va, vb, cab) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    total / count as f64
}

#[test]
fn criterion_07_metric_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let img = rand_image(&mut rng, 16, 16);
    assert_eq!(ssim(&img, &img).unwrap(), 1.0, "ssim(x,x) must be exactly 1");

    let zeros = Image::zeros(8, 8);
    let b10 = Image::new(Array3::from_elem((3, 8, 8), 0.1f32)).unwrap();
    let b01 = Image::new(Array3::from_elem((3, 8, 8), 0.01f32)).unwrap();
    let p10 = psnr(&zeros, &b10).unwrap();
    let p01 = psnr(&zeros, &b01).unwrap();
    assert!((p10 - 20.0).abs() < 1e-6, "psnr(offset 0.1) = {p10}");
    assert!((p01 - 40.0).abs() < 1e-6, "psnr(offset 0.01) = {p01}");
    assert_eq!(psnr(&img, &img).unwrap(), PSNR_CAP);

    let mut worst = 0.0f64;
    for _ in 0..10 {
        let a = rand_image(&mut rng, 16, 16);
        let b = rand_image(&mut rng, 16, 16);
        let got = ssim(&a, &b).unwrap();
        let want = ssim_scalar_reference(&a, &b);
        worst = worst.max((got - want).abs());
        assert!(
            (got - want).abs() < 1e-6,
            "ssim {got} vs reference {want}"
        );
    }
    println!("criterion 7 (metric correctness): PASS (max reference gap {worst:.1e})");
}

// ---- criteria 8 + 12 (shared overfit run) ---------------------------------

struct OverfitOutcome {
    report: TrainReport,
    train_metrics: Metrics,
    input_psnr: f64,
}

fn overfit_setup() -> (NetworkConfig, TrainConfig, PairedDataset) {
    let mut cfg = NetworkConfig::tiny();
    cfg.init_seed = 42;
    // Memorization setup: MSE drives pixel-exact fitting far faster than
    // the SSIM objective, and full-batch steps remove the gradient noise
    // that otherwise floors the loss within the step budget. Plateau decay
    // is effectively off: at one step per epoch the five-epoch patience
    // window would span only five optimizer steps.
    cfg.loss_mode = LossMode::Mse;
    let tcfg = TrainConfig {
        epochs: 300, // full-batch: one step per epoch -> 300 steps
        batch_size: 8,
        lr: 3e-3,
        plateau_patience: 1000,
        seed: 42,
        checkpoint_dir: None,
        eval_every: 25,
        ..Default::default()
    };
    let ds = synth_dataset(&overfit_synth(), 8);
    (cfg, tcfg, ds)
}

/// Light contamination for the memorization smoke test: mostly-haze with
/// sparse streaks, leaving a clean-input baseline around 21 dB.
fn overfit_synth() -> SynthParams {
    SynthParams {
        seed: 42,
        beta_range: (0.15, 0.5),
        streak_count: (6, 18),
        streak_intensity: (0.08, 0.3),
        ..Default::default()
    }
}

fn run_overfit() -> OverfitOutcome {
    let (cfg, tcfg, ds) = overfit_setup();
    let (store, report) = train(&cfg, &tcfg, &ds, &ds).unwrap();
    let train_metrics = evaluate(&store, &cfg, &ds).unwrap();
    let input_psnr = input_metrics(&ds).unwrap().psnr;
    OverfitOutcome {
        report,
        train_metrics,
        input_psnr,
    }
}

static OVERFIT: OnceLock<OverfitOutcome> = OnceLock::new();

#[test]
fn criterion_08_overfit_smoke() {
    let started = Instant::now();
    let out = OVERFIT.get_or_init(run_overfit);
    let secs = started.elapsed().as_secs_f64();
    assert_eq!(out.report.step_losses.len(), 300, "exactly 300 Adam steps");
    assert!(
        out.train_metrics.psnr >= 30.0,
        "memorization failed: train PSNR {:.2} dB < 30 (input was {:.2})",
        out.train_metrics.psnr,
        out.input_psnr
    );
    assert!(secs < 600.0, "overfit run took {secs:.0}s, budget 600s");
    println!(
        "criterion 8 (overfit smoke): PASS (train {:.2} dB from input {:.2} dB in {secs:.0}s)",
        out.train_metrics.psnr, out.input_psnr
    );
}

#[test]
fn criterion_12_determinism() {
    let first = OVERFIT.get_or_init(run_overfit);
    let second = run_overfit();
    assert_eq!(
        first.report.step_losses, second.report.step_losses,
        "two seeded runs must produce identical loss traces"
    );
    assert_eq!(first.train_metrics.psnr, second.train_metrics.psnr);
    println!(
        "criterion 12 (determinism): PASS ({} identical step losses)",
        first.report.step_losses.len()
    );
}

// ---- criteria 9 + 10 (shared generalization runs) --------------------------

struct GenOutcome {
    val: Metrics,
    input: Metrics,
}

fn generalization_run(mode: DecoderMode) -> GenOutcome {
    let mut cfg = NetworkConfig::tiny();
    cfg.decoder_mode = mode;
    cfg.init_seed = 7;
    // the combined objective improves PSNR and SSIM together
    cfg.loss_mode = LossMode::SsimPlusMse;
    let tcfg = TrainConfig {
        epochs: 10,
        batch_size: 4,
        seed: 7,
        checkpoint_dir: None,
        ..Default::default()
    };
    let all = synth_dataset(
        &SynthParams {
            seed: 7,
            ..Default::default()
        },
        250,
    );
    let train_ds = PairedDataset {
        items: all.items[..200].to_vec(),
        target: all.target,
    };
    let val_ds = PairedDataset {
        items: all.items[200..].to_vec(),
        target: all.target,
    };
    let (store, _) = train(&cfg, &tcfg, &train_ds, &val_ds).unwrap();
    GenOutcome {
        val: evaluate(&store, &cfg, &val_ds).unwrap(),
        input: input_metrics(&val_ds).unwrap(),
    }
}

static GEN_ASYM: OnceLock<GenOutcome> = OnceLock::new();
static GEN_SYM: OnceLock<GenOutcome> = OnceLock::new();
static GEN_SINGLE: OnceLock<GenOutcome> = OnceLock::new();

#[test]
fn criterion_09_generalization_smoke() {
    let started = Instant::now();
    let out = GEN_ASYM.get_or_init(|| generalization_run(DecoderMode::DualAsymmetric));
    let secs = started.elapsed().as_secs_f64();
    let gain = out.val.psnr - out.input.psnr;
    assert!(
        gain >= 3.0,
        "held-out PSNR gain {gain:.2} dB < 3 (input {:.2}, output {:.2})",
        out.input.psnr,
        out.val.psnr
    );
    assert!(
        out.val.ssim > out.input.ssim,
        "held-out SSIM must improve: {:.4} !> {:.4}",
        out.val.ssim,
        out.input.ssim
    );
    assert!(secs < 2400.0, "generalization run took {secs:.0}s, budget 2400s");
    println!(
        "criterion 9 (generalization smoke): PASS ({:.2} -> {:.2} dB, ssim {:.4} -> {:.4}, {secs:.0}s)",
        out.input.psnr, out.val.psnr, out.input.ssim, out.val.ssim
    );
}

#[test]
fn criterion_10_ablation_ordering() {
    let asym = GEN_ASYM.get_or_init(|| generalization_run(DecoderMode::DualAsymmetric));
    let sym = GEN_SYM.get_or_init(|| generalization_run(DecoderMode::DualSymmetric));
    let single = GEN_SINGLE.get_or_init(|| generalization_run(DecoderMode::Single));
    let (a, s, g) = (asym.val.psnr, sym.val.psnr, single.val.psnr);
    println!(
        "criterion 10 ablation PSNRs: dual_asymmetric {a:.2}, dual_symmetric {s:.2}, single {g:.2} dB"
    );
    // ties within 0.2 dB are reported, not fatal
    if a < s {
        println!("  note: dual_asymmetric trails dual_symmetric by {:.3} dB (within tie band)", s - a);
    }
    if s < g {
        println!("  note: dual_symmetric trails single by {:.3} dB (within tie band)", g - s);
    }
    assert!(
        a >= s - 0.2,
        "dual_asymmetric {a:.2} below dual_symmetric {s:.2} by more than 0.2 dB"
    );
    assert!(
        s >= g - 0.2,
        "dual_symmetric {s:.2} below single {g:.2} by more than 0.2 dB"
    );
    println!("criterion 10 (ablation ordering): PASS");
}

/// Per-phase timing of one training step; not part of acceptance.
#[test]
#[ignore]
fn step_timing() {
    use adunet::nn::Mode;
    let mut cfg = NetworkConfig::tiny();
    cfg.loss_mode = LossMode::Mse;
    let store = ParameterStore::init(&cfg);
    let ds = synth_dataset(&overfit_synth(), 8);
    let items: Vec<&adunet::data::PairedItem> = ds.items.iter().collect();
    let batch = |input: bool| -> ArrayD<f32> {
        let mut out = ArrayD::zeros(IxDyn(&[8, 3, 64, 64]));
        for (i, item) in items.iter().enumerate() {
            let src = if input { &item.input } else { &item.gt };
            for ((c, y, x), &v) in src.data().indexed_iter() {
                out[[i, c, y, x]] = v;
            }
        }
        out
    };
    let (xb, gb) = (batch(true), batch(false));
    for trial in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(xb.clone(), false);
        let g = adunet::network::build_forward(&mut tape, x, &store, &cfg, Mode::Train, true).unwrap();
        let t_fwd = t0.elapsed().as_secs_f64();
        let gt = tape.leaf(gb.clone(), false);
        let loss = loss_tape(&mut tape, gt, g.y_pre, cfg.loss_mode);
        let t_loss = t0.elapsed().as_secs_f64();
        let (grads, stats) = tape.backward_profiled(loss);
        let t_bwd = t0.elapsed().as_secs_f64();
        let _ = grads.get(g.registry.entries[0].1);
        println!(
            "trial {trial}: forward {t_fwd:.3}s  +loss {:.3}s  +backward {:.3}s  (tape nodes {})",
            t_loss - t_fwd,
            t_bwd - t_loss,
            tape.len()
        );
        if trial == 2 {
            for (name, secs, count) in stats.iter().take(10) {
                println!("    backward {name:<18} {secs:.3}s over {count} nodes");
            }
        }
    }
}

// ---- criterion 11 ----------------------------------------------------------

#[test]
fn criterion_11_schedule_correctness() {
    // stubbed metric: improves 5 epochs, then flat. lr holds 1e-3 for ten
    // epochs and drops exactly x0.1 after each 5-epoch stall.
    let mut s = PlateauSchedule::new(1e-3, 0.1, 5);
    let mut trace = Vec::new();
    for e in 0..20 {
        trace.push(s.lr());
        s.observe(if e < 5 { e as f64 } else { 4.0 });
    }
    for (e, &lr) in trace.iter().enumerate() {
        let want = if e < 10 {
            1e-3
        } else if e < 15 {
            1e-4
        } else {
            1e-5
        };
        assert!((lr - want).abs() < 1e-15, "epoch {e}: lr {lr} want {want}");
    }
    // constant metric: two decays within 11 observed epochs
    let mut s = PlateauSchedule::new(1e-3, 0.1, 5);
    let mut lr = s.lr();
    for _ in 0..11 {
        lr = s.observe(1.0);
    }
    assert!((lr - 1e-5).abs() < 1e-15, "constant metric after 11 epochs: {lr}");
    println!("criterion 11 (plateau schedule): PASS");
}
