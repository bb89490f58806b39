//! SSIM and PSNR metrics and the training losses built on them.
//!
//! SSIM follows the reference single-scale formulation: 11x11 Gaussian
//! window with sigma 1.5, stability constants (0.01)^2 and (0.03)^2 on a
//! unit data range, valid-window filtering, computed per channel and
//! averaged. On inputs smaller than the window, the window shrinks to the
//! largest odd size that fits. The SSIM loss path runs through the autodiff
//! tape, so one implementation serves both evaluation and training.

use autograd::{Element, Tape, Var};
use ndarray::ArrayD;

use crate::config::LossMode;
use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// PSNR ceiling used as the finite stand-in for infinity.
pub const PSNR_CAP: f64 = 100.0;

/// Normalized 1-D Gaussian taps for the SSIM window.
pub fn gaussian_kernel<T: Element>(size: usize, sigma: f64) -> Vec<T> {
    assert!(size % 2 == 1, "gaussian window must be odd");
    let r = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= sum;
    }
    w.into_iter().map(T::from_f64).collect()
}

/// Window size used for an HxW input: 11, shrunk to fit small images.
pub fn ssim_window_for(h: usize, w: usize) -> usize {
    let m = SSIM_WINDOW.min(h).min(w);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Mean SSIM between two [N,C,H,W] tensors on the tape. Differentiable.
pub fn ssim_tape<T: Element>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let shape = tape.value(a).shape().to_vec();
    assert_eq!(shape, tape.value(b).shape(), "ssim operands must match");
    let (h, w) = (shape[2], shape[3]);
    let win = ssim_window_for(h, w);
    let kernel = gaussian_kernel::<T>(win, SSIM_SIGMA);
    let c1 = T::from_f64(SSIM_C1);
    let c2 = T::from_f64(SSIM_C2);
    let two = T::from_f64(2.0);

    let mu_a = tape.blur_valid(a, &kernel);
    let mu_b = tape.blur_valid(b, &kernel);
    let aa = tape.mul(a, a);
    let bb = tape.mul(b, b);
    let ab = tape.mul(a, b);
    let e_aa = tape.blur_valid(aa, &kernel);
    let e_bb = tape.blur_valid(bb, &kernel);
    let e_ab = tape.blur_valid(ab, &kernel);
    let mu_a2 = tape.mul(mu_a, mu_a);
    let mu_b2 = tape.mul(mu_b, mu_b);
    let mu_ab = tape.mul(mu_a, mu_b);
    let var_a = tape.sub(e_aa, mu_a2);
    let var_b = tape.sub(e_bb, mu_b2);
    let cov = tape.sub(e_ab, mu_ab);

    let l_num = {
        let t = tape.mul_scalar(mu_ab, two);
        tape.add_scalar(t, c1)
    };
    let c_num = {
        let t = tape.mul_scalar(cov, two);
        tape.add_scalar(t, c2)
    };
    let l_den = {
        let t = tape.add(mu_a2, mu_b2);
        tape.add_scalar(t, c1)
    };
    let c_den = {
        let t = tape.add(var_a, var_b);
        tape.add_scalar(t, c2)
    };
    let num = tape.mul(l_num, c_num);
    let den = tape.mul(l_den, c_den);
    let ssim_map = tape.div(num, den);
    tape.mean_all(ssim_map)
}

fn image_to_batch(img: &Image) -> ArrayD<f64> {
    let d = img.data();
    let (c, h, w) = (d.shape()[0], d.shape()[1], d.shape()[2]);
    ArrayD::from_shape_vec(
        ndarray::IxDyn(&[1, c, h, w]),
        d.iter().map(|&v| v as f64).collect(),
    )
    .unwrap()
}

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.data().shape() != b.data().shape() {
        return Err(Error::Shape(format!(
            "image shapes differ: {:?} vs {:?}",
            a.data().shape(),
            b.data().shape()
        )));
    }
    Ok(())
}

/// Mean SSIM of two images, in f64.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let mut tape = Tape::<f64>::new();
    let av = tape.leaf(image_to_batch(a), false);
    let bv = tape.leaf(image_to_batch(b), false);
    let s = ssim_tape(&mut tape, av, bv);
    Ok(tape.scalar(s))
}

/// Peak signal-to-noise ratio in dB against a unit peak, capped at 100.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    let mse = acc / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    Ok(acc / a.data().len() as f64)
}

/// Training objective on the tape: negative SSIM, MSE, or their sum.
pub fn loss_tape<T: Element>(tape: &mut Tape<T>, gt: Var, y: Var, mode: LossMode) -> Var {
    match mode {
        LossMode::Ssim => {
            let s = ssim_tape(tape, gt, y);
            tape.neg(s)
        }
        LossMode::Mse => {
            let d = tape.sub(y, gt);
            let sq = tape.mul(d, d);
            tape.mean_all(sq)
        }
        LossMode::SsimPlusMse => {
            let s = ssim_tape(tape, gt, y);
            let ns = tape.neg(s);
            let d = tape.sub(y, gt);
            let sq = tape.mul(d, d);
            let m = tape.mean_all(sq);
            tape.add(ns, m)
        }
    }
}

/// Scalar loss between two images (convenience wrapper over the tape path).
pub fn loss(gt: &Image, y: &Image, mode: LossMode) -> Result<f64> {
    check_same_shape(gt, y)?;
    let mut tape = Tape::<f64>::new();
    let gv = tape.leaf(image_to_batch(gt), false);
    let yv = tape.leaf(image_to_batch(y), false);
    let l = loss_tape(&mut tape, gv, yv, mode);
    Ok(tape.scalar(l))
}

/// Aggregate evaluation record.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub count: usize,
}
