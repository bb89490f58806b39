//! Window multi-head self-attention (W-MSA) and its shifted-window variant
//! (SW-MSA).
//!
//! The unit is norm -> attention -> residual add, with no feed-forward
//! sub-block. Feature maps are cut into win x win windows (zero-padded to
//! fit, with padded tokens masked out of the key set); SW-MSA cyclically
//! shifts the canvas by half a window first and masks token pairs that the
//! wrap-around would otherwise let attend across region boundaries. A
//! learnable relative-position bias table is added to the scores.

use autograd::{Element, Tape, Var};
use ndarray::{Array1, Array2, Array3};

use crate::encoder::{from_batch, to_batch};
use crate::error::{Error, Result};
use crate::image::FeatureMap;
use crate::nn::{to_dyn_t, Registry};
use crate::params::{ParameterStore, LN_EPS};

/// Additive mask value; large enough that softmax weight underflows to zero.
const MASK_NEG: f64 = -1e4;

/// Geometry record from padding a map up to window multiples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadInfo {
    pub orig_h: usize,
    pub orig_w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
}

/// Cut a [C,H,W] map into non-overlapping windows, zero-padding on the
/// bottom/right as needed. Returns [num_windows, win*win, C] plus the
/// padding record needed to invert the operation.
pub fn window_partition(x: &Array3<f32>, win: usize) -> (Array3<f32>, PadInfo) {
    assert!(win >= 1, "window size must be >= 1");
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hp = h.div_ceil(win) * win;
    let wp = w.div_ceil(win) * win;
    let mut canvas = Array3::<f32>::zeros((c, hp, wp));
    canvas.slice_mut(ndarray::s![.., ..h, ..w]).assign(x);
    let windows = autograd::windows::partition(&to_batch(&canvas), win);
    let shape = windows.shape().to_vec();
    let windows = windows
        .into_shape_with_order((shape[0], shape[1], shape[2]))
        .unwrap();
    (
        windows,
        PadInfo {
            orig_h: h,
            orig_w: w,
            padded_h: hp,
            padded_w: wp,
        },
    )
}

/// Invert [`window_partition`], recovering the original (unpadded) map.
pub fn window_reverse(windows: &Array3<f32>, info: &PadInfo, win: usize) -> Array3<f32> {
    let c = windows.shape()[2];
    let full = autograd::windows::reverse(
        &windows.to_owned().into_dyn(),
        1,
        c,
        info.padded_h,
        info.padded_w,
        win,
    );
    let canvas = from_batch(&full);
    canvas
        .slice(ndarray::s![.., ..info.orig_h, ..info.orig_w])
        .to_owned()
}

/// Relative-position index map: entry (i, j) addresses the bias-table row
/// for the offset between tokens i and j of a win x win window.
pub fn rel_pos_index(win: usize) -> Vec<usize> {
    let t = win * win;
    let span = 2 * win - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (iy, ix) = (i / win, i % win);
        for j in 0..t {
            let (jy, jx) = (j / win, j % win);
            let ry = iy + win - 1 - jy;
            let rx = ix + win - 1 - jx;
            idx.push(ry * span + rx);
        }
    }
    idx
}

/// Attention mask for a padded (and possibly shifted) canvas: `None` when no
/// mask is needed. Entry [wk, i, j] is `MASK_NEG` when key j is a padding
/// token or when the cyclic shift wrapped i and j together across a region
/// boundary.
fn build_mask<T: Element>(
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
    win: usize,
    shift: usize,
) -> Option<Array3<T>> {
    let padded = hp != h || wp != w;
    if shift == 0 && !padded {
        return None;
    }
    let (nwh, nww) = (hp / win, wp / win);
    let t = win * win;
    let neg = T::from_f64(MASK_NEG);
    let band = |coord: usize, len: usize| -> usize {
        if shift == 0 {
            0
        } else if coord < len - win {
            0
        } else if coord < len - shift {
            1
        } else {
            2
        }
    };
    // the shifted canvas holds original[(y+shift) mod hp][(x+shift) mod wp]
    let valid = |y: usize, x: usize| ((y + shift) % hp) < h && ((x + shift) % wp) < w;
    let mut mask = Array3::<T>::zeros((nwh * nww, t, t));
    for wy in 0..nwh {
        for wx in 0..nww {
            let wk = wy * nww + wx;
            for ti in 0..t {
                let (iy, ix) = (wy * win + ti / win, wx * win + ti % win);
                let li = band(iy, hp) * 3 + band(ix, wp);
                for tj in 0..t {
                    let (jy, jx) = (wy * win + tj / win, wx * win + tj % win);
                    let lj = band(jy, hp) * 3 + band(jx, wp);
                    if li != lj || !valid(jy, jx) {
                        mask[[wk, ti, tj]] = neg;
                    }
                }
            }
        }
    }
    Some(mask)
}

/// Tape handles for one attention unit.
pub struct AttnVars {
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub q_w: Var,
    pub q_b: Var,
    pub k_w: Var,
    pub k_b: Var,
    pub v_w: Var,
    pub v_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub rel_bias: Var,
}

pub struct AttentionOutput {
    pub out: Var,
    /// Softmax attention probabilities, [batch*windows*heads, T, T].
    pub probs: Var,
}

/// Windowed self-attention with residual connection on the tape.
/// x: [N,C,H,W]; channels must divide by `heads`.
pub fn window_attention_tape<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    p: &AttnVars,
    win: usize,
    heads: usize,
    shifted: bool,
) -> AttentionOutput {
    let shape = tape.value(x).shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert_eq!(c % heads, 0, "channels {c} not divisible by heads {heads}");
    let dh = c / heads;
    let hp = h.div_ceil(win) * win;
    let wp = w.div_ceil(win) * win;
    // a single window has nothing to shift across
    let single_window = hp == win && wp == win;
    let shift = if shifted && win > 1 && !single_window {
        win / 2
    } else {
        0
    };

    let mut cur = x;
    if hp != h || wp != w {
        cur = tape.pad_hw(cur, hp - h, wp - w);
    }
    if shift > 0 {
        cur = tape.roll(cur, -(shift as isize), -(shift as isize));
    }
    let tokens = tape.window_partition(cur, win);
    let t_len = win * win;
    let batch = n * (hp / win) * (wp / win);

    let eps = T::from_f64(LN_EPS as f64);
    let normed = tape.layer_norm(tokens, p.ln_gamma, p.ln_beta, eps);
    let q = tape.linear_last(normed, p.q_w, Some(p.q_b));
    let k = tape.linear_last(normed, p.k_w, Some(p.k_b));
    let v = tape.linear_last(normed, p.v_w, Some(p.v_b));

    let split = |tape: &mut Tape<T>, t: Var| -> Var {
        let r = tape.reshape(t, &[batch, t_len, heads, dh]);
        let pm = tape.permute(r, &[0, 2, 1, 3]);
        tape.reshape(pm, &[batch * heads, t_len, dh])
    };
    // fold the 1/sqrt(dh) score scale into q; the tokens tensor is far
    // smaller than the score matrix
    let q = tape.mul_scalar(q, T::from_f64(1.0 / (dh as f64).sqrt()));
    let qh = split(tape, q);
    let kh = split(tape, k);
    let vh = split(tape, v);

    let scores = tape.matmul(qh, kh, true);
    let scores = tape.rel_pos_bias(scores, p.rel_bias, rel_pos_index(win), heads);
    let scores = match build_mask::<T>(h, w, hp, wp, win, shift) {
        Some(mask) => tape.add_mask(scores, mask, heads),
        None => scores,
    };
    let probs = tape.softmax_last(scores);
    let ctx = tape.matmul(probs, vh, false);

    let merged = {
        let r = tape.reshape(ctx, &[batch, heads, t_len, dh]);
        let pm = tape.permute(r, &[0, 2, 1, 3]);
        tape.reshape(pm, &[batch, t_len, c])
    };
    let o = tape.linear_last(merged, p.proj_w, Some(p.proj_b));
    let mut back = tape.window_reverse(o, n, c, hp, wp, win);
    if shift > 0 {
        back = tape.roll(back, shift as isize, shift as isize);
    }
    if hp != h || wp != w {
        back = tape.crop_hw(back, h, w);
    }
    let out = tape.add(x, back);
    AttentionOutput { out, probs }
}

/// Array-level attention parameters: per-head projections stored as full
/// [C, C] matrices, pre-attention layer norm, and the relative-position
/// bias table [(2*win-1)^2, heads].
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub ln_gamma: Array1<f32>,
    pub ln_beta: Array1<f32>,
    pub q_w: Array2<f32>,
    pub q_b: Array1<f32>,
    pub k_w: Array2<f32>,
    pub k_b: Array1<f32>,
    pub v_w: Array2<f32>,
    pub v_b: Array1<f32>,
    pub proj_w: Array2<f32>,
    pub proj_b: Array1<f32>,
    pub rel_bias: Array2<f32>,
}

impl AttentionParams {
    pub fn from_store(store: &ParameterStore, prefix: &str) -> Self {
        let a1 = |n: String| -> Array1<f32> {
            store.get(&n).to_owned().into_dimensionality().unwrap()
        };
        let a2 = |n: String| -> Array2<f32> {
            store.get(&n).to_owned().into_dimensionality().unwrap()
        };
        AttentionParams {
            ln_gamma: a1(format!("{prefix}.ln.gamma")),
            ln_beta: a1(format!("{prefix}.ln.beta")),
            q_w: a2(format!("{prefix}.q.weight")),
            q_b: a1(format!("{prefix}.q.bias")),
            k_w: a2(format!("{prefix}.k.weight")),
            k_b: a1(format!("{prefix}.k.bias")),
            v_w: a2(format!("{prefix}.v.weight")),
            v_b: a1(format!("{prefix}.v.bias")),
            proj_w: a2(format!("{prefix}.proj.weight")),
            proj_b: a1(format!("{prefix}.proj.bias")),
            rel_bias: a2(format!("{prefix}.rel_bias")),
        }
    }

    /// All-zero projections: the unit reduces to the residual identity.
    pub fn zeros(c: usize, win: usize, heads: usize) -> Self {
        let span = 2 * win - 1;
        AttentionParams {
            ln_gamma: Array1::ones(c),
            ln_beta: Array1::zeros(c),
            q_w: Array2::zeros((c, c)),
            q_b: Array1::zeros(c),
            k_w: Array2::zeros((c, c)),
            k_b: Array1::zeros(c),
            v_w: Array2::zeros((c, c)),
            v_b: Array1::zeros(c),
            proj_w: Array2::zeros((c, c)),
            proj_b: Array1::zeros(c),
            rel_bias: Array2::zeros((span * span, heads)),
        }
    }

    pub fn channels(&self) -> usize {
        self.q_w.shape()[0]
    }

    pub(crate) fn to_vars<T: Element>(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        reg: &mut Registry,
        grad: bool,
    ) -> AttnVars {
        let mut mk = |t: &mut Tape<T>, arr: ndarray::ArrayD<T>, name: String| -> Var {
            let v = t.leaf(arr, grad);
            reg.add(name, v);
            v
        };
        AttnVars {
            ln_gamma: mk(tape, to_dyn_t(&self.ln_gamma), format!("{prefix}.ln.gamma")),
            ln_beta: mk(tape, to_dyn_t(&self.ln_beta), format!("{prefix}.ln.beta")),
            q_w: mk(tape, to_dyn_t(&self.q_w), format!("{prefix}.q.weight")),
            q_b: mk(tape, to_dyn_t(&self.q_b), format!("{prefix}.q.bias")),
            k_w: mk(tape, to_dyn_t(&self.k_w), format!("{prefix}.k.weight")),
            k_b: mk(tape, to_dyn_t(&self.k_b), format!("{prefix}.k.bias")),
            v_w: mk(tape, to_dyn_t(&self.v_w), format!("{prefix}.v.weight")),
            v_b: mk(tape, to_dyn_t(&self.v_b), format!("{prefix}.v.bias")),
            proj_w: mk(tape, to_dyn_t(&self.proj_w), format!("{prefix}.proj.weight")),
            proj_b: mk(tape, to_dyn_t(&self.proj_b), format!("{prefix}.proj.bias")),
            rel_bias: mk(tape, to_dyn_t(&self.rel_bias), format!("{prefix}.rel_bias")),
        }
    }
}

fn check_attention(x: &FeatureMap, p: &AttentionParams, heads: usize) -> Result<()> {
    if x.channels() % heads != 0 {
        return Err(Error::Shape(format!(
            "channels {} not divisible by {} heads",
            x.channels(),
            heads
        )));
    }
    if x.channels() != p.channels() {
        return Err(Error::Shape(format!(
            "attention params expect {} channels, input has {}",
            p.channels(),
            x.channels()
        )));
    }
    Ok(())
}

fn run_attention(
    x: &FeatureMap,
    p: &AttentionParams,
    win: usize,
    heads: usize,
    shifted: bool,
) -> Result<(FeatureMap, Array3<f32>)> {
    check_attention(x, p, heads)?;
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf(to_batch(&x.data), false);
    let mut reg = Registry::default();
    let vars = p.to_vars(&mut tape, "attn", &mut reg, false);
    let out = window_attention_tape(&mut tape, xv, &vars, win, heads, shifted);
    let probs = tape.value(out.probs);
    let ps = probs.shape().to_vec();
    let probs = probs
        .to_owned()
        .into_shape_with_order((ps[0], ps[1], ps[2]))
        .unwrap();
    Ok((
        FeatureMap::new(from_batch(tape.value(out.out)), x.level),
        probs,
    ))
}

/// Window attention in eval mode on a single feature map.
pub fn wmsa(x: &FeatureMap, p: &AttentionParams, win: usize, heads: usize) -> Result<FeatureMap> {
    Ok(run_attention(x, p, win, heads, false)?.0)
}

/// Shifted-window attention in eval mode on a single feature map.
pub fn swmsa(x: &FeatureMap, p: &AttentionParams, win: usize, heads: usize) -> Result<FeatureMap> {
    Ok(run_attention(x, p, win, heads, true)?.0)
}

/// Attention probabilities for inspection: [windows*heads, T, T] for a
/// single input map. Rows are softmax-normalized.
pub fn attention_probs(
    x: &FeatureMap,
    p: &AttentionParams,
    win: usize,
    heads: usize,
    shifted: bool,
) -> Result<Array3<f32>> {
    Ok(run_attention(x, p, win, heads, shifted)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        let data: Vec<f32> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureMap::new(Array3::from_shape_vec((c, h, w), data).unwrap(), 0)
    }

    fn rand_params(rng: &mut ChaCha8Rng, c: usize, win: usize, heads: usize) -> AttentionParams {
        let mut p = AttentionParams::zeros(c, win, heads);
        for m in [&mut p.q_w, &mut p.k_w, &mut p.v_w, &mut p.proj_w] {
            for v in m.iter_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        for v in p.rel_bias.iter_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
        p
    }

    #[test]
    fn partition_example_geometries() {
        let x = Array3::<f32>::zeros((16, 8, 8));
        let (w8, info) = window_partition(&x, 8);
        assert_eq!(w8.shape(), &[1, 64, 16]);
        assert_eq!(info.padded_h, 8);
        let (w4, _) = window_partition(&x, 4);
        assert_eq!(w4.shape(), &[4, 16, 16]);
    }

    #[test]
    fn partition_pads_and_reverses_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_map(&mut rng, 16, 10, 6);
        let (windows, info) = window_partition(&x.data, 4);
        assert_eq!(info.padded_h, 12);
        assert_eq!(info.padded_w, 8);
        assert_eq!(windows.shape(), &[6, 16, 16]);
        let back = window_reverse(&windows, &info, 4);
        assert_eq!(back, x.data);
    }

    #[test]
    fn zero_projection_is_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_map(&mut rng, 8, 8, 8);
        let p = AttentionParams::zeros(8, 4, 2);
        let y = wmsa(&x, &p, 4, 2).unwrap();
        assert_eq!(y.data, x.data);
        let ys = swmsa(&x, &p, 4, 2).unwrap();
        assert_eq!(ys.data, x.data);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_map(&mut rng, 8, 8, 8);
        let p = rand_params(&mut rng, 8, 4, 2);
        let probs = attention_probs(&x, &p, 4, 2, false).unwrap();
        for b in 0..probs.shape()[0] {
            for i in 0..probs.shape()[1] {
                let sum: f32 = (0..probs.shape()[2]).map(|j| probs[[b, i, j]]).sum();
                assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
            }
        }
    }

    #[test]
    fn single_pixel_map_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_map(&mut rng, 4, 1, 1);
        let p = rand_params(&mut rng, 4, 8, 2);
        let probs = attention_probs(&x, &p, 8, 2, false).unwrap();
        // only token (0,0) is valid; every valid query row puts all weight there
        for h in 0..2 {
            let w = probs[[h, 0, 0]];
            assert!((w - 1.0).abs() < 1e-6, "self weight {w}");
        }
        // and the unit still produces x + proj(v(norm(x)))
        let y = wmsa(&x, &p, 8, 2).unwrap();
        assert_eq!(y.data.shape(), &[4, 1, 1]);
    }

    #[test]
    fn constant_map_shift_invariance() {
        let c = 8;
        let x = FeatureMap::new(Array3::from_elem((c, 8, 8), 0.37), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = rand_params(&mut rng, c, 4, 2);
        let a = wmsa(&x, &p, 4, 2).unwrap();
        let b = swmsa(&x, &p, 4, 2).unwrap();
        for (va, vb) in a.data.iter().zip(b.data.iter()) {
            assert!((va - vb).abs() < 1e-5, "{va} vs {vb}");
        }
    }

    #[test]
    fn window_one_reduces_to_per_token_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_map(&mut rng, 4, 3, 3);
        let p = rand_params(&mut rng, 4, 1, 2);
        let a = wmsa(&x, &p, 1, 2).unwrap();
        let b = swmsa(&x, &p, 1, 2).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn shifted_mask_blocks_wrapped_pairs() {
        // On a 2w x 2w canvas the cyclic shift wraps opposite borders into
        // shared windows; their mutual attention must vanish.
        let win = 4usize;
        let (h, w) = (2 * win, 2 * win);
        let shift = win / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_map(&mut rng, 8, h, w);
        let p = rand_params(&mut rng, 8, win, 2);
        let probs = attention_probs(&x, &p, win, 2, true).unwrap();
        let heads = 2;
        let nww = w / win;
        let mut checked = 0usize;
        for wk in 0..(h / win) * nww {
            let (wy, wx) = (wk / nww, wk % nww);
            for ti in 0..win * win {
                let iy = wy * win + ti / win;
                let ix = wx * win + ti % win;
                // original row of this shifted-canvas position
                let oy = (iy + shift) % h;
                let ox = (ix + shift) % w;
                for tj in 0..win * win {
                    let jy = wy * win + tj / win;
                    let jx = wx * win + tj % win;
                    let py = (jy + shift) % h;
                    let px = (jx + shift) % w;
                    // wrapped together: one came from the top/left edge, the
                    // other from the bottom/right edge
                    let wrapped_y = (oy < shift) != (py < shift) && (iy >= h - shift || jy >= h - shift);
                    let wrapped_x = (ox < shift) != (px < shift) && (ix >= w - shift || jx >= w - shift);
                    if wrapped_y || wrapped_x {
                        for hd in 0..heads {
                            let pr = probs[[wk * heads + hd, ti, tj]];
                            assert!(pr < 1e-6, "leak {pr} at window {wk} ({ti},{tj})");
                            checked += 1;
                        }
                    }
                }
            }
        }
        assert!(checked > 0, "test must exercise wrapped pairs");
    }

    #[test]
    fn channelwise_permutation_consistency() {
        // permuting input channels and the matching weight rows/columns
        // permutes the output identically
        let c = 6;
        let (win, heads) = (4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_map(&mut rng, c, 4, 4);
        let p = rand_params(&mut rng, c, win, heads);
        let perm: Vec<usize> = vec![3, 0, 5, 1, 4, 2];

        let mut xp = x.clone();
        for (new_c, &old_c) in perm.iter().enumerate() {
            for y in 0..4 {
                for xx in 0..4 {
                    xp.data[[new_c, y, xx]] = x.data[[old_c, y, xx]];
                }
            }
        }
        let mut pp = p.clone();
        for (new_c, &old_c) in perm.iter().enumerate() {
            pp.ln_gamma[new_c] = p.ln_gamma[old_c];
            pp.ln_beta[new_c] = p.ln_beta[old_c];
            pp.proj_b[new_c] = p.proj_b[old_c];
            for k in 0..c {
                // input-side permutation of q/k/v rows
                pp.q_w[[new_c, k]] = p.q_w[[old_c, k]];
                pp.k_w[[new_c, k]] = p.k_w[[old_c, k]];
                pp.v_w[[new_c, k]] = p.v_w[[old_c, k]];
                // output-side permutation of proj columns
                pp.proj_w[[k, new_c]] = p.proj_w[[k, old_c]];
            }
        }
        let y = wmsa(&x, &p, win, heads).unwrap();
        let yp = wmsa(&xp, &pp, win, heads).unwrap();
        for (new_c, &old_c) in perm.iter().enumerate() {
            for yy in 0..4 {
                for xx in 0..4 {
                    let a = yp.data[[new_c, yy, xx]];
                    let b = y.data[[old_c, yy, xx]];
                    assert!((a - b).abs() < 1e-5, "perm mismatch {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn shape_preserved_on_awkward_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(h, w) in &[(5usize, 9usize), (8, 8), (3, 16), (1, 1), (7, 2)] {
            let x = rand_map(&mut rng, 8, h, w);
            let p = rand_params(&mut rng, 8, 4, 2);
            let y = wmsa(&x, &p, 4, 2).unwrap();
            assert_eq!(y.data.shape(), x.data.shape());
            let ys = swmsa(&x, &p, 4, 2).unwrap();
            assert_eq!(ys.data.shape(), x.data.shape());
        }
    }

    #[test]
    fn head_divisibility_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_map(&mut rng, 6, 4, 4);
        let p = rand_params(&mut rng, 6, 4, 4);
        assert!(wmsa(&x, &p, 4, 4).is_err());
    }
}
