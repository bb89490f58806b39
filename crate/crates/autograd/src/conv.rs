//! Stride-1 2-D convolution via im2col and matrix multiplication.
//!
//! All batch samples share one column matrix so each convolution is a
//! single GEMM; columns are rebuilt during the backward pass instead of
//! being cached on the tape (at full resolution they dwarf the activations).

use ndarray::{Array1, ArrayD, IxDyn};
use rayon::prelude::*;

use crate::{dims4, Element};

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn ck(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }
}

fn geometry<T>(x: &ArrayD<T>, w: &ArrayD<T>, pad: usize) -> Geometry {
    let (n, cin, h, wdim) = dims4(x);
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be 4-d");
    let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(
        cin, wcin,
        "conv input channels {} do not match weight {}",
        cin, wcin
    );
    let ho = h + 2 * pad + 1 - kh;
    let wo = wdim + 2 * pad + 1 - kw;
    Geometry {
        n,
        cin,
        h,
        w: wdim,
        cout,
        kh,
        kw,
        ho,
        wo,
    }
}

/// Fill the column block of one sample inside `cols` ([ck, n*hw_out],
/// row-major with row stride `n*hw_out`), starting at column `col_base`.
fn im2col<T: Element>(x: &[T], g: &Geometry, pad: usize, cols: &mut [T], col_base: usize) {
    let row_stride = g.n * g.hw_out();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let ox_lo = pad.saturating_sub(kx);
                let ox_hi = (g.w + pad - kx).min(g.wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = oy + ky;
                    if iy < pad || iy >= g.h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    let src = c * g.h * g.w + iy * g.w + (ox_lo + kx - pad);
                    let dst = row * row_stride + col_base + oy * g.wo + ox_lo;
                    let len = ox_hi - ox_lo;
                    cols[dst..dst + len].copy_from_slice(&x[src..src + len]);
                }
            }
        }
    }
}

/// Scatter-add one sample's column block back into image layout.
fn col2im<T: Element>(cols: &[T], g: &Geometry, pad: usize, x: &mut [T], col_base: usize) {
    let row_stride = g.n * g.hw_out();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let ox_lo = pad.saturating_sub(kx);
                let ox_hi = (g.w + pad - kx).min(g.wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = oy + ky;
                    if iy < pad || iy >= g.h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    let dst = c * g.h * g.w + iy * g.w + (ox_lo + kx - pad);
                    let src = row * row_stride + col_base + oy * g.wo + ox_lo;
                    for i in 0..ox_hi - ox_lo {
                        x[dst + i] += cols[src + i];
                    }
                }
            }
        }
    }
}

/// Samples per GEMM block, sized so the column matrix stays cache-friendly.
fn block_len<T>(g: &Geometry) -> usize {
    const BLOCK_BYTES: usize = 2 << 20;
    let per_sample = g.ck() * g.hw_out() * std::mem::size_of::<T>();
    (BLOCK_BYTES / per_sample.max(1)).clamp(1, g.n)
}

pub(crate) fn conv2d_forward<T: Element>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    b: Option<&ArrayD<T>>,
    pad: usize,
) -> ArrayD<T> {
    let g = geometry(x, w, pad);
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let hw = g.hw_out();
    let block = block_len::<T>(&g);
    let mut out = vec![T::zero(); g.n * g.cout * hw];
    let bias = b.map(|b| b.as_slice().unwrap());
    // blocks cover disjoint contiguous sample ranges of `out`
    out.par_chunks_mut(block * g.cout * hw)
        .enumerate()
        .for_each(|(bi, out_chunk)| {
            let n0 = bi * block;
            let bn = block.min(g.n - n0);
            let bhw = bn * hw;
            let blk = Geometry { n: bn, ..g };
            let mut cols = vec![T::zero(); g.ck() * bhw];
            let mut flat = vec![T::zero(); g.cout * bhw];
            for ni in 0..bn {
                im2col(&xs[(n0 + ni) * g.cin * g.h * g.w..], &blk, pad, &mut cols, ni * hw);
            }
            T::gemm(g.cout, g.ck(), bhw, ws, false, &cols, false, T::zero(), &mut flat);
            // reorder [cout, bn*hw] -> [bn, cout, hw], adding the bias
            for c in 0..g.cout {
                let bv = bias.map(|b| b[c]).unwrap_or_else(T::zero);
                for ni in 0..bn {
                    let src = c * bhw + ni * hw;
                    let dst = (ni * g.cout + c) * hw;
                    if bv == T::zero() {
                        out_chunk[dst..dst + hw].copy_from_slice(&flat[src..src + hw]);
                    } else {
                        for i in 0..hw {
                            out_chunk[dst + i] = flat[src + i] + bv;
                        }
                    }
                }
            }
        });
    ArrayD::from_shape_vec(IxDyn(&[g.n, g.cout, g.ho, g.wo]), out).unwrap()
}

pub(crate) fn conv2d_backward<T: Element>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    grad: &ArrayD<T>,
    pad: usize,
) -> (ArrayD<T>, ArrayD<T>, Array1<T>) {
    let g = geometry(x, w, pad);
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let gs = grad.as_slice().unwrap();
    let hw = g.hw_out();
    let block = block_len::<T>(&g);
    let mut dx = vec![T::zero(); xs.len()];
    // per-block partials folded in block order afterwards so the reduction
    // stays deterministic
    let partials: Vec<(Vec<T>, Vec<T>)> = dx
        .par_chunks_mut(block * g.cin * g.h * g.w)
        .enumerate()
        .map(|(bi, dx_chunk)| {
            let n0 = bi * block;
            let bn = block.min(g.n - n0);
            let bhw = bn * hw;
            let blk = Geometry { n: bn, ..g };
            let mut cols = vec![T::zero(); g.ck() * bhw];
            let mut gflat = vec![T::zero(); g.cout * bhw];
            let mut dcols = vec![T::zero(); g.ck() * bhw];
            for ni in 0..bn {
                im2col(&xs[(n0 + ni) * g.cin * g.h * g.w..], &blk, pad, &mut cols, ni * hw);
            }
            // reorder grad [bn, cout, hw] -> [cout, bn*hw]
            for ni in 0..bn {
                for c in 0..g.cout {
                    let src = ((n0 + ni) * g.cout + c) * hw;
                    let dst = c * bhw + ni * hw;
                    gflat[dst..dst + hw].copy_from_slice(&gs[src..src + hw]);
                }
            }
            let mut dw_part = vec![T::zero(); g.cout * g.ck()];
            T::gemm(g.cout, bhw, g.ck(), &gflat, false, &cols, true, T::zero(), &mut dw_part);
            T::gemm(g.ck(), g.cout, bhw, ws, true, &gflat, false, T::zero(), &mut dcols);
            for ni in 0..bn {
                col2im(&dcols, &blk, pad, &mut dx_chunk[ni * g.cin * g.h * g.w..], ni * hw);
            }
            let mut db_part = vec![T::zero(); g.cout];
            for c in 0..g.cout {
                let mut acc = T::zero();
                for &v in &gflat[c * bhw..(c + 1) * bhw] {
                    acc += v;
                }
                db_part[c] = acc;
            }
            (dw_part, db_part)
        })
        .collect();
    let mut dw = vec![T::zero(); g.cout * g.ck()];
    let mut db = Array1::<T>::zeros(g.cout);
    for (dw_part, db_part) in &partials {
        for (acc, &v) in dw.iter_mut().zip(dw_part.iter()) {
            *acc += v;
        }
        for (c, &v) in db_part.iter().enumerate() {
            db[c] += v;
        }
    }
    (
        ArrayD::from_shape_vec(x.raw_dim(), dx).unwrap(),
        ArrayD::from_shape_vec(w.raw_dim(), dw).unwrap(),
        db,
    )
}
