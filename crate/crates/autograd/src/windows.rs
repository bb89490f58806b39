//! Window partition/reverse index maps shared by the tape ops and callers.

use ndarray::{ArrayD, IxDyn};

use crate::{dims4, Element};

/// [N,C,H,W] -> [N*nw, win*win, C]. H and W must be divisible by `win`.
pub fn partition<T: Element>(x: &ArrayD<T>, win: usize) -> ArrayD<T> {
    let (n, c, h, w) = dims4(x);
    assert!(win >= 1, "window size must be >= 1");
    assert!(
        h % win == 0 && w % win == 0,
        "partition input {}x{} not divisible by window {}",
        h,
        w,
        win
    );
    let (nwh, nww) = (h / win, w / win);
    let t = win * win;
    let xs = x.as_slice().unwrap();
    let mut out = vec![T::zero(); n * nwh * nww * t * c];
    for ni in 0..n {
        for wy in 0..nwh {
            for wx in 0..nww {
                let b = (ni * nwh + wy) * nww + wx;
                for ty in 0..win {
                    for tx in 0..win {
                        let tok = ty * win + tx;
                        let (iy, ix) = (wy * win + ty, wx * win + tx);
                        for ci in 0..c {
                            out[(b * t + tok) * c + ci] =
                                xs[((ni * c + ci) * h + iy) * w + ix];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n * nwh * nww, t, c]), out).unwrap()
}

/// Inverse of [`partition`] for the given canvas geometry.
pub fn reverse<T: Element>(
    x: &ArrayD<T>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    win: usize,
) -> ArrayD<T> {
    let (nwh, nww) = (h / win, w / win);
    let t = win * win;
    assert_eq!(
        x.shape(),
        &[n * nwh * nww, t, c],
        "window reverse geometry mismatch"
    );
    let xs = x.as_slice().unwrap();
    let mut out = vec![T::zero(); n * c * h * w];
    for ni in 0..n {
        for wy in 0..nwh {
            for wx in 0..nww {
                let b = (ni * nwh + wy) * nww + wx;
                for ty in 0..win {
                    for tx in 0..win {
                        let tok = ty * win + tx;
                        let (iy, ix) = (wy * win + ty, wx * win + tx);
                        for ci in 0..c {
                            out[((ni * c + ci) * h + iy) * w + ix] =
                                xs[(b * t + tok) * c + ci];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_counts_and_round_trip() {
        let x = ArrayD::from_shape_vec(
            IxDyn(&[1, 3, 8, 8]),
            (0..192).map(|i| i as f32).collect(),
        )
        .unwrap();
        let p = partition(&x, 4);
        assert_eq!(p.shape(), &[4, 16, 3]);
        let r = reverse(&p, 1, 3, 8, 8, 4);
        assert_eq!(r, x);
    }

    #[test]
    fn single_window_is_row_major_tokens() {
        let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let p = partition(&x, 2);
        assert_eq!(p.shape(), &[1, 4, 1]);
        assert_eq!(p.as_slice().unwrap(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
