//! Raw loops behind the graph primitives. Shapes are validated by the caller.

use super::Scalar;

#[inline]
fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with eight independent lanes so the loop vectorizes.
#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut lanes = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for j in 0..8 {
            lanes[j] += xa[j] * xb[j];
        }
    }
    let mut tail = F::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let mut acc = tail;
    for l in lanes {
        acc += l;
    }
    acc
}

/// Valid `[lo, hi)` range of output coordinates for a tap offset `d` along
/// an axis of length `len` under zero padding.
#[inline]
fn valid_range(d: isize, len: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub o: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }
}

/// Stride-1, same-padded 2-D cross-correlation.
pub(crate) fn conv2d_forward<F: Scalar>(
    d: &ConvDims,
    input: &[F],
    kernel: &[F],
    bias: &[F],
    out: &mut [F],
) {
    let hw = d.h * d.w;
    let pad = d.pad();
    for n in 0..d.n {
        for o in 0..d.o {
            let plane = &mut out[(n * d.o + o) * hw..][..hw];
            // -0.0 is the exact additive identity, so a zero bias does not
            // flip the sign of a -0.0 input under the identity kernel.
            let start = if bias[o] == F::zero() { -F::zero() } else { bias[o] };
            plane.fill(start);
            for c in 0..d.c {
                let inp = &input[(n * d.c + c) * hw..][..hw];
                let taps = &kernel[(o * d.c + c) * d.k * d.k..][..d.k * d.k];
                for ky in 0..d.k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(dy, d.h);
                    for kx in 0..d.k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(dx, d.w);
                        let wgt = taps[ky * d.k + kx];
                        if wgt == F::zero() || x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let src = ((y as isize + dy) as usize) * d.w;
                            let xs = (x0 as isize + dx) as usize;
                            axpy(
                                wgt,
                                &inp[src + xs..src + xs + (x1 - x0)],
                                &mut plane[y * d.w + x0..y * d.w + x1],
                            );
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates the input gradient of `conv2d_forward` into `grad_input`.
pub(crate) fn conv2d_backward_input<F: Scalar>(
    d: &ConvDims,
    kernel: &[F],
    grad_out: &[F],
    grad_input: &mut [F],
) {
    let hw = d.h * d.w;
    let pad = d.pad();
    for n in 0..d.n {
        for o in 0..d.o {
            let go = &grad_out[(n * d.o + o) * hw..][..hw];
            for c in 0..d.c {
                let gi = &mut grad_input[(n * d.c + c) * hw..][..hw];
                let taps = &kernel[(o * d.c + c) * d.k * d.k..][..d.k * d.k];
                for ky in 0..d.k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(dy, d.h);
                    for kx in 0..d.k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(dx, d.w);
                        let wgt = taps[ky * d.k + kx];
                        if wgt == F::zero() || x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let dst = ((y as isize + dy) as usize) * d.w;
                            let xs = (x0 as isize + dx) as usize;
                            axpy(
                                wgt,
                                &go[y * d.w + x0..y * d.w + x1],
                                &mut gi[dst + xs..dst + xs + (x1 - x0)],
                            );
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates kernel and bias gradients. Row partial sums are carried in
/// 64-bit.
pub(crate) fn conv2d_backward_params<F: Scalar>(
    d: &ConvDims,
    input: &[F],
    grad_out: &[F],
    grad_kernel: Option<&mut [F]>,
    grad_bias: Option<&mut [F]>,
) {
    let hw = d.h * d.w;
    let pad = d.pad();
    if let Some(gb) = grad_bias {
        for o in 0..d.o {
            let mut acc = 0.0f64;
            for n in 0..d.n {
                acc += grad_out[(n * d.o + o) * hw..][..hw]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum::<f64>();
            }
            gb[o] += F::from_f64(acc);
        }
    }
    let Some(gk) = grad_kernel else { return };
    for o in 0..d.o {
        for c in 0..d.c {
            for ky in 0..d.k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, d.h);
                for kx in 0..d.k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, d.w);
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = 0.0f64;
                    for n in 0..d.n {
                        let go = &grad_out[(n * d.o + o) * hw..][..hw];
                        let inp = &input[(n * d.c + c) * hw..][..hw];
                        for y in y0..y1 {
                            let src = ((y as isize + dy) as usize) * d.w;
                            let xs = (x0 as isize + dx) as usize;
                            acc += dot(
                                &go[y * d.w + x0..y * d.w + x1],
                                &inp[src + xs..src + xs + (x1 - x0)],
                            )
                            .as_f64();
                        }
                    }
                    gk[((o * d.c + c) * d.k + ky) * d.k + kx] += F::from_f64(acc);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_edges() {
        assert_eq!(valid_range(0, 5), (0, 5));
        assert_eq!(valid_range(-1, 5), (1, 5));
        assert_eq!(valid_range(1, 5), (0, 4));
        assert_eq!(valid_range(3, 2), (0, 0));
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..19).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
    }
}
