//! Centered, orthonormal 2D FFT kernels on interleaved complex buffers.
//!
//! Conventions (shared by the k-space operators and the autodiff primitives):
//! the image-domain and k-space-domain origins sit at the floor-center
//! `(⌊H/2⌋, ⌊W/2⌋)`, i.e. `fft2c = shift_right ∘ FFT ∘ shift_left` with both
//! shifts by the floor-half extent, and both directions carry a `1/√(HW)`
//! scale so the pair is unitary.

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

// FFT plans are cached per thread; rustfft plans are Send+Sync but the planner
// is cheapest to keep thread-local.
thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
    static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> = RefCell::new(HashMap::new());
}

fn plan(len: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|plans| {
        let mut plans = plans.borrow_mut();
        plans
            .entry((len, forward))
            .or_insert_with(|| {
                PLANNER.with(|p| {
                    let mut p = p.borrow_mut();
                    if forward {
                        p.plan_fft_forward(len)
                    } else {
                        p.plan_fft_inverse(len)
                    }
                })
            })
            .clone()
    })
}

/// Rotate-left copy along both axes by the floor-half extents (ifftshift).
fn shift_left(src: &[Complex64], dst: &mut [Complex64], h: usize, w: usize) {
    let (ch, cw) = (h / 2, w / 2);
    for i in 0..h {
        let si = (i + ch) % h;
        for j in 0..w {
            dst[i * w + j] = src[si * w + (j + cw) % w];
        }
    }
}

/// Rotate-right copy along both axes by the floor-half extents (fftshift).
fn shift_right(src: &[Complex64], dst: &mut [Complex64], h: usize, w: usize) {
    let (ch, cw) = (h / 2, w / 2);
    for i in 0..h {
        let si = (i + h - ch) % h;
        for j in 0..w {
            dst[i * w + j] = src[si * w + (j + w - cw) % w];
        }
    }
}

fn transform(buf: &mut [Complex64], h: usize, w: usize, forward: bool) {
    assert_eq!(buf.len(), h * w);
    let mut work = vec![Complex64::new(0.0, 0.0); h * w];
    shift_left(buf, &mut work, h, w);

    let row_fft = plan(w, forward);
    for r in 0..h {
        row_fft.process(&mut work[r * w..(r + 1) * w]);
    }
    let col_fft = plan(h, forward);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = work[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            work[r * w + c] = col[r];
        }
    }

    shift_right(&work, buf, h, w);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

/// Centered orthonormal forward 2D FFT, in place.
pub fn fft2c_inplace(buf: &mut [Complex64], h: usize, w: usize) {
    transform(buf, h, w, true);
}

/// Centered orthonormal inverse 2D FFT, in place. Exact inverse of
/// [`fft2c_inplace`].
pub fn ifft2c_inplace(buf: &mut [Complex64], h: usize, w: usize) {
    transform(buf, h, w, false);
}

/// Applies the centered transform to every `[H, W]` slab of an interleaved
/// (re, im) f64 buffer holding `slabs * h * w` complex values.
pub fn transform_slabs(data: &mut [f64], slabs: usize, h: usize, w: usize, forward: bool) {
    assert_eq!(data.len(), slabs * h * w * 2);
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    for s in 0..slabs {
        let base = s * h * w * 2;
        for i in 0..h * w {
            buf[i] = Complex64::new(data[base + 2 * i], data[base + 2 * i + 1]);
        }
        transform(&mut buf, h, w, forward);
        for i in 0..h * w {
            data[base + 2 * i] = buf[i].re;
            data[base + 2 * i + 1] = buf[i].im;
        }
    }
}
