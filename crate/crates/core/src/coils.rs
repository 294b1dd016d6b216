//! Coil sensitivity estimation, conjugate coil combination, and the
//! conjugate-gradient SENSE solver.

use crate::error::{Error, Result};
use crate::kspace::{self, PeAxis};
use crate::tensor::{complex, Tensor};
use serde::{Deserialize, Serialize};

pub const DEFAULT_SUPPORT_THRESHOLD: f64 = 0.05;

/// Coil sensitivity maps `[W_coils, H, W]` complex with their support mask.
/// On support Σ_w |C_w|² = 1; off support the maps are zero.
#[derive(Debug, Clone)]
pub struct CsmStack {
    pub maps: Tensor,
    pub support: Tensor,
}

impl CsmStack {
    pub fn new(maps: Tensor, support: Tensor) -> Result<Self> {
        if maps.rank() != 4 || *maps.shape().last().unwrap() != 2 {
            return Err(Error::shape(format!(
                "csm maps must be [coils, H, W, 2], got {:?}",
                maps.shape()
            )));
        }
        if support.shape() != &maps.shape()[1..3] {
            return Err(Error::shape(format!(
                "csm support {:?} does not match maps {:?}",
                support.shape(),
                maps.shape()
            )));
        }
        Ok(CsmStack { maps, support })
    }

    pub fn num_coils(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[2]
    }

    /// Largest deviation of the pixel-wise sum-of-squares from 1 on support.
    pub fn max_sos_deviation(&self) -> f64 {
        let (coils, h, w) = (self.num_coils(), self.height(), self.width());
        let mut worst = 0.0f64;
        for p in 0..h * w {
            if self.support.data()[p] == 0.0 {
                continue;
            }
            let mut sos = 0.0;
            for c in 0..coils {
                let base = (c * h * w + p) * 2;
                sos += self.maps.data()[base] * self.maps.data()[base]
                    + self.maps.data()[base + 1] * self.maps.data()[base + 1];
            }
            worst = worst.max((sos - 1.0).abs());
        }
        worst
    }
}

/// Conjugate-gradient configuration for the SENSE normal equations.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CgConfig {
    pub lambda: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig {
            lambda: 0.05,
            max_iters: 10,
            tol: 1e-6,
        }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iters == 0 || self.lambda < 0.0 {
            return Err(Error::arg("cg config: tol > 0, max_iters >= 1, lambda >= 0"));
        }
        Ok(())
    }
}

fn box_smooth(plane: &mut [f64], h: usize, w: usize, k: usize) {
    if k <= 1 {
        return;
    }
    let half = (k / 2) as isize;
    let src = plane.to_vec();
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for di in -half..=half {
                for dj in -half..=half {
                    let (y, x) = (i + di, j + dj);
                    if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
                        acc += src[(y * w as isize + x) as usize];
                        cnt += 1.0;
                    }
                }
            }
            plane[(i * w as isize + j) as usize] = acc / cnt;
        }
    }
}

/// Estimates coil sensitivity maps from calibration k-space (only the central
/// lines are expected to be non-zero).
///
/// Low-resolution coil images are combined by iterating a pixel-wise
/// dominant-eigenvector update (power iteration on the rank-one coil
/// covariance) with box-kernel smoothing between iterations. The global phase
/// is fixed by rotating the first coil's phase to zero at the image center,
/// and the maps are normalized to unit sum-of-squares on support.
pub fn estimate_csm(calibration_kspace: &Tensor, smoothing_kernel: usize, iters: usize) -> Result<CsmStack> {
    estimate_csm_opts(
        calibration_kspace,
        smoothing_kernel,
        iters,
        DEFAULT_SUPPORT_THRESHOLD,
    )
}

pub fn estimate_csm_opts(
    calibration_kspace: &Tensor,
    smoothing_kernel: usize,
    iters: usize,
    support_threshold: f64,
) -> Result<CsmStack> {
    if calibration_kspace.rank() != 4 || *calibration_kspace.shape().last().unwrap() != 2 {
        return Err(Error::shape(format!(
            "calibration k-space must be [coils, H, W, 2], got {:?}",
            calibration_kspace.shape()
        )));
    }
    if calibration_kspace.max_abs() == 0.0 {
        return Err(Error::Numeric("calibration data is all zero".into()));
    }
    let (coils, h, w) = (
        calibration_kspace.shape()[0],
        calibration_kspace.shape()[1],
        calibration_kspace.shape()[2],
    );
    let imgs = kspace::ifft2c(calibration_kspace)?;
    let pix = h * w;

    // combined magnitude and support
    let mut sos = vec![0.0f64; pix];
    for c in 0..coils {
        for p in 0..pix {
            let base = (c * pix + p) * 2;
            sos[p] += imgs.data()[base] * imgs.data()[base]
                + imgs.data()[base + 1] * imgs.data()[base + 1];
        }
    }
    let max_mag = sos.iter().cloned().fold(0.0f64, f64::max).sqrt();
    let thresh = support_threshold * max_mag;
    let support: Vec<f64> = sos
        .iter()
        .map(|&s| if s.sqrt() > thresh { 1.0 } else { 0.0 })
        .collect();

    // initial estimate: coil images over combined magnitude
    let mut maps = vec![0.0f64; coils * pix * 2];
    for c in 0..coils {
        for p in 0..pix {
            if support[p] == 0.0 {
                continue;
            }
            let base = (c * pix + p) * 2;
            let m = sos[p].sqrt();
            maps[base] = imgs.data()[base] / m;
            maps[base + 1] = imgs.data()[base + 1] / m;
        }
    }

    for _ in 0..iters {
        // project: combined image estimate c = Σ conj(v_w)·I_w, then raw maps
        // r_w = I_w·conj(c); the phase of the underlying image cancels.
        let mut raw = vec![0.0f64; coils * pix * 2];
        for p in 0..pix {
            if support[p] == 0.0 {
                continue;
            }
            let mut cr = 0.0;
            let mut ci = 0.0;
            for c in 0..coils {
                let base = (c * pix + p) * 2;
                let (vr, vi) = (maps[base], maps[base + 1]);
                let (ir, ii) = (imgs.data()[base], imgs.data()[base + 1]);
                cr += vr * ir + vi * ii;
                ci += vr * ii - vi * ir;
            }
            for c in 0..coils {
                let base = (c * pix + p) * 2;
                let (ir, ii) = (imgs.data()[base], imgs.data()[base + 1]);
                raw[base] = ir * cr + ii * ci;
                raw[base + 1] = -ir * ci + ii * cr;
            }
        }
        // smooth each coil's re/im planes
        for c in 0..coils {
            let mut re = vec![0.0; pix];
            let mut im = vec![0.0; pix];
            for p in 0..pix {
                re[p] = raw[(c * pix + p) * 2];
                im[p] = raw[(c * pix + p) * 2 + 1];
            }
            box_smooth(&mut re, h, w, smoothing_kernel);
            box_smooth(&mut im, h, w, smoothing_kernel);
            for p in 0..pix {
                raw[(c * pix + p) * 2] = re[p];
                raw[(c * pix + p) * 2 + 1] = im[p];
            }
        }
        // renormalize pixel-wise on support
        for p in 0..pix {
            if support[p] == 0.0 {
                for c in 0..coils {
                    let base = (c * pix + p) * 2;
                    maps[base] = 0.0;
                    maps[base + 1] = 0.0;
                }
                continue;
            }
            let mut ss = 0.0;
            for c in 0..coils {
                let base = (c * pix + p) * 2;
                ss += raw[base] * raw[base] + raw[base + 1] * raw[base + 1];
            }
            let inv = if ss > 0.0 { 1.0 / ss.sqrt() } else { 0.0 };
            for c in 0..coils {
                let base = (c * pix + p) * 2;
                maps[base] = raw[base] * inv;
                maps[base + 1] = raw[base + 1] * inv;
            }
        }
    }

    // fix global phase: rotate so the first coil is real-positive at the image
    // center (fall back to its largest-magnitude pixel if the center is empty)
    let center = (h / 2) * w + w / 2;
    let mut ref_pix = center;
    if (maps[center * 2].powi(2) + maps[center * 2 + 1].powi(2)).sqrt() < 1e-12 {
        let mut best = 0.0;
        for p in 0..pix {
            let m = maps[p * 2].powi(2) + maps[p * 2 + 1].powi(2);
            if m > best {
                best = m;
                ref_pix = p;
            }
        }
    }
    let phi = maps[ref_pix * 2 + 1].atan2(maps[ref_pix * 2]);
    let (cphi, sphi) = ((-phi).cos(), (-phi).sin());
    for p in 0..coils * pix {
        let (re, im) = (maps[p * 2], maps[p * 2 + 1]);
        maps[p * 2] = re * cphi - im * sphi;
        maps[p * 2 + 1] = re * sphi + im * cphi;
    }

    CsmStack::new(
        Tensor::from_vec(&[coils, h, w, 2], maps)?,
        Tensor::from_vec(&[h, w], support)?,
    )
}

/// Conjugate coil combination `x̂ = Σ_w conj(C_w)·x_w`, preserving complex
/// information. `coil_images, csm: [coils, H, W, 2] → [H, W, 2]`.
pub fn coil_combine_conj(coil_images: &Tensor, csm: &Tensor) -> Result<Tensor> {
    if coil_images.shape() != csm.shape() {
        return Err(Error::shape(format!(
            "coil_combine_conj: images {:?} vs csm {:?}",
            coil_images.shape(),
            csm.shape()
        )));
    }
    complex::check_complex(coil_images)?;
    let (coils, h, w) = (csm.shape()[0], csm.shape()[1], csm.shape()[2]);
    let weighted = complex::cmul(coil_images, &complex::conj(csm));
    let mut out = vec![0.0; h * w * 2];
    for c in 0..coils {
        let base = c * h * w * 2;
        for i in 0..h * w * 2 {
            out[i] += weighted.data()[base + i];
        }
    }
    Tensor::from_vec(&[h, w, 2], out)
}

/// Result of a CG-SENSE solve.
#[derive(Debug, Clone)]
pub struct CgResult {
    pub image: Tensor,
    pub converged: bool,
    /// Final relative residual of the normal equations.
    pub final_residual: f64,
    /// Relative residual after each iteration (starting point included).
    pub residual_history: Vec<f64>,
    pub iters: usize,
}

/// Solves `(EᴴE + λI) x = Eᴴy + λ·prior` for a single frame by a Krylov
/// iteration on the normal equations.
///
/// The update is the conjugate-residual variant of CG (same cost, same
/// fixed point); it minimizes the normal-equations residual norm over the
/// growing Krylov space, so the reported residual history is non-increasing.
///
/// `y: [coils, H, W, 2]` (mask already embedded — unsampled lines zero),
/// `csm: [coils, H, W, 2]`. Starts from the prior when given, else from
/// `Eᴴy`. Non-convergence is reported on the result, not as an error.
pub fn cg_sense(
    y: &Tensor,
    csm: &Tensor,
    mask: &[f64],
    pe_axis: PeAxis,
    cfg: &CgConfig,
    prior: Option<&Tensor>,
) -> Result<CgResult> {
    cfg.validate()?;
    if !y.all_finite() || !csm.all_finite() {
        return Err(Error::Numeric("cg_sense: non-finite inputs".into()));
    }
    if cfg.lambda > 0.0 && prior.is_none() {
        return Err(Error::arg("cg_sense: prior required when lambda > 0"));
    }
    if let Some(p) = prior {
        if p.shape() != &y.shape()[1..] {
            return Err(Error::shape(format!(
                "cg_sense: prior {:?} vs image {:?}",
                p.shape(),
                &y.shape()[1..]
            )));
        }
        if !p.all_finite() {
            return Err(Error::Numeric("cg_sense: non-finite prior".into()));
        }
    }

    let lambda = cfg.lambda;
    let apply_normal = |x: &Tensor| -> Result<Tensor> {
        let ex = kspace::encode(x, csm, mask, pe_axis)?;
        let mut ax = kspace::encode_adjoint(&ex, csm, mask, pe_axis)?;
        if lambda > 0.0 {
            for (a, p) in ax.data_mut().iter_mut().zip(x.data()) {
                *a += lambda * p;
            }
        }
        Ok(ax)
    };

    let ehy = kspace::encode_adjoint(y, csm, mask, pe_axis)?;
    let mut b = ehy.clone();
    if let Some(p) = prior {
        for (bv, pv) in b.data_mut().iter_mut().zip(p.data()) {
            *bv += lambda * pv;
        }
    }
    let b_norm = b.norm2().max(1e-300);

    let mut x = prior.cloned().unwrap_or_else(|| ehy.clone());
    let ax = apply_normal(&x)?;
    let mut r = b.sub(&ax);
    let mut p = r.clone();
    let mut ap = apply_normal(&p)?;
    let mut r_ar = complex::dot_re(&r, &ap); // ⟨r, Ar⟩, p = r initially
    let mut history = vec![r.norm2() / b_norm];
    let mut iters = 0usize;

    while iters < cfg.max_iters && r.norm2() / b_norm > cfg.tol {
        let ap_ap = complex::dot_re(&ap, &ap);
        if ap_ap <= 0.0 || r_ar <= 0.0 {
            break; // direction left the operator range; report non-convergence
        }
        let alpha = r_ar / ap_ap;
        for (xv, pv) in x.data_mut().iter_mut().zip(p.data()) {
            *xv += alpha * pv;
        }
        for (rv, av) in r.data_mut().iter_mut().zip(ap.data()) {
            *rv -= alpha * av;
        }
        let ar_new = apply_normal(&r)?;
        let r_ar_new = complex::dot_re(&r, &ar_new);
        let beta = r_ar_new / r_ar;
        for (pv, rv) in p.data_mut().iter_mut().zip(r.data()) {
            *pv = rv + beta * *pv;
        }
        for (av, nv) in ap.data_mut().iter_mut().zip(ar_new.data()) {
            *av = nv + beta * *av;
        }
        r_ar = r_ar_new;
        iters += 1;
        history.push(r.norm2() / b_norm);
    }

    let final_residual = r.norm2() / b_norm;
    Ok(CgResult {
        image: x,
        converged: final_residual <= cfg.tol,
        final_residual,
        residual_history: history,
        iters,
    })
}
