//! Pixel-wise nonlinear least-squares fitting of T1 (inversion recovery with
//! Look-Locker correction) and T2 (monoexponential) parameter maps via
//! Levenberg–Marquardt.

use crate::error::{Error, Result};
use crate::phantom::FrameStack;
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iters: usize,
    pub init_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub param_tol: f64,
    /// Fit magnitudes (with polarity restoration for inversion recovery)
    /// instead of phase-corrected real signals.
    pub magnitude_fit: bool,
    pub polarity_restore: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iters: 50,
            init_damping: 1e-3,
            damping_up: 10.0,
            damping_down: 0.1,
            param_tol: 1e-8,
            magnitude_fit: true,
            polarity_restore: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.param_tol > 0.0) || !(self.init_damping > 0.0) || self.max_iters == 0 {
            return Err(Error::arg("fit config: positive tolerances and max_iters required"));
        }
        if !(self.damping_up > 1.0) || !(self.damping_down < 1.0 && self.damping_down > 0.0) {
            return Err(Error::arg("fit config: damping_up > 1 and 0 < damping_down < 1"));
        }
        Ok(())
    }
}

/// Outcome of a single Levenberg–Marquardt run.
#[derive(Debug, Clone)]
pub struct LmResult {
    pub params: Vec<f64>,
    pub residual_norm: f64,
    pub converged: bool,
    pub accepted_steps: usize,
    pub iterations: usize,
    /// Cost (squared residual norm) after every accepted step, starting value
    /// included.
    pub cost_history: Vec<f64>,
}

/// Solves `(H + μI) δ = −g` by Gaussian elimination with partial pivoting.
/// Returns `None` when the damped system is numerically singular.
fn solve_damped(h: &[f64], g: &[f64], mu: f64, n: usize) -> Option<Vec<f64>> {
    let mut a = vec![0.0; n * (n + 1)];
    for i in 0..n {
        for j in 0..n {
            a[i * (n + 1) + j] = h[i * n + j] + if i == j { mu } else { 0.0 };
        }
        a[i * (n + 1) + n] = -g[i];
    }
    for col in 0..n {
        let mut piv = col;
        for row in col + 1..n {
            if a[row * (n + 1) + col].abs() > a[piv * (n + 1) + col].abs() {
                piv = row;
            }
        }
        if a[piv * (n + 1) + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for k in 0..=n {
                a.swap(col * (n + 1) + k, piv * (n + 1) + k);
            }
        }
        let d = a[col * (n + 1) + col];
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = a[row * (n + 1) + col] / d;
            if f != 0.0 {
                for k in col..=n {
                    a[row * (n + 1) + k] -= f * a[col * (n + 1) + k];
                }
            }
        }
    }
    Some((0..n).map(|i| a[i * (n + 1) + n] / a[i * (n + 1) + i]).collect())
}

/// Damped normal-equations Levenberg–Marquardt.
///
/// `residual_fn` returns the residual vector (or `None` for infeasible
/// parameters); `jacobian_fn` its `m×n` row-major Jacobian. Steps are accepted
/// only when the cost decreases; iteration stops at the parameter tolerance or
/// `max_iters`. A damped Hessian that stays singular beyond damping
/// escalation yields a non-converged result rather than an error.
pub fn lm_fit(
    residual_fn: &dyn Fn(&[f64]) -> Option<Vec<f64>>,
    jacobian_fn: &dyn Fn(&[f64]) -> Option<Vec<f64>>,
    x0: &[f64],
    cfg: &FitConfig,
) -> Result<LmResult> {
    cfg.validate()?;
    let n = x0.len();
    if n == 0 {
        return Err(Error::arg("lm_fit: empty parameter vector"));
    }
    let mut x = x0.to_vec();
    let Some(mut r) = residual_fn(&x) else {
        return Err(Error::arg("lm_fit: infeasible starting point"));
    };
    let m = r.len();
    if m < n {
        return Err(Error::arg("lm_fit: fewer residuals than parameters"));
    }
    let mut cost: f64 = r.iter().map(|v| v * v).sum();
    let mut mu = cfg.init_damping;
    let mut accepted = 0usize;
    let mut converged = false;
    let mut cost_history = vec![cost];

    let mut iter = 0usize;
    while iter < cfg.max_iters {
        iter += 1;
        let Some(jac) = jacobian_fn(&x) else { break };
        debug_assert_eq!(jac.len(), m * n);
        // g = Jᵀ r, H = Jᵀ J
        let mut g = vec![0.0; n];
        let mut h = vec![0.0; n * n];
        for row in 0..m {
            for i in 0..n {
                let jri = jac[row * n + i];
                g[i] += jri * r[row];
                for j in 0..n {
                    h[i * n + j] += jri * jac[row * n + j];
                }
            }
        }
        let delta = loop {
            match solve_damped(&h, &g, mu, n) {
                Some(d) => break Some(d),
                None => {
                    mu *= cfg.damping_up;
                    if mu > 1e12 {
                        break None;
                    }
                }
            }
        };
        let Some(delta) = delta else { break };

        let dn: f64 = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        let xn: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if dn <= cfg.param_tol * (xn + cfg.param_tol) {
            converged = true;
            break;
        }

        let x_new: Vec<f64> = x.iter().zip(&delta).map(|(&a, &d)| a + d).collect();
        let trial = residual_fn(&x_new);
        let trial_cost = trial.as_ref().map(|t| t.iter().map(|v| v * v).sum::<f64>());
        match (trial, trial_cost) {
            (Some(t), Some(c)) if c < cost && c.is_finite() => {
                x = x_new;
                r = t;
                cost = c;
                cost_history.push(cost);
                mu = (mu * cfg.damping_down).max(1e-14);
                accepted += 1;
            }
            _ => {
                mu *= cfg.damping_up;
                if mu > 1e12 {
                    break;
                }
            }
        }
    }

    Ok(LmResult {
        params: x,
        residual_norm: cost.sqrt(),
        converged,
        accepted_steps: accepted,
        iterations: iter,
        cost_history,
    })
}

/// Fitted parameter map with per-pixel diagnostics. Non-fit pixels carry
/// value 0 and a cleared converged flag; storage is NaN-free.
#[derive(Debug, Clone)]
pub struct ParamMap {
    pub value: Tensor,
    pub residual_norm: Tensor,
    pub converged: Tensor,
    /// Inversion-recovery amplitudes, present for T1 fits.
    pub recovery: Option<RecoveryMaps>,
}

#[derive(Debug, Clone)]
pub struct RecoveryMaps {
    pub a: Tensor,
    pub b: Tensor,
    pub t1_star: Tensor,
}

impl ParamMap {
    /// Pixels that were fitted and converged to a positive value.
    pub fn fitted_mask(&self) -> Tensor {
        self.converged.clone()
    }
}

const NON_FIT_RELATIVE_THRESHOLD: f64 = 1e-6;

/// Per-pixel signals: magnitude and phase-corrected signed real part.
fn pixel_signals(frames: &FrameStack, p: usize, pix: usize) -> (Vec<f64>, Vec<f64>) {
    let t = frames.num_frames();
    let mut mags = Vec::with_capacity(t);
    let mut re = Vec::with_capacity(t);
    let mut im = Vec::with_capacity(t);
    for ti in 0..t {
        let base = (ti * pix + p) * 2;
        let (r, i) = (frames.data.data()[base], frames.data.data()[base + 1]);
        mags.push((r * r + i * i).sqrt());
        re.push(r);
        im.push(i);
    }
    // phase reference from the strongest frame; signed = Re(S·e^{-iφ})
    let mut best = 0usize;
    for ti in 1..t {
        if mags[ti] > mags[best] {
            best = ti;
        }
    }
    let phi = im[best].atan2(re[best]);
    let (c, s) = (phi.cos(), phi.sin());
    let signed: Vec<f64> = re.iter().zip(&im).map(|(&r, &i)| r * c + i * s).collect();
    (mags, signed)
}

struct PixelFit {
    value: f64,
    residual: f64,
    converged: bool,
    a: f64,
    b: f64,
    t1_star: f64,
}

fn fit_t1_pixel(signal: &[f64], times: &[f64], cfg: &FitConfig) -> Option<PixelFit> {
    let t = times.len();
    let max_s = signal.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if max_s <= 0.0 {
        return None;
    }
    let model = |p: &[f64]| -> Option<Vec<f64>> {
        let (a, b, t1s) = (p[0], p[1], p[2]);
        if !(t1s > 1e-9) {
            return None;
        }
        Some(
            times
                .iter()
                .zip(signal)
                .map(|(&ti, &s)| a - b * (-ti / t1s).exp() - s)
                .collect(),
        )
    };
    let jac = |p: &[f64]| -> Option<Vec<f64>> {
        let (_, b, t1s) = (p[0], p[1], p[2]);
        if !(t1s > 1e-9) {
            return None;
        }
        let mut out = Vec::with_capacity(t * 3);
        for &ti in times {
            let e = (-ti / t1s).exp();
            out.push(1.0);
            out.push(-e);
            out.push(-b * e * ti / (t1s * t1s));
        }
        Some(out)
    };
    let mut med_t = times.to_vec();
    med_t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let t1s0 = med_t[t / 2].max(1.0);
    let x0 = [max_s, 2.0 * max_s, t1s0];

    let run = |sig: &[f64]| -> Option<LmResult> {
        let model = |p: &[f64]| -> Option<Vec<f64>> {
            let (a, b, t1s) = (p[0], p[1], p[2]);
            if !(t1s > 1e-9) {
                return None;
            }
            Some(
                times
                    .iter()
                    .zip(sig)
                    .map(|(&ti, &s)| a - b * (-ti / t1s).exp() - s)
                    .collect(),
            )
        };
        lm_fit(&model, &jac, &x0, cfg).ok()
    };
    let _ = model; // the closure above binds the candidate signal instead

    let best = if cfg.magnitude_fit && cfg.polarity_restore {
        // restore polarity: try every candidate crossing index, flipping the
        // signs of the first j samples, keep the lowest residual
        let mut best: Option<LmResult> = None;
        for j in 0..=t {
            let candidate: Vec<f64> = signal
                .iter()
                .enumerate()
                .map(|(i, &v)| if i < j { -v } else { v })
                .collect();
            if let Some(res) = run(&candidate) {
                let better = match &best {
                    Some(b) => res.residual_norm < b.residual_norm,
                    None => true,
                };
                if better {
                    best = Some(res);
                }
            }
        }
        best
    } else {
        run(signal)
    }?;

    let (a, b, t1s) = (best.params[0], best.params[1], best.params[2]);
    let t1 = t1s * (b / a - 1.0);
    let ok = best.converged && t1.is_finite() && t1 > 0.0 && a > 0.0;
    Some(PixelFit {
        value: if ok { t1 } else { 0.0 },
        residual: best.residual_norm,
        converged: ok,
        a,
        b,
        t1_star: t1s,
    })
}

fn fit_t2_pixel(signal: &[f64], times: &[f64], cfg: &FitConfig) -> Option<PixelFit> {
    let positive: Vec<(f64, f64)> = times
        .iter()
        .zip(signal)
        .filter(|(_, &s)| s > 0.0)
        .map(|(&t, &s)| (t, s))
        .collect();
    if positive.len() < 2 {
        return None;
    }
    // log-linear initialization: least squares on ln|S| vs TE
    let n = positive.len() as f64;
    let mean_t = positive.iter().map(|(t, _)| t).sum::<f64>() / n;
    let mean_l = positive.iter().map(|(_, s)| s.ln()).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (t, s) in &positive {
        cov += (t - mean_t) * (s.ln() - mean_l);
        var += (t - mean_t) * (t - mean_t);
    }
    let slope = cov / var;
    let t2_0 = if slope < 0.0 {
        (-1.0 / slope).min(1e7)
    } else {
        // non-decaying data; start from the time span
        times.last().unwrap().max(1.0)
    };
    let s0_0 = (mean_l - slope * mean_t).exp();

    let model = |p: &[f64]| -> Option<Vec<f64>> {
        let (s0, t2) = (p[0], p[1]);
        if !(t2 > 1e-9) {
            return None;
        }
        Some(
            times
                .iter()
                .zip(signal)
                .map(|(&ti, &s)| s0 * (-ti / t2).exp() - s)
                .collect(),
        )
    };
    let jac = |p: &[f64]| -> Option<Vec<f64>> {
        let (s0, t2) = (p[0], p[1]);
        if !(t2 > 1e-9) {
            return None;
        }
        let mut out = Vec::with_capacity(times.len() * 2);
        for &ti in times {
            let e = (-ti / t2).exp();
            out.push(e);
            out.push(s0 * e * ti / (t2 * t2));
        }
        Some(out)
    };
    let best = lm_fit(&model, &jac, &[s0_0, t2_0], cfg).ok()?;
    let (s0, t2) = (best.params[0], best.params[1]);
    let ok = best.converged && t2.is_finite() && t2 > 0.0 && s0 > 0.0;
    Some(PixelFit {
        value: if ok { t2 } else { 0.0 },
        residual: best.residual_norm,
        converged: ok,
        a: s0,
        b: 0.0,
        t1_star: 0.0,
    })
}

fn assemble(results: Vec<Option<PixelFit>>, h: usize, w: usize, t1: bool) -> ParamMap {
    let mut value = vec![0.0; h * w];
    let mut residual = vec![0.0; h * w];
    let mut converged = vec![0.0; h * w];
    let mut a = vec![0.0; h * w];
    let mut b = vec![0.0; h * w];
    let mut t1s = vec![0.0; h * w];
    for (p, fit) in results.into_iter().enumerate() {
        if let Some(f) = fit {
            value[p] = f.value;
            residual[p] = f.residual;
            converged[p] = if f.converged { 1.0 } else { 0.0 };
            a[p] = f.a;
            b[p] = f.b;
            t1s[p] = f.t1_star;
        }
    }
    ParamMap {
        value: Tensor::from_vec(&[h, w], value).unwrap(),
        residual_norm: Tensor::from_vec(&[h, w], residual).unwrap(),
        converged: Tensor::from_vec(&[h, w], converged).unwrap(),
        recovery: if t1 {
            Some(RecoveryMaps {
                a: Tensor::from_vec(&[h, w], a).unwrap(),
                b: Tensor::from_vec(&[h, w], b).unwrap(),
                t1_star: Tensor::from_vec(&[h, w], t1s).unwrap(),
            })
        } else {
            None
        },
    }
}

fn fit_frames(
    frames: &FrameStack,
    cfg: &FitConfig,
    t1: bool,
) -> Result<ParamMap> {
    cfg.validate()?;
    let t = frames.num_frames();
    if t1 && t < 3 {
        return Err(Error::arg("T1 fit needs at least 3 time points"));
    }
    if !t1 && t < 2 {
        return Err(Error::arg("T2 fit needs at least 2 time points"));
    }
    let (h, w) = (frames.height(), frames.width());
    let pix = h * w;
    let times = frames.times_ms.clone();

    // background exclusion threshold over the whole image
    let mut mean_mags = vec![0.0f64; pix];
    for p in 0..pix {
        let (mags, _) = pixel_signals(frames, p, pix);
        mean_mags[p] = mags.iter().sum::<f64>() / t as f64;
    }
    let max_mean = mean_mags.iter().cloned().fold(0.0f64, f64::max);
    let floor = NON_FIT_RELATIVE_THRESHOLD * max_mean;

    let results: Vec<Option<PixelFit>> = (0..pix)
        .into_par_iter()
        .map(|p| {
            if mean_mags[p] <= floor {
                return None;
            }
            let (mags, signed) = pixel_signals(frames, p, pix);
            let sig = if cfg.magnitude_fit { &mags } else { &signed };
            if t1 {
                fit_t1_pixel(sig, &times, cfg)
            } else {
                fit_t2_pixel(&mags, &times, cfg)
            }
        })
        .collect();
    Ok(assemble(results, h, w, t1))
}

/// Pixel-wise three-parameter inversion-recovery fit with Look-Locker
/// correction: `S(TI) = A − B·exp(−TI/T1*)`, reported `T1 = T1*·(B/A − 1)`.
pub fn fit_t1_molli(frames: &FrameStack, cfg: &FitConfig) -> Result<ParamMap> {
    fit_frames(frames, cfg, true)
}

/// Pixel-wise monoexponential fit `S(TE) = S0·exp(−TE/T2)` with log-linear
/// initialization.
pub fn fit_t2(frames: &FrameStack, cfg: &FitConfig) -> Result<ParamMap> {
    fit_frames(frames, cfg, false)
}
