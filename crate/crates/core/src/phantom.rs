//! Synthetic ground truth: rasterized tissue-parameter maps, relaxation-
//! weighted complex frame stacks, and smooth coil sensitivity profiles.
//!
//! Everything here is a pure function of (spec, seed), so downstream claims
//! are testable without any acquired data.

use crate::coils::CsmStack;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    Molli,
    T2prep,
}

/// Frame timing: inversion times for MOLLI, preparation echo times for T2prep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub kind: SequenceKind,
    pub times_ms: Vec<f64>,
    /// B/A ratio of the inversion-recovery model (2.0 = perfect inversion).
    pub inversion_factor: f64,
}

impl SequenceSpec {
    /// Nine inversion times, roughly geometric from 100 to 3500 ms.
    pub fn molli_default() -> Self {
        SequenceSpec {
            kind: SequenceKind::Molli,
            times_ms: vec![100.0, 156.0, 243.0, 380.0, 593.0, 925.0, 1444.0, 2243.0, 3500.0],
            inversion_factor: 2.0,
        }
    }

    /// Three T2 preparation times.
    pub fn t2prep_default() -> Self {
        SequenceSpec {
            kind: SequenceKind::T2prep,
            times_ms: vec![0.0, 25.0, 55.0],
            inversion_factor: 2.0,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.times_ms.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.times_ms.is_empty() {
            return Err(Error::arg("sequence needs at least one time point"));
        }
        if self.times_ms[0] < 0.0 {
            return Err(Error::arg("sequence times must be non-negative"));
        }
        for w in self.times_ms.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::arg("sequence times must be strictly increasing"));
            }
        }
        if self.kind == SequenceKind::Molli && self.inversion_factor <= 1.0 {
            return Err(Error::arg("inversion_factor must exceed 1"));
        }
        Ok(())
    }
}

/// Coordinates are (row, col) pixel units; a pixel is inside a region when its
/// center (i+0.5, j+0.5) satisfies the ellipse inequality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RegionShape {
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
    },
    Annulus {
        cy: f64,
        cx: f64,
        ry_outer: f64,
        rx_outer: f64,
        ry_inner: f64,
        rx_inner: f64,
    },
}

impl RegionShape {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            RegionShape::Ellipse { cy, cx, ry, rx } => {
                let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
            RegionShape::Annulus {
                cy,
                cx,
                ry_outer,
                rx_outer,
                ry_inner,
                rx_inner,
            } => {
                let (dyo, dxo) = ((y - cy) / ry_outer, (x - cx) / rx_outer);
                let (dyi, dxi) = ((y - cy) / ry_inner, (x - cx) / rx_inner);
                dyo * dyo + dxo * dxo <= 1.0 && dyi * dyi + dxi * dxi > 1.0
            }
        }
    }

    pub fn analytic_area(&self) -> f64 {
        match *self {
            RegionShape::Ellipse { ry, rx, .. } => PI * ry * rx,
            RegionShape::Annulus {
                ry_outer,
                rx_outer,
                ry_inner,
                rx_inner,
                ..
            } => PI * (ry_outer * rx_outer - ry_inner * rx_inner),
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            RegionShape::Ellipse { cy, cx, ry, rx } => (cy - ry, cy + ry, cx - rx, cx + rx),
            RegionShape::Annulus {
                cy,
                cx,
                ry_outer,
                rx_outer,
                ..
            } => (cy - ry_outer, cy + ry_outer, cx - rx_outer, cx + rx_outer),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub shape: RegionShape,
    pub t1_ms: f64,
    pub t2_ms: f64,
    pub proton_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub regions: Vec<Region>,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::arg("phantom grid must be non-empty"));
        }
        if self.regions.is_empty() {
            return Err(Error::arg("phantom needs at least one region"));
        }
        for (i, r) in self.regions.iter().enumerate() {
            if r.shape.analytic_area() <= 0.0 {
                return Err(Error::arg(format!("region {i} has zero area")));
            }
            if !(r.t1_ms > 0.0 && r.t2_ms > 0.0 && r.t1_ms >= r.t2_ms) {
                return Err(Error::arg(format!(
                    "region {i}: require T1 >= T2 > 0, got T1={} T2={}",
                    r.t1_ms, r.t2_ms
                )));
            }
            if !(0.0..=1.0).contains(&r.proton_density) {
                return Err(Error::arg(format!("region {i}: proton density outside [0,1]")));
            }
            let (y0, y1, x0, x1) = r.shape.bounds();
            if y0 < 0.0 || x0 < 0.0 || y1 > self.height as f64 || x1 > self.width as f64 {
                return Err(Error::arg(format!("region {i} does not fit inside the grid")));
            }
            if let RegionShape::Annulus {
                ry_outer,
                rx_outer,
                ry_inner,
                rx_inner,
                ..
            } = r.shape
            {
                if ry_inner >= ry_outer || rx_inner >= rx_outer || ry_inner <= 0.0 || rx_inner <= 0.0 {
                    return Err(Error::arg(format!("region {i}: annulus radii inverted")));
                }
            }
        }
        Ok(())
    }

    /// Cardiac-like default: body ellipse, blood pool disk, myocardial
    /// annulus, and a small septal insert. Relaxation times are
    /// literature-plausible 1.5T values in ms.
    pub fn default_cardiac(height: usize, width: usize) -> Self {
        let (h, w) = (height as f64, width as f64);
        let (cy, cx) = (h / 2.0, w / 2.0);
        let s = h.min(w) / 64.0;
        PhantomSpec {
            height,
            width,
            regions: vec![
                Region {
                    shape: RegionShape::Ellipse {
                        cy,
                        cx,
                        ry: 28.0 * s,
                        rx: 26.0 * s,
                    },
                    t1_ms: 900.0,
                    t2_ms: 50.0,
                    proton_density: 0.8,
                },
                Region {
                    shape: RegionShape::Ellipse {
                        cy,
                        cx,
                        ry: 13.0 * s,
                        rx: 13.0 * s,
                    },
                    t1_ms: 1800.0,
                    t2_ms: 60.0,
                    proton_density: 1.0,
                },
                Region {
                    shape: RegionShape::Annulus {
                        cy,
                        cx,
                        ry_outer: 20.0 * s,
                        rx_outer: 20.0 * s,
                        ry_inner: 13.0 * s,
                        rx_inner: 13.0 * s,
                    },
                    t1_ms: 1200.0,
                    t2_ms: 45.0,
                    proton_density: 0.9,
                },
                Region {
                    shape: RegionShape::Ellipse {
                        cy: cy - 8.0 * s,
                        cx: cx + 22.0 * s,
                        ry: 3.0 * s,
                        rx: 3.0 * s,
                    },
                    t1_ms: 600.0,
                    t2_ms: 35.0,
                    proton_density: 0.95,
                },
            ],
            seed: 0,
        }
    }

    /// Per-subject variation of the cardiac default: jittered geometry and
    /// relaxation times, deterministic for a given seed.
    pub fn randomized_cardiac(height: usize, width: usize, seed: u64) -> Self {
        let mut spec = Self::default_cardiac(height, width);
        spec.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
        let s = (height.min(width) as f64) / 64.0;
        let (dy, dx) = (
            rng.random_range(-2.0..2.0) * s,
            rng.random_range(-2.0..2.0) * s,
        );
        let rscale = rng.random_range(0.9..1.08);
        for region in &mut spec.regions {
            match &mut region.shape {
                RegionShape::Ellipse { cy, cx, ry, rx } => {
                    *cy += dy;
                    *cx += dx;
                    *ry *= rscale;
                    *rx *= rscale;
                }
                RegionShape::Annulus {
                    cy,
                    cx,
                    ry_outer,
                    rx_outer,
                    ry_inner,
                    rx_inner,
                } => {
                    *cy += dy;
                    *cx += dx;
                    *ry_outer *= rscale;
                    *rx_outer *= rscale;
                    *ry_inner *= rscale;
                    *rx_inner *= rscale;
                }
            }
            region.t1_ms *= rng.random_range(0.93..1.07);
            region.t2_ms *= rng.random_range(0.93..1.07);
            region.t1_ms = region.t1_ms.max(region.t2_ms);
        }
        spec
    }
}

/// Rasterized parameter maps; off-support pixels carry zeros and are flagged
/// by the support mask.
#[derive(Debug, Clone)]
pub struct TissueMaps {
    pub t1: Tensor,
    pub t2: Tensor,
    pub pd: Tensor,
    pub support: Tensor,
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<TissueMaps> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut t1 = vec![0.0; h * w];
    let mut t2 = vec![0.0; h * w];
    let mut pd = vec![0.0; h * w];
    let mut support = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            // later regions overwrite earlier ones
            for r in &spec.regions {
                if r.shape.contains(y, x) {
                    let p = i * w + j;
                    t1[p] = r.t1_ms;
                    t2[p] = r.t2_ms;
                    pd[p] = r.proton_density;
                    support[p] = if r.proton_density > 0.0 { 1.0 } else { 0.0 };
                }
            }
        }
    }
    Ok(TissueMaps {
        t1: Tensor::from_vec(&[h, w], t1)?,
        t2: Tensor::from_vec(&[h, w], t2)?,
        pd: Tensor::from_vec(&[h, w], pd)?,
        support: Tensor::from_vec(&[h, w], support)?,
    })
}

/// Smooth spatial phase so simulated data is genuinely complex. The
/// polynomial acts on coordinates normalized to [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    /// [c0, cy, cx, cyy, cyx, cxx]
    pub coeffs: [f64; 6],
}

impl Default for PhaseSpec {
    fn default() -> Self {
        PhaseSpec {
            coeffs: [0.3, 0.8, -0.5, 0.2, 0.4, -0.3],
        }
    }
}

impl PhaseSpec {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xd1342543de82ef95).wrapping_add(7));
        let mut coeffs = [0.0; 6];
        coeffs[0] = rng.random_range(-PI..PI);
        for c in coeffs.iter_mut().skip(1) {
            *c = rng.random_range(-1.0..1.0);
        }
        PhaseSpec { coeffs }
    }

    pub fn eval(&self, i: usize, j: usize, h: usize, w: usize) -> f64 {
        let ny = if h > 1 { 2.0 * i as f64 / (h - 1) as f64 - 1.0 } else { 0.0 };
        let nx = if w > 1 { 2.0 * j as f64 / (w - 1) as f64 - 1.0 } else { 0.0 };
        let c = &self.coeffs;
        c[0] + c[1] * ny + c[2] * nx + c[3] * ny * ny + c[4] * ny * nx + c[5] * nx * nx
    }
}

/// Multi-frame complex image stack `[T, H, W]` with its timing metadata.
#[derive(Debug, Clone)]
pub struct FrameStack {
    pub data: Tensor,
    pub times_ms: Vec<f64>,
    pub kind: SequenceKind,
}

impl FrameStack {
    pub fn num_frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn frame(&self, t: usize) -> Tensor {
        self.data.index_axis(0, t)
    }
}

/// Inversion-recovery signal `A − B·exp(−TI/T1*)`.
pub fn molli_signal(a: f64, b: f64, t1_star: f64, ti: f64) -> f64 {
    a - b * (-ti / t1_star).exp()
}

/// Monoexponential T2 decay `S0·exp(−TE/T2)`.
pub fn t2prep_signal(s0: f64, t2: f64, te: f64) -> f64 {
    s0 * (-te / t2).exp()
}

/// Pixel-wise forward signal model.
///
/// MOLLI: `S(TI) = A − B·exp(−TI/T1*)` with `A = pd`, `B = inversion_factor·A`
/// and `T1* = T1/(B/A − 1)`, so the Look-Locker relation
/// `T1 = T1*·(B/A − 1)` holds exactly. T2prep: `S(TE) = pd·exp(−TE/T2)`.
/// A smooth spatial phase makes the output genuinely complex.
pub fn simulate_frames(maps: &TissueMaps, seq: &SequenceSpec, phase: &PhaseSpec) -> Result<FrameStack> {
    seq.validate()?;
    let (h, w) = (maps.pd.shape()[0], maps.pd.shape()[1]);
    let t = seq.num_frames();
    let mut data = vec![0.0; t * h * w * 2];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let pd = maps.pd.data()[p];
            if pd <= 0.0 {
                continue;
            }
            let ph = phase.eval(i, j, h, w);
            let (cp, sp) = (ph.cos(), ph.sin());
            for (ti_idx, &time) in seq.times_ms.iter().enumerate() {
                let s = match seq.kind {
                    SequenceKind::Molli => {
                        let t1 = maps.t1.data()[p];
                        let a = pd;
                        let b = seq.inversion_factor * a;
                        let t1_star = t1 / (seq.inversion_factor - 1.0);
                        molli_signal(a, b, t1_star, time)
                    }
                    SequenceKind::T2prep => t2prep_signal(pd, maps.t2.data()[p], time),
                };
                let base = ((ti_idx * h + i) * w + j) * 2;
                data[base] = s * cp;
                data[base + 1] = s * sp;
            }
        }
    }
    Ok(FrameStack {
        data: Tensor::from_vec(&[t, h, w, 2], data)?,
        times_ms: seq.times_ms.clone(),
        kind: seq.kind,
    })
}

/// Smooth complex Gaussian-profile coil sensitivities centered at points
/// around the grid perimeter, normalized so the pixel-wise sum-of-squares is
/// exactly 1 everywhere. Bitwise deterministic for a given seed.
pub fn simulate_coils(num_coils: usize, h: usize, w: usize, seed: u64) -> Result<CsmStack> {
    if num_coils == 0 || h == 0 || w == 0 {
        return Err(Error::arg("simulate_coils: need coils >= 1 and a non-empty grid"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xa0761d6478bd642f).wrapping_add(3));
    let extent = h.max(w) as f64;
    let radius = 0.75 * extent;
    let sigma = 0.8 * extent;
    let mut maps = vec![0.0; num_coils * h * w * 2];
    for c in 0..num_coils {
        let theta = 2.0 * PI * c as f64 / num_coils as f64 + rng.random_range(-0.2..0.2);
        let (cy, cx) = (
            h as f64 / 2.0 + radius * theta.sin(),
            w as f64 / 2.0 + radius * theta.cos(),
        );
        let (py, px) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        let phase0 = theta + rng.random_range(-0.3..0.3);
        for i in 0..h {
            for j in 0..w {
                let (dy, dx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
                let mag = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                let ny = 2.0 * i as f64 / h as f64 - 1.0;
                let nx = 2.0 * j as f64 / w as f64 - 1.0;
                let ph = phase0 + py * ny + px * nx;
                let base = ((c * h + i) * w + j) * 2;
                maps[base] = mag * ph.cos();
                maps[base + 1] = mag * ph.sin();
            }
        }
    }
    // exact pixel-wise normalization (Gaussians are strictly positive)
    for p in 0..h * w {
        let mut sos = 0.0;
        for c in 0..num_coils {
            let base = (c * h * w + p) * 2;
            sos += maps[base] * maps[base] + maps[base + 1] * maps[base + 1];
        }
        let inv = 1.0 / sos.sqrt();
        for c in 0..num_coils {
            let base = (c * h * w + p) * 2;
            maps[base] *= inv;
            maps[base + 1] *= inv;
        }
    }
    CsmStack::new(
        Tensor::from_vec(&[num_coils, h, w, 2], maps)?,
        Tensor::full(&[h, w], 1.0),
    )
}

/// Everything a synthetic subject needs downstream.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub maps: TissueMaps,
    pub frames: FrameStack,
    pub csm: CsmStack,
}

impl GroundTruth {
    pub fn generate(
        spec: &PhantomSpec,
        seq: &SequenceSpec,
        phase: &PhaseSpec,
        num_coils: usize,
    ) -> Result<Self> {
        let maps = generate_phantom(spec)?;
        let frames = simulate_frames(&maps, seq, phase)?;
        let csm = simulate_coils(num_coils, spec.height, spec.width, spec.seed)?;
        Ok(GroundTruth { maps, frames, csm })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_grid_region(h: usize, w: usize, t1: f64, t2: f64, pd: f64) -> Region {
        Region {
            shape: RegionShape::Ellipse {
                cy: h as f64 / 2.0,
                cx: w as f64 / 2.0,
                ry: h as f64 / 2.0,
                rx: w as f64 / 2.0,
            },
            t1_ms: t1,
            t2_ms: t2,
            proton_density: pd,
        }
    }

    #[test]
    fn constant_region_rasterizes_to_constant_map() {
        let spec = PhantomSpec {
            height: 16,
            width: 16,
            regions: vec![full_grid_region(16, 16, 1000.0, 50.0, 1.0)],
            seed: 0,
        };
        let maps = generate_phantom(&spec).unwrap();
        for p in 0..16 * 16 {
            if maps.support.data()[p] != 0.0 {
                assert_eq!(maps.t1.data()[p], 1000.0);
                assert_eq!(maps.t2.data()[p], 50.0);
            } else {
                assert_eq!(maps.t1.data()[p], 0.0);
            }
        }
    }

    #[test]
    fn disjoint_ellipses_take_their_own_values() {
        let mk = |cx: f64, t1: f64| Region {
            shape: RegionShape::Ellipse {
                cy: 16.0,
                cx,
                ry: 6.0,
                rx: 6.0,
            },
            t1_ms: t1,
            t2_ms: 40.0,
            proton_density: 1.0,
        };
        let spec = PhantomSpec {
            height: 32,
            width: 32,
            regions: vec![mk(8.0, 700.0), mk(24.0, 1500.0)],
            seed: 0,
        };
        let maps = generate_phantom(&spec).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                let p = i * 32 + j;
                if maps.support.data()[p] == 0.0 {
                    continue;
                }
                let expect = if (j as f64) < 16.0 { 700.0 } else { 1500.0 };
                assert_eq!(maps.t1.data()[p], expect, "pixel ({i},{j})");
            }
        }
    }

    #[test]
    fn rasterized_areas_match_analytic_within_two_percent() {
        // myocardial annulus over blood disk at 64x64
        let spec = PhantomSpec::default_cardiac(64, 64);
        let maps = generate_phantom(&spec).unwrap();
        let blood_area = spec.regions[1].shape.analytic_area();
        let myo_area = spec.regions[2].shape.analytic_area();
        let blood_count = maps.t1.data().iter().filter(|&&v| v == 1800.0).count() as f64;
        // the insert lies outside the annulus, so the T1 values partition the regions
        let myo_count = maps.t1.data().iter().filter(|&&v| v == 1200.0).count() as f64;
        assert!(
            (blood_count - blood_area).abs() / blood_area < 0.02,
            "blood: {blood_count} px vs analytic {blood_area}"
        );
        assert!(
            (myo_count - myo_area).abs() / myo_area < 0.02,
            "myocardium: {myo_count} px vs analytic {myo_area}"
        );
    }

    #[test]
    fn zero_area_region_rejected() {
        let mut spec = PhantomSpec::default_cardiac(32, 32);
        spec.regions[0].shape = RegionShape::Ellipse {
            cy: 16.0,
            cx: 16.0,
            ry: 0.0,
            rx: 5.0,
        };
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn t2prep_magnitudes_follow_the_exponential() {
        let spec = PhantomSpec {
            height: 4,
            width: 4,
            regions: vec![full_grid_region(4, 4, 1000.0, 50.0, 1.0)],
            seed: 0,
        };
        let maps = generate_phantom(&spec).unwrap();
        let seq = SequenceSpec {
            kind: SequenceKind::T2prep,
            times_ms: vec![0.0, 25.0, 50.0],
            inversion_factor: 2.0,
        };
        let frames = simulate_frames(&maps, &seq, &PhaseSpec::default()).unwrap();
        let expect = [1.0, (-0.5f64).exp(), (-1.0f64).exp()];
        let p = (2 * 4 + 2) * 2; // central pixel, on support
        for t in 0..3 {
            let base = t * 4 * 4 * 2 + p;
            let mag = (frames.data.data()[base].powi(2) + frames.data.data()[base + 1].powi(2)).sqrt();
            assert!(
                (mag - expect[t]).abs() < 1e-12,
                "frame {t}: |S| = {mag}, expected {}",
                expect[t]
            );
        }
    }

    #[test]
    fn molli_recovers_to_proton_density_at_long_ti() {
        let a = 0.85;
        let s = molli_signal(a, 2.0 * a, 1000.0, 1e9);
        assert!((s - a).abs() < 1e-12);
    }

    #[test]
    fn molli_zero_crossing_at_t1star_ln2() {
        // inversion_factor 2 => T1* = T1; crossing at T1*·ln 2 ≈ 693.1 ms
        let t1 = 1000.0;
        let f = 2.0;
        let t1_star = t1 / (f - 1.0);
        assert_eq!(t1_star, 1000.0);
        let crossing = t1_star * std::f64::consts::LN_2;
        assert!((crossing - 693.147).abs() < 0.01);
        let s = molli_signal(1.0, f, t1_star, crossing);
        assert!(s.abs() < 1e-12, "signal at crossing: {s}");
        assert!(molli_signal(1.0, f, t1_star, crossing - 50.0) < 0.0);
        assert!(molli_signal(1.0, f, t1_star, crossing + 50.0) > 0.0);
    }

    #[test]
    fn molli_magnitude_dips_then_recovers() {
        let (a, b, t1_star) = (1.0f64, 1.8f64, 800.0f64);
        let crossing = t1_star * (b / a).ln();
        let before: Vec<f64> = (0..20)
            .map(|k| molli_signal(a, b, t1_star, crossing * k as f64 / 20.0).abs())
            .collect();
        for win in before.windows(2) {
            assert!(win[1] < win[0], "magnitude must fall before the crossing");
        }
        let after: Vec<f64> = (1..20)
            .map(|k| molli_signal(a, b, t1_star, crossing + 200.0 * k as f64).abs())
            .collect();
        for win in after.windows(2) {
            assert!(win[1] > win[0], "magnitude must rise after the crossing");
        }
    }

    #[test]
    fn t2prep_magnitude_strictly_decreasing() {
        let mags: Vec<f64> = (0..10).map(|k| t2prep_signal(1.0, 45.0, 10.0 * k as f64)).collect();
        for win in mags.windows(2) {
            assert!(win[1] < win[0]);
        }
    }

    #[test]
    fn simulate_frames_is_pixel_wise() {
        // permuting map pixels permutes the frames identically
        let spec = PhantomSpec::default_cardiac(16, 16);
        let maps = generate_phantom(&spec).unwrap();
        let seq = SequenceSpec::molli_default();
        let phase = PhaseSpec { coeffs: [0.4, 0.0, 0.0, 0.0, 0.0, 0.0] }; // spatially constant
        let frames = simulate_frames(&maps, &seq, &phase).unwrap();

        // circular shift of all pixels by 5
        let n = 16 * 16;
        let shift = |t: &Tensor| {
            let mut d = vec![0.0; n];
            for p in 0..n {
                d[(p + 5) % n] = t.data()[p];
            }
            Tensor::from_vec(&[16, 16], d).unwrap()
        };
        let shifted = TissueMaps {
            t1: shift(&maps.t1),
            t2: shift(&maps.t2),
            pd: shift(&maps.pd),
            support: shift(&maps.support),
        };
        let frames2 = simulate_frames(&shifted, &seq, &phase).unwrap();
        for t in 0..seq.num_frames() {
            for p in 0..n {
                let src = (t * n + p) * 2;
                let dst = (t * n + (p + 5) % n) * 2;
                assert_eq!(frames.data.data()[src], frames2.data.data()[dst]);
                assert_eq!(frames.data.data()[src + 1], frames2.data.data()[dst + 1]);
            }
        }
    }

    #[test]
    fn negative_times_rejected() {
        let seq = SequenceSpec {
            kind: SequenceKind::Molli,
            times_ms: vec![-10.0, 100.0],
            inversion_factor: 2.0,
        };
        assert!(seq.validate().is_err());
        let unordered = SequenceSpec {
            kind: SequenceKind::T2prep,
            times_ms: vec![10.0, 10.0],
            inversion_factor: 2.0,
        };
        assert!(unordered.validate().is_err());
    }

    #[test]
    fn single_coil_normalizes_to_unit_magnitude() {
        let csm = simulate_coils(1, 12, 10, 3).unwrap();
        for p in 0..12 * 10 {
            let (re, im) = (csm.maps.data()[p * 2], csm.maps.data()[p * 2 + 1]);
            assert!(((re * re + im * im).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn coil_sum_of_squares_is_exactly_one() {
        for coils in [2usize, 4, 10] {
            let csm = simulate_coils(coils, 16, 12, 17).unwrap();
            assert!(csm.max_sos_deviation() < 1e-12);
        }
    }

    #[test]
    fn coil_simulation_is_bitwise_deterministic() {
        let a = simulate_coils(6, 20, 16, 123).unwrap();
        let b = simulate_coils(6, 20, 16, 123).unwrap();
        assert_eq!(a.maps, b.maps);
        let c = simulate_coils(6, 20, 16, 124).unwrap();
        assert!(a.maps.max_abs_diff(&c.maps) > 0.0);
    }

    #[test]
    fn randomized_cardiac_specs_stay_valid() {
        for seed in 0..50 {
            let spec = PhantomSpec::randomized_cardiac(64, 64, seed);
            spec.validate().unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        }
    }
}
