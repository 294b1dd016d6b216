//! Centered Fourier operators, undersampling masks, k-space scaling, and the
//! multi-coil encoding operator with its adjoint.
//!
//! All image/k-space tensors use the trailing complex convention `[..., H, W, 2]`.

use crate::error::{Error, Result};
use crate::fft;
use crate::tensor::{complex, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which spatial axis carries the phase-encode lines a mask applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PeAxis {
    #[default]
    Rows,
    Cols,
}

/// Regular undersampling pattern: every `accel_k`-th line starting at
/// `offset_s`, plus a preserved floor-centered block of `center_lines` lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub width_pe: usize,
    pub accel_k: usize,
    pub offset_s: usize,
    pub center_lines: usize,
}

impl MaskSpec {
    pub fn new(width_pe: usize, accel_k: usize, offset_s: usize, center_lines: usize) -> Result<Self> {
        let spec = MaskSpec {
            width_pe,
            accel_k,
            offset_s,
            center_lines,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_pe == 0 || self.accel_k == 0 {
            return Err(Error::arg("mask: width_pe and accel_k must be positive"));
        }
        if self.offset_s >= self.accel_k {
            return Err(Error::arg(format!(
                "mask: offset_s {} must lie in [0, {})",
                self.offset_s, self.accel_k
            )));
        }
        if self.center_lines > self.width_pe {
            return Err(Error::arg(format!(
                "mask: center_lines {} exceeds width_pe {}",
                self.center_lines, self.width_pe
            )));
        }
        Ok(())
    }

    /// First line of the floor-centered calibration block.
    pub fn center_start(&self) -> usize {
        (self.width_pe - self.center_lines) / 2
    }
}

/// Binary line mask (1.0 sampled, 0.0 skipped).
pub fn make_mask(spec: &MaskSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let start = spec.center_start();
    let end = start + spec.center_lines;
    Ok((0..spec.width_pe)
        .map(|i| {
            let arithmetic = i % spec.accel_k == spec.offset_s;
            let center = i >= start && i < end;
            if arithmetic || center {
                1.0
            } else {
                0.0
            }
        })
        .collect())
}

/// Mask with the offset drawn uniformly from `[0, accel_k)`; the training-time
/// augmentation. Deterministic for a given seed.
pub fn random_mask(width_pe: usize, accel_k: usize, center_lines: usize, seed: u64) -> Result<MaskSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset_s = rng.random_range(0..accel_k.max(1));
    MaskSpec::new(width_pe, accel_k, offset_s, center_lines)
}

pub fn sampled_line_count(mask: &[f64]) -> usize {
    mask.iter().filter(|&&v| v != 0.0).count()
}

/// Lines-available over lines-acquired; reported rather than assumed equal to
/// `accel_k` because the center block overlaps the arithmetic set.
pub fn effective_acceleration(spec: &MaskSpec) -> Result<f64> {
    let mask = make_mask(spec)?;
    Ok(spec.width_pe as f64 / sampled_line_count(&mask) as f64)
}

fn spatial_dims(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 3 || *s.last().unwrap() != 2 {
        return Err(Error::shape(format!(
            "expected trailing [H, W, 2] axes, got {s:?}"
        )));
    }
    Ok((s[s.len() - 3], s[s.len() - 2]))
}

/// Centered orthonormal 2D FFT over the trailing spatial axes.
pub fn fft2c(t: &Tensor) -> Result<Tensor> {
    let (h, w) = spatial_dims(t)?;
    let mut data = t.data().to_vec();
    fft::transform_slabs(&mut data, t.len() / (h * w * 2), h, w, true);
    Tensor::from_vec(t.shape(), data)
}

/// Centered orthonormal inverse 2D FFT; exact inverse of [`fft2c`].
pub fn ifft2c(t: &Tensor) -> Result<Tensor> {
    let (h, w) = spatial_dims(t)?;
    let mut data = t.data().to_vec();
    fft::transform_slabs(&mut data, t.len() / (h * w * 2), h, w, false);
    Tensor::from_vec(t.shape(), data)
}

/// Zeroes unsampled phase-encode lines of every `[H, W, 2]` slab.
pub fn apply_mask(t: &Tensor, mask: &[f64], axis: PeAxis) -> Result<Tensor> {
    let (h, w) = spatial_dims(t)?;
    let expect = match axis {
        PeAxis::Rows => h,
        PeAxis::Cols => w,
    };
    if mask.len() != expect {
        return Err(Error::shape(format!(
            "mask length {} does not match phase-encode extent {}",
            mask.len(),
            expect
        )));
    }
    let mut out = t.clone();
    let slabs = t.len() / (h * w * 2);
    let data = out.data_mut();
    for s in 0..slabs {
        let base = s * h * w * 2;
        for i in 0..h {
            for j in 0..w {
                let m = match axis {
                    PeAxis::Rows => mask[i],
                    PeAxis::Cols => mask[j],
                };
                if m == 0.0 {
                    let idx = base + (i * w + j) * 2;
                    data[idx] = 0.0;
                    data[idx + 1] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Materializes a line mask as an `[H, W, 2]` multiplier plane (for graph use).
pub fn mask_plane(mask: &[f64], h: usize, w: usize, axis: PeAxis) -> Tensor {
    let mut data = vec![0.0; h * w * 2];
    for i in 0..h {
        for j in 0..w {
            let m = match axis {
                PeAxis::Rows => mask[i],
                PeAxis::Cols => mask[j],
            };
            let idx = (i * w + j) * 2;
            data[idx] = m;
            data[idx + 1] = m;
        }
    }
    Tensor::from_vec(&[h, w, 2], data).unwrap()
}

/// Multi-coil k-space for one slice: `[W_coils, T, H, W]` complex plus the
/// mask that produced it.
#[derive(Debug, Clone)]
pub struct KSpaceData {
    pub data: Tensor,
    pub mask: Vec<f64>,
    pub spec: MaskSpec,
    pub pe_axis: PeAxis,
    pub scale_applied: bool,
}

impl KSpaceData {
    pub fn new(data: Tensor, spec: MaskSpec, pe_axis: PeAxis) -> Result<Self> {
        if data.rank() != 5 || *data.shape().last().unwrap() != 2 {
            return Err(Error::shape(format!(
                "k-space data must be [coils, T, H, W, 2], got {:?}",
                data.shape()
            )));
        }
        if data.shape()[0] == 0 {
            return Err(Error::arg("k-space needs at least one coil"));
        }
        let mask = make_mask(&spec)?;
        Ok(KSpaceData {
            data,
            mask,
            spec,
            pe_axis,
            scale_applied: false,
        })
    }

    pub fn num_coils(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn num_frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn frame(&self, t: usize) -> Tensor {
        self.data.index_axis(1, t)
    }

    /// Applies the stored mask to the data (idempotent).
    pub fn masked(&self) -> Result<Tensor> {
        apply_mask(&self.data, &self.mask, self.pe_axis)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleDirection {
    Apply,
    Reverse,
}

/// Multiplies (or divides back) all k-space values by a fixed factor; the
/// `scale_applied` flag enforces apply/reverse pairing.
pub fn scale_kspace(ksp: &mut KSpaceData, factor: f64, direction: ScaleDirection) -> Result<()> {
    if !(factor.is_finite() && factor != 0.0) {
        return Err(Error::arg("scale factor must be finite and non-zero"));
    }
    match direction {
        ScaleDirection::Apply => {
            if ksp.scale_applied {
                return Err(Error::arg("k-space scaling already applied"));
            }
            for v in ksp.data.data_mut() {
                *v *= factor;
            }
            ksp.scale_applied = true;
        }
        ScaleDirection::Reverse => {
            if !ksp.scale_applied {
                return Err(Error::arg("k-space scaling reverse without apply"));
            }
            for v in ksp.data.data_mut() {
                *v /= factor;
            }
            ksp.scale_applied = false;
        }
    }
    Ok(())
}

/// Encoding operator `E = M · F · C` for one frame: per coil, weight the
/// combined image by the sensitivity, Fourier transform, zero masked lines.
///
/// `x: [H, W, 2]`, `csm: [coils, H, W, 2]` → `[coils, H, W, 2]`.
pub fn encode(x: &Tensor, csm: &Tensor, mask: &[f64], pe_axis: PeAxis) -> Result<Tensor> {
    complex::check_complex(x)?;
    if csm.rank() != 4 || csm.shape()[1..] != x.shape()[..] {
        return Err(Error::shape(format!(
            "encode: csm {:?} incompatible with image {:?}",
            csm.shape(),
            x.shape()
        )));
    }
    let weighted = complex::cmul_broadcast(csm, x);
    let k = fft2c(&weighted)?;
    apply_mask(&k, mask, pe_axis)
}

/// Adjoint of [`encode`]: zero masked lines, inverse transform, weight by the
/// conjugate sensitivities, sum over coils. `y: [coils, H, W, 2] → [H, W, 2]`.
pub fn encode_adjoint(y: &Tensor, csm: &Tensor, mask: &[f64], pe_axis: PeAxis) -> Result<Tensor> {
    if y.shape() != csm.shape() {
        return Err(Error::shape(format!(
            "encode_adjoint: k-space {:?} vs csm {:?}",
            y.shape(),
            csm.shape()
        )));
    }
    let masked = apply_mask(y, mask, pe_axis)?;
    let imgs = ifft2c(&masked)?;
    let weighted = complex::cmul(&imgs, &complex::conj(csm));
    let (coils, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let mut out = vec![0.0; h * w * 2];
    for c in 0..coils {
        let base = c * h * w * 2;
        for i in 0..h * w * 2 {
            out[i] += weighted.data()[base + i];
        }
    }
    Tensor::from_vec(&[h, w, 2], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sampled_set(mask: &[f64]) -> Vec<usize> {
        mask.iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    #[test]
    fn mask_rule_enumerated_by_hand() {
        let spec = MaskSpec::new(16, 4, 1, 4).unwrap();
        let mask = make_mask(&spec).unwrap();
        assert_eq!(sampled_set(&mask), vec![1, 5, 6, 7, 8, 9, 13]);
    }

    #[test]
    fn mask_k1_samples_everything() {
        let spec = MaskSpec::new(12, 1, 0, 3).unwrap();
        let mask = make_mask(&spec).unwrap();
        assert_eq!(sampled_line_count(&mask), 12);
    }

    #[test]
    fn mask_paper_geometry_counts() {
        // width 144, k=4, s=0, center 24: 36 arithmetic ∪ 24 center, 6 overlap
        let spec = MaskSpec::new(144, 4, 0, 24).unwrap();
        let mask = make_mask(&spec).unwrap();
        assert_eq!(spec.center_start(), 60);
        assert_eq!(sampled_line_count(&mask), 54);
        assert!((effective_acceleration(&spec).unwrap() - 144.0 / 54.0).abs() < 1e-12);
    }

    #[test]
    fn mask_rejects_bad_specs() {
        assert!(MaskSpec::new(16, 4, 4, 4).is_err());
        assert!(MaskSpec::new(16, 4, 0, 17).is_err());
        assert!(MaskSpec::new(0, 4, 0, 0).is_err());
    }

    #[test]
    fn random_mask_offsets_cover_uniformly() {
        let mut counts = [0usize; 4];
        for seed in 0..1000 {
            let spec = random_mask(16, 4, 4, seed).unwrap();
            counts[spec.offset_s] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / 1000.0;
            assert!((freq - 0.25).abs() < 0.05, "offset frequency {freq}");
        }
        // determinism and the k=1 degenerate case
        assert_eq!(
            random_mask(16, 4, 4, 7).unwrap(),
            random_mask(16, 4, 4, 7).unwrap()
        );
        assert_eq!(random_mask(16, 1, 4, 123).unwrap().offset_s, 0);
    }

    #[test]
    fn mask_application_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Tensor::randn(&[2, 8, 6, 2], &mut rng);
        let spec = MaskSpec::new(8, 2, 1, 2).unwrap();
        let mask = make_mask(&spec).unwrap();
        let once = apply_mask(&t, &mask, PeAxis::Rows).unwrap();
        let twice = apply_mask(&once, &mask, PeAxis::Rows).unwrap();
        assert_eq!(once, twice);
        // masked-out lines are exactly zero
        for (i, &m) in mask.iter().enumerate() {
            if m == 0.0 {
                let row = once.index_axis(1, i);
                assert_eq!(row.max_abs(), 0.0);
            }
        }
    }

    #[test]
    fn scale_round_trip_and_flag_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Tensor::randn(&[1, 1, 4, 4, 2], &mut rng);
        let spec = MaskSpec::new(4, 1, 0, 0).unwrap();
        let mut ksp = KSpaceData::new(data.clone(), spec, PeAxis::Rows).unwrap();

        scale_kspace(&mut ksp, 100.0, ScaleDirection::Apply).unwrap();
        assert!(scale_kspace(&mut ksp, 100.0, ScaleDirection::Apply).is_err());
        scale_kspace(&mut ksp, 100.0, ScaleDirection::Reverse).unwrap();
        assert!(scale_kspace(&mut ksp, 100.0, ScaleDirection::Reverse).is_err());
        for (a, b) in ksp.data.data().iter().zip(data.data()) {
            assert!((a - b).abs() <= 1e-15 * b.abs());
        }

        let mut one = KSpaceData::new(
            Tensor::from_vec(&[1, 1, 1, 1, 2], vec![3e-3, 0.0]).unwrap(),
            MaskSpec::new(1, 1, 0, 0).unwrap(),
            PeAxis::Rows,
        )
        .unwrap();
        scale_kspace(&mut one, 100.0, ScaleDirection::Apply).unwrap();
        assert!((one.data.data()[0] - 0.3).abs() < 1e-16);
    }

    #[test]
    fn fft2c_wrappers_roundtrip_and_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[7, 6, 2], &mut rng);
        let k = fft2c(&x).unwrap();
        let back = ifft2c(&k).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
        assert!((x.norm2() - k.norm2()).abs() < 1e-10);
    }

    #[test]
    fn full_mask_single_unit_coil_reduces_to_fft() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (6, 5);
        let x = Tensor::randn(&[h, w, 2], &mut rng);
        let mut csm = Tensor::zeros(&[1, h, w, 2]);
        for i in 0..h * w {
            csm.data_mut()[2 * i] = 1.0;
        }
        let mask = vec![1.0; h];
        let y = encode(&x, &csm, &mask, PeAxis::Rows).unwrap();
        let expect = fft2c(&x).unwrap();
        assert!(y.index_axis(0, 0).max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn encode_adjoint_identity_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..20 {
            let (h, w, coils) = (8, 6, 1 + trial % 4);
            let x = Tensor::randn(&[h, w, 2], &mut rng);
            let csm = Tensor::randn(&[coils, h, w, 2], &mut rng);
            let y = Tensor::randn(&[coils, h, w, 2], &mut rng);
            let spec = MaskSpec::new(h, 1 + trial % 3, 0, 2).unwrap();
            let mask = make_mask(&spec).unwrap();
            let ex = encode(&x, &csm, &mask, PeAxis::Rows).unwrap();
            let ay = encode_adjoint(&y, &csm, &mask, PeAxis::Rows).unwrap();
            let lhs = complex::dot_re(&ex, &y);
            let rhs = complex::dot_re(&x, &ay);
            assert!(
                (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0),
                "adjoint identity failed: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn normal_operator_is_positive_semidefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let (h, w, coils) = (6, 6, 3);
            let x = Tensor::randn(&[h, w, 2], &mut rng);
            let csm = Tensor::randn(&[coils, h, w, 2], &mut rng);
            let spec = MaskSpec::new(h, 2, 1, 2).unwrap();
            let mask = make_mask(&spec).unwrap();
            let ex = encode(&x, &csm, &mask, PeAxis::Rows).unwrap();
            let aex = encode_adjoint(&ex, &csm, &mask, PeAxis::Rows).unwrap();
            let quad = complex::dot_re(&x, &aex);
            assert!(quad >= -1e-12, "⟨x, EᴴEx⟩ = {quad}");
        }
    }

    #[test]
    fn encode_matches_dense_operator_oracle() {
        // Assemble the encode matrix column-by-column (complex unit inputs)
        // and compare against the dense M·F·C product built independently
        // from the centered DFT formula.
        use nalgebra::{Complex, DMatrix};
        type C64 = Complex<f64>;

        let (h, w, coils) = (4usize, 4usize, 2usize);
        let n = h * w;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let csm = Tensor::randn(&[coils, h, w, 2], &mut rng);
        let spec = MaskSpec::new(h, 2, 0, 2).unwrap();
        let mask = make_mask(&spec).unwrap();

        // implementation route: E e_col for real unit images gives the columns
        let mut e_impl = DMatrix::<C64>::zeros(coils * n, n);
        for col in 0..n {
            let mut x = Tensor::zeros(&[h, w, 2]);
            x.data_mut()[2 * col] = 1.0;
            let y = encode(&x, &csm, &mask, PeAxis::Rows).unwrap();
            for row in 0..coils * n {
                e_impl[(row, col)] = C64::new(y.data()[2 * row], y.data()[2 * row + 1]);
            }
        }

        // oracle route: dense M · F · C with the floor-centered DFT matrix
        let mut f_mat = DMatrix::<C64>::zeros(n, n);
        let (ch, cw) = ((h / 2) as isize, (w / 2) as isize);
        let scale = 1.0 / (n as f64).sqrt();
        for u in 0..h as isize {
            for v in 0..w as isize {
                for m in 0..h as isize {
                    for nn in 0..w as isize {
                        let ph = -2.0
                            * std::f64::consts::PI
                            * (((u - ch) * (m - ch)) as f64 / h as f64
                                + ((v - cw) * (nn - cw)) as f64 / w as f64);
                        f_mat[((u * w as isize + v) as usize, (m * w as isize + nn) as usize)] =
                            C64::new(ph.cos() * scale, ph.sin() * scale);
                    }
                }
            }
        }
        let mut max_err = 0.0f64;
        for c in 0..coils {
            for row in 0..n {
                let mv = mask[row / w];
                for col in 0..n {
                    let s = C64::new(csm.data()[(c * n + col) * 2], csm.data()[(c * n + col) * 2 + 1]);
                    let oracle = f_mat[(row, col)] * s * C64::new(mv, 0.0);
                    max_err = max_err.max((e_impl[(c * n + row, col)] - oracle).norm());
                }
            }
        }
        assert!(max_err < 1e-12, "dense operator mismatch: {max_err}");
    }
}
