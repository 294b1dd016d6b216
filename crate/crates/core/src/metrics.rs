//! Evaluation protocol: ROI cropping and PSNR / SSIM / NMSE / RMSE, for
//! images (per frame, then averaged) and for parameter maps (support pixels).

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// How the PSNR/SSIM dynamic range is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataRange {
    /// Maximum of the reference image (the default policy).
    #[default]
    RefMax,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricOptions {
    pub data_range: DataRange,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            data_range: DataRange::RefMax,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
        }
    }
}

/// One set of the four metrics. PSNR is +inf for identical inputs and is
/// serialized as the string `"inf"` in that case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSet {
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
    pub rmse: f64,
}

impl Serialize for MetricSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut s = serializer.serialize_struct("MetricSet", 4)?;
        if self.psnr.is_infinite() {
            s.serialize_field("psnr", "inf")?;
        } else {
            s.serialize_field("psnr", &self.psnr)?;
        }
        s.serialize_field("ssim", &self.ssim)?;
        s.serialize_field("nmse", &self.nmse)?;
        s.serialize_field("rmse", &self.rmse)?;
        s.end()
    }
}

impl<'de> Deserialize<'de> for MetricSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            psnr: serde_json::Value,
            ssim: f64,
            nmse: f64,
            rmse: f64,
        }
        let raw = Raw::deserialize(deserializer)?;
        let psnr = match raw.psnr {
            serde_json::Value::String(s) if s == "inf" => f64::INFINITY,
            serde_json::Value::Number(n) => n.as_f64().ok_or_else(|| D::Error::custom("bad psnr"))?,
            _ => return Err(D::Error::custom("bad psnr field")),
        };
        Ok(MetricSet {
            psnr,
            ssim: raw.ssim,
            nmse: raw.nmse,
            rmse: raw.rmse,
        })
    }
}

/// Per-subject evaluation record: image metrics (frame-averaged) plus,
/// when maps were fitted, map metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub image: MetricSet,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map: Option<MetricSet>,
}

/// Keeps the floor-centered central 50% of rows and round(W/3) columns.
pub fn crop_roi(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 2 {
        return Err(Error::shape(format!("crop_roi expects [H, W], got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    if h < 2 || w < 3 {
        return Err(Error::arg("crop_roi needs H >= 2 and W >= 3"));
    }
    let keep_h = h / 2;
    let keep_w = (w as f64 / 3.0).round() as usize;
    let r0 = (h - keep_h) / 2;
    let c0 = (w - keep_w) / 2;
    let mut data = Vec::with_capacity(keep_h * keep_w);
    for i in 0..keep_h {
        let base = (r0 + i) * w + c0;
        data.extend_from_slice(&image.data()[base..base + keep_w]);
    }
    Tensor::from_vec(&[keep_h, keep_w], data)
}

fn resolve_range(reference: &Tensor, range: DataRange) -> f64 {
    match range {
        DataRange::RefMax => reference.data().iter().cloned().fold(0.0f64, f64::max),
        DataRange::Fixed(v) => v,
    }
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Valid-region separable Gaussian filtering: output is (H−win+1)×(W−win+1).
fn filter_valid(img: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let win = kernel.len();
    let ow = w - win + 1;
    let oh = h - win + 1;
    // rows first
    let mut tmp = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * img[i * w + j + k];
            }
            tmp[i * ow + j] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp[(i + k) * ow + j];
            }
            out[i * ow + j] = acc;
        }
    }
    out
}

fn ssim_mean(reference: &Tensor, test: &Tensor, range: f64, opts: &MetricOptions) -> Result<f64> {
    let (h, w) = (reference.shape()[0], reference.shape()[1]);
    let win = opts.ssim_window;
    if h < win || w < win {
        return Err(Error::arg(format!(
            "ssim: image {h}x{w} smaller than the {win}x{win} window"
        )));
    }
    let kernel = gaussian_kernel(win, opts.ssim_sigma);
    let x = reference.data();
    let y = test.data();
    let xy: Vec<f64> = x.iter().zip(y).map(|(&a, &b)| a * b).collect();
    let xx: Vec<f64> = x.iter().map(|&a| a * a).collect();
    let yy: Vec<f64> = y.iter().map(|&b| b * b).collect();
    let mu_x = filter_valid(x, h, w, &kernel);
    let mu_y = filter_valid(y, h, w, &kernel);
    let e_xx = filter_valid(&xx, h, w, &kernel);
    let e_yy = filter_valid(&yy, h, w, &kernel);
    let e_xy = filter_valid(&xy, h, w, &kernel);
    let c1 = (opts.ssim_k1 * range).powi(2);
    let c2 = (opts.ssim_k2 * range).powi(2);
    let mut acc = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = e_xx[i] - mx * mx;
        let vy = e_yy[i] - my * my;
        let vxy = e_xy[i] - mx * my;
        acc += ((2.0 * mx * my + c1) * (2.0 * vxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(acc / mu_x.len() as f64)
}

/// Metrics on one pre-cropped magnitude image pair.
pub fn compute_metrics(reference: &Tensor, test: &Tensor, opts: &MetricOptions) -> Result<MetricSet> {
    if reference.shape() != test.shape() {
        return Err(Error::shape(format!(
            "compute_metrics: {:?} vs {:?}",
            reference.shape(),
            test.shape()
        )));
    }
    if reference.rank() != 2 {
        return Err(Error::shape("compute_metrics expects [H, W] magnitudes"));
    }
    let n = reference.len() as f64;
    let mut se = 0.0;
    let mut ref_sq = 0.0;
    for (&a, &b) in reference.data().iter().zip(test.data()) {
        se += (a - b) * (a - b);
        ref_sq += a * a;
    }
    if ref_sq == 0.0 {
        return Err(Error::arg("compute_metrics: reference is identically zero"));
    }
    let rmse = (se / n).sqrt();
    let nmse = se / ref_sq;
    let range = resolve_range(reference, opts.data_range);
    let psnr = if rmse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (range / rmse).log10()
    };
    let ssim = ssim_mean(reference, test, range, opts)?;
    Ok(MetricSet {
        psnr,
        ssim,
        nmse,
        rmse,
    })
}

/// Per-frame metrics averaged over the stack. Inputs are matching slices of
/// pre-cropped magnitude frames.
pub fn compute_frame_metrics(
    reference: &[Tensor],
    test: &[Tensor],
    opts: &MetricOptions,
) -> Result<MetricSet> {
    if reference.len() != test.len() || reference.is_empty() {
        return Err(Error::arg("compute_frame_metrics: mismatched frame lists"));
    }
    let mut acc = MetricSet {
        psnr: 0.0,
        ssim: 0.0,
        nmse: 0.0,
        rmse: 0.0,
    };
    for (r, t) in reference.iter().zip(test) {
        let m = compute_metrics(r, t, opts)?;
        acc.psnr += m.psnr;
        acc.ssim += m.ssim;
        acc.nmse += m.nmse;
        acc.rmse += m.rmse;
    }
    let n = reference.len() as f64;
    Ok(MetricSet {
        psnr: acc.psnr / n,
        ssim: acc.ssim / n,
        nmse: acc.nmse / n,
        rmse: acc.rmse / n,
    })
}

/// Map metrics on the support-pixel subset (both maps' non-fit pixels are
/// excluded from RMSE/NMSE/PSNR; SSIM runs on the masked images since it is
/// window-based).
pub fn compute_map_metrics(
    reference: &Tensor,
    test: &Tensor,
    mask: &Tensor,
    opts: &MetricOptions,
) -> Result<MetricSet> {
    if reference.shape() != test.shape() || reference.shape() != mask.shape() {
        return Err(Error::shape("compute_map_metrics: shape mismatch"));
    }
    let mut se = 0.0;
    let mut ref_sq = 0.0;
    let mut count = 0.0;
    let mut ref_max = 0.0f64;
    for i in 0..reference.len() {
        if mask.data()[i] == 0.0 {
            continue;
        }
        let (a, b) = (reference.data()[i], test.data()[i]);
        se += (a - b) * (a - b);
        ref_sq += a * a;
        ref_max = ref_max.max(a);
        count += 1.0;
    }
    if count == 0.0 || ref_sq == 0.0 {
        return Err(Error::arg("compute_map_metrics: empty or zero support"));
    }
    let rmse = (se / count).sqrt();
    let nmse = se / ref_sq;
    let range = match opts.data_range {
        DataRange::RefMax => ref_max,
        DataRange::Fixed(v) => v,
    };
    let psnr = if rmse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (range / rmse).log10()
    };
    let masked_ref = reference.mul(mask);
    let masked_test = test.mul(mask);
    let ssim = ssim_mean(&masked_ref, &masked_test, range, opts)?;
    Ok(MetricSet {
        psnr,
        ssim,
        nmse,
        rmse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn crop_dimensions_follow_the_protocol() {
        let full = Tensor::zeros(&[144, 512]);
        let cropped = crop_roi(&full).unwrap();
        assert_eq!(cropped.shape(), &[72, 171]);

        let small = Tensor::zeros(&[4, 6]);
        assert_eq!(crop_roi(&small).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn crop_composition_halves_rows_again() {
        let x = Tensor::zeros(&[64, 96]);
        let once = crop_roi(&x).unwrap();
        let twice = crop_roi(&once).unwrap();
        assert_eq!(once.shape()[0], 32);
        assert_eq!(twice.shape()[0], once.shape()[0] / 2);
    }

    #[test]
    fn crop_extracts_the_centered_block() {
        let mut x = Tensor::zeros(&[8, 9]);
        for i in 0..8 {
            for j in 0..9 {
                x.set(&[i, j], (i * 9 + j) as f64);
            }
        }
        let c = crop_roi(&x).unwrap(); // keep 4 rows, 3 cols
        assert_eq!(c.shape(), &[4, 3]);
        assert_eq!(c.at(&[0, 0]), x.at(&[2, 3]));
        assert_eq!(c.at(&[3, 2]), x.at(&[5, 5]));
    }

    #[test]
    fn identical_inputs_give_perfect_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[16, 16], &mut rng).map(f64::abs);
        let m = compute_metrics(&x, &x, &MetricOptions::default()).unwrap();
        assert!(m.psnr.is_infinite());
        assert_eq!(m.ssim, 1.0);
        assert_eq!(m.nmse, 0.0);
        assert_eq!(m.rmse, 0.0);
    }

    #[test]
    fn constant_offset_matches_hand_computed_values() {
        // ref ≡ 1, test = ref + 0.1, range 1 → rmse 0.1, psnr 20 dB, nmse 0.01
        let h = 16;
        let reference = Tensor::full(&[h, h], 1.0);
        let test = Tensor::full(&[h, h], 1.1);
        let opts = MetricOptions {
            data_range: DataRange::Fixed(1.0),
            ..MetricOptions::default()
        };
        let m = compute_metrics(&reference, &test, &opts).unwrap();
        assert!((m.rmse - 0.1).abs() < 1e-12);
        assert!((m.psnr - 20.0).abs() < 1e-10);
        assert!((m.nmse - 0.01).abs() < 1e-14);
    }

    #[test]
    fn matches_independent_reference_implementation() {
        // direct per-window oracle with no separable filtering
        fn oracle(reference: &Tensor, test: &Tensor, opts: &MetricOptions) -> (f64, f64, f64, f64) {
            let (h, w) = (reference.shape()[0], reference.shape()[1]);
            let (x, y) = (reference.data(), test.data());
            let n = (h * w) as f64;
            let se: f64 = x.iter().zip(y).map(|(&a, &b)| (a - b) * (a - b)).sum();
            let rmse = (se / n).sqrt();
            let nmse = se / x.iter().map(|&a| a * a).sum::<f64>();
            let range = x.iter().cloned().fold(0.0f64, f64::max);
            let psnr = 20.0 * (range / rmse).log10();

            let win = opts.ssim_window;
            let half = (win as f64 - 1.0) / 2.0;
            let mut kern = vec![0.0; win * win];
            let mut ks = 0.0;
            for i in 0..win {
                for j in 0..win {
                    let (di, dj) = (i as f64 - half, j as f64 - half);
                    let v = (-(di * di + dj * dj) / (2.0 * opts.ssim_sigma * opts.ssim_sigma)).exp();
                    kern[i * win + j] = v;
                    ks += v;
                }
            }
            for v in &mut kern {
                *v /= ks;
            }
            let c1 = (opts.ssim_k1 * range).powi(2);
            let c2 = (opts.ssim_k2 * range).powi(2);
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for i0 in 0..=(h - win) {
                for j0 in 0..=(w - win) {
                    let (mut mx, mut my, mut exx, mut eyy, mut exy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..win {
                        for j in 0..win {
                            let kv = kern[i * win + j];
                            let (a, b) = (x[(i0 + i) * w + j0 + j], y[(i0 + i) * w + j0 + j]);
                            mx += kv * a;
                            my += kv * b;
                            exx += kv * a * a;
                            eyy += kv * b * b;
                            exy += kv * a * b;
                        }
                    }
                    let (vx, vy, vxy) = (exx - mx * mx, eyy - my * my, exy - mx * my);
                    acc += ((2.0 * mx * my + c1) * (2.0 * vxy + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    cnt += 1.0;
                }
            }
            (psnr, acc / cnt, nmse, rmse)
        }

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let opts = MetricOptions::default();
        for _ in 0..20 {
            let reference = Tensor::randn(&[32, 32], &mut rng).map(|v| v.abs() + 0.1);
            let noise = Tensor::randn(&[32, 32], &mut rng);
            let test = reference.add(&noise.scale(0.05));
            let m = compute_metrics(&reference, &test, &opts).unwrap();
            let (psnr_o, ssim_o, nmse_o, rmse_o) = oracle(&reference, &test, &opts);
            assert!((m.psnr - psnr_o).abs() < 1e-6, "psnr {} vs {}", m.psnr, psnr_o);
            assert!((m.ssim - ssim_o).abs() < 1e-6, "ssim {} vs {}", m.ssim, ssim_o);
            assert!((m.nmse - nmse_o).abs() < 1e-6);
            assert!((m.rmse - rmse_o).abs() < 1e-6);
        }
    }

    #[test]
    fn error_sign_symmetry() {
        // metrics unchanged under test -> 2·ref − test
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reference = Tensor::randn(&[20, 20], &mut rng).map(|v| v.abs() + 0.2);
        let noise = Tensor::randn(&[20, 20], &mut rng).scale(0.03);
        let test = reference.add(&noise);
        let mirrored = reference.scale(2.0).sub(&test);
        let a = compute_metrics(&reference, &test, &MetricOptions::default()).unwrap();
        let b = compute_metrics(&reference, &mirrored, &MetricOptions::default()).unwrap();
        assert!((a.rmse - b.rmse).abs() < 1e-12);
        assert!((a.nmse - b.nmse).abs() < 1e-12);
        assert!((a.psnr - b.psnr).abs() < 1e-10);
    }

    #[test]
    fn psnr_decreases_with_noise_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reference = Tensor::randn(&[24, 24], &mut rng).map(|v| v.abs() + 0.5);
        let levels = [0.01, 0.05, 0.2];
        let mut means = [0.0f64; 3];
        for (li, &sigma) in levels.iter().enumerate() {
            let mut acc = 0.0;
            for _ in 0..100 {
                let noise = Tensor::randn(&[24, 24], &mut rng).scale(sigma);
                let test = reference.add(&noise);
                acc += compute_metrics(&reference, &test, &MetricOptions::default())
                    .unwrap()
                    .psnr;
            }
            means[li] = acc / 100.0;
        }
        assert!(means[0] > means[1] && means[1] > means[2], "psnr trend {means:?}");
    }

    #[test]
    fn zero_reference_rejected() {
        let z = Tensor::zeros(&[16, 16]);
        let t = Tensor::full(&[16, 16], 0.1);
        assert!(compute_metrics(&z, &t, &MetricOptions::default()).is_err());
    }

    #[test]
    fn report_serializes_inf_psnr_as_string() {
        let report = MetricReport {
            image: MetricSet {
                psnr: f64::INFINITY,
                ssim: 1.0,
                nmse: 0.0,
                rmse: 0.0,
            },
            map: None,
        };
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"psnr\":\"inf\""), "{json}");
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert!(back.image.psnr.is_infinite());

        let finite = MetricReport {
            image: MetricSet {
                psnr: 31.25,
                ssim: 0.9,
                nmse: 0.01,
                rmse: 0.002,
            },
            map: None,
        };
        let json = serde_json::to_string(&finite).unwrap();
        assert!(json.contains("\"psnr\":31.25"), "{json}");
    }

    #[test]
    fn map_metrics_use_only_support_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reference = Tensor::randn(&[16, 16], &mut rng).map(|v| v.abs() * 1000.0);
        let mut test = reference.clone();
        let mut mask = Tensor::full(&[16, 16], 1.0);
        // corrupt one pixel and exclude it
        test.set(&[3, 3], 1e9);
        mask.set(&[3, 3], 0.0);
        let m = compute_map_metrics(&reference, &test, &mask, &MetricOptions::default()).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert!(m.psnr.is_infinite());
    }

    #[test]
    fn random_pair_ssim_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let a = Tensor::randn(&[16, 16], &mut rng).map(f64::abs);
            let b = Tensor::randn(&[16, 16], &mut rng).map(f64::abs);
            let m = compute_metrics(&a, &b, &MetricOptions::default()).unwrap();
            assert!(m.ssim >= -1.0 && m.ssim <= 1.0);
            assert!(m.nmse >= 0.0 && m.rmse >= 0.0);
        }
    }
}
