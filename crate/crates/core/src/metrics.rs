//! Full-reference image quality metrics used as the common attack-strength
//! axis, plus ASR-curve construction and small rank statistics.

use crate::tensor::{Tensor, TensorError};
use crate::Real;
use std::fmt;

/// PSNR returned for identical images; keeps curve axes finite.
pub const PSNR_CAP: Real = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricError {
    /// Image too small for the requested multi-scale decomposition.
    TooSmallImage { min_dim: usize, required: usize },
    /// ASR curve requested over no results.
    NoResults,
    Tensor(TensorError),
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricError::TooSmallImage { min_dim, required } => {
                write!(f, "image side {min_dim} below the {required} required by the window")
            }
            MetricError::NoResults => write!(f, "no results to bin"),
            MetricError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for MetricError {}

impl From<TensorError> for MetricError {
    fn from(e: TensorError) -> Self {
        MetricError::Tensor(e)
    }
}

/// Bundle of the three quality metrics for one image pair. MDSI is only
/// defined for RGB inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityScore {
    /// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`].
    pub psnr: Real,
    /// Multi-scale SSIM in [0, 1]; higher is more similar.
    pub ms_ssim: Real,
    /// Mean deviation similarity index; lower is more similar.
    pub mdsi: Option<Real>,
}

fn check_same_shape(a: &Tensor, b: &Tensor, context: &'static str) -> Result<(), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::Tensor(TensorError::ShapeMismatch {
            context,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }));
    }
    Ok(())
}

/// PSNR for images in [0,1]: `10 log10(1 / MSE)`, capped for identical
/// inputs.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<Real, MetricError> {
    check_same_shape(x, y, "psnr")?;
    let mse: Real = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<Real>()
        / x.numel() as Real;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const GAUSS_SIZE: usize = 11;
const GAUSS_SIGMA: Real = 1.5;
const MS_SSIM_WEIGHTS: [Real; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_C1: Real = 0.01 * 0.01;
const SSIM_C2: Real = 0.03 * 0.03;

fn gaussian_kernel() -> [Real; GAUSS_SIZE] {
    let mut k = [0.0; GAUSS_SIZE];
    let mid = (GAUSS_SIZE / 2) as Real;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as Real - mid;
        *v = (-d * d / (2.0 * GAUSS_SIGMA * GAUSS_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-mode separable Gaussian filtering of an H x W plane.
fn gauss_filter_valid(x: &[Real], h: usize, w: usize) -> (Vec<Real>, usize, usize) {
    let k = gaussian_kernel();
    let ow = w - GAUSS_SIZE + 1;
    let oh = h - GAUSS_SIZE + 1;
    // Rows.
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * x[r * w + c + i];
            }
            tmp[r * ow + c] = acc;
        }
    }
    // Columns.
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * tmp[(r + i) * ow + c];
            }
            out[r * ow + c] = acc;
        }
    }
    (out, oh, ow)
}

/// Mean contrast-structure and luminance terms of SSIM over one plane pair.
fn ssim_terms(x: &[Real], y: &[Real], h: usize, w: usize) -> (Real, Real) {
    let (mu_x, oh, ow) = gauss_filter_valid(x, h, w);
    let (mu_y, _, _) = gauss_filter_valid(y, h, w);
    let sq = |v: &[Real]| -> Vec<Real> { v.iter().map(|a| a * a).collect() };
    let (xx, _, _) = gauss_filter_valid(&sq(x), h, w);
    let (yy, _, _) = gauss_filter_valid(&sq(y), h, w);
    let xy: Vec<Real> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (xy, _, _) = gauss_filter_valid(&xy, h, w);

    let n = oh * ow;
    let mut cs_sum = 0.0;
    let mut l_sum = 0.0;
    for i in 0..n {
        let var_x = xx[i] - mu_x[i] * mu_x[i];
        let var_y = yy[i] - mu_y[i] * mu_y[i];
        let cov = xy[i] - mu_x[i] * mu_y[i];
        cs_sum += (2.0 * cov + SSIM_C2) / (var_x + var_y + SSIM_C2);
        l_sum += (2.0 * mu_x[i] * mu_y[i] + SSIM_C1)
            / (mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + SSIM_C1);
    }
    (cs_sum / n as Real, l_sum / n as Real)
}

/// 2x2 average-pool downsampling (stride 2, floor).
fn downsample2(x: &[Real], h: usize, w: usize) -> (Vec<Real>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = 0.25
                * (x[2 * r * w + 2 * c]
                    + x[2 * r * w + 2 * c + 1]
                    + x[(2 * r + 1) * w + 2 * c]
                    + x[(2 * r + 1) * w + 2 * c + 1]);
        }
    }
    (out, oh, ow)
}

/// Number of usable scales for a given image side: every scale must still
/// accommodate the 11-tap window.
pub fn usable_scales(min_dim: usize) -> usize {
    let mut scales = 0;
    let mut side = min_dim;
    while side >= GAUSS_SIZE && scales < MS_SSIM_WEIGHTS.len() {
        scales += 1;
        side /= 2;
    }
    scales
}

/// Multi-scale SSIM with the standard 11-tap Gaussian window. Scales are
/// auto-reduced for small images and the weights renormalized.
pub fn ms_ssim(x: &Tensor, y: &Tensor) -> Result<Real, MetricError> {
    check_same_shape(x, y, "ms_ssim")?;
    let (c, h, w) = match x.rank() {
        2 => (1, x.shape()[0], x.shape()[1]),
        3 => (x.shape()[0], x.shape()[1], x.shape()[2]),
        _ => {
            return Err(MetricError::Tensor(TensorError::ShapeMismatch {
                context: "ms_ssim rank",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            }))
        }
    };
    let min_dim = h.min(w);
    let scales = usable_scales(min_dim);
    if scales == 0 {
        return Err(MetricError::TooSmallImage { min_dim, required: GAUSS_SIZE });
    }
    let weight_sum: Real = MS_SSIM_WEIGHTS[..scales].iter().sum();

    let mut total = 0.0;
    for ch in 0..c {
        let mut xs = x.data()[ch * h * w..(ch + 1) * h * w].to_vec();
        let mut ys = y.data()[ch * h * w..(ch + 1) * h * w].to_vec();
        let (mut sh, mut sw) = (h, w);
        let mut score = 1.0;
        for (j, &wj) in MS_SSIM_WEIGHTS[..scales].iter().enumerate() {
            let (cs, l) = ssim_terms(&xs, &ys, sh, sw);
            let weight = wj / weight_sum;
            if j + 1 == scales {
                score *= (l * cs).max(0.0).powf(weight);
            } else {
                score *= cs.max(0.0).powf(weight);
                let (dx, nh, nw) = downsample2(&xs, sh, sw);
                let (dy, _, _) = downsample2(&ys, sh, sw);
                xs = dx;
                ys = dy;
                sh = nh;
                sw = nw;
            }
        }
        total += score;
    }
    Ok(total / c as Real)
}

const MDSI_C1: Real = 140.0;
const MDSI_C2: Real = 55.0;
const MDSI_C3: Real = 550.0;
const MDSI_ALPHA: Real = 0.6;
const MDSI_POOL_Q: Real = 0.25;

/// Same-size zero-padded correlation with a 3x3 kernel.
fn filter3(x: &[Real], h: usize, w: usize, k: &[Real; 9]) -> Vec<Real> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for dr in 0..3usize {
                for dc in 0..3usize {
                    let rr = r as isize + dr as isize - 1;
                    let cc = c as isize + dc as isize - 1;
                    if rr >= 0 && rr < h as isize && cc >= 0 && cc < w as isize {
                        acc += k[dr * 3 + dc] * x[rr as usize * w + cc as usize];
                    }
                }
            }
            out[r * w + c] = acc;
        }
    }
    out
}

fn prewitt_magnitude(x: &[Real], h: usize, w: usize) -> Vec<Real> {
    let third = 1.0 / 3.0;
    let hx = [third, 0.0, -third, third, 0.0, -third, third, 0.0, -third];
    let hy = [third, third, third, 0.0, 0.0, 0.0, -third, -third, -third];
    let gx = filter3(x, h, w, &hx);
    let gy = filter3(x, h, w, &hy);
    gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect()
}

/// Mean deviation similarity index over RGB image pairs in [0,1]; lower is
/// more similar and `mdsi(x, x) = 0`.
pub fn mdsi(x: &Tensor, y: &Tensor) -> Result<Real, MetricError> {
    check_same_shape(x, y, "mdsi")?;
    if x.rank() != 3 || x.shape()[0] != 3 {
        return Err(MetricError::Tensor(TensorError::ShapeMismatch {
            context: "mdsi expects RGB [3,H,W]",
            lhs: x.shape().to_vec(),
            rhs: vec![3],
        }));
    }
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let plane = h * w;
    let chan = |t: &Tensor, c: usize| -> Vec<Real> {
        t.data()[c * plane..(c + 1) * plane].iter().map(|v| v * 255.0).collect()
    };
    let (r1, g1, b1) = (chan(x, 0), chan(x, 1), chan(x, 2));
    let (r2, g2, b2) = (chan(y, 0), chan(y, 1), chan(y, 2));

    let lum = |r: &[Real], g: &[Real], b: &[Real]| -> Vec<Real> {
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((&r, &g), &b)| 0.2989 * r + 0.5870 * g + 0.1140 * b)
            .collect()
    };
    let opp_h = |r: &[Real], g: &[Real], b: &[Real]| -> Vec<Real> {
        r.iter().zip(g).zip(b).map(|((&r, &g), &b)| 0.30 * r + 0.04 * g - 0.35 * b).collect()
    };
    let opp_m = |r: &[Real], g: &[Real], b: &[Real]| -> Vec<Real> {
        r.iter().zip(g).zip(b).map(|((&r, &g), &b)| 0.34 * r - 0.60 * g + 0.17 * b).collect()
    };

    let l1 = lum(&r1, &g1, &b1);
    let l2 = lum(&r2, &g2, &b2);
    let lf: Vec<Real> = l1.iter().zip(&l2).map(|(a, b)| 0.5 * (a + b)).collect();
    let (h1, m1) = (opp_h(&r1, &g1, &b1), opp_m(&r1, &g1, &b1));
    let (h2, m2) = (opp_h(&r2, &g2, &b2), opp_m(&r2, &g2, &b2));

    let gr = prewitt_magnitude(&l1, h, w);
    let gd = prewitt_magnitude(&l2, h, w);
    let gf = prewitt_magnitude(&lf, h, w);

    let n = plane;
    let mut gcs_q = vec![0.0; n];
    for i in 0..n {
        let gs = (2.0 * gr[i] * gd[i] + MDSI_C1) / (gr[i] * gr[i] + gd[i] * gd[i] + MDSI_C1);
        let gs1 = (2.0 * gr[i] * gf[i] + MDSI_C2) / (gr[i] * gr[i] + gf[i] * gf[i] + MDSI_C2);
        let gs2 = (2.0 * gd[i] * gf[i] + MDSI_C2) / (gd[i] * gd[i] + gf[i] * gf[i] + MDSI_C2);
        let gs_hvs = gs + gs2 - gs1;
        let cs = (2.0 * (h1[i] * h2[i] + m1[i] * m2[i]) + MDSI_C3)
            / (h1[i] * h1[i] + h2[i] * h2[i] + m1[i] * m1[i] + m2[i] * m2[i] + MDSI_C3);
        let gcs = MDSI_ALPHA * gs_hvs + (1.0 - MDSI_ALPHA) * cs;
        gcs_q[i] = gcs.max(0.0).powf(MDSI_POOL_Q);
    }
    let mean_q: Real = gcs_q.iter().sum::<Real>() / n as Real;
    let deviation: Real = gcs_q.iter().map(|v| (v - mean_q).abs()).sum::<Real>() / n as Real;
    Ok(deviation.powf(MDSI_POOL_Q))
}

/// All three metrics for one pair; MDSI only for RGB inputs.
pub fn quality_score(x: &Tensor, y: &Tensor) -> Result<QualityScore, MetricError> {
    let rgb = x.rank() == 3 && x.shape()[0] == 3;
    Ok(QualityScore {
        psnr: psnr(x, y)?,
        ms_ssim: ms_ssim(x, y)?,
        mdsi: if rgb { Some(mdsi(x, y)?) } else { None },
    })
}

/// Quality axis an ASR curve is binned over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QualityAxis {
    Psnr,
    MsSsim,
    Mdsi,
}

impl QualityAxis {
    pub fn label(&self) -> &'static str {
        match self {
            QualityAxis::Psnr => "psnr",
            QualityAxis::MsSsim => "ms_ssim",
            QualityAxis::Mdsi => "mdsi",
        }
    }

    pub fn of(&self, q: &QualityScore) -> Option<Real> {
        match self {
            QualityAxis::Psnr => Some(q.psnr),
            QualityAxis::MsSsim => Some(q.ms_ssim),
            QualityAxis::Mdsi => q.mdsi,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsrBin {
    pub lo: Real,
    pub hi: Real,
    pub mean_quality: Real,
    pub asr: Real,
    pub count: usize,
}

/// Attack success rate binned over a quality axis (fixed-width bins over
/// the observed range).
#[derive(Debug, Clone, PartialEq)]
pub struct AsrCurve {
    pub bins: Vec<AsrBin>,
}

impl AsrCurve {
    pub fn total_count(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

/// Build an ASR curve from (quality, success) points.
pub fn build_asr_curve(points: &[(Real, bool)], bins: usize) -> Result<AsrCurve, MetricError> {
    if points.is_empty() || bins == 0 {
        return Err(MetricError::NoResults);
    }
    let lo = points.iter().map(|p| p.0).fold(Real::INFINITY, Real::min);
    let hi = points.iter().map(|p| p.0).fold(Real::NEG_INFINITY, Real::max);
    let width = if hi > lo { (hi - lo) / bins as Real } else { 1.0 };
    let mut sums = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    let mut counts = vec![0usize; bins];
    for &(q, success) in points {
        let idx = (((q - lo) / width) as usize).min(bins - 1);
        sums[idx] += q;
        counts[idx] += 1;
        if success {
            hits[idx] += 1;
        }
    }
    let mut out = Vec::with_capacity(bins);
    for i in 0..bins {
        out.push(AsrBin {
            lo: lo + i as Real * width,
            hi: lo + (i + 1) as Real * width,
            mean_quality: if counts[i] > 0 { sums[i] / counts[i] as Real } else { Real::NAN },
            asr: if counts[i] > 0 { hits[i] as Real / counts[i] as Real } else { 0.0 },
            count: counts[i],
        });
    }
    Ok(AsrCurve { bins: out })
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(xs: &[Real], ys: &[Real]) -> Option<Real> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as Real;
    let mx = xs.iter().sum::<Real>() / n;
    let my = ys.iter().sum::<Real>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(xs: &[Real]) -> Vec<Real> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("rank of NaN"));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as Real / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman(xs: &[Real], ys: &[Real]) -> Option<Real> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    pearson(&ranks(xs), &ranks(ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_rgb(seed: u64, side: usize) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::rand_uniform(&[3, side, side], 0.0, 1.0, &mut rng)
    }

    fn add_noise(x: &Tensor, amp: Real, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|&v| (v + rng.uniform(-amp, amp)).clamp(0.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn psnr_identical_hits_cap() {
        let x = rand_rgb(1, 16);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP);
    }

    #[test]
    fn psnr_uniform_one_over_255() {
        let x = Tensor::full(&[3, 16, 16], 0.5);
        let y = x.map(|v| v + 1.0 / 255.0);
        let got = psnr(&x, &y).unwrap();
        let want = 20.0 * (255.0 as Real).log10();
        assert!((got - want).abs() < 0.01, "{got} vs {want}");
    }

    #[test]
    fn psnr_black_vs_white_is_zero() {
        let x = Tensor::zeros(&[1, 8, 8]);
        let y = Tensor::full(&[1, 8, 8], 1.0);
        assert!((psnr(&x, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn psnr_strictly_decreases_with_noise() {
        let x = rand_rgb(2, 32);
        let mut last = Real::INFINITY;
        for (i, amp) in [0.01, 0.02, 0.04, 0.08, 0.16].iter().enumerate() {
            let p = psnr(&x, &add_noise(&x, *amp, 42 + i as u64)).unwrap();
            assert!(p < last, "psnr must strictly decrease: {p} !< {last}");
            last = p;
        }
    }

    #[test]
    fn ms_ssim_identity_and_symmetry() {
        let x = rand_rgb(3, 32);
        assert_eq!(ms_ssim(&x, &x).unwrap(), 1.0);
        let y = add_noise(&x, 0.1, 7);
        let ab = ms_ssim(&x, &y).unwrap();
        let ba = ms_ssim(&y, &x).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn ms_ssim_too_small() {
        let x = Tensor::zeros(&[1, 8, 8]);
        assert!(matches!(
            ms_ssim(&x, &x),
            Err(MetricError::TooSmallImage { min_dim: 8, required: 11 })
        ));
    }

    #[test]
    fn scale_reduction_for_desk_images() {
        // 32x32 supports two scales (32 and 16 accommodate the window, 8
        // does not); 224x224 supports the full five.
        assert_eq!(usable_scales(32), 2);
        assert_eq!(usable_scales(224), 5);
        assert_eq!(usable_scales(10), 0);
    }

    #[test]
    fn mdsi_identity_and_nonnegativity() {
        let x = rand_rgb(4, 24);
        assert_eq!(mdsi(&x, &x).unwrap(), 0.0);
        let y = add_noise(&x, 0.05, 9);
        assert!(mdsi(&x, &y).unwrap() >= 0.0);
        assert!(mdsi(&y, &x).unwrap() >= 0.0);
    }

    #[test]
    fn mdsi_monotone_under_noise() {
        let x = rand_rgb(5, 32);
        let amps = [0.02, 0.04, 0.08, 0.16, 0.32];
        let scores: Vec<Real> = amps
            .iter()
            .enumerate()
            .map(|(i, &a)| mdsi(&x, &add_noise(&x, a, 100 + i as u64)).unwrap())
            .collect();
        let rank = spearman(&amps.to_vec(), &scores).unwrap();
        assert!(rank > 0.0, "mdsi must grow with noise amplitude: {scores:?}");
    }

    #[test]
    fn mdsi_requires_rgb() {
        let x = Tensor::zeros(&[1, 16, 16]);
        assert!(matches!(mdsi(&x, &x), Err(MetricError::Tensor(_))));
    }

    #[test]
    fn asr_curve_degenerate_cases() {
        let all_m: Vec<(Real, bool)> = (0..10).map(|i| (i as Real, true)).collect();
        let curve = build_asr_curve(&all_m, 4).unwrap();
        assert_eq!(curve.total_count(), 10);
        for bin in &curve.bins {
            if bin.count > 0 {
                assert_eq!(bin.asr, 1.0);
            }
        }
        let none: Vec<(Real, bool)> = (0..10).map(|i| (i as Real, false)).collect();
        let curve = build_asr_curve(&none, 4).unwrap();
        for bin in &curve.bins {
            assert_eq!(bin.asr, 0.0);
        }
        assert!(matches!(build_asr_curve(&[], 4), Err(MetricError::NoResults)));
    }

    #[test]
    fn spearman_detects_monotone_relations() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [10.0, 30.0, 31.0, 45.0];
        assert!((spearman(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        let inv = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&xs, &inv).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&xs, &[1.0, 1.0, 1.0, 1.0]), None);
    }

    #[test]
    fn pearson_basics() {
        let a = [1.0, 2.0, 3.0];
        assert!((pearson(&a, &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&a, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&a, &[5.0, 5.0, 5.0]), None);
    }
}
