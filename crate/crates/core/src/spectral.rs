//! 2D discrete Fourier analysis of images.
//!
//! The transform is expressed as matrix products against precomputed
//! cosine/sine basis matrices, which makes the same code path usable both
//! on plain tensors and on tape variables (where differentiability falls
//! out of the matmul backward rule). Spectra are stored in polar form as
//! (magnitude, phase) pairs; real-valued reconstruction is guarded by a
//! conjugate-symmetry residual check.

use crate::tensor::{matmul_accum, ScatterMap, Tape, Tensor, TensorError, Var};
use crate::Real;
use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

/// Relative bound on the imaginary residual accepted when discarding the
/// imaginary part of an inverse transform.
pub const REAL_RESIDUAL_TOL: Real = 1e-6;

/// Number of annular frequency regions.
pub const NUM_REGIONS: usize = 10;

/// Regions forming the low-frequency band.
pub const LOW_BAND_REGIONS: &[usize] = &[1, 2];

/// Regions forming the high-frequency band.
pub const HIGH_BAND_REGIONS: &[usize] = &[10];

#[derive(Debug, Clone, PartialEq)]
pub enum SpectralError {
    /// Inverse transform produced a non-negligible imaginary part.
    NonSymmetricSpectrum { max_imag: Real, max_real: Real },
    /// Band mask selects no frequency bin.
    EmptyBand,
    Tensor(TensorError),
}

impl fmt::Display for SpectralError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpectralError::NonSymmetricSpectrum { max_imag, max_real } => write!(
                f,
                "spectrum is not conjugate-symmetric: |imag| {max_imag:e} vs |real| {max_real:e}"
            ),
            SpectralError::EmptyBand => write!(f, "band mask selects no frequency bin"),
            SpectralError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for SpectralError {}

impl From<TensorError> for SpectralError {
    fn from(e: TensorError) -> Self {
        SpectralError::Tensor(e)
    }
}

/// Which polar component of a spectrum an operation targets. Magnitude
/// maps are even-symmetric, phase maps odd-symmetric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumComponent {
    Magnitude,
    Phase,
}

/// Precomputed DFT basis matrices for an H x W grid.
///
/// `cos_h[u*h + n] = cos(2*pi*u*n/H)` and likewise for the other three;
/// all four matrices are symmetric.
pub struct FourierBasis {
    pub h: usize,
    pub w: usize,
    cos_h: Tensor,
    sin_h: Tensor,
    cos_w: Tensor,
    sin_w: Tensor,
}

fn trig_matrix(n: usize, f: impl Fn(Real) -> Real) -> Tensor {
    let tau = 2.0 * std::f64::consts::PI;
    Tensor::from_fn(&[n, n], |i| {
        let (u, m) = (i / n, i % n);
        // Reduce u*m modulo n before the trig call to keep angles small,
        // and snap residue like sin(pi) ~ 1e-16 to exact zero. The smallest
        // genuine nonzero entry is sin(2*pi/n), far above the threshold for
        // any grid this library targets.
        let v = f(tau * ((u * m) % n) as Real / n as Real);
        if v.abs() < 1e-9 {
            0.0
        } else {
            v
        }
    })
}

impl FourierBasis {
    pub fn new(h: usize, w: usize) -> Self {
        FourierBasis {
            h,
            w,
            cos_h: trig_matrix(h, Real::cos),
            sin_h: trig_matrix(h, Real::sin),
            cos_w: trig_matrix(w, Real::cos),
            sin_w: trig_matrix(w, Real::sin),
        }
    }

    /// Shared basis for the given grid, cached process-wide.
    pub fn get(h: usize, w: usize) -> Arc<FourierBasis> {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<FourierBasis>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut map = cache.lock().expect("basis cache poisoned");
        map.entry((h, w)).or_insert_with(|| Arc::new(FourierBasis::new(h, w))).clone()
    }
}

fn image_dims(x: &Tensor) -> Result<(usize, usize, usize), TensorError> {
    match x.rank() {
        2 => Ok((1, x.shape()[0], x.shape()[1])),
        3 => Ok((x.shape()[0], x.shape()[1], x.shape()[2])),
        _ => Err(TensorError::ShapeMismatch {
            context: "spectral: expected [H,W] or [C,H,W]",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

/// out = A @ X, A: n x n, X: n x m.
fn mm(a: &Tensor, x: &[Real], n: usize, m: usize) -> Vec<Real> {
    let mut out = vec![0.0; n * m];
    matmul_accum(a.data(), x, &mut out, n, n, m);
    out
}

/// out = X @ B, X: n x m, B: m x m.
fn mm_right(x: &[Real], b: &Tensor, n: usize, m: usize) -> Vec<Real> {
    let mut out = vec![0.0; n * m];
    matmul_accum(x, b.data(), &mut out, n, m, m);
    out
}

fn zip_sub(a: &[Real], b: &[Real]) -> Vec<Real> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn zip_add(a: &[Real], b: &[Real]) -> Vec<Real> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Forward 2D DFT of a real image, per channel. Returns (real, imag) parts
/// with the input's shape.
pub fn dft2(x: &Tensor) -> Result<(Tensor, Tensor), TensorError> {
    let (c, h, w) = image_dims(x)?;
    let basis = FourierBasis::get(h, w);
    let mut re = vec![0.0; x.numel()];
    let mut im = vec![0.0; x.numel()];
    for ch in 0..c {
        let xc = &x.data()[ch * h * w..(ch + 1) * h * w];
        // F = W_h X W_w with W = C - iS; all basis matrices are symmetric.
        let chx = mm(&basis.cos_h, xc, h, w);
        let shx = mm(&basis.sin_h, xc, h, w);
        let re_c =
            zip_sub(&mm_right(&chx, &basis.cos_w, h, w), &mm_right(&shx, &basis.sin_w, h, w));
        let im_c =
            zip_add(&mm_right(&shx, &basis.cos_w, h, w), &mm_right(&chx, &basis.sin_w, h, w));
        re[ch * h * w..(ch + 1) * h * w].copy_from_slice(&re_c);
        for (dst, v) in im[ch * h * w..(ch + 1) * h * w].iter_mut().zip(im_c) {
            *dst = -v;
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), re)?, Tensor::new(x.shape().to_vec(), im)?))
}

/// Inverse 2D DFT. Returns both the real and imaginary parts, scaled by
/// 1/(H*W).
pub fn idft2(re: &Tensor, im: &Tensor) -> Result<(Tensor, Tensor), TensorError> {
    if re.shape() != im.shape() {
        return Err(TensorError::ShapeMismatch {
            context: "idft2",
            lhs: re.shape().to_vec(),
            rhs: im.shape().to_vec(),
        });
    }
    let (c, h, w) = image_dims(re)?;
    let basis = FourierBasis::get(h, w);
    let scale = 1.0 / (h * w) as Real;
    let mut out_re = vec![0.0; re.numel()];
    let mut out_im = vec![0.0; re.numel()];
    for ch in 0..c {
        let rc = &re.data()[ch * h * w..(ch + 1) * h * w];
        let ic = &im.data()[ch * h * w..(ch + 1) * h * w];
        // x = W*_h F W*_w / (HW) with W* = C + iS.
        let b_re = zip_sub(&mm(&basis.cos_h, rc, h, w), &mm(&basis.sin_h, ic, h, w));
        let b_im = zip_add(&mm(&basis.sin_h, rc, h, w), &mm(&basis.cos_h, ic, h, w));
        let x_re =
            zip_sub(&mm_right(&b_re, &basis.cos_w, h, w), &mm_right(&b_im, &basis.sin_w, h, w));
        let x_im =
            zip_add(&mm_right(&b_re, &basis.sin_w, h, w), &mm_right(&b_im, &basis.cos_w, h, w));
        for (dst, v) in out_re[ch * h * w..(ch + 1) * h * w].iter_mut().zip(x_re) {
            *dst = v * scale;
        }
        for (dst, v) in out_im[ch * h * w..(ch + 1) * h * w].iter_mut().zip(x_im) {
            *dst = v * scale;
        }
    }
    Ok((Tensor::new(re.shape().to_vec(), out_re)?, Tensor::new(re.shape().to_vec(), out_im)?))
}

/// Inverse transform of a spectrum expected to be conjugate-symmetric.
/// The imaginary residual is discarded only after checking it against
/// [`REAL_RESIDUAL_TOL`].
pub fn idft2_real(re: &Tensor, im: &Tensor) -> Result<Tensor, SpectralError> {
    let (x_re, x_im) = idft2(re, im)?;
    let max_real = x_re.max_abs();
    let max_imag = x_im.max_abs();
    if max_imag > REAL_RESIDUAL_TOL * max_real {
        return Err(SpectralError::NonSymmetricSpectrum { max_imag, max_real });
    }
    Ok(x_re)
}

/// Polar form of a per-channel complex spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Non-negative magnitudes, same shape as the source image.
    pub mag: Tensor,
    /// Phases in (-pi, pi]; zero wherever the magnitude is zero.
    pub phase: Tensor,
}

/// Split an image into magnitude and phase spectra.
pub fn decompose(x: &Tensor) -> Result<Spectrum, TensorError> {
    let (re, im) = dft2(x)?;
    let mag = Tensor::new(
        x.shape().to_vec(),
        re.data().iter().zip(im.data()).map(|(&r, &i)| (r * r + i * i).sqrt()).collect(),
    )?;
    let phase = Tensor::new(
        x.shape().to_vec(),
        im.data()
            .iter()
            .zip(re.data())
            .map(|(&i, &r)| {
                // Keep phases in (-pi, pi]: a real-negative bin is +pi even
                // when the imaginary part is -0.0, and phase is defined as 0
                // where the magnitude vanishes.
                if i == 0.0 {
                    if r < 0.0 {
                        std::f64::consts::PI
                    } else {
                        0.0
                    }
                } else {
                    i.atan2(r)
                }
            })
            .collect(),
    )?;
    Ok(Spectrum { mag, phase })
}

/// Rebuild an image from a polar spectrum.
pub fn recompose(s: &Spectrum) -> Result<Tensor, SpectralError> {
    if s.mag.shape() != s.phase.shape() {
        return Err(SpectralError::Tensor(TensorError::ShapeMismatch {
            context: "recompose",
            lhs: s.mag.shape().to_vec(),
            rhs: s.phase.shape().to_vec(),
        }));
    }
    let re = Tensor::new(
        s.mag.shape().to_vec(),
        s.mag.data().iter().zip(s.phase.data()).map(|(&m, &p)| m * p.cos()).collect(),
    )
    .map_err(SpectralError::Tensor)?;
    let im = Tensor::new(
        s.mag.shape().to_vec(),
        s.mag.data().iter().zip(s.phase.data()).map(|(&m, &p)| m * p.sin()).collect(),
    )
    .map_err(SpectralError::Tensor)?;
    idft2_real(&re, &im)
}

// ---------------------------------------------------------------------------
// Differentiable (tape) variants.
// ---------------------------------------------------------------------------

/// Basis matrices registered as constants on a tape.
pub struct BasisVars<'t> {
    pub cos_h: Var<'t>,
    pub sin_h: Var<'t>,
    pub cos_w: Var<'t>,
    pub sin_w: Var<'t>,
    h: usize,
    w: usize,
}

impl FourierBasis {
    pub fn vars<'t>(&self, tape: &'t Tape) -> BasisVars<'t> {
        BasisVars {
            cos_h: tape.constant(self.cos_h.clone()),
            sin_h: tape.constant(self.sin_h.clone()),
            cos_w: tape.constant(self.cos_w.clone()),
            sin_w: tape.constant(self.sin_w.clone()),
            h: self.h,
            w: self.w,
        }
    }
}

fn channels_of(x: Var<'_>) -> Result<(usize, usize, usize), TensorError> {
    let shape = x.shape();
    match shape.len() {
        3 => Ok((shape[0], shape[1], shape[2])),
        _ => Err(TensorError::ShapeMismatch {
            context: "spectral var: expected [C,H,W]",
            lhs: shape,
            rhs: vec![],
        }),
    }
}

fn per_channel<'t>(
    x: Var<'t>,
    c: usize,
    h: usize,
    w: usize,
    f: impl Fn(Var<'t>) -> Result<Var<'t>, TensorError>,
) -> Result<Var<'t>, TensorError> {
    let mut parts = Vec::with_capacity(c);
    for ch in 0..c {
        let xc = x.slice(&[(ch, ch + 1), (0, h), (0, w)])?.reshape(vec![h, w])?;
        parts.push(f(xc)?.reshape(vec![1, h, w])?);
    }
    crate::tensor::graph::concat(&parts, 0)
}

/// Differentiable forward DFT of a [C,H,W] variable.
pub fn dft2_var<'t>(basis: &BasisVars<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>), TensorError> {
    let (c, h, w) = channels_of(x)?;
    debug_assert!(h == basis.h && w == basis.w, "basis grid mismatch");
    let re = per_channel(x, c, h, w, |xc| {
        let chx = basis.cos_h.matmul(xc)?;
        let shx = basis.sin_h.matmul(xc)?;
        chx.matmul(basis.cos_w)?.sub(shx.matmul(basis.sin_w)?)
    })?;
    let im = per_channel(x, c, h, w, |xc| {
        let chx = basis.cos_h.matmul(xc)?;
        let shx = basis.sin_h.matmul(xc)?;
        Ok(shx.matmul(basis.cos_w)?.add(chx.matmul(basis.sin_w)?)?.neg())
    })?;
    Ok((re, im))
}

/// Differentiable magnitude/phase split of a [C,H,W] variable.
pub fn decompose_var<'t>(
    basis: &BasisVars<'t>,
    x: Var<'t>,
) -> Result<(Var<'t>, Var<'t>), TensorError> {
    let (re, im) = dft2_var(basis, x)?;
    let mag = re.mul(re)?.add(im.mul(im)?)?.sqrt();
    let phase = im.atan2(re)?;
    Ok((mag, phase))
}

/// Differentiable inverse DFT keeping only the real part.
///
/// The caller is responsible for the symmetry of (re, im); use
/// [`idft2_imag_residual`] on the forward values to enforce it.
pub fn idft2_real_var<'t>(
    basis: &BasisVars<'t>,
    re: Var<'t>,
    im: Var<'t>,
) -> Result<Var<'t>, TensorError> {
    let (c, h, w) = channels_of(re)?;
    let scale = 1.0 / (h * w) as Real;
    let mut parts = Vec::with_capacity(c);
    for ch in 0..c {
        let rc = re.slice(&[(ch, ch + 1), (0, h), (0, w)])?.reshape(vec![h, w])?;
        let ic = im.slice(&[(ch, ch + 1), (0, h), (0, w)])?.reshape(vec![h, w])?;
        let b_re = basis.cos_h.matmul(rc)?.sub(basis.sin_h.matmul(ic)?)?;
        let b_im = basis.sin_h.matmul(rc)?.add(basis.cos_h.matmul(ic)?)?;
        let x_re = b_re.matmul(basis.cos_w)?.sub(b_im.matmul(basis.sin_w)?)?;
        parts.push(x_re.mul_scalar(scale).reshape(vec![1, h, w])?);
    }
    crate::tensor::graph::concat(&parts, 0)
}

/// Imaginary residual of an inverse transform, computed on plain tensors.
/// Returns (max |imag|, max |real|).
pub fn idft2_imag_residual(re: &Tensor, im: &Tensor) -> Result<(Real, Real), TensorError> {
    let (x_re, x_im) = idft2(re, im)?;
    Ok((x_im.max_abs(), x_re.max_abs()))
}

// ---------------------------------------------------------------------------
// Conjugate-symmetric parametrization.
// ---------------------------------------------------------------------------

/// Expansion plan from free half-plane parameters to a full H x W map with
/// conjugate symmetry. One plan serves both the even (magnitude) and odd
/// (phase) expansions; self-conjugate bins (DC and Nyquist lines) carry a
/// parameter whose odd expansion is structurally zero.
pub struct SymmetryPlan {
    pub h: usize,
    pub w: usize,
    free_bins: Vec<(usize, usize)>,
    even_map: ScatterMap,
    odd_map: ScatterMap,
}

fn mirror(u: usize, v: usize, h: usize, w: usize) -> (usize, usize) {
    ((h - u) % h, (w - v) % w)
}

impl SymmetryPlan {
    /// Plan covering the whole plane.
    pub fn full(h: usize, w: usize) -> Self {
        Self::build(h, w, |_, _| true)
    }

    /// Plan whose free parameters are restricted to `mask`'s true bins.
    pub fn masked(h: usize, w: usize, mask: &BandMask) -> Self {
        assert!(mask.h == h && mask.w == w, "mask grid mismatch");
        Self::build(h, w, |u, v| mask.get(u, v))
    }

    fn build(h: usize, w: usize, include: impl Fn(usize, usize) -> bool) -> Self {
        let mut free_bins = Vec::new();
        let mut even_map: Vec<Option<(usize, Real)>> = vec![None; h * w];
        let mut odd_map: Vec<Option<(usize, Real)>> = vec![None; h * w];
        for u in 0..h {
            for v in 0..w {
                let (mu, mv) = mirror(u, v, h, w);
                if (u, v) > (mu, mv) || !include(u, v) {
                    continue;
                }
                let i = free_bins.len();
                free_bins.push((u, v));
                even_map[u * w + v] = Some((i, 1.0));
                even_map[mu * w + mv] = Some((i, 1.0));
                if (u, v) != (mu, mv) {
                    odd_map[u * w + v] = Some((i, 1.0));
                    odd_map[mu * w + mv] = Some((i, -1.0));
                }
            }
        }
        SymmetryPlan { h, w, free_bins, even_map: Arc::new(even_map), odd_map: Arc::new(odd_map) }
    }

    pub fn free_len(&self) -> usize {
        self.free_bins.len()
    }

    pub fn free_bins(&self) -> &[(usize, usize)] {
        &self.free_bins
    }

    fn map_for(&self, kind: SpectrumComponent) -> &ScatterMap {
        match kind {
            SpectrumComponent::Magnitude => &self.even_map,
            SpectrumComponent::Phase => &self.odd_map,
        }
    }

    /// Expand free parameters into the full symmetric H x W map.
    pub fn symmetrize(
        &self,
        free: &Tensor,
        kind: SpectrumComponent,
    ) -> Result<Tensor, TensorError> {
        if free.numel() != self.free_bins.len() {
            return Err(TensorError::ShapeMismatch {
                context: "symmetrize parameter count",
                lhs: vec![self.free_bins.len()],
                rhs: vec![free.numel()],
            });
        }
        let map = self.map_for(kind);
        let mut out = vec![0.0; self.h * self.w];
        for (o, entry) in out.iter_mut().zip(map.iter()) {
            if let Some((j, s)) = entry {
                *o = s * free.data()[*j];
            }
        }
        Tensor::new(vec![self.h, self.w], out)
    }

    /// Tape form of [`SymmetryPlan::symmetrize`].
    pub fn symmetrize_var<'t>(
        &self,
        free: Var<'t>,
        kind: SpectrumComponent,
    ) -> Result<Var<'t>, TensorError> {
        free.gather_signed(vec![self.h, self.w], self.map_for(kind).clone())
    }
}

// ---------------------------------------------------------------------------
// Frequency regions.
// ---------------------------------------------------------------------------

/// Assignment of every frequency bin to one of [`NUM_REGIONS`] annuli of
/// equal radial width, measured from the centered DC bin and normalized by
/// the corner radius. Region 1 contains DC, region 10 the corners.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPartition {
    pub h: usize,
    pub w: usize,
    regions: Vec<u8>,
    counts: [usize; NUM_REGIONS],
}

/// Signed frequency index of DFT bin `u` on an axis of length `n`.
fn signed_freq(u: usize, n: usize) -> isize {
    if u <= n / 2 {
        u as isize
    } else {
        u as isize - n as isize
    }
}

pub fn make_region_partition(h: usize, w: usize) -> RegionPartition {
    assert!(h >= 4 && w >= 4, "partition grid too small");
    let corner = (((h / 2) * (h / 2) + (w / 2) * (w / 2)) as Real).sqrt();
    let mut regions = vec![0u8; h * w];
    let mut counts = [0usize; NUM_REGIONS];
    for u in 0..h {
        for v in 0..w {
            let su = signed_freq(u, h) as Real;
            let sv = signed_freq(v, w) as Real;
            let r = (su * su + sv * sv).sqrt() / corner;
            let region = ((r * NUM_REGIONS as Real).floor() as usize + 1).min(NUM_REGIONS);
            regions[u * w + v] = region as u8;
            counts[region - 1] += 1;
        }
    }
    RegionPartition { h, w, regions, counts }
}

impl RegionPartition {
    /// Region (1..=10) of bin (u, v).
    pub fn region(&self, u: usize, v: usize) -> usize {
        self.regions[u * self.w + v] as usize
    }

    pub fn counts(&self) -> &[usize; NUM_REGIONS] {
        &self.counts
    }

    pub fn bins(&self) -> usize {
        self.h * self.w
    }
}

/// Boolean frequency mask, symmetric under conjugate reflection.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMask {
    pub h: usize,
    pub w: usize,
    mask: Vec<bool>,
}

impl BandMask {
    pub fn get(&self, u: usize, v: usize) -> bool {
        self.mask[u * self.w + v]
    }

    pub fn true_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Mask selecting exactly the bins whose region belongs to `regions`.
pub fn make_band_mask(
    partition: &RegionPartition,
    regions: &[usize],
) -> Result<BandMask, SpectralError> {
    let mut mask = vec![false; partition.h * partition.w];
    for u in 0..partition.h {
        for v in 0..partition.w {
            if regions.contains(&partition.region(u, v)) {
                mask[u * partition.w + v] = true;
            }
        }
    }
    if !mask.iter().any(|&m| m) {
        return Err(SpectralError::EmptyBand);
    }
    Ok(BandMask { h: partition.h, w: partition.w, mask })
}
