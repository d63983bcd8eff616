//! Diagnostic procedures: frequency-region distortion histograms, the
//! feature-space linearity probe, magnitude/phase reduction sweeps,
//! magnitude-phase recombination, and attention-rollout correlation.

use crate::metrics::pearson;
use crate::models::{argmax, AttentionTrace, FeatureMap, Model, ModelError};
use crate::spectral::{
    decompose, dft2, recompose, RegionPartition, SpectralError, Spectrum, SpectrumComponent,
    NUM_REGIONS,
};
use crate::tensor::{Tensor, TensorError};
use crate::Real;
use std::fmt;

/// Grid density of the linearity probe: 101 uniform samples over [0,1].
pub const LINEARITY_GRID_LEN: usize = 101;

/// Probe displacement along the perturbation direction.
pub const LINEARITY_DELTA_EPSILON: Real = 1e-3;

#[derive(Debug)]
pub enum AnalysisError {
    /// Attacked and original images are identical.
    ZeroDistortion,
    /// A feature shift collapsed below numeric resolution.
    DegenerateShift { eps: Real },
    /// Correlation of a zero-variance map.
    ConstantMap,
    /// Rollout of an empty attention trace.
    EmptyTrace,
    /// Recombination study without any distinct-label pair.
    NoValidPairs,
    Tensor(TensorError),
    Spectral(SpectralError),
    Model(ModelError),
}

impl fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnalysisError::ZeroDistortion => write!(f, "images are identical"),
            AnalysisError::DegenerateShift { eps } => {
                write!(f, "feature shift below resolution at eps {eps}")
            }
            AnalysisError::ConstantMap => write!(f, "correlation of a constant map"),
            AnalysisError::EmptyTrace => write!(f, "attention trace has no layers"),
            AnalysisError::NoValidPairs => write!(f, "no image pair with distinct labels"),
            AnalysisError::Tensor(e) => write!(f, "{e}"),
            AnalysisError::Spectral(e) => write!(f, "{e}"),
            AnalysisError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for AnalysisError {}

impl From<TensorError> for AnalysisError {
    fn from(e: TensorError) -> Self {
        AnalysisError::Tensor(e)
    }
}

impl From<SpectralError> for AnalysisError {
    fn from(e: SpectralError) -> Self {
        AnalysisError::Spectral(e)
    }
}

impl From<ModelError> for AnalysisError {
    fn from(e: ModelError) -> Self {
        AnalysisError::Model(e)
    }
}

/// Fraction of spectral distortion energy per frequency region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionHistogram {
    pub fractions: [Real; NUM_REGIONS],
}

/// Distribution of `|F{X' - X}|` over the frequency regions, channels
/// summed, normalized to fractions.
pub fn region_distortion_histogram(
    x: &Tensor,
    x_adv: &Tensor,
    partition: &RegionPartition,
) -> Result<RegionHistogram, AnalysisError> {
    if x.shape() != x_adv.shape() {
        return Err(AnalysisError::Tensor(TensorError::ShapeMismatch {
            context: "region_distortion_histogram",
            lhs: x.shape().to_vec(),
            rhs: x_adv.shape().to_vec(),
        }));
    }
    let diff = Tensor::new(
        x.shape().to_vec(),
        x_adv.data().iter().zip(x.data()).map(|(a, b)| a - b).collect(),
    )?;
    if diff.max_abs() == 0.0 {
        return Err(AnalysisError::ZeroDistortion);
    }
    let (re, im) = dft2(&diff)?;
    let plane = partition.bins();
    let mut sums = [0.0; NUM_REGIONS];
    for (i, (&r, &m)) in re.data().iter().zip(im.data()).enumerate() {
        let bin = i % plane;
        let (u, v) = (bin / partition.w, bin % partition.w);
        sums[partition.region(u, v) - 1] += (r * r + m * m).sqrt();
    }
    let total: Real = sums.iter().sum();
    let mut fractions = [0.0; NUM_REGIONS];
    for (f, s) in fractions.iter_mut().zip(sums) {
        *f = s / total;
    }
    Ok(RegionHistogram { fractions })
}

/// Angles measuring how feature-space shifts keep their direction along a
/// straight input-space displacement: theta near zero means near-linear
/// behavior.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearityProfile {
    pub eps: Vec<Real>,
    pub theta: Vec<Real>,
    pub delta_eps: Real,
}

/// Uniform [0,1] grid used by the probe.
pub fn default_epsilon_grid() -> Vec<Real> {
    (0..LINEARITY_GRID_LEN).map(|i| i as Real / (LINEARITY_GRID_LEN - 1) as Real).collect()
}

fn add_scaled(x: &Tensor, delta: &Tensor, scale: Real) -> Tensor {
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(delta.data()).map(|(a, d)| a + scale * d).collect(),
    )
    .expect("same shape")
}

/// theta_eps = pi - arccos(g_minus . g_plus) per grid point, where g_+- are
/// the normalized feature shifts at X + (eps +- delta_eps) * delta.
pub fn linearity_theta(
    g: &dyn FeatureMap,
    x: &Tensor,
    delta: &Tensor,
    eps_grid: &[Real],
    delta_eps: Real,
) -> Result<LinearityProfile, AnalysisError> {
    assert!(delta_eps > 0.0, "delta_eps must be positive");
    if x.shape() != delta.shape() {
        return Err(AnalysisError::Tensor(TensorError::ShapeMismatch {
            context: "linearity_theta",
            lhs: x.shape().to_vec(),
            rhs: delta.shape().to_vec(),
        }));
    }
    let mut theta = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let g0 = g.features(&add_scaled(x, delta, eps))?;
        let gp = g.features(&add_scaled(x, delta, eps + delta_eps))?;
        let gm = g.features(&add_scaled(x, delta, eps - delta_eps))?;
        let sp: Vec<Real> = gp.iter().zip(&g0).map(|(a, b)| a - b).collect();
        let sm: Vec<Real> = gm.iter().zip(&g0).map(|(a, b)| a - b).collect();
        let np = sp.iter().map(|v| v * v).sum::<Real>().sqrt();
        let nm = sm.iter().map(|v| v * v).sum::<Real>().sqrt();
        if np < 1e-12 || nm < 1e-12 {
            return Err(AnalysisError::DegenerateShift { eps });
        }
        let dot: Real =
            sp.iter().zip(&sm).map(|(a, b)| (a / np) * (b / nm)).sum::<Real>().clamp(-1.0, 1.0);
        theta.push(std::f64::consts::PI - dot.acos());
    }
    Ok(LinearityProfile { eps: eps_grid.to_vec(), theta, delta_eps })
}

/// Accuracy after scaling one spectral component by (1 - r) for each r.
/// Returns (r, accuracy) pairs.
pub fn spectrum_reduction_sweep(
    model: &Model,
    images: &[Tensor],
    labels: &[usize],
    target: SpectrumComponent,
    r_grid: &[Real],
) -> Result<Vec<(Real, Real)>, AnalysisError> {
    assert_eq!(images.len(), labels.len());
    let mut out = Vec::with_capacity(r_grid.len());
    for &r in r_grid {
        assert!((0.0..=1.0).contains(&r), "reduction ratio in [0,1]");
        let mut hits = 0usize;
        for (x, &y) in images.iter().zip(labels) {
            let s = decompose(x)?;
            let scaled = match target {
                SpectrumComponent::Magnitude => Spectrum {
                    mag: s.mag.map(|m| m * (1.0 - r)),
                    phase: s.phase,
                },
                SpectrumComponent::Phase => Spectrum {
                    mag: s.mag,
                    phase: s.phase.map(|p| p * (1.0 - r)),
                },
            };
            // Phase scaling moves self-conjugate bins (whose phase is pi
            // for negative real components) off the {0, pi} lattice, so
            // the scaled spectrum is not exactly conjugate-symmetric;
            // reconstruction keeps the real part.
            let re = Tensor::new(
                scaled.mag.shape().to_vec(),
                scaled
                    .mag
                    .data()
                    .iter()
                    .zip(scaled.phase.data())
                    .map(|(&m, &p)| m * p.cos())
                    .collect(),
            )?;
            let im = Tensor::new(
                scaled.mag.shape().to_vec(),
                scaled
                    .mag
                    .data()
                    .iter()
                    .zip(scaled.phase.data())
                    .map(|(&m, &p)| m * p.sin())
                    .collect(),
            )?;
            let (rebuilt, _) = crate::spectral::idft2(&re, &im)?;
            let rebuilt = rebuilt.map(|v| v.clamp(0.0, 1.0));
            if argmax(&model.logits(&rebuilt)?) == y {
                hits += 1;
            }
        }
        out.push((r, hits as Real / images.len().max(1) as Real));
    }
    Ok(out)
}

/// Standard reduction grid r in {0, 0.1, ..., 1}.
pub fn default_reduction_grid() -> Vec<Real> {
    (0..=10).map(|i| i as Real / 10.0).collect()
}

/// Image built from one source's magnitude and another's phase, clipped to
/// [0,1].
pub fn recombine(mag_source: &Tensor, phase_source: &Tensor) -> Result<Tensor, AnalysisError> {
    if mag_source.shape() != phase_source.shape() {
        return Err(AnalysisError::Tensor(TensorError::ShapeMismatch {
            context: "recombine",
            lhs: mag_source.shape().to_vec(),
            rhs: phase_source.shape().to_vec(),
        }));
    }
    let ms = decompose(mag_source)?;
    let ps = decompose(phase_source)?;
    let rebuilt = recompose(&Spectrum { mag: ms.mag, phase: ps.phase })?;
    Ok(rebuilt.map(|v| v.clamp(0.0, 1.0)))
}

/// Outcome of classifying recombined images over all ordered distinct-label
/// pairs; percentages sum to 100.
#[derive(Debug, Clone, PartialEq)]
pub struct RecombinationStats {
    pub phase_pct: Real,
    pub magnitude_pct: Real,
    pub else_pct: Real,
    pub pairs: usize,
}

/// For every ordered pair (magnitude image, phase image) with distinct
/// labels, classify the recombined image and tabulate whether it follows
/// the phase class, the magnitude class, or neither.
pub fn recombination_study(
    model: &Model,
    images: &[Tensor],
    labels: &[usize],
) -> Result<RecombinationStats, AnalysisError> {
    assert_eq!(images.len(), labels.len());
    let mut phase_hits = 0usize;
    let mut mag_hits = 0usize;
    let mut pairs = 0usize;
    for (i, (mag_img, &mag_label)) in images.iter().zip(labels).enumerate() {
        for (j, (phase_img, &phase_label)) in images.iter().zip(labels).enumerate() {
            if i == j || mag_label == phase_label {
                continue;
            }
            let rec = recombine(mag_img, phase_img)?;
            let predicted = argmax(&model.logits(&rec)?);
            pairs += 1;
            if predicted == phase_label {
                phase_hits += 1;
            } else if predicted == mag_label {
                mag_hits += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(AnalysisError::NoValidPairs);
    }
    let phase_pct = 100.0 * phase_hits as Real / pairs as Real;
    let magnitude_pct = 100.0 * mag_hits as Real / pairs as Real;
    Ok(RecombinationStats {
        phase_pct,
        magnitude_pct,
        else_pct: 100.0 - phase_pct - magnitude_pct,
        pairs,
    })
}

/// Patch-importance weights from the rollout of an attention trace:
/// per layer average heads, add identity, renormalize rows, multiply
/// across layers; the class-token row over patch tokens is returned.
pub fn attention_rollout(trace: &AttentionTrace) -> Result<Vec<Real>, AnalysisError> {
    if trace.layers.is_empty() {
        return Err(AnalysisError::EmptyTrace);
    }
    let t = trace.layers[0].shape()[1];
    let mut rollout: Vec<Real> = vec![0.0; t * t];
    for i in 0..t {
        rollout[i * t + i] = 1.0;
    }
    for layer in &trace.layers {
        let shape = layer.shape();
        if shape.len() != 3 || shape[1] != t || shape[2] != t {
            return Err(AnalysisError::Tensor(TensorError::ShapeMismatch {
                context: "attention_rollout layer",
                lhs: vec![t, t],
                rhs: shape.to_vec(),
            }));
        }
        let heads = shape[0];
        // Head-averaged attention plus identity, rows renormalized.
        let mut avg = vec![0.0; t * t];
        for h in 0..heads {
            for (a, &v) in avg.iter_mut().zip(&layer.data()[h * t * t..(h + 1) * t * t]) {
                *a += v / heads as Real;
            }
        }
        for i in 0..t {
            avg[i * t + i] += 1.0;
            let row_sum: Real = avg[i * t..(i + 1) * t].iter().sum();
            for v in &mut avg[i * t..(i + 1) * t] {
                *v /= row_sum;
            }
        }
        // rollout = avg @ rollout
        let mut next = vec![0.0; t * t];
        crate::tensor::matmul_accum(&avg, &rollout, &mut next, t, t, t);
        rollout = next;
    }
    Ok(rollout[1..t].to_vec())
}

/// Pearson correlation between two importance maps.
pub fn attention_correlation(map_a: &[Real], map_b: &[Real]) -> Result<Real, AnalysisError> {
    if map_a.len() != map_b.len() {
        return Err(AnalysisError::Tensor(TensorError::ShapeMismatch {
            context: "attention_correlation",
            lhs: vec![map_a.len()],
            rhs: vec![map_b.len()],
        }));
    }
    pearson(map_a, map_b).ok_or(AnalysisError::ConstantMap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Cnn, CnnConfig};
    use crate::rng::Rng;
    use crate::spectral::make_region_partition;

    struct Affine {
        matrix: Vec<Vec<Real>>, // rows: features, cols: flattened input
    }

    impl FeatureMap for Affine {
        fn features(&self, x: &Tensor) -> Result<Vec<Real>, ModelError> {
            Ok(self
                .matrix
                .iter()
                .map(|row| row.iter().zip(x.data()).map(|(a, b)| a * b).sum::<Real>() + 0.5)
                .collect())
        }
    }

    /// relu(w . x) alongside a linear coordinate, so feature shifts stay
    /// nonzero while the activation pattern change is visible.
    struct ReluProbe {
        w: Vec<Real>,
        v: Vec<Real>,
    }

    impl FeatureMap for ReluProbe {
        fn features(&self, x: &Tensor) -> Result<Vec<Real>, ModelError> {
            let wx: Real = self.w.iter().zip(x.data()).map(|(a, b)| a * b).sum();
            let vx: Real = self.v.iter().zip(x.data()).map(|(a, b)| a * b).sum();
            Ok(vec![wx.max(0.0), vx])
        }
    }

    #[test]
    fn constant_offset_lands_in_region_one() {
        let mut rng = Rng::new(1);
        let x = Tensor::rand_uniform(&[1, 16, 16], 0.2, 0.8, &mut rng);
        let shifted = x.map(|v| v + 0.05);
        let partition = make_region_partition(16, 16);
        let hist = region_distortion_histogram(&x, &shifted, &partition).unwrap();
        assert!((hist.fractions[0] - 1.0).abs() < 1e-9);
        assert!((hist.fractions.iter().sum::<Real>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn impulse_distortion_is_bin_count_proportional() {
        let (h, w) = (16, 16);
        let x = Tensor::zeros(&[1, h, w]);
        let mut spiked = x.clone();
        spiked.data_mut()[5 * w + 3] = 0.7;
        let partition = make_region_partition(h, w);
        let hist = region_distortion_histogram(&x, &spiked, &partition).unwrap();
        let total = (h * w) as Real;
        for (region, &frac) in hist.fractions.iter().enumerate() {
            let want = partition.counts()[region] as Real / total;
            assert!(
                (frac - want).abs() < 1e-6,
                "region {}: {frac} vs {want}",
                region + 1
            );
        }
    }

    #[test]
    fn identical_images_raise_zero_distortion() {
        let x = Tensor::zeros(&[1, 8, 8]);
        let partition = make_region_partition(8, 8);
        assert!(matches!(
            region_distortion_histogram(&x, &x, &partition),
            Err(AnalysisError::ZeroDistortion)
        ));
    }

    #[test]
    fn affine_features_have_zero_theta() {
        let mut rng = Rng::new(2);
        let dim = 12;
        let matrix: Vec<Vec<Real>> =
            (0..5).map(|_| (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        let g = Affine { matrix };
        let x = Tensor::rand_uniform(&[dim], 0.0, 1.0, &mut rng);
        let delta = Tensor::rand_uniform(&[dim], -0.2, 0.2, &mut rng);
        let profile =
            linearity_theta(&g, &x, &delta, &default_epsilon_grid(), LINEARITY_DELTA_EPSILON)
                .unwrap();
        assert_eq!(profile.theta.len(), LINEARITY_GRID_LEN);
        for (&eps, &th) in profile.eps.iter().zip(&profile.theta) {
            assert!(th.abs() < 1e-6, "theta {th} at eps {eps}");
            assert!((0.0..=std::f64::consts::PI).contains(&th));
        }
    }

    #[test]
    fn relu_kink_produces_theta_jump() {
        // w.x crosses zero around eps = 0.5 along delta.
        let g = ReluProbe { w: vec![1.0, 0.0], v: vec![0.0, 1.0] };
        let x = Tensor::new(vec![2], vec![-0.5, 0.3]).unwrap();
        let delta = Tensor::new(vec![2], vec![1.0, 0.4]).unwrap();
        let grid = default_epsilon_grid();
        let profile = linearity_theta(&g, &x, &delta, &grid, LINEARITY_DELTA_EPSILON).unwrap();
        let peak = profile.theta.iter().cloned().fold(0.0 as Real, Real::max);
        assert!(peak > 0.5, "expected a theta jump at the activation kink, got {peak}");
        // Away from the kink the map is locally affine.
        assert!(profile.theta[10] < 1e-6);
        assert!(profile.theta[90] < 1e-6);
        // Jump is localized near eps = 0.5.
        let peak_idx = profile.theta.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        assert!((profile.eps[peak_idx] - 0.5).abs() < 0.05);
    }

    #[test]
    fn recombine_self_is_identity() {
        let mut rng = Rng::new(3);
        let x = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let rec = recombine(&x, &x).unwrap();
        assert!(rec.max_abs_diff(&x).unwrap() < 1e-6);
    }

    #[test]
    fn constant_magnitude_source_gives_constant_output() {
        let mut rng = Rng::new(4);
        let mag_src = Tensor::full(&[1, 12, 12], 0.6);
        let phase_src = Tensor::rand_uniform(&[1, 12, 12], 0.1, 0.9, &mut rng);
        let rec = recombine(&mag_src, &phase_src).unwrap();
        for &v in rec.data() {
            assert!((v - 0.6).abs() < 1e-9, "{v}");
        }
    }

    fn tiny_model() -> Model {
        Model::Cnn(Cnn::build(CnnConfig::new((1, 16, 16), 3, 13).with_width(4)))
    }

    #[test]
    fn recombination_fractions_sum_to_hundred() {
        let model = tiny_model();
        let mut rng = Rng::new(5);
        let images: Vec<Tensor> =
            (0..4).map(|_| Tensor::rand_uniform(&[1, 16, 16], 0.0, 1.0, &mut rng)).collect();
        let labels = vec![0, 1, 2, 0];
        let stats = recombination_study(&model, &images, &labels).unwrap();
        assert!((stats.phase_pct + stats.magnitude_pct + stats.else_pct - 100.0).abs() < 1e-6);
        // 4*3 ordered pairs minus the two (0,3)/(3,0) same-label pairs.
        assert_eq!(stats.pairs, 10);
    }

    #[test]
    fn single_class_has_no_valid_pairs() {
        let model = tiny_model();
        let images = vec![Tensor::zeros(&[1, 16, 16]), Tensor::full(&[1, 16, 16], 0.3)];
        let labels = vec![1, 1];
        assert!(matches!(
            recombination_study(&model, &images, &labels),
            Err(AnalysisError::NoValidPairs)
        ));
    }

    #[test]
    fn reduction_sweep_r_zero_matches_clean_accuracy() {
        let model = tiny_model();
        let mut rng = Rng::new(6);
        let images: Vec<Tensor> =
            (0..6).map(|_| Tensor::rand_uniform(&[1, 16, 16], 0.0, 1.0, &mut rng)).collect();
        let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let clean = crate::models::accuracy(&model, &images, &labels).unwrap();
        let sweep = spectrum_reduction_sweep(
            &model,
            &images,
            &labels,
            SpectrumComponent::Magnitude,
            &[0.0, 1.0],
        )
        .unwrap();
        assert_eq!(sweep[0].0, 0.0);
        assert!((sweep[0].1 - clean).abs() < 1e-12, "r=0 must equal clean accuracy");
        // r = 1 zeroes the magnitude: all-black images, prediction constant.
        let zeroed = Tensor::zeros(&[1, 16, 16]);
        let fixed = argmax(&model.logits(&zeroed).unwrap());
        let expect = labels.iter().filter(|&&y| y == fixed).count() as Real / 6.0;
        assert!((sweep[1].1 - expect).abs() < 1e-12);
    }

    #[test]
    fn rollout_uniform_attention_is_uniform_over_patches() {
        let t = 5;
        let uniform = Tensor::full(&[1, t, t], 1.0 / t as Real);
        let map = attention_rollout(&AttentionTrace { layers: vec![uniform] }).unwrap();
        assert_eq!(map.len(), t - 1);
        for &v in &map {
            assert!((v - map[0]).abs() < 1e-12);
            assert!(v > 0.0 && v.is_finite());
        }
    }

    #[test]
    fn rollout_matches_direct_product_oracle() {
        // Two layers, two heads, tiny token count; compare against an
        // explicit matrix-product computation.
        let t = 3;
        let mut rng = Rng::new(7);
        let mut layers = Vec::new();
        for _ in 0..2 {
            let mut data = Vec::new();
            for _ in 0..2 {
                for _ in 0..t {
                    let mut row: Vec<Real> = (0..t).map(|_| rng.uniform(0.1, 1.0)).collect();
                    let s: Real = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= s);
                    data.extend(row);
                }
            }
            layers.push(Tensor::new(vec![2, t, t], data).unwrap());
        }
        let got = attention_rollout(&AttentionTrace { layers: layers.clone() }).unwrap();

        // Oracle: explicit per-layer (avg + I, renormalize, multiply).
        let mut r = vec![vec![0.0; t]; t];
        (0..t).for_each(|i| r[i][i] = 1.0);
        for layer in &layers {
            let mut avg = vec![vec![0.0; t]; t];
            for h in 0..2 {
                for i in 0..t {
                    for j in 0..t {
                        avg[i][j] += layer.data()[(h * t + i) * t + j] / 2.0;
                    }
                }
            }
            for i in 0..t {
                avg[i][i] += 1.0;
                let s: Real = avg[i].iter().sum();
                avg[i].iter_mut().for_each(|v| *v /= s);
            }
            let mut next = vec![vec![0.0; t]; t];
            for i in 0..t {
                for j in 0..t {
                    for k in 0..t {
                        next[i][j] += avg[i][k] * r[k][j];
                    }
                }
            }
            r = next;
        }
        for (j, &g) in got.iter().enumerate() {
            assert!((g - r[0][j + 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn rollout_preserves_row_stochasticity() {
        let t = 4;
        let mut rng = Rng::new(8);
        let mut data = Vec::new();
        for _ in 0..t {
            let mut row: Vec<Real> = (0..t).map(|_| rng.uniform(0.0, 1.0)).collect();
            let s: Real = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            data.extend(row);
        }
        let layer = Tensor::new(vec![1, t, t], data).unwrap();
        let trace = AttentionTrace { layers: vec![layer.clone(), layer] };
        let map = attention_rollout(&trace).unwrap();
        // The class-token row of the full rollout matrix sums to 1; the
        // patch entries must therefore sum below 1 and stay non-negative.
        let s: Real = map.iter().sum();
        assert!(s <= 1.0 + 1e-12);
        assert!(map.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn correlation_identities() {
        let a = [0.1, 0.4, 0.2, 0.9];
        let neg: Vec<Real> = a.iter().map(|v| -v).collect();
        assert!((attention_correlation(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((attention_correlation(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        let flat = [0.5, 0.5, 0.5, 0.5];
        assert!(matches!(
            attention_correlation(&a, &flat),
            Err(AnalysisError::ConstantMap)
        ));
    }
}
