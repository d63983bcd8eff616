//! Property tests for the Fourier layer: Parseval, adjointness, roundtrip
//! identity, symmetric-parametrization realness, and partition coverage.

use freqlab_core::rng::Rng;
use freqlab_core::spectral::{
    decompose, dft2, idft2, make_band_mask, make_region_partition, recompose, SpectrumComponent,
    SymmetryPlan,
};
use freqlab_core::tensor::Tensor;
use freqlab_core::Real;
use proptest::prelude::*;

fn image_strategy() -> impl Strategy<Value = (usize, usize, Vec<Real>)> {
    (4usize..=16, 4usize..=16).prop_flat_map(|(h, w)| {
        proptest::collection::vec(-1.0..1.0f64, h * w).prop_map(move |data| (h, w, data))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parseval_energy_identity((h, w, data) in image_strategy()) {
        let x = Tensor::new(vec![h, w], data).unwrap();
        let (re, im) = dft2(&x).unwrap();
        let spatial: Real = x.data().iter().map(|v| v * v).sum();
        let spectral: Real = re
            .data()
            .iter()
            .zip(im.data())
            .map(|(&r, &i)| r * r + i * i)
            .sum::<Real>()
            / (h * w) as Real;
        let denom = spatial.max(1e-30);
        prop_assert!(((spatial - spectral) / denom).abs() < 1e-9,
            "parseval: {spatial} vs {spectral}");
    }

    #[test]
    fn transform_roundtrip((h, w, data) in image_strategy()) {
        let x = Tensor::new(vec![h, w], data).unwrap();
        let (re, im) = dft2(&x).unwrap();
        let (back, resid) = idft2(&re, &im).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() < 1e-9);
        prop_assert!(resid.max_abs() < 1e-9);
    }

    #[test]
    fn polar_roundtrip((h, w, data) in image_strategy()) {
        let x = Tensor::new(vec![h, w], data).unwrap();
        let back = recompose(&decompose(&x).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() < 1e-9);
    }

    #[test]
    fn forward_inverse_adjointness(
        (h, w, data) in image_strategy(),
        seed in 0u64..1_000_000,
    ) {
        // <F x, Y> = <x, F^H Y> with F^H = (H*W) * F^-1.
        let x = Tensor::new(vec![h, w], data).unwrap();
        let mut rng = Rng::new(seed);
        let y_re = Tensor::rand_uniform(&[h, w], -1.0, 1.0, &mut rng);
        let y_im = Tensor::rand_uniform(&[h, w], -1.0, 1.0, &mut rng);

        let (fx_re, fx_im) = dft2(&x).unwrap();
        let mut lhs_re = 0.0;
        let mut lhs_im = 0.0;
        for i in 0..h * w {
            lhs_re += fx_re.data()[i] * y_re.data()[i] + fx_im.data()[i] * y_im.data()[i];
            lhs_im += fx_im.data()[i] * y_re.data()[i] - fx_re.data()[i] * y_im.data()[i];
        }

        let (z_re, z_im) = idft2(&y_re, &y_im).unwrap();
        let scale = (h * w) as Real;
        let mut rhs_re = 0.0;
        let mut rhs_im = 0.0;
        for i in 0..h * w {
            rhs_re += x.data()[i] * z_re.data()[i] * scale;
            rhs_im -= x.data()[i] * z_im.data()[i] * scale;
        }

        let tol = 1e-9 * (1.0 + lhs_re.abs().max(lhs_im.abs()));
        prop_assert!((lhs_re - rhs_re).abs() < tol, "re: {lhs_re} vs {rhs_re}");
        prop_assert!((lhs_im - rhs_im).abs() < tol, "im: {lhs_im} vs {rhs_im}");
    }

    #[test]
    fn symmetrized_maps_reconstruct_real_images(
        (h, w, data) in image_strategy(),
        seed in 0u64..1_000_000,
    ) {
        // Random free parameters through the symmetric expansion always
        // pass the realness check of recompose.
        let x = Tensor::new(vec![h, w], data.iter().map(|v| (v + 1.0) / 2.0).collect()).unwrap();
        let s = decompose(&x).unwrap();
        let plan = SymmetryPlan::full(h, w);
        let mut rng = Rng::new(seed);
        let dmag = plan
            .symmetrize(
                &Tensor::rand_uniform(&[plan.free_len()], -0.8, 0.8, &mut rng),
                SpectrumComponent::Magnitude,
            )
            .unwrap();
        let dphase = plan
            .symmetrize(
                &Tensor::rand_uniform(&[plan.free_len()], -2.0, 2.0, &mut rng),
                SpectrumComponent::Phase,
            )
            .unwrap();
        let mag = Tensor::new(
            vec![h, w],
            s.mag.data().iter().zip(dmag.data()).map(|(&m, &d)| (m * (1.0 + d)).max(0.0)).collect(),
        )
        .unwrap();
        let phase = Tensor::new(
            vec![h, w],
            s.phase.data().iter().zip(dphase.data()).map(|(&p, &d)| p + d).collect(),
        )
        .unwrap();
        let rebuilt = recompose(&freqlab_core::spectral::Spectrum { mag, phase });
        prop_assert!(rebuilt.is_ok(), "symmetrized spectrum must reconstruct real: {rebuilt:?}");
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive(h in 4usize..=40, w in 4usize..=40) {
        let p = make_region_partition(h, w);
        prop_assert_eq!(p.counts().iter().sum::<usize>(), h * w);
        for u in 0..h {
            for v in 0..w {
                let r = p.region(u, v);
                prop_assert!((1..=10).contains(&r));
            }
        }
        prop_assert_eq!(p.region(0, 0), 1);
    }

    #[test]
    fn band_masks_are_conjugate_symmetric(h in 4usize..=24, w in 4usize..=24, hi in 1usize..=10) {
        let p = make_region_partition(h, w);
        let lo = 1usize;
        let regions: Vec<usize> = (lo..=hi.max(lo)).collect();
        let mask = make_band_mask(&p, &regions).unwrap();
        for u in 0..h {
            for v in 0..w {
                let (mu, mv) = ((h - u) % h, (w - v) % w);
                prop_assert_eq!(mask.get(u, v), mask.get(mu, mv));
            }
        }
    }
}
