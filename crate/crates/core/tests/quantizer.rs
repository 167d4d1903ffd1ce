use hvsr_core::image::Image;
use hvsr_core::quantizer::*;
use hvsr_tensor::{ResampleMode, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(shape: Vec<usize>, sigma: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| sigma * rng.sample::<f64, _>(StandardNormal))
}

fn brute_force_nearest(cb: &Codebook, z: &[f64]) -> usize {
    let dists: Vec<f64> = (0..cb.size())
        .map(|k| cb.lookup(k).iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum())
        .collect();
    let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&d| d == min).unwrap()
}

fn smooth_image(side: usize, rng: &mut ChaCha8Rng) -> Image {
    let coarse = Tensor::from_fn(vec![3, 6, 6], |_| rng.gen::<f64>());
    let mut t = hvsr_core::image::interpolate(&coarse, side, side, ResampleMode::Bilinear).unwrap();
    t.data_mut().iter_mut().for_each(|v| *v = (*v + 0.1 * rng.gen::<f64>()).min(1.0));
    Image::new(t).unwrap()
}

#[test]
fn nearest_neighbour_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cb = Codebook::new(gaussian(vec![64, 8], 1.0, &mut rng)).unwrap();
    for _ in 0..1000 {
        let z: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        assert_eq!(vq_quantize(&z, &cb).0, brute_force_nearest(&cb, &z));
    }
}

#[test]
fn exact_entry_quantizes_to_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cb = Codebook::new(gaussian(vec![16, 4], 1.0, &mut rng)).unwrap();
    let (k, r) = vq_quantize(cb.lookup(3), &cb);
    assert_eq!(k, 3);
    assert_eq!(r, cb.lookup(3));
}

#[test]
fn multiscale_residuals_contract_with_matched_codebooks() {
    // Codebook spread matches the coarse-level residual statistics of
    // unit-variance white latents (area pooling 8x8 cells gives 1/8).
    let schedule = ScaleSchedule::desk();
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = Codebook::random(64, 8, 0.1, &mut rng).unwrap();
        let z = gaussian(vec![8, 16, 16], 1.0, &mut rng);
        let out = rq_levels(&z, &cb, schedule.resolutions(), &PhiFilter::Identity).unwrap();
        let mut prev = z.sq_norm().sqrt();
        for &n in &out.residual_norms {
            assert!(n <= prev + 1e-9, "seed {seed}: {n} > {prev}");
            prev = n;
        }
    }
}

#[test]
fn degenerate_partition_matches_plain_rq() {
    let schedule = ScaleSchedule::new(vec![2, 3, 4, 6, 8, 12, 16], vec![1.0]).unwrap();
    let enc = ProjectionEncoder::new(8, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cb = Codebook::random(64, 8, 0.3, &mut rng).unwrap();
    for phi in [PhiFilter::Identity, PhiFilter::conv(gaussian(vec![8, 8, 3, 3], 0.1, &mut rng)).unwrap()] {
        let img = smooth_image(64, &mut rng);
        let hier = hierarchical_tokenize(&img, &enc, &cb, &schedule, &phi).unwrap();
        let (plain, cumulative) = var_rq_tokenize(&enc.encode(&img).unwrap(), &cb, &schedule, &phi).unwrap();
        assert_eq!(hier, plain);
        assert_eq!(assemble_latent(&hier, 0, &cb, &phi).unwrap().max_abs_diff(&cumulative), 0.0);
    }
}

#[test]
fn prefixes_match_independent_tokenizations_of_downsampled_images() {
    let schedule = ScaleSchedule::desk();
    let enc = ProjectionEncoder::new(8, 4, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cb = Codebook::random(64, 8, 0.3, &mut rng).unwrap();
    let phi = PhiFilter::Identity;
    for _ in 0..20 {
        let img = smooth_image(64, &mut rng);
        let full = hierarchical_tokenize(&img, &enc, &cb, &schedule, &phi).unwrap();

        let b1 = schedule.boundaries()[0];
        let small = img.resize(16, 16).unwrap();
        let (alone, _) = var_rq_tokenize(&enc.encode(&small).unwrap(), &cb, &schedule.truncate(0).unwrap(), &phi).unwrap();
        assert_eq!(&full.levels()[..b1], alone.levels());

        let b2 = schedule.boundaries()[1];
        let half = img.resize(32, 32).unwrap();
        let alone = hierarchical_tokenize(&half, &enc, &cb, &schedule.truncate(1).unwrap(), &phi).unwrap();
        assert_eq!(&full.levels()[..b2], alone.levels());
    }
}

#[test]
fn assembled_latents_have_working_resolution() {
    let schedule = ScaleSchedule::desk();
    let enc = ProjectionEncoder::new(8, 4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cb = Codebook::random(32, 8, 0.3, &mut rng).unwrap();
    let phi = PhiFilter::identity_conv(8);
    let tokens = hierarchical_tokenize(&smooth_image(64, &mut rng), &enc, &cb, &schedule, &phi).unwrap();
    assert_eq!(tokens.token_count(), 529);
    for (n, side) in [(0, 4), (1, 8), (2, 16)] {
        assert_eq!(assemble_latent(&tokens, n, &cb, &phi).unwrap().shape(), &[8, side, side]);
    }
    assert!(assemble_latent(&tokens.prefix(4).unwrap(), 1, &cb, &phi).is_err());
    assert!(assemble_latent(&tokens.prefix(5).unwrap(), 1, &cb, &phi).is_ok());
}

#[test]
fn encoder_resolution_mismatch_is_an_error() {
    let enc = ProjectionEncoder::new(8, 4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cb = Codebook::random(32, 8, 0.3, &mut rng).unwrap();
    let img = smooth_image(48, &mut rng);
    assert!(hierarchical_tokenize(&img, &enc, &cb, &ScaleSchedule::desk(), &PhiFilter::Identity).is_err());
}

#[test]
fn paper_preset_token_file_holds_every_token() {
    let schedule = ScaleSchedule::paper();
    let levels = schedule.resolutions().iter().map(|r| vec![4095; r * r]).collect();
    let tokens = TokenSequence::new(schedule, 4096, levels).unwrap();
    let back = TokenSequence::from_bytes(&tokens.to_bytes()).unwrap();
    assert_eq!(back.token_count(), 3452);
    assert_eq!(back, tokens);
}

proptest! {
    #[test]
    fn nearest_matches_brute_force_small_codebooks(
        k in 2usize..64,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = Codebook::new(gaussian(vec![k, 3], 1.0, &mut rng)).unwrap();
        let z: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        prop_assert_eq!(cb.nearest(&z), brute_force_nearest(&cb, &z));
    }

    // At full resolution with a zero entry available, each step can only
    // shrink the residual.
    #[test]
    fn full_resolution_rq_contracts(seed in any::<u64>(), levels in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cb = Codebook::random(16, 4, 1.0, &mut rng).unwrap();
        cb.reseed(0, &[0.0; 4]).unwrap();
        let z = gaussian(vec![4, 5, 5], 1.0, &mut rng);
        let out = rq_levels(&z, &cb, &vec![5; levels], &PhiFilter::Identity).unwrap();
        let mut prev = z.sq_norm().sqrt();
        for &n in &out.residual_norms {
            prop_assert!(n <= prev + 1e-9);
            prev = n;
        }
    }

    #[test]
    fn boundaries_are_largest_fitting_level(
        mut res in prop::collection::btree_set(1usize..40, 1..8),
        top_extra in 0usize..3,
    ) {
        let top = 40 + 4 * top_extra;
        res.insert(top);
        let resolutions: Vec<usize> = res.into_iter().collect();
        let scales: Vec<f64> = [1usize, 2, 4].iter().map(|d| (top / 4 * d) as f64 / top as f64).collect();
        if let Ok(s) = ScaleSchedule::new(resolutions.clone(), scales) {
            for (n, &sc) in s.scales().iter().enumerate() {
                let want = resolutions.iter().filter(|&&r| r as f64 <= sc * top as f64).count();
                prop_assert_eq!(s.boundaries()[n], want);
            }
            prop_assert_eq!(*s.boundaries().last().unwrap(), s.levels());
        }
    }

    #[test]
    fn token_files_round_trip(seed in any::<u64>(), present in 0usize..8, vocab in 2usize..70000) {
        let schedule = ScaleSchedule::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = (0..present.min(7))
            .map(|l| (0..schedule.resolution(l).pow(2)).map(|_| rng.gen_range(0..vocab as u32)).collect())
            .collect();
        let t = TokenSequence::new(schedule, vocab, levels).unwrap();
        let bytes = t.to_bytes();
        prop_assert_eq!(TokenSequence::from_bytes(&bytes).unwrap(), t);
        prop_assert!(TokenSequence::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
