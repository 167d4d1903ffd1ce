use hvsr_core::autoencoder::*;
use hvsr_core::quantizer::{hierarchical_tokenize_features, ScaleSchedule};
use hvsr_core::synth::SyntheticDatasetSpec;
use hvsr_core::Error;
use hvsr_tensor::gradcheck::{numeric_grad, relative_error, FD_STEP};
use hvsr_tensor::{AdamWConfig, Tensor};

fn tiny_config() -> AutoencoderConfig {
    AutoencoderConfig {
        stages: 2,
        widths: vec![8, 8],
        groups: 4,
        latent_dim: 4,
        codebook_size: 32,
        schedule: ScaleSchedule::new(vec![1, 2, 4], vec![0.5, 1.0]).unwrap(),
        learned_phi: true,
    }
}

fn tiny_images(count: usize, seed: u64) -> Vec<hvsr_core::image::Image> {
    SyntheticDatasetSpec::new(count, 16, seed).generate().unwrap()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn desk_shapes_at_every_scale() {
    let cfg = AutoencoderConfig::desk();
    assert_eq!(cfg.image_size(), 64);
    assert_eq!(cfg.compression(), 0.25);
    let model = Rqvae::new(cfg, 0).unwrap();
    let img = SyntheticDatasetSpec::new(1, 64, 1).image(0).unwrap();
    assert_eq!(model.encode_features(&img).unwrap().shape(), &[8, 16, 16]);
    let tokens = model.tokenize(&img).unwrap();
    assert!(tokens.is_complete());
    let sides: Vec<_> = model.decode_all(&tokens).unwrap().iter().map(|i| (i.height(), i.width())).collect();
    assert_eq!(sides, vec![(16, 16), (32, 32), (64, 64)]);
    let prefix = tokens.prefix(model.schedule().boundaries()[0]).unwrap();
    assert_eq!(model.decode_tokens(&prefix, 0).unwrap().height(), 16);
    assert!(model.decode_tokens(&prefix, 1).is_err());
}

#[test]
fn construction_is_deterministic() {
    let a = Rqvae::new(tiny_config(), 3).unwrap();
    let b = Rqvae::new(tiny_config(), 3).unwrap();
    let img = &tiny_images(1, 0)[0];
    assert_eq!(a.reconstruct(img).unwrap(), b.reconstruct(img).unwrap());
}

#[test]
fn pure_autoencoder_training_lowers_loss() {
    let mut model = Rqvae::new(tiny_config(), 1).unwrap();
    let data = tiny_images(64, 2);
    let cfg = RqvaeTrainConfig {
        pretrain_steps: 0,
        steps: 500,
        batch_size: 2,
        quant_drop_prob: 1.0,
        optimizer: AdamWConfig { lr: 2e-3, weight_decay: 0.0, ..Default::default() },
        ..Default::default()
    };
    let reports = train_rqvae(&mut model, &data, &cfg, |_| {}).unwrap();
    assert!(reports.iter().all(|r| !r.quantized && r.codebook == 0.0));
    let totals: Vec<f64> = reports.iter().map(|r| r.total).collect();
    assert!(mean(&totals[490..]) < mean(&totals[..10]), "{} -> {}", totals[0], totals[499]);
}

#[test]
fn zero_drop_quantizes_every_step() {
    let mut model = Rqvae::new(tiny_config(), 4).unwrap();
    let data = tiny_images(4, 5);
    let cfg = RqvaeTrainConfig { pretrain_steps: 0, steps: 5, batch_size: 2, quant_drop_prob: 0.0, ..Default::default() };
    let before = model.store().value(model.codebook_param()).clone();
    let reports = train_rqvae(&mut model, &data, &cfg, |_| {}).unwrap();
    assert!(reports.iter().all(|r| r.quantized && r.commitment > 0.0));
    assert_ne!(model.store().value(model.codebook_param()), &before);
}

#[test]
fn reported_total_matches_weights() {
    let mut model = Rqvae::new(tiny_config(), 6).unwrap();
    let data = tiny_images(4, 7);
    let cfg = RqvaeTrainConfig { pretrain_steps: 2, steps: 2, batch_size: 2, ..Default::default() };
    assert_eq!(cfg.edge_weight, 5.0);
    assert_eq!((cfg.edge_weight_at(1), cfg.edge_weight_at(2)), (0.0, 5.0));
    assert_eq!((cfg.lr_at(0), cfg.lr_at(2)), (cfg.pretrain_lr, cfg.optimizer.lr));
    let reports = train_rqvae(&mut model, &data, &cfg, |_| {}).unwrap();
    assert_eq!(reports.len(), 4);
    for r in reports {
        assert!((r.weighted_total(&cfg) - r.total).abs() <= 1e-12 * r.total.abs().max(1.0));
    }
}

fn frozen_model() -> Rqvae {
    let mut model = Rqvae::new(tiny_config(), 8).unwrap();
    let ids: Vec<_> = model.store().iter().filter(|(_, p)| p.name.starts_with("dec")).map(|(id, _)| id).collect();
    for id in ids {
        model.store_mut().set_trainable(id, false);
    }
    model
}

#[test]
fn vocabulary_finetune_requires_frozen_decoders() {
    let mut model = Rqvae::new(tiny_config(), 8).unwrap();
    let err = finetune_vocabulary(&mut model, &tiny_images(2, 0), &FinetuneConfig::default()).unwrap_err();
    assert!(matches!(err, Error::DecoderNotFrozen(_)));
}

#[test]
fn vocabulary_finetune_touches_only_the_codebook() {
    let mut model = frozen_model();
    let before: Vec<(String, Tensor, bool)> =
        model.store().iter().map(|(_, p)| (p.name.clone(), p.value.clone(), p.trainable)).collect();
    let data = tiny_images(4, 9);
    let cfg = FinetuneConfig { batch_size: 4, ..Default::default() };
    let losses = finetune_vocabulary(&mut model, &data, &cfg).unwrap();
    assert_eq!(losses.len(), 200);
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "alignment loss rose {} -> {}", w[0], w[1]);
    }
    assert!(losses[199] < losses[0]);
    for ((name, value, trainable), (_, p)) in before.iter().zip(model.store().iter()) {
        assert_eq!(*trainable, p.trainable, "{name}");
        if name == CODEBOOK_PARAM {
            assert_ne!(&p.value, value);
        } else {
            assert_eq!(p.value.data(), value.data(), "{name} changed");
        }
    }
}

#[test]
fn alignment_gradient_matches_finite_differences() {
    let model = frozen_model();
    let data = tiny_images(2, 10);
    let schedule = model.schedule().clone();
    let features: Vec<Vec<Tensor>> = data
        .iter()
        .map(|img| {
            (0..schedule.scale_count())
                .map(|n| {
                    let side = model.config().scale_image_size(n);
                    model.encode_features(&img.resize(side, side).unwrap()).unwrap()
                })
                .collect()
        })
        .collect();
    let (cb, phi) = (model.codebook(), model.phi());
    let tokens: Vec<_> =
        features.iter().map(|f| hierarchical_tokenize_features(f, &cb, &schedule, &phi).unwrap()).collect();
    let (_, analytic) = vocabulary_alignment(&model, &features, &tokens).unwrap();
    let id = model.codebook_param();
    let mut probe_model = model.clone();
    let numeric = numeric_grad(model.store().value(id), FD_STEP, |probe| {
        probe_model.store_mut().get_mut(id).value = probe.clone();
        vocabulary_alignment(&probe_model, &features, &tokens).unwrap().0
    });
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-6, "relative error {err:e}");
}

#[test]
fn invalid_configs_are_rejected() {
    let bad_groups = AutoencoderConfig { groups: 5, ..tiny_config() };
    assert!(matches!(Rqvae::new(bad_groups, 0), Err(Error::Config(_))));
    let bad_widths = AutoencoderConfig { widths: vec![8], ..tiny_config() };
    assert!(Rqvae::new(bad_widths, 0).is_err());
    let model = Rqvae::new(tiny_config(), 0).unwrap();
    let wrong_size = SyntheticDatasetSpec::new(1, 32, 0).image(0).unwrap();
    assert!(model.tokenize(&wrong_size).is_err());
}
