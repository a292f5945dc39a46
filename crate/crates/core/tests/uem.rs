use ndarray::{Array1, Array2};
use rand::Rng;

use llrseg::anomalymix::{generate_dataset, DatasetConfig, Split};
use llrseg::datamodel::{BinaryOutlierMap, FeatureMap, HeadKind, ModelBundle, ScoreMap, IGNORE};
use llrseg::gmm::GmmHead;
use llrseg::inlier::{evaluate_miou, train_inlier, InlierHead, InlierModel, InlierTrainConfig};
use llrseg::neural::{Activation, DenseLayer, Mlp};
use llrseg::oracle;
use llrseg::seed::rng_for;
use llrseg::selfcheck::{llr_gradients, random_uem};
use llrseg::uem::{
    llr_discriminative, llr_generative, llr_loss, llr_score, ood_score, parameter_ratio, train_uem,
    uem_forward, verify_freeze, LlrConfig, UemHead, UemModel,
};
use llrseg::Error;

fn random_features(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap<f64> {
    let mut rng = rng_for(seed, "test.features", 0);
    FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn zero_projection(d: usize, p: usize) -> Mlp<f64> {
    Mlp::from_layers(vec![
        DenseLayer::zeros(d, p, Activation::Gelu),
        DenseLayer::zeros(p, p, Activation::Gelu),
        DenseLayer::zeros(p, p, Activation::Identity),
    ])
    .unwrap()
}

fn map(h: usize, w: usize, v: Vec<f64>) -> ScoreMap<f64> {
    ScoreMap::new(h, w, v).unwrap()
}

/// Frozen linear inlier model whose logits are all zero.
fn zero_inlier(d: usize) -> InlierModel<f64> {
    let dec = Mlp::new(&[d, 4, 4], Activation::Gelu, Activation::Identity, &mut rng_for(0, "t", 0)).unwrap();
    let mut m = InlierModel::new(dec, InlierHead::Discriminative(DenseLayer::zeros(4, 3, Activation::Identity))).unwrap();
    m.freeze();
    m
}

struct Fixture {
    stage1: ModelBundle,
    uem_data: Vec<(FeatureMap<f64>, BinaryOutlierMap)>,
    heldout: Vec<(FeatureMap<f64>, llrseg::datamodel::LabelMap)>,
}

fn fixture(head: HeadKind) -> Fixture {
    let data = generate_dataset(&DatasetConfig {
        height: 32,
        width: 32,
        train_inlier: 4,
        train_uem: 3,
        eval: 1,
        seed: 21,
        ..DatasetConfig::default()
    })
    .unwrap();
    let inl: Vec<_> = data
        .split(Split::TrainInlier)
        .map(|s| (s.features.clone(), s.labels.clone()))
        .collect();
    let cfg = InlierTrainConfig {
        head,
        decoder_dim: 16,
        epochs: 1,
        ..InlierTrainConfig::default()
    };
    let stage1 = train_inlier(&inl, data.num_classes(), &cfg).unwrap().bundle;
    Fixture {
        stage1,
        uem_data: data
            .split(Split::TrainUem)
            .map(|s| (s.features.clone(), s.outliers.clone()))
            .collect(),
        heldout: inl[inl.len() - 1..].to_vec(),
    }
}

fn quick_uem(head: HeadKind, epochs: usize) -> LlrConfig {
    LlrConfig {
        head,
        projection_dim: 4,
        epochs,
        em_samples: 300,
        ..LlrConfig::default()
    }
}

#[test]
fn zero_linear_head_gives_zero_maps() {
    let u = UemModel::new(
        Mlp::new(&[3, 4, 4, 4], Activation::Gelu, Activation::Identity, &mut rng_for(1, "t", 0)).unwrap(),
        UemHead::Discriminative(DenseLayer::zeros(4, 2, Activation::Identity)),
    )
    .unwrap();
    let (i, o) = uem_forward(&u, &random_features(3, 4, 5, 0)).unwrap();
    assert!(i.scores().iter().chain(o.scores()).all(|&v| v == 0.0));
}

#[test]
fn symmetric_mixtures_on_the_symmetry_plane_tie() {
    // Zero projection puts every pixel at the origin, midway between
    // mirrored class means.
    let head = GmmHead::new(2, 1, 2, vec![1.5, -0.5, -1.5, 0.5], vec![0.7, 1.3, 0.7, 1.3], vec![1.0, 1.0]).unwrap();
    let u = UemModel::new(zero_projection(3, 2), UemHead::Generative(head)).unwrap();
    let (i, o) = uem_forward(&u, &random_features(3, 3, 3, 1)).unwrap();
    assert_eq!(i, o);
}

#[test]
fn forward_matches_composed_oracles() {
    for seed in 0..5 {
        let f = random_features(5, 4, 3, seed);
        for kind in [HeadKind::Generative, HeadKind::Discriminative] {
            let u = random_uem(kind, 5, 6, 3, seed).unwrap();
            let (i, o) = uem_forward(&u, &f).unwrap();
            let z = oracle::mlp_forward_naive(u.projection(), &f.to_pixels());
            for (p, row) in z.outer_iter().enumerate() {
                let zp = row.to_vec();
                let (wi, wo) = match u.head() {
                    UemHead::Generative(g) => (
                        oracle::gmm_log_density_naive(&zp, g, 0),
                        oracle::gmm_log_density_naive(&zp, g, 1),
                    ),
                    UemHead::Discriminative(l) => {
                        let dot = |c: usize| l.bias[c] + (0..6).map(|j| l.weights[[c, j]] * zp[j]).sum::<f64>();
                        (dot(0), dot(1))
                    }
                };
                assert!((i.scores()[p] - wi).abs() < 1e-10, "{kind:?}");
                assert!((o.scores()[p] - wo).abs() < 1e-10, "{kind:?}");
            }
        }
    }
}

#[test]
fn forward_rejects_wrong_channels() {
    let u = random_uem(HeadKind::Discriminative, 5, 4, 2, 0).unwrap();
    assert!(matches!(uem_forward(&u, &random_features(4, 2, 2, 0)), Err(Error::DimMismatch(_))));
}

#[test]
fn llr_hand_examples() {
    let s = llr_score(&map(1, 2, vec![-1.0, 0.0]), &map(1, 2, vec![-1.0, -3.0]), &map(1, 2, vec![0.0, -2.0])).unwrap();
    assert_eq!(s.scores(), &[0.0, 5.0]);
    assert_eq!(llr_generative(-1.0, -1.0, &[0.0, -4.0]), 0.0);
    assert_eq!(llr_discriminative(0.0, -3.0, &[-2.0, -9.0]), 5.0);
    assert!(matches!(
        llr_score(&map(1, 2, vec![0.0; 2]), &map(2, 1, vec![0.0; 2]), &map(1, 2, vec![0.0; 2])),
        Err(Error::DimMismatch(_))
    ));
}

#[test]
fn both_llr_forms_agree_bitwise() {
    let mut rng = rng_for(5, "t", 0);
    for _ in 0..1000 {
        let logits: Vec<f64> = (0..rng.random_range(1..6)).map(|_| rng.random_range(-1e3..1e3)).collect();
        let (o, i) = (rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3));
        assert_eq!(llr_generative(o, i, &logits).to_bits(), llr_discriminative(o, i, &logits).to_bits());
    }
}

#[test]
fn llr_increases_with_the_outlier_score() {
    let mut rng = rng_for(6, "t", 0);
    for _ in 0..200 {
        let (o, i, m) = (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        let d = rng.random_range(1e-3..5.0);
        assert!(llr_discriminative(o + d, i, &[m]) > llr_discriminative(o, i, &[m]));
    }
}

#[test]
fn ood_score_is_the_outlier_map() {
    let zero = map(2, 2, vec![0.0; 4]);
    assert_eq!(ood_score(&zero), zero);
    let m = map(1, 3, vec![-2.0, 0.5, 1.0]);
    let shifted = ood_score(&m.map(|v| v + 4.0).unwrap());
    for (a, b) in ood_score(&m).scores().iter().zip(shifted.scores()) {
        assert_eq!(a + 4.0, *b);
    }
}

#[test]
fn loss_rejects_all_ignored_and_unfrozen_inputs() {
    let u = random_uem(HeadKind::Discriminative, 3, 4, 2, 0).unwrap();
    let f = random_features(3, 2, 2, 0);
    let cfg = LlrConfig::default();
    let ignored = BinaryOutlierMap::new(2, 2, vec![IGNORE; 4]).unwrap();
    assert!(matches!(llr_loss(&u, &zero_inlier(3), &f, &ignored, &cfg), Err(Error::AllIgnored)));
    let y = BinaryOutlierMap::new(2, 2, vec![0, 1, 0, 1]).unwrap();
    let frozen = zero_inlier(3);
    let hot = InlierModel::new(frozen.decoder().clone(), frozen.head().clone()).unwrap();
    assert!(!hot.is_frozen());
    assert!(matches!(llr_loss(&u, &hot, &f, &y, &cfg), Err(Error::FreezeViolation(_))));
}

#[test]
fn indifferent_scores_give_log_two() {
    let u = UemModel::new(
        Mlp::new(&[3, 4, 4, 4], Activation::Gelu, Activation::Identity, &mut rng_for(2, "t", 0)).unwrap(),
        UemHead::Discriminative(DenseLayer::zeros(4, 2, Activation::Identity)),
    )
    .unwrap();
    let cfg = LlrConfig {
        alpha: 0.0,
        ..LlrConfig::default()
    };
    let y = BinaryOutlierMap::new(2, 3, vec![0, 1, 1, 0, IGNORE, 0]).unwrap();
    let l = llr_loss(&u, &zero_inlier(3), &random_features(3, 2, 3, 3), &y, &cfg).unwrap();
    assert!((l.loss - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(l.valid, 5);
}

#[test]
fn loss_gradients_match_finite_differences() {
    assert!(llr_gradients(HeadKind::Generative, 3, 200).unwrap() < 1e-4);
    assert!(llr_gradients(HeadKind::Discriminative, 3, 200).unwrap() < 1e-4);
}

#[test]
fn discriminative_head_has_no_contrast_term() {
    let u = random_uem(HeadKind::Discriminative, 3, 4, 2, 1).unwrap();
    let y = BinaryOutlierMap::new(2, 2, vec![0, 1, 0, 1]).unwrap();
    let l = llr_loss(&u, &zero_inlier(3), &random_features(3, 2, 2, 1), &y, &LlrConfig::default()).unwrap();
    assert_eq!(l.contrast, 0.0);
    assert_eq!(l.grads.flatten().len(), u.trainable_count());
}

#[test]
fn zero_epochs_keep_digests_and_initial_module() {
    for head in [HeadKind::Discriminative, HeadKind::Generative] {
        let fx = fixture(head);
        let t = train_uem::<f64>(&fx.stage1, &fx.uem_data, &quick_uem(HeadKind::Discriminative, 0)).unwrap();
        for (name, e) in &fx.stage1.manifest.tensors {
            assert_eq!(t.bundle.manifest.frozen_digests[name], e.sha256);
            assert_eq!(t.bundle.digest(name), Some(e.sha256.as_str()));
        }
        let init = UemModel::<f64>::init(HeadKind::Discriminative, 16, 4, 5, Activation::Gelu, 0).unwrap();
        let rounded: Vec<f64> = init.flatten_params().iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(t.model.flatten_params(), rounded);
    }
}

#[test]
fn training_keeps_stage1_bit_identical() {
    for (inl, head) in [
        (HeadKind::Generative, HeadKind::Generative),
        (HeadKind::Generative, HeadKind::Discriminative),
        (HeadKind::Discriminative, HeadKind::Discriminative),
    ] {
        let fx = fixture(inl);
        let t = train_uem::<f64>(&fx.stage1, &fx.uem_data, &quick_uem(head, 2)).unwrap();
        assert!(t.report.freeze_verified);
        verify_freeze(&t.bundle).unwrap();
        let before = InlierModel::<f64>::from_bundle(&fx.stage1).unwrap();
        let after = InlierModel::<f64>::from_bundle(&t.bundle).unwrap();
        assert_eq!(before, after);
        let view: Vec<_> = fx.heldout.iter().map(|(f, l)| (f, l)).collect();
        let a = evaluate_miou(&before, &view).unwrap().miou;
        let b = evaluate_miou(&after, &view).unwrap().miou;
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(t.report.epoch_loss.len(), 2);
        assert!(parameter_ratio(&t.bundle) > 0.0);
    }
}

#[test]
fn same_seed_same_stage2_bundle() {
    let fx = fixture(HeadKind::Generative);
    let cfg = quick_uem(HeadKind::Generative, 1);
    let a = train_uem::<f64>(&fx.stage1, &fx.uem_data, &cfg).unwrap();
    let b = train_uem::<f64>(&fx.stage1, &fx.uem_data, &cfg).unwrap();
    assert_eq!(a.bundle.manifest, b.bundle.manifest);
}

#[test]
fn tampered_stage1_is_refused() {
    let fx = fixture(HeadKind::Discriminative);
    let mut bad = fx.stage1.clone();
    let name = bad.tensor_names().next().unwrap().to_string();
    let mut t = bad.tensor(&name).unwrap().clone();
    let mut data = t.data().to_vec();
    data[0] += 1.0;
    t = FeatureMap::new(t.channels(), t.height(), t.width(), data).unwrap();
    let digest = bad.manifest.tensors[&name].clone();
    bad.insert(name.clone(), t).unwrap();
    bad.manifest.tensors.insert(name, digest);
    let r = train_uem::<f64>(&bad, &fx.uem_data, &quick_uem(HeadKind::Discriminative, 1));
    assert!(matches!(r, Err(Error::FreezeViolation(_))));

    let dir = tempfile::tempdir().unwrap();
    fx.stage1.save(dir.path()).unwrap();
    let file = dir.path().join("decoder.0.weight.fmap");
    let mut bytes = std::fs::read(&file).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&file, bytes).unwrap();
    assert!(matches!(llrseg::uem::load_stage1(dir.path()), Err(Error::FreezeViolation(_))));
}

#[test]
fn stage2_verification_catches_changed_tensors() {
    let fx = fixture(HeadKind::Discriminative);
    let mut t = train_uem::<f64>(&fx.stage1, &fx.uem_data, &quick_uem(HeadKind::Discriminative, 1)).unwrap().bundle;
    let name = "head.bias";
    let old = t.tensor(name).unwrap().clone();
    let bumped = FeatureMap::new(old.channels(), old.height(), old.width(), old.data().iter().map(|v| v + 1.0).collect()).unwrap();
    t.insert(name, bumped).unwrap();
    assert!(matches!(verify_freeze(&t), Err(Error::FreezeViolation(_))));
}

#[test]
fn generative_module_on_discriminative_inlier_is_rejected() {
    let fx = fixture(HeadKind::Discriminative);
    let r = train_uem::<f64>(&fx.stage1, &fx.uem_data, &quick_uem(HeadKind::Generative, 1));
    assert!(matches!(r, Err(Error::InvalidConfig(_))));
}

#[test]
fn negative_weights_are_rejected() {
    let fx = fixture(HeadKind::Discriminative);
    let cfg = LlrConfig {
        beta: -0.1,
        ..quick_uem(HeadKind::Discriminative, 1)
    };
    assert!(matches!(train_uem::<f64>(&fx.stage1, &fx.uem_data, &cfg), Err(Error::InvalidConfig(_))));
}

#[test]
fn projection_must_have_three_layers() {
    let two = Mlp::<f64>::new(&[3, 4, 4], Activation::Gelu, Activation::Identity, &mut rng_for(0, "t", 0)).unwrap();
    let head = UemHead::Discriminative(DenseLayer::from_parts(Array2::zeros((2, 4)), Array1::zeros(2), Activation::Identity).unwrap());
    assert!(matches!(UemModel::new(two, head), Err(Error::InvalidConfig(_))));
}
