mod common;

use common::contracts::{self, tiny};

use proptest::prelude::*;
use sfanet_core::heads::{EncoderKind, ExtractorPreset, ModelBundle, ModelConfig, ModelKind};
use sfanet_core::Label;

#[test]
fn analytic_gradients_match_central_differences() {
    contracts::check_gradients(1e-4).unwrap();
}

#[test]
fn zero_parameters_give_exactly_half() {
    contracts::check_zero_half().unwrap();
}

#[test]
fn patch_models_ignore_patch_order() {
    contracts::check_permutation(1e-6).unwrap();
}

#[test]
fn ablation_removes_frequency_dependence() {
    let mut m = ModelBundle::new(tiny(ModelKind::Sfnet)).unwrap();
    m.init_weights(3);
    let x = common::noise_image("x", 8, 8, 1, Some(Label::Real));
    let zeroed = m.encoder().unwrap().dim();
    m.set_frequency_ablation(true);
    let t = m.trace(std::slice::from_ref(&x)).unwrap();
    let d = t.representation.ncols();
    assert!(t.representation.row(0).iter().skip(d - zeroed).all(|&v| v == 0.0));
    let (_, g) = m.loss_and_grad(std::slice::from_ref(&x), None).unwrap();
    let enc: usize = m
        .layout()
        .segments
        .iter()
        .filter(|s| s.name.starts_with("encoder."))
        .map(|s| s.shape.iter().product::<usize>())
        .sum();
    assert!(enc > 0);
    assert!(g[..enc].iter().all(|&v| v == 0.0));
}

#[test]
fn parameter_free_encoder_has_one_feature() {
    let mut cfg = tiny(ModelKind::Sfpnet);
    cfg.encoder.kind = EncoderKind::LogMagnitudeMean;
    cfg.encoder.freq_dim = 1;
    let mut m = ModelBundle::new(cfg).unwrap();
    m.init_weights(1);
    assert_eq!(m.dims().freq_dim, 1);
    let t = m.trace(&[common::noise_image("x", 8, 8, 1, None)]).unwrap();
    assert_eq!(t.fused.dim(), (1, 4, 4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn sfpnet_shape_chain(b in 1usize..4, g in 1usize..4, s in 1usize..5, fq in 1usize..5, split in 1usize..3) {
        let p = 4usize;
        let res = p * g * split;
        let mut cfg = ModelConfig::new(
            ModelKind::Sfpnet,
            [res, res],
            ExtractorPreset::RandomProjection { grid: Some(g), dim: s, seed: 1 },
        );
        cfg.patch_size = p;
        cfg.encoder.freq_dim = fq;
        cfg.encoder.channels = 1;
        let mut m = ModelBundle::new(cfg).unwrap();
        m.init_weights(b as u64);
        let batch: Vec<_> = (0..b).map(|i| common::noise_image(&format!("x{i}"), res as u32, res as u32, i as u64, None)).collect();
        let t = m.trace(&batch).unwrap();
        prop_assert_eq!(t.fused.dim(), (b, g * g, s + fq));
        prop_assert_eq!(t.representation.dim(), (b, s + fq));
        prop_assert_eq!(t.scores.len(), b);
        let d = m.dims();
        prop_assert_eq!((d.num_patches, d.spatial_dim, d.freq_dim), (g * g, s, fq));
    }
}
