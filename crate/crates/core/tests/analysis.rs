mod common;

use bnrobust::analysis::{
    extract_histograms, histogram, mean_shift, model_affines, param_accounting, per_layer_mean_m, HistSource,
    HISTOGRAM_BINS,
};
use bnrobust::attacks::AttackSpec;
use bnrobust::data::{gaussian_blobs, BlobSpec, SplitTag};
use bnrobust::nn::{build_linear, build_resnet, Mode, ResNetConfig};
use bnrobust::Error;
use proptest::prelude::*;

#[test]
fn accounting_matches_closed_form_counts() {
    for cfg in [
        ResNetConfig::micro(&[8, 16, 32], 1, 10),
        ResNetConfig::micro(&[4, 4, 8, 16], 3, 7),
        ResNetConfig::resnet20(3, 10),
    ] {
        let model = build_resnet(&cfg, 0).unwrap();
        let acc = param_accounting(&model);
        let (total, bn) = common::resnet_param_oracle(&cfg);
        assert_eq!(acc.total, total, "{cfg:?}");
        assert_eq!(acc.per_selector["bn_params"], bn);
        assert_eq!(acc.per_selector["bn_gamma"] + acc.per_selector["bn_beta"], bn);
        assert_eq!(acc.per_selector["bn_stats"], bn);
        assert!((acc.bn_fraction - 100.0 * bn as f64 / total as f64).abs() < 1e-12);
    }
}

#[test]
fn resnet20_counts() {
    let acc = param_accounting(&build_resnet(&ResNetConfig::resnet20(3, 10), 0).unwrap());
    assert_eq!(acc.total, 269_722);
    assert_eq!(acc.per_selector["bn_params"], 1_376);
    assert_eq!(acc.per_selector["conv1"], 432);
    assert_eq!(acc.per_selector["logit"], 650);
}

#[test]
fn normalized_affine_matches_formula() {
    let model = common::gradcheck::micro_model(4);
    for (i, a) in model_affines(&model).iter().enumerate() {
        let l = model.bn_layer(i);
        for c in 0..l.channels() {
            let s = (l.running_var[c] as f64 + common::BN_EPS).sqrt();
            let m = l.gamma[c] as f64 / s;
            let b = l.beta[c] as f64 - l.gamma[c] as f64 * l.running_mean[c] as f64 / s;
            assert!((a.m[c] as f64 - m).abs() < 1e-6 && (a.b[c] as f64 - b).abs() < 1e-6);
        }
    }
}

#[test]
fn mean_shift_is_zero_on_self_and_antisymmetric() {
    let a = common::gradcheck::micro_model(1);
    let b = common::gradcheck::micro_model(2);
    assert_eq!(mean_shift(&a, &a.clone()).unwrap(), 0.0);
    let (ab, ba) = (mean_shift(&a, &b).unwrap(), mean_shift(&b, &a).unwrap());
    assert!((ab + ba).abs() < 1e-12);
    let layers = per_layer_mean_m(&a).unwrap();
    let lb = per_layer_mean_m(&b).unwrap();
    let want = layers.iter().zip(&lb).map(|(x, y)| x.mean_m - y.mean_m).sum::<f64>() / layers.len() as f64;
    assert!((ab - want).abs() < 1e-12);
}

#[test]
fn shrinking_gamma_gives_negative_shift() {
    let base = common::gradcheck::micro_model(1);
    let mut tuned = base.clone();
    for a in tuned.arrays_mut().iter_mut().filter(|a| a.name.ends_with(".gamma")) {
        a.tensor.data_mut().iter_mut().for_each(|v| *v *= 0.8);
    }
    assert!(mean_shift(&tuned, &base).unwrap() < 0.0);
}

#[test]
fn mean_shift_rejects_topology_mismatch() {
    let a = build_resnet(&ResNetConfig::micro(&[2, 4], 1, 3), 0).unwrap();
    let b = build_resnet(&ResNetConfig::micro(&[2, 4, 4], 1, 3), 0).unwrap();
    assert!(matches!(mean_shift(&a, &b), Err(Error::ArchitectureMismatch(_))));
    let lin = build_linear([1, 2, 2], 2, 0).unwrap();
    assert!(matches!(per_layer_mean_m(&lin), Err(Error::NoBatchNorm)));
}

#[test]
fn histograms_cover_every_layer_and_example() {
    let mut model = build_resnet(&ResNetConfig::micro(&[2, 4, 4], 1, 2), 0).unwrap();
    model.set_mode(Mode::Eval);
    let spec = BlobSpec {
        num_classes: 2,
        shape: [1, 8, 8],
        separation: 0.3,
        noise_std: 0.1,
        center_seed: 1,
    };
    let split = gaussian_blobs(&spec, 20, 3, SplitTag::Test).unwrap();
    let attack = AttackSpec::pgd(0.1, 3);
    let hs = extract_histograms(
        &model,
        "m",
        Some(&split),
        40,
        Some(&attack),
        &[HistSource::BnGamma, HistSource::BnM, HistSource::Logits, HistSource::Confidence],
        16,
    )
    .unwrap();
    let layers = model.num_bn_layers();
    assert_eq!(hs.len(), 2 * layers + 2 * 2);
    for h in &hs {
        assert_eq!(h.counts.len(), HISTOGRAM_BINS);
        assert_eq!(h.bin_edges.len(), HISTOGRAM_BINS + 1);
        assert!(h.bin_edges.windows(2).all(|w| w[0] < w[1]));
    }
    for h in hs.iter().filter(|h| h.layer_id.is_none()) {
        assert_eq!(h.counts.iter().sum::<u64>(), 40);
    }
}

proptest! {
    #[test]
    fn histogram_conserves_counts(values in prop::collection::vec(-1e3f32..1e3, 1..200), bins in 1usize..70) {
        let (edges, counts) = histogram(&values, bins);
        prop_assert_eq!(counts.iter().sum::<u64>(), values.len() as u64);
        prop_assert_eq!(edges.len(), bins + 1);
        for &v in &values {
            prop_assert!(edges[0] <= v as f64 && v as f64 <= edges[bins]);
        }
    }
}
