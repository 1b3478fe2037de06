mod common;

use proptest::prelude::*;
use supforge::analysis::*;
use supforge::attack::PerturbationPair;
use supforge::scene::{generate_dataset, SceneConfig};
use supforge::{StereoNet, StereoNetConfig};
use supforge_tensor::Tensor;

#[test]
fn zero_perturbation_gives_unit_traces() {
    let net = StereoNet::init(&common::small_net_config(2)).unwrap();
    let data = common::small_samples(3, 5);
    let (l, r) = layer_correlation(&net, &data, &PerturbationPair::zeros(0.01, 16, 16)).unwrap();
    assert_eq!(l.len(), net.config.encoder_layers);
    for v in l.iter().chain(&r) {
        assert!((v - 1.0).abs() < 1e-12);
    }
}

#[test]
fn clean_registration_is_tight_at_the_first_layer() {
    let net = StereoNet::init(&StereoNetConfig {
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let data = generate_dataset(&SceneConfig::default(), 4, 70).unwrap();
    let (clean, perturbed) = registered_correlation(&net, &data, &PerturbationPair::zeros(0.01, 32, 32)).unwrap();
    assert_eq!(clean, perturbed);
    assert!(clean[0] > 0.9, "{clean:?}");
    assert!(clean.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
}

#[test]
fn registration_skips_occluded_pixels() {
    let s = &generate_dataset(&SceneConfig::default(), 1, 3).unwrap()[0];
    let (a, b, n) = registered_pairs(&s.left, &s.right, s).unwrap();
    let visible = s.visible.iter().filter(|v| **v).count();
    assert_eq!(n, visible);
    assert_eq!(a, b);
}

#[test]
fn histogram_bins_sum_to_one() {
    let maps: Vec<Tensor> = (0..5)
        .map(|k| Tensor::from_fn(&[8, 8], |i| ((i * 7 + k) % 30) as f64))
        .collect();
    let h = disparity_histogram(&maps, 12, 0.0, 24.0).unwrap();
    assert!((h.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn csv_and_dat_layouts() {
    let h = disparity_histogram(&[Tensor::full(&[2, 2], 1.0)], 2, 0.0, 4.0).unwrap();
    assert_eq!(
        histogram_csv(&[("clean", &h)]),
        "series,bin_lo,bin_hi,fraction\nclean,0,2,1\nclean,2,4,0\n"
    );
    assert_eq!(histogram_dat(&[("clean", &h)]), "# center clean\n1 1\n3 0\n");
    let t = vec![1.0, 0.5];
    assert_eq!(trace_csv(&[("c", &t)]), "series,layer,correlation\nc,0,1\nc,1,0.5\n");
    assert_eq!(trace_dat(&[("c", &t)]), "# layer c\n0 1\n1 0.5\n");
}

proptest! {
    #[test]
    fn pearson_is_symmetric_and_scale_invariant(
        a in prop::collection::vec(-5.0f64..5.0, 3..40),
        b in prop::collection::vec(-5.0f64..5.0, 40),
        k in 0.01f64..100.0,
    ) {
        let b = &b[..a.len()];
        let (Ok(ab), Ok(ba)) = (pearson_slices(&a, b), pearson_slices(b, &a)) else { return Ok(()) };
        prop_assert!((ab - ba).abs() < 1e-12);
        let scaled: Vec<f64> = b.iter().map(|x| k * x).collect();
        prop_assert!((pearson_slices(&a, &scaled).unwrap() - ab).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }
}
