use densemtl_core::tensor::softmax;
use densemtl_core::uda::{
    adversarial_loss, two_player_smoke, weighted_self_information, Discriminator, DiscriminatorSpec, UdaConfig,
};
use densemtl_core::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn wsi(t: Tensor) -> Tensor {
    let mut g = Graph::new(false);
    let p = g.constant(t);
    let q = weighted_self_information(&mut g, p);
    g.value(q).clone()
}

#[test]
fn one_hot_gives_zero_map() {
    let q = wsi(Tensor::new(vec![1, 3, 1, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
    assert!(q.data().iter().all(|&v| v == 0.0));
}

#[test]
fn uniform_gives_ln_k_over_k() {
    for k in [2usize, 3, 7, 19] {
        let q = wsi(Tensor::full(vec![1, k, 2, 2], 1.0 / k as f64));
        let expect = (k as f64).ln() / k as f64;
        assert!(q.data().iter().all(|&v| (v - expect).abs() <= 1e-9));
    }
    let q = wsi(Tensor::full(vec![1, 2, 1, 1], 0.5));
    assert!((q.data()[0] - 0.34657).abs() < 1e-5);
}

proptest! {
    #[test]
    fn bounded_by_inverse_e_and_zero_only_for_one_hot(logits in prop::collection::vec(-30.0f64..30.0, 4 * 6)) {
        let p = softmax(&Tensor::new(vec![1, 4, 2, 3], logits).unwrap(), 1).unwrap();
        let q = wsi(p.clone());
        for (&pv, &qv) in p.data().iter().zip(q.data()) {
            prop_assert!((0.0..=1.0 / std::f64::consts::E + 1e-15).contains(&qv));
            if pv > 1e-9 && pv < 1.0 - 1e-9 {
                prop_assert!(qv > 0.0);
            }
        }
    }
}

#[test]
fn adversarial_step_fools_a_frozen_discriminator() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let spec = DiscriminatorSpec { stages: 0, width: 1, leaky_slope: 0.2 };
    let d = Discriminator::new(&mut store, "d", 1, &spec, &mut rng).unwrap();
    let eval = |q: f64| {
        let mut g = Graph::new(true);
        let x = g.leaf(Tensor::new(vec![1, 1, 1, 1], vec![q]).unwrap());
        let z = d.forward(&mut g, &store, x).unwrap();
        let l = adversarial_loss(&mut g, z);
        let grad = g.backward(l).unwrap().get(x).unwrap().item();
        (g.value(l).item(), grad)
    };
    let q = 0.3;
    let (before, grad) = eval(q);
    assert!(grad != 0.0);
    let (after, _) = eval(q - 0.1 * grad);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn config_validation() {
    assert!(UdaConfig::default().validate().is_ok());
    assert_eq!(UdaConfig::default().lambda_adv, 5e-3);
    assert!(UdaConfig { lambda_adv: -1.0, ..Default::default() }.validate().is_err());
}

#[test]
fn two_player_game_separates_then_confuses() {
    let trace = two_player_smoke(0, 200, 500).unwrap();
    let below = trace.warmup_below(0.3);
    assert!(below.is_some(), "warm-up ended at {:?}", trace.warmup.last());
    let above = trace.adversarial_above(0.5);
    assert!(above.is_some(), "adversarial phase peaked at {:?}", trace.adversarial.iter().cloned().fold(f64::MIN, f64::max));
}
