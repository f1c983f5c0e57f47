mod support;

use cepstral_guard::dataset::{LabeledFeatureSet, LabeledItem};
use cepstral_guard::audio_io::{Attack, BlockRecord, Condition, Label, Part};
use cepstral_guard::filterbanks::{FeatureKind, FeatureMatrix};
use cepstral_guard::model::{self, train::he_uniform, CnnDetector, Standardizer, NUM_PARAMS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use support::naive_net::{self, Net};

fn random_model(seed: u64) -> CnnDetector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = he_uniform(&mut rng);
    for slot in model::param_slots() {
        for b in &mut p[slot.biases.0..slot.biases.1] {
            *b = rng.gen_range(-0.1..0.1);
        }
    }
    CnnDetector::from_params(p, Standardizer::identity(20)).unwrap()
}

fn random_input(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..620).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

#[test]
fn forward_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for seed in 0..4 {
        let m = random_model(seed);
        let net = Net::new(m.params());
        for _ in 0..3 {
            let x = random_input(&mut rng);
            let fast = m.trace(&x).logit();
            let slow = net.forward(&x, 0).z;
            assert!((fast - slow).abs() <= 1e-10, "{fast} vs {slow}");
        }
    }
}

#[test]
fn sampled_gradients_match_finite_differences() {
    let m = random_model(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xs: Vec<Vec<f64>> = (0..2).map(|_| random_input(&mut rng)).collect();
    let ys = vec![0u8, 1];
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let (_, grad) = m.batch_loss_and_grad(&refs, &ys);
    // every bias plus a random sample of weights from each layer
    let mut idx: Vec<usize> = model::param_slots()
        .iter()
        .flat_map(|s| {
            let w: Vec<usize> = (0..40).map(|_| rng.gen_range(s.weights.0..s.weights.1)).collect();
            w.into_iter().chain(s.biases.0..s.biases.1)
        })
        .collect();
    idx.sort_unstable();
    idx.dedup();
    let check = naive_net::numeric_gradient(m.params(), &xs, &ys, 1e-5, &idx);
    for (k, &i) in idx.iter().enumerate() {
        let e = naive_net::rel_err(grad[i], check.numeric[k], 1e-6);
        assert!(e < 1e-4, "param {i}: analytic {} numeric {} rel {e}", grad[i], check.numeric[k]);
    }
}

#[test]
fn saturated_batch_has_no_learning_signal() {
    // Inputs all zero: the logit is the output bias path, which is pushed far past the clamp.
    let mut m = random_model(3);
    let last = NUM_PARAMS - 1;
    let x = vec![0.0; 620];
    let z0 = m.trace(&x).logit();
    m.params_mut()[last] += 40.0 - z0;
    let (loss, grad) = m.batch_loss_and_grad(&[&x, &x], &[1, 1]);
    assert!(loss < 2e-7);
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    assert!(norm < 1e-5);
}

#[test]
fn dead_channel_gets_zero_gradient() {
    // Conv3 channel 0 is negative everywhere, so nothing flows back into its weights.
    let mut m = random_model(4);
    let slots = model::param_slots();
    let conv3 = slots[2];
    m.params_mut()[conv3.biases.0] = -1e6;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_input(&mut rng);
    let (_, grad) = m.batch_loss_and_grad(&[&x], &[1]);
    let per_out = (conv3.weights.1 - conv3.weights.0) / 32;
    assert!(grad[conv3.weights.0..conv3.weights.0 + per_out].iter().all(|&g| g == 0.0));
    assert_eq!(grad[conv3.biases.0], 0.0);
    assert!(grad[conv3.weights.0 + per_out..conv3.weights.1].iter().any(|&g| g != 0.0));
}

fn item(values: Vec<f64>, label: u8, i: usize) -> LabeledItem {
    LabeledItem {
        features: FeatureMatrix::new(values, 31, 20, FeatureKind::Mfcc).unwrap(),
        label,
        record: BlockRecord::new(
            &format!("u{i}"),
            0,
            if label == 1 { Label::Adversarial } else { Label::Benign },
            &Condition::clean(Attack::Black, Part::Full),
        ),
    }
}

#[test]
fn predict_scores_contract() {
    let m = random_model(1);
    assert!(model::predict_scores(&m, &LabeledFeatureSet::default()).unwrap().is_empty());

    // near-zero weights give near-half scores
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let small: Vec<f64> = (0..NUM_PARAMS).map(|_| rng.gen_range(-1e-4..1e-4)).collect();
    let tiny = CnnDetector::from_params(small, Standardizer::identity(20)).unwrap();
    let set = LabeledFeatureSet::new((0..200).map(|i| item(random_input(&mut rng), (i % 2) as u8, i)).collect());
    let a = model::predict_scores(&tiny, &set).unwrap();
    let b = model::predict_scores(&tiny, &set).unwrap();
    assert_eq!(a, b);
    let mean = a.iter().map(|(s, _)| s).sum::<f64>() / a.len() as f64;
    assert!((mean - 0.5).abs() <= 0.05);
    assert!(a.iter().zip(&set.items).all(|((_, l), it)| *l == it.label));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_is_a_probability(seed in 0u64..1000, scale in 0.01f64..50.0) {
        let m = random_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        let x: Vec<f64> = random_input(&mut rng).into_iter().map(|v| v * scale).collect();
        let f = FeatureMatrix::new(x, 31, 20, FeatureKind::Gfcc).unwrap();
        let p = m.forward(&f).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(p.is_finite());
    }
}
