mod common;

use fedle_core::nn::{self, Batch, Matrix};
use proptest::prelude::*;

fn random_batch(dims: &[usize], n: usize, values: &[f64], labels: &[usize]) -> Batch {
    let inputs = Matrix::from_vec(n, dims[0], values[..n * dims[0]].to_vec()).unwrap();
    let classes = *dims.last().unwrap();
    Batch::new(inputs, labels[..n].iter().map(|l| l % classes).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn backprop_matches_central_differences(
        dims in prop::collection::vec(2usize..=4, 2..=4),
        seed in 0u64..1000,
        n in 1usize..=5,
        values in prop::collection::vec(-1.0f64..1.0, 20),
        labels in prop::collection::vec(0usize..4, 5),
    ) {
        let model = nn::init_model(&dims, seed).unwrap();
        prop_assume!(model.param_count() <= 50);
        let batch = random_batch(&dims, n, &values, &labels);
        prop_assume!(common::relu_margin(&model, &batch) > 1e-4);
        let (loss, grads) = nn::loss_and_grad(&model, &batch).unwrap();
        prop_assert!((loss - common::direct_loss(&model, &batch)).abs() < 1e-12);
        let numeric = common::numeric_grad(&model, &batch, 1e-5);
        let err = common::max_relative_error(&grads.flatten(), &numeric, 1e-7);
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn sgd_step_descends_for_small_rates(seed in 0u64..500, values in prop::collection::vec(-1.0f64..1.0, 24)) {
        let dims = [3, 5, 3];
        let model = nn::init_model(&dims, seed).unwrap();
        let batch = random_batch(&dims, 6, &values, &[0, 1, 2, 0, 1, 2]);
        let (before, grads) = nn::loss_and_grad(&model, &batch).unwrap();
        let stepped = nn::sgd_step(&model, &grads, 1e-3).unwrap();
        let (after, _) = nn::loss_and_grad(&stepped, &batch).unwrap();
        prop_assert!(after <= before + 1e-12);
    }
}

#[test]
fn uniform_logits_give_log_class_count() {
    let model = fedle_core::ModelParams::zeros(&[4, 3, 5]).unwrap();
    let batch = random_batch(&[4, 3, 5], 3, &[0.3; 12], &[0, 2, 4]);
    let (loss, _) = nn::loss_and_grad(&model, &batch).unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-12);
}
