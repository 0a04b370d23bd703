//! End-to-end gradient verification: analytic gradients of the joint loss
//! against central finite differences, over every parameter tensor of a
//! small randomly-driven model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::diffcore::{finite_difference, max_relative_error, Tensor};
use crate::losses::{batch_alpha, classification_loss, detection_loss, joint_loss};
use crate::model::{init_params, model_forward, ModelConfig, ModelParams};
use crate::trainer::TrainError;

/// Worst relative error per tensor, plus the overall maximum.
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_tensor: Vec<(String, f64)>,
}

/// Fixed 3-node adjacency used by the check: a path graph with self-loops.
fn tiny_adjacency() -> Vec<f64> {
    vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0]
}

fn joint_loss_value(
    flows: &[Tensor],
    adjacency: &[f64],
    params: &ModelParams,
    config: &ModelConfig,
    au_labels: &[Vec<u8>],
    class_labels: &[usize],
    alphas: &[f64],
    lambda: f64,
) -> f64 {
    let output = model_forward(flows, adjacency, params, config).expect("forward conforms");
    let detection =
        detection_loss(&output.au_probs, au_labels, alphas).expect("loss shapes conform");
    let classification =
        classification_loss(&output.logits, class_labels).expect("loss shapes conform");
    let (total, _) = joint_loss(&classification, &detection, alphas, lambda);
    total.item()
}

/// Check every parameter tensor of the tiny configuration (8x8 input,
/// d = 16, K = 3, d1 = 8, d2 = 4, C = 5) on an M = 2 batch driven by `seed`.
pub fn end_to_end_gradcheck(seed: u64, h: f64) -> Result<GradCheckReport, TrainError> {
    let config = ModelConfig::tiny();
    let params = init_params(&config, seed)?;
    let adjacency = tiny_adjacency();

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(0xF1D0);
    let batch = 2usize;
    let flows: Vec<Tensor> = (0..batch)
        .map(|_| {
            let data: Vec<f64> = (0..2 * config.input_height * config.input_width)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            Tensor::constant(&[2, config.input_height, config.input_width], data)
        })
        .collect();
    let au_labels: Vec<Vec<u8>> = (0..batch)
        .map(|_| (0..config.au_count).map(|_| rng.gen_range(0..2u8)).collect())
        .collect();
    let class_labels: Vec<usize> = (0..batch)
        .map(|_| rng.gen_range(0..config.num_classes))
        .collect();
    let alphas = batch_alpha(&au_labels)?;
    let lambda = 0.75;

    // Analytic gradients in one backward pass.
    params.zero_grads();
    let output = model_forward(&flows, &adjacency, &params, &config)?;
    let detection = detection_loss(&output.au_probs, &au_labels, &alphas)?;
    let classification = classification_loss(&output.logits, &class_labels)?;
    let (total, _) = joint_loss(&classification, &detection, &alphas, lambda);
    total.backward()?;

    let mut per_tensor = Vec::new();
    let mut max_err = 0.0f64;
    for (name, tensor) in params.all() {
        let analytic = tensor.grad().unwrap_or_else(|| vec![0.0; tensor.numel()]);
        let fd = finite_difference(tensor, h, || {
            joint_loss_value(
                &flows,
                &adjacency,
                &params,
                &config,
                &au_labels,
                &class_labels,
                &alphas,
                lambda,
            )
        })
        .map_err(TrainError::Diff)?;
        let err = max_relative_error(&analytic, &fd);
        max_err = max_err.max(err);
        per_tensor.push((name.to_string(), err));
    }
    Ok(GradCheckReport {
        max_rel_error: max_err,
        per_tensor,
    })
}
