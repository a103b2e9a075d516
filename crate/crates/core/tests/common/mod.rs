use prac_core::projector::SharedSubspaceCache;
use prac_core::train::{
    loss_and_grad, ActivationStore, CompressionPolicy, ForwardContext, Model, Targets,
};
use prac_core::Matrix;

/// Backward-pass gradients with activations stored under `policy`.
pub fn gradients(
    model: &Model,
    x: &Matrix,
    targets: &Targets,
    policy: &CompressionPolicy,
) -> Vec<Matrix> {
    let mut cache = SharedSubspaceCache::new();
    let mut store = ActivationStore::new();
    store.begin_step(0);
    let pred = {
        let mut ctx = ForwardContext {
            policy,
            cache: &mut cache,
            store: &mut store,
        };
        model.forward_store(x, &mut ctx).unwrap()
    };
    let (_, g) = loss_and_grad(&pred, targets).unwrap();
    model.backward(&g, &store, 0).unwrap()
}

fn loss(model: &Model, x: &Matrix, targets: &Targets) -> f64 {
    loss_and_grad(&model.forward(x).unwrap(), targets)
        .unwrap()
        .0
}

/// Largest per-tensor relative error `||analytic - numeric|| / ||analytic||`
/// of the uncompressed backward pass against central differences.
pub fn finite_difference_error(model: &Model, x: &Matrix, targets: &Targets) -> f64 {
    let analytic = gradients(model, x, targets, &CompressionPolicy::uncompressed());
    assert_eq!(analytic.len(), model.params().len());
    let perturbed = |p: usize, j: usize, value: f64| {
        let mut m = model.clone();
        m.params_mut()[p].as_mut_slice()[j] = value;
        loss(&m, x, targets)
    };
    let mut worst = 0.0_f64;
    for (p, exact) in analytic.iter().enumerate() {
        let numeric: Vec<f64> = (0..exact.len())
            .map(|j| {
                let base = model.params()[p].as_slice()[j];
                let h = 1e-3 * base.abs().max(0.1);
                // Fourth-order stencil keeps truncation well under 1e-7.
                (8.0 * (perturbed(p, j, base + h) - perturbed(p, j, base - h))
                    - (perturbed(p, j, base + 2.0 * h) - perturbed(p, j, base - 2.0 * h)))
                    / (12.0 * h)
            })
            .collect();
        let a = exact.as_slice();
        let diff = a
            .iter()
            .zip(&numeric)
            .map(|(u, v)| (u - v).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = a.iter().map(|u| u * u).sum::<f64>().sqrt();
        worst = worst.max(diff / scale);
    }
    worst
}
