//! Plain minibatch gradient descent for the tiny network.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::epe_loss;
use super::tiny::{features, knn_indices, pair_features, tiny_flow, TinyNetWeights, WeightVars};
use crate::ad::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::pointcloud::ScenePair;
use crate::seed::derive_seed;

pub const BATCH_SIZE: usize = 4;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: TinyNetWeights,
    /// Mean minibatch loss of each epoch, measured before that batch's step.
    pub loss_trace: Vec<f64>,
}

/// Loss and weight gradients for one pair.
fn pair_gradient(w: &TinyNetWeights, pair: &ScenePair) -> Result<(f64, Vec<Tensor>)> {
    let gt = pair.require_gt()?;
    let mut g = Graph::new();
    let pos1 = g.constant(pair.pc1.positions_tensor());
    let col1 = pair.pc1.colors_tensor().map(|c| g.constant(c));
    let feat1 = features(&mut g, pos1, col1)?;
    let feat2 = pair_features(&mut g, pair)?;
    let neighbors = knn_indices(
        &pair.pc1.positions_tensor(),
        &pair.pc2.positions_tensor(),
        w.k_neighbors,
    );
    let vars = WeightVars::leaves(&mut g, w);
    let flow = tiny_flow(&mut g, &vars, feat1, feat2, &neighbors)?;
    let t = g.constant(gt.to_tensor());
    let loss = epe_loss(&mut g, flow, t)?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss)?;
    let out = vars.vars().iter().map(|v| grads.take(*v).expect("leaf")).collect();
    Ok((value, out))
}

pub fn train_tiny(dataset: &[ScenePair], epochs: usize, lr: f64, seed: u64) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Validation(format!("learning rate must be positive, got {lr}")));
    }
    let color = dataset[0].has_colors();
    for pair in dataset {
        pair.require_gt()?;
        if pair.has_colors() != color {
            return Err(Error::Validation(
                "training pairs mix colored and colorless scenes".into(),
            ));
        }
    }
    let in_dim = if color { 6 } else { 3 };
    let mut weights = TinyNetWeights::zero_head(in_dim, derive_seed(seed, &[b"init"]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"shuffle"]));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_trace = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(BATCH_SIZE) {
            // Per-pair results are collected in batch order, so the
            // reduction below does not depend on thread scheduling.
            let results: Vec<(f64, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| pair_gradient(&weights, &dataset[i]))
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::Domain(m) | Error::Numeric(m) => Error::Training(format!(
                        "epoch {epoch}, batch {batches}: {m}"
                    )),
                    other => other,
                })?;
            let scale = 1.0 / batch.len() as f64;
            let loss: f64 = results.iter().map(|r| r.0).sum::<f64>() * scale;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} in epoch {epoch}, batch {batches}"
                )));
            }
            epoch_loss += loss;
            batches += 1;
            for (k, layer) in weights.layers_mut().into_iter().enumerate() {
                let data = layer.data_mut();
                for (_, grads) in &results {
                    for (w, g) in data.iter_mut().zip(grads[k].data()) {
                        *w -= lr * scale * g;
                    }
                }
            }
        }
        loss_trace.push(epoch_loss / batches as f64);
    }
    Ok(TrainOutcome {
        weights,
        loss_trace,
    })
}
