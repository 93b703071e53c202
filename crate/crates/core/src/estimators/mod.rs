//! Differentiable scene-flow estimators and the end-point-error loss.
//!
//! An [`Estimator`] maps a scene pair to one flow vector per `pc1` point and
//! records its computation on a [`Graph`], so the loss can be
//! differentiated with respect to the first frame's positions and colors.

mod fixtures;
mod ot;
mod tiny;
mod train;

use crate::ad::{Graph, Tensor, Var};
use crate::error::{dim_err, Result};
use crate::pointcloud::{FlowField, ScenePair};

pub use fixtures::NegatedPositions;
pub use ot::{median_normalize, sinkhorn, sinkhorn_plan, OtConfig, OtEstimator};
pub use tiny::{
    knn_indices, load_weights, save_weights, TinyEstimator, TinyNetWeights, HIDDEN,
    SFTN_MAGIC,
};
pub use train::{train_tiny, TrainOutcome};

/// Graph handles for the (possibly perturbed) first frame.
pub struct EstimatorInput<'a> {
    /// `N x 3` positions of `pc1`.
    pub pos1: Var,
    /// `N x 3` colors of `pc1`, when the pair has colors.
    pub col1: Option<Var>,
    /// Supplies `pc2`; its `pc1` fixes only the point count.
    pub pair: &'a ScenePair,
}

pub trait Estimator: Send + Sync {
    /// Short name used in reports, e.g. `ot`.
    fn tag(&self) -> &'static str;

    /// Stable digest of the configuration or weights.
    fn digest(&self) -> String;

    /// Records the forward pass and returns the `N x 3` flow node.
    fn flow_graph(&self, g: &mut Graph, input: &EstimatorInput<'_>) -> Result<Var>;

    /// `tag:digest`, the estimator label written to reports.
    fn label(&self) -> String {
        format!("{}:{}", self.tag(), self.digest())
    }

    fn estimate(&self, pair: &ScenePair) -> Result<FlowField> {
        let mut g = Graph::new();
        let input = constant_input(&mut g, pair);
        let flow = self.flow_graph(&mut g, &input)?;
        FlowField::from_tensor(g.value(flow))
    }
}

/// Registers `pc1` as constants (no gradient needed).
pub fn constant_input<'a>(g: &mut Graph, pair: &'a ScenePair) -> EstimatorInput<'a> {
    let pos1 = g.constant(pair.pc1.positions_tensor());
    let col1 = pair.pc1.colors_tensor().map(|c| g.constant(c));
    EstimatorInput { pos1, col1, pair }
}

/// Mean over rows of the Euclidean distance between `pred` and `gt`.
pub fn epe_loss(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    let (p, t) = (g.value(pred), g.value(gt));
    if p.shape() != t.shape() {
        return Err(dim_err(format!(
            "epe_loss: prediction {:?} vs ground truth {:?}",
            p.shape(),
            t.shape()
        )));
    }
    let diff = g.sub(pred, gt)?;
    let norms = g.row_norm(diff)?;
    g.mean(norms)
}

/// Plain-value EPE of two flow fields.
pub fn epe(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.to_tensor());
    let t = g.constant(gt.to_tensor());
    let loss = epe_loss(&mut g, p, t)?;
    Ok(g.value(loss).data()[0])
}

/// Mean norm of a flow field: the EPE of predicting zero motion.
pub fn zero_flow_epe(gt: &FlowField) -> Result<f64> {
    epe(&FlowField::zeros(gt.len()), gt)
}

pub(crate) fn ones(rows: usize, cols: usize) -> Tensor {
    Tensor::full(&[rows, cols], 1.0)
}

/// Scales every row of `x` (n x m) by the matching entry of `col` (n x 1).
pub(crate) fn scale_rows(g: &mut Graph, x: Var, col: Var) -> Result<Var> {
    let m = g.value(x).cols();
    let ones_row = g.constant(ones(1, m));
    let expanded = g.matmul(col, ones_row)?;
    g.mul(x, expanded)
}
