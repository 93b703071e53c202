//! Estimators with closed-form behavior, used as test fixtures.

use super::{Estimator, EstimatorInput};
use crate::ad::{Graph, Var};
use crate::error::Result;

/// Predicts `flow_i = -pos1_i`, ignoring `pc2` and colors.
///
/// With a zero ground truth the EPE is the mean point norm, whose gradient
/// is `p / |p| / N` per point.
#[derive(Debug, Clone, Copy, Default)]
pub struct NegatedPositions;

impl Estimator for NegatedPositions {
    fn tag(&self) -> &'static str {
        "neg"
    }

    fn digest(&self) -> String {
        "00000000".into()
    }

    fn flow_graph(&self, g: &mut Graph, input: &EstimatorInput<'_>) -> Result<Var> {
        Ok(g.neg(input.pos1))
    }
}
