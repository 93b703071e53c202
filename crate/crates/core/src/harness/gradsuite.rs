use serde::{Deserialize, Serialize};

use crate::ad::{gradcheck_at, FnRecipe, Graph, GradcheckReport, Var};
use crate::error::Result;
use crate::estimators::{epe_loss, Estimator, EstimatorInput, OtEstimator, TinyEstimator, TinyNetWeights};
use crate::pointcloud::ScenePair;
use crate::seed::derive_seed;
use crate::synthgen::{make_entry, MotionSampler, Range};

pub const SUITE_POINTS: usize = 8;
const SUITE_NOISE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub estimator: String,
    pub pair: usize,
    /// Checked leaves: pc1 positions and colors.
    pub report: GradcheckReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSuite {
    pub seed: u64,
    pub entries: Vec<GradcheckEntry>,
    pub pass: bool,
}

/// Finite-difference check of the EPE loss with respect to pc1 positions
/// and colors.
pub fn check_estimator(est: &dyn Estimator, pair: &ScenePair) -> Result<GradcheckReport> {
    let gt = pair.require_gt()?.to_tensor();
    let recipe = FnRecipe {
        leaves: |_| Ok(vec![]),
        build: |g: &mut Graph, l: &[Var]| {
            let input = EstimatorInput {
                pos1: l[0],
                col1: l.get(1).copied(),
                pair,
            };
            let flow = est.flow_graph(g, &input)?;
            let t = g.constant(gt.clone());
            epe_loss(g, flow, t)
        },
    };
    let mut leaves = vec![pair.pc1.positions_tensor()];
    leaves.extend(pair.pc1.colors_tensor());
    gradcheck_at(&recipe, &leaves)
}

/// Checks both estimators on `pairs` seeded 8-point colored rigid pairs.
///
/// `pc2` carries measurement noise: on noise-free pairs the OT flow can match
/// the ground truth to round-off, which puts the EPE exactly on the kink of
/// the norm where no finite difference agrees with any subgradient.
pub fn gradcheck_suite(seed: u64, pairs: usize) -> Result<GradcheckSuite> {
    let sampler = MotionSampler {
        noise_sigma: Range::fixed(SUITE_NOISE),
        ..MotionSampler::rigid(SUITE_POINTS, true)
    };
    let mut entries = Vec::new();
    for i in 0..pairs {
        let pair = make_entry(i, &sampler, seed)?.pair;
        let tiny_seed = derive_seed(seed, &[b"tiny", &(i as u64).to_le_bytes()]);
        let ests: [Box<dyn Estimator>; 2] = [
            Box::new(OtEstimator::default()),
            Box::new(TinyEstimator::new(TinyNetWeights::init(6, tiny_seed)?)),
        ];
        for est in &ests {
            entries.push(GradcheckEntry {
                estimator: est.tag().to_string(),
                pair: i,
                report: check_estimator(est.as_ref(), &pair)?,
            });
        }
    }
    let pass = entries.iter().all(|e| e.report.pass);
    Ok(GradcheckSuite { seed, entries, pass })
}
