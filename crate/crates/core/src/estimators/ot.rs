//! Entropic optimal-transport matcher.
//!
//! The cost between `pc1` and `pc2` is turned into a transport plan by
//! unrolled Sinkhorn iterations; each `pc1` point then moves to the
//! plan-weighted mean of `pc2`.

use serde::{Deserialize, Serialize};

use super::{ones, scale_rows, Estimator, EstimatorInput};
use crate::ad::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed::short_digest;

/// Medians at or below this are treated as zero and skip normalization.
const MEDIAN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtConfig {
    /// Entropic regularization applied to the median-normalized cost.
    pub reg: f64,
    pub sinkhorn_iters: usize,
    /// Weight of the squared color distance in the cost (ignored without colors).
    pub color_weight: f64,
}

impl Default for OtConfig {
    fn default() -> Self {
        OtConfig {
            reg: 0.05,
            sinkhorn_iters: 30,
            color_weight: 1.0,
        }
    }
}

impl OtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reg > 0.0 && self.reg.is_finite()) {
            return Err(Error::Validation(format!("reg must be positive, got {}", self.reg)));
        }
        if self.sinkhorn_iters == 0 {
            return Err(Error::Validation("sinkhorn_iters must be at least 1".into()));
        }
        if !(self.color_weight >= 0.0 && self.color_weight.is_finite()) {
            return Err(Error::Validation("color_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Divides `x` by the median of its entries.
///
/// The median is selected on the forward values and expressed as a weighted
/// sum of the selected entries, so gradients flow through it.
pub fn median_normalize(g: &mut Graph, x: Var) -> Result<Var> {
    let t = g.value(x);
    let n = t.numel();
    if n == 0 {
        return Ok(x);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| t.data()[a].total_cmp(&t.data()[b]).then(a.cmp(&b)));
    let mut weights = Tensor::zeros(t.shape());
    if n % 2 == 1 {
        weights.data_mut()[order[n / 2]] = 1.0;
    } else {
        weights.data_mut()[order[n / 2 - 1]] += 0.5;
        weights.data_mut()[order[n / 2]] += 0.5;
    }
    let median: f64 = weights.data().iter().zip(t.data()).map(|(w, v)| w * v).sum();
    if !(median > MEDIAN_FLOOR) {
        return Ok(x);
    }
    let w = g.constant(weights);
    let picked = g.mul(x, w)?;
    let m = g.sum(picked);
    let inv = g.recip(m)?;
    g.mul(x, inv)
}

fn check_positive(t: &Tensor, what: &str) -> Result<()> {
    match t.data().iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        Some(v) => Err(Error::Numeric(format!("{what} degenerated to {v}"))),
        None => Ok(()),
    }
}

/// Row-stochastic entropic transport plan for an `N x M` cost.
///
/// The cost is median-normalized and `K = exp(-cost / reg)`. Each of the
/// `iters` rounds rescales rows to sum to `1/N`, then columns to `1/M`;
/// finally rows are rescaled to sum to one.
pub fn sinkhorn(g: &mut Graph, cost: Var, reg: f64, iters: usize) -> Result<Var> {
    if !(reg > 0.0) {
        return Err(Error::Validation(format!("reg must be positive, got {reg}")));
    }
    let c = g.value(cost);
    if !c.is_matrix() {
        return Err(Error::Dimension(format!("cost must be 2-D, got {:?}", c.shape())));
    }
    if !c.all_finite() {
        return Err(Error::Numeric("cost has non-finite entries".into()));
    }
    let (n, m) = (c.rows(), c.cols());
    let cost = median_normalize(g, cost)?;

    // Shifting each row by its minimum rescales rows of K, which the first
    // row normalization cancels exactly; it keeps every row's largest entry at 1.
    let c = g.value(cost);
    let mut shift = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let lo = c.row(i).iter().copied().fold(f64::INFINITY, f64::min);
        shift.data_mut()[i * m..(i + 1) * m].fill(lo);
    }
    let shift = g.constant(shift);
    let shifted = g.sub(cost, shift)?;
    let logits = g.scale(shifted, -1.0 / reg);
    let mut plan = g.exp(logits);

    let ones_n = g.constant(ones(1, n));
    for _ in 0..iters {
        let r = g.row_sum(plan)?;
        check_positive(g.value(r), "row sum")?;
        let r = g.scale(r, n as f64);
        let inv = g.recip(r)?;
        plan = scale_rows(g, plan, inv)?;

        let col = g.matmul(ones_n, plan)?;
        check_positive(g.value(col), "column sum")?;
        let col = g.scale(col, m as f64);
        let inv = g.recip(col)?;
        plan = g.mul(plan, inv)?;
    }
    let r = g.row_sum(plan)?;
    check_positive(g.value(r), "row sum")?;
    let inv = g.recip(r)?;
    scale_rows(g, plan, inv)
}

/// [`sinkhorn`] on plain values.
pub fn sinkhorn_plan(cost: &Tensor, reg: f64, iters: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let c = g.constant(cost.clone());
    let p = sinkhorn(&mut g, c, reg, iters)?;
    Ok(g.value(p).clone())
}

#[derive(Debug, Clone, Default)]
pub struct OtEstimator {
    pub cfg: OtConfig,
}

impl OtEstimator {
    pub fn new(cfg: OtConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(OtEstimator { cfg })
    }
}

impl Estimator for OtEstimator {
    fn tag(&self) -> &'static str {
        "ot"
    }

    fn digest(&self) -> String {
        short_digest(serde_json::to_string(&self.cfg).unwrap_or_default().as_bytes())
    }

    fn flow_graph(&self, g: &mut Graph, input: &EstimatorInput<'_>) -> Result<Var> {
        let pc2 = &input.pair.pc2;
        let pos2 = g.constant(pc2.positions_tensor());
        let d = g.pairwise_sqdist(input.pos1, pos2)?;
        let mut cost = median_normalize(g, d)?;
        if self.cfg.color_weight > 0.0 {
            if let (Some(col1), Some(col2)) = (input.col1, pc2.colors_tensor()) {
                let col2 = g.constant(col2);
                let dc = g.pairwise_sqdist(col1, col2)?;
                let dc = g.scale(dc, self.cfg.color_weight);
                cost = g.add(cost, dc)?;
            }
        }
        let plan = sinkhorn(g, cost, self.cfg.reg, self.cfg.sinkhorn_iters)?;
        let target = g.matmul(plan, pos2)?;
        g.sub(target, input.pos1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{PointCloud, ScenePair};

    /// Sinkhorn on plain values with an explicit division, independent of the
    /// graph route.
    fn direct_sinkhorn(cost: &[Vec<f64>], reg: f64, iters: usize) -> Vec<Vec<f64>> {
        let n = cost.len();
        let m = cost[0].len();
        let mut all: Vec<f64> = cost.iter().flatten().copied().collect();
        all.sort_by(f64::total_cmp);
        let med = if all.len() % 2 == 1 {
            all[all.len() / 2]
        } else {
            0.5 * (all[all.len() / 2 - 1] + all[all.len() / 2])
        };
        let mut p: Vec<Vec<f64>> = cost
            .iter()
            .map(|r| r.iter().map(|c| (-(c / med) / reg).exp()).collect())
            .collect();
        for _ in 0..iters {
            for row in p.iter_mut() {
                let s: f64 = row.iter().sum::<f64>() * n as f64;
                row.iter_mut().for_each(|v| *v /= s);
            }
            for j in 0..m {
                let s: f64 = (0..n).map(|i| p[i][j]).sum::<f64>() * m as f64;
                (0..n).for_each(|i| p[i][j] /= s);
            }
        }
        for row in p.iter_mut() {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        p
    }

    #[test]
    fn one_by_one_plan_is_one() {
        for c in [0.0, 3.5, 1e6] {
            let plan = sinkhorn_plan(&Tensor::matrix(1, 1, vec![c]).unwrap(), 0.05, 5).unwrap();
            assert_eq!(plan.data(), &[1.0]);
        }
    }

    #[test]
    fn separated_two_by_two_is_identity() {
        let cost = Tensor::matrix(2, 2, vec![0.0, 10.0, 10.0, 0.0]).unwrap();
        let plan = sinkhorn_plan(&cost, 0.1, 20).unwrap();
        let oracle = direct_sinkhorn(&[vec![0.0, 10.0], vec![10.0, 0.0]], 0.1, 20);
        for (i, row) in oracle.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-6);
                assert!((plan.at(i, j) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn agrees_with_direct_iteration() {
        let cost = vec![
            vec![0.3, 1.2, 2.0, 0.1],
            vec![1.5, 0.2, 0.7, 0.9],
            vec![0.4, 0.4, 0.05, 2.2],
        ];
        let t = Tensor::matrix(3, 4, cost.iter().flatten().copied().collect()).unwrap();
        let plan = sinkhorn_plan(&t, 0.3, 25).unwrap();
        let oracle = direct_sinkhorn(&cost, 0.3, 25);
        for i in 0..3 {
            for j in 0..4 {
                assert!((plan.at(i, j) - oracle[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn underflowing_row_is_numeric_error() {
        // Zero median leaves the cost unscaled, so column 2 underflows to zero.
        let cost = Tensor::matrix(3, 3, vec![0.0, 0.0, 1e9, 0.0, 0.0, 1e9, 0.0, 0.0, 1e9]).unwrap();
        assert!(matches!(sinkhorn_plan(&cost, 0.05, 3), Err(Error::Numeric(_))));
    }

    #[test]
    fn single_point_flow_is_exact() {
        let pair = ScenePair {
            id: String::new(),
            pc1: PointCloud {
                positions: vec![[0.25, -1.0, 3.0]],
                colors: None,
            },
            pc2: PointCloud {
                positions: vec![[1.5, 2.0, -0.75]],
                colors: None,
            },
            gt_flow: None,
        };
        let flow = OtEstimator::default().estimate(&pair).unwrap();
        assert_eq!(flow.vectors, vec![[1.25, 3.0, -3.75]]);
    }

    fn lattice(offset: [f64; 3]) -> Vec<[f64; 3]> {
        let mut out = Vec::new();
        for i in 0..4 {
            for j in 0..2 {
                for k in 0..2 {
                    let p = [i as f64 * 0.5, j as f64 * 0.5, k as f64 * 0.5];
                    out.push(std::array::from_fn(|a| p[a] + offset[a]));
                }
            }
        }
        out
    }

    fn lattice_pair(t: [f64; 3]) -> ScenePair {
        ScenePair {
            id: String::new(),
            pc1: PointCloud::new(lattice([0.0; 3]), None).unwrap(),
            pc2: PointCloud::new(lattice(t), None).unwrap(),
            gt_flow: None,
        }
    }

    #[test]
    fn identical_frames_give_near_zero_flow() {
        let est = OtEstimator::new(OtConfig {
            reg: 0.01,
            ..OtConfig::default()
        })
        .unwrap();
        let flow = est.estimate(&lattice_pair([0.0; 3])).unwrap();
        for v in flow.vectors {
            assert!(v.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-3, "{v:?}");
        }
    }

    #[test]
    fn recovers_translation() {
        let flow = OtEstimator::default().estimate(&lattice_pair([0.1, 0.0, 0.0])).unwrap();
        for v in flow.vectors {
            let err = ((v[0] - 0.1).powi(2) + v[1].powi(2) + v[2].powi(2)).sqrt();
            assert!(err < 1e-2, "{v:?}");
        }
    }

    #[test]
    fn invalid_config() {
        let cfg = OtConfig {
            reg: 0.0,
            ..OtConfig::default()
        };
        assert!(OtEstimator::new(cfg).is_err());
    }
}
