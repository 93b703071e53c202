//! A small learned flow-embedding network.
//!
//! Both clouds go through a shared two-layer point encoder. Every `pc1`
//! point attends (softmax over negative squared feature distance) to its `k`
//! nearest `pc2` points, and a two-layer head maps its own feature,
//! concatenated with the attended feature minus its own, to a flow vector.
//!
//! Neighbor indices are chosen on plain positions and held fixed inside the
//! graph; gradients reach the inputs through the attention logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{scale_rows, Estimator, EstimatorInput};
use crate::ad::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::pointcloud::ScenePair;
use crate::seed::short_digest;

pub const HIDDEN: usize = 32;
pub const DEFAULT_K: usize = 8;
pub const SFTN_MAGIC: &[u8; 4] = b"SFTN";
const LAYER_COUNT: usize = 8;
const HIDDEN_BIAS_INIT: f64 = 0.5;
/// Logit offset that removes non-neighbors from the softmax.
const MASKED_LOGIT: f64 = -1e4;

#[derive(Debug, Clone, PartialEq)]
pub struct TinyNetWeights {
    pub enc1_w: Tensor,
    pub enc1_b: Tensor,
    pub enc2_w: Tensor,
    pub enc2_b: Tensor,
    pub head1_w: Tensor,
    pub head1_b: Tensor,
    pub head2_w: Tensor,
    pub head2_b: Tensor,
    pub k_neighbors: usize,
}

fn expected_shapes(in_dim: usize) -> [[usize; 2]; LAYER_COUNT] {
    [
        [in_dim, HIDDEN],
        [1, HIDDEN],
        [HIDDEN, HIDDEN],
        [1, HIDDEN],
        [2 * HIDDEN, HIDDEN],
        [1, HIDDEN],
        [HIDDEN, 3],
        [1, 3],
    ]
}

impl TinyNetWeights {
    /// He-uniform weights, constant positive hidden biases (most units start
    /// in their linear regime) and a zero output bias.
    pub fn init(in_dim: usize, seed: u64) -> Result<Self> {
        if in_dim != 3 && in_dim != 6 {
            return Err(Error::Validation(format!("input width must be 3 or 6, got {in_dim}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = expected_shapes(in_dim)
            .iter()
            .enumerate()
            .map(|(i, &[r, c])| {
                if i == LAYER_COUNT - 1 {
                    return Tensor::zeros(&[r, c]);
                }
                if i % 2 == 1 {
                    return Tensor::full(&[r, c], HIDDEN_BIAS_INIT);
                }
                let bound = (6.0 / r as f64).sqrt();
                let data = (0..r * c).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(vec![r, c], data).expect("layer shape")
            })
            .collect();
        Self::from_layers(layers, DEFAULT_K)
    }

    /// [`init`](Self::init) with an all-zero output layer: the network
    /// predicts exactly zero flow and has exactly zero input gradient.
    pub fn zero_head(in_dim: usize, seed: u64) -> Result<Self> {
        let mut w = Self::init(in_dim, seed)?;
        w.head2_w = Tensor::zeros(w.head2_w.shape());
        w.head2_b = Tensor::zeros(w.head2_b.shape());
        Ok(w)
    }

    pub fn in_dim(&self) -> usize {
        self.enc1_w.rows()
    }

    pub fn layers(&self) -> [&Tensor; LAYER_COUNT] {
        [
            &self.enc1_w,
            &self.enc1_b,
            &self.enc2_w,
            &self.enc2_b,
            &self.head1_w,
            &self.head1_b,
            &self.head2_w,
            &self.head2_b,
        ]
    }

    pub(crate) fn layers_mut(&mut self) -> [&mut Tensor; LAYER_COUNT] {
        [
            &mut self.enc1_w,
            &mut self.enc1_b,
            &mut self.enc2_w,
            &mut self.enc2_b,
            &mut self.head1_w,
            &mut self.head1_b,
            &mut self.head2_w,
            &mut self.head2_b,
        ]
    }

    pub fn from_layers(layers: Vec<Tensor>, k_neighbors: usize) -> Result<Self> {
        if layers.len() != LAYER_COUNT {
            return Err(Error::Format(format!(
                "expected {LAYER_COUNT} layers, got {}",
                layers.len()
            )));
        }
        let in_dim = layers[0].rows();
        let shapes = expected_shapes(in_dim);
        if in_dim != 3 && in_dim != 6 {
            return Err(Error::Format(format!("input width must be 3 or 6, got {in_dim}")));
        }
        for (i, (t, s)) in layers.iter().zip(&shapes).enumerate() {
            if t.shape() != s {
                return Err(Error::Format(format!(
                    "layer {i} has shape {:?}, expected {s:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Format(format!("layer {i} has non-finite weights")));
            }
        }
        if k_neighbors == 0 {
            return Err(Error::Validation("k_neighbors must be at least 1".into()));
        }
        let mut it = layers.into_iter();
        let mut next = || it.next().expect("length checked");
        Ok(TinyNetWeights {
            enc1_w: next(),
            enc1_b: next(),
            enc2_w: next(),
            enc2_b: next(),
            head1_w: next(),
            head1_b: next(),
            head2_w: next(),
            head2_b: next(),
            k_neighbors,
        })
    }
}

/// SFTN encoding: `"SFTN" | u32 layers | per layer: u32 rows, u32 cols, f32 data`.
pub fn save_weights(w: &TinyNetWeights) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SFTN_MAGIC);
    out.extend_from_slice(&(LAYER_COUNT as u32).to_le_bytes());
    for t in w.layers() {
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn load_weights(bytes: &[u8]) -> Result<TinyNetWeights> {
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Length(format!("truncated at byte {pos}")))?;
        let s = &bytes[*pos..end];
        *pos = end;
        Ok(s)
    };
    let u32_at = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    let mut pos = 0;
    if take(&mut pos, 4)? != SFTN_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let count = u32_at(&mut pos)? as usize;
    if count != LAYER_COUNT {
        return Err(Error::Format(format!("expected {LAYER_COUNT} layers, got {count}")));
    }
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = u32_at(&mut pos)? as usize;
        let cols = u32_at(&mut pos)? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("layer size overflows".into()))?;
        let raw = take(&mut pos, n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        layers.push(Tensor::new(vec![rows, cols], data)?);
    }
    if pos != bytes.len() {
        return Err(Error::Length(format!("{} trailing bytes", bytes.len() - pos)));
    }
    TinyNetWeights::from_layers(layers, DEFAULT_K)
}

/// Indices of the `k` nearest rows of `targets` for every row of `queries`,
/// nearest first; ties break toward the lower index. `k` is clamped to the
/// number of targets.
pub fn knn_indices(queries: &Tensor, targets: &Tensor, k: usize) -> Vec<Vec<usize>> {
    let m = targets.rows();
    let k = k.min(m);
    (0..queries.rows())
        .map(|i| {
            let q = queries.row(i);
            let mut d: Vec<(f64, usize)> = (0..m)
                .map(|j| {
                    let t = targets.row(j);
                    let s = q.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
                    (s, j)
                })
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < m {
                d.select_nth_unstable_by(k, cmp);
                d.truncate(k);
            }
            d.sort_by(cmp);
            d.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

/// Graph handles of the eight weight tensors.
pub(crate) struct WeightVars([Var; LAYER_COUNT]);

impl WeightVars {
    pub(crate) fn leaves(g: &mut Graph, w: &TinyNetWeights) -> Self {
        WeightVars(w.layers().map(|t| g.leaf(t.clone())))
    }

    pub(crate) fn constants(g: &mut Graph, w: &TinyNetWeights) -> Self {
        WeightVars(w.layers().map(|t| g.constant(t.clone())))
    }

    pub(crate) fn vars(&self) -> &[Var; LAYER_COUNT] {
        &self.0
    }
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn encode(g: &mut Graph, w: &WeightVars, x: Var) -> Result<Var> {
    let [w1, b1, w2, b2, ..] = w.0;
    let h = affine(g, x, w1, b1)?;
    let h = g.relu(h);
    let h = affine(g, h, w2, b2)?;
    Ok(g.relu(h))
}

/// Network input: positions, or positions followed by colors.
pub(crate) fn features(g: &mut Graph, pos: Var, col: Option<Var>) -> Result<Var> {
    match col {
        Some(c) => g.concat(pos, c, 1),
        None => Ok(pos),
    }
}

/// Forward pass with explicit neighbor lists (one per `pc1` point).
pub(crate) fn tiny_flow(
    g: &mut Graph,
    w: &WeightVars,
    feat1: Var,
    feat2: Var,
    neighbors: &[Vec<usize>],
) -> Result<Var> {
    let (n, m) = (g.value(feat1).rows(), g.value(feat2).rows());
    if neighbors.len() != n {
        return Err(Error::Dimension(format!(
            "{} neighbor lists for {n} points",
            neighbors.len()
        )));
    }
    let e1 = encode(g, w, feat1)?;
    let e2 = encode(g, w, feat2)?;
    let sq = g.pairwise_sqdist(e1, e2)?;

    // Non-neighbors are pushed to a logit whose exponential is exactly zero;
    // neighbors are shifted by their row maximum.
    let mut mask = Tensor::zeros(&[n, m]);
    let mut bias = Tensor::full(&[n, m], MASKED_LOGIT);
    let sqv = g.value(sq);
    for (i, nb) in neighbors.iter().enumerate() {
        if nb.is_empty() {
            return Err(Error::Dimension(format!("point {i} has no neighbors")));
        }
        let closest = nb.iter().map(|&j| sqv.at(i, j)).fold(f64::INFINITY, f64::min);
        for &j in nb {
            mask.data_mut()[i * m + j] = -1.0;
            bias.data_mut()[i * m + j] = closest;
        }
    }
    let mask = g.constant(mask);
    let bias = g.constant(bias);
    let logits = g.mul(sq, mask)?;
    let logits = g.add(logits, bias)?;
    let weights = g.exp(logits);
    let total = g.row_sum(weights)?;
    let inv = g.recip(total)?;
    let attn = scale_rows(g, weights, inv)?;
    let attended = g.matmul(attn, e2)?;

    let [.., w3, b3, w4, b4] = w.0;
    let offset = g.sub(attended, e1)?;
    let joint = g.concat(e1, offset, 1)?;
    let h = affine(g, joint, w3, b3)?;
    let h = g.relu(h);
    affine(g, h, w4, b4)
}

#[derive(Debug, Clone)]
pub struct TinyEstimator {
    pub weights: TinyNetWeights,
}

impl TinyEstimator {
    pub fn new(weights: TinyNetWeights) -> Self {
        TinyEstimator { weights }
    }
}

pub(crate) fn pair_features(g: &mut Graph, pair: &ScenePair) -> Result<Var> {
    let pos2 = g.constant(pair.pc2.positions_tensor());
    let col2 = pair.pc2.colors_tensor().map(|c| g.constant(c));
    features(g, pos2, col2)
}

impl Estimator for TinyEstimator {
    fn tag(&self) -> &'static str {
        "tiny"
    }

    fn digest(&self) -> String {
        short_digest(&save_weights(&self.weights))
    }

    fn flow_graph(&self, g: &mut Graph, input: &EstimatorInput<'_>) -> Result<Var> {
        let feat1 = features(g, input.pos1, input.col1)?;
        let feat2 = pair_features(g, input.pair)?;
        let (w1, w2) = (g.value(feat1).cols(), g.value(feat2).cols());
        if w1 != self.weights.in_dim() || w2 != w1 {
            return Err(Error::Dimension(format!(
                "network expects {} input features, pair provides {w1}/{w2}",
                self.weights.in_dim()
            )));
        }
        let neighbors = knn_indices(
            g.value(input.pos1),
            &input.pair.pc2.positions_tensor(),
            self.weights.k_neighbors,
        );
        let w = WeightVars::constants(g, &self.weights);
        tiny_flow(g, &w, feat1, feat2, &neighbors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::epe_loss;
    use crate::ad::{gradcheck_at, FnRecipe};
    use crate::synthgen::{make_pair, MotionSpec};

    #[test]
    fn zero_head_predicts_zero() {
        let w = TinyNetWeights::zero_head(3, 1).unwrap();
        let pair = make_pair(10, &MotionSpec::translation([0.2, 0.0, 0.1]), false, 3).unwrap();
        let flow = TinyEstimator::new(w).estimate(&pair).unwrap();
        assert!(flow.vectors.iter().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn output_shape_and_k_clamp() {
        let w = TinyNetWeights::init(6, 2).unwrap();
        for (n, m_drop) in [(1, 0.0), (5, 0.0), (12, 0.75)] {
            let spec = MotionSpec {
                drop_fraction: m_drop,
                ..MotionSpec::default()
            };
            let pair = make_pair(n, &spec, true, 8).unwrap();
            assert!(pair.pc2.len() < 8 || n < 8);
            let flow = TinyEstimator::new(w.clone()).estimate(&pair).unwrap();
            assert_eq!(flow.len(), n);
            assert!(flow.vectors.iter().flatten().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn knn_orders_by_distance() {
        let q = Tensor::from_rows3(&[[0.0, 0.0, 0.0]]);
        let t = Tensor::from_rows3(&[[3.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.5, 0.0, 0.0]]);
        assert_eq!(knn_indices(&q, &t, 3), vec![vec![3, 1, 2]]);
        assert_eq!(knn_indices(&q, &t, 10)[0].len(), 4);
    }

    #[test]
    fn sftn_round_trip_and_errors() {
        let w = TinyNetWeights::init(3, 5).unwrap();
        let bytes = save_weights(&w);
        let expected: usize = 8 + expected_shapes(3).iter().map(|[r, c]| 8 + 4 * r * c).sum::<usize>();
        assert_eq!(bytes.len(), expected);
        let back = load_weights(&bytes).unwrap();
        assert_eq!(save_weights(&back), bytes);
        assert!(matches!(load_weights(&bytes[..bytes.len() - 3]), Err(Error::Length(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(load_weights(&bad), Err(Error::Format(_))));
        // Corrupt the first layer's column count.
        let mut bad = bytes;
        bad[12..16].copy_from_slice(&31u32.to_le_bytes());
        assert!(load_weights(&bad).is_err());
    }

    #[test]
    fn gradient_wrt_positions_and_colors() {
        let pair = make_pair(8, &MotionSpec::translation([0.1, -0.05, 0.0]), true, 21).unwrap();
        let w = TinyNetWeights::init(6, 4).unwrap();
        let neighbors = knn_indices(&pair.pc1.positions_tensor(), &pair.pc2.positions_tensor(), 4);
        let gt = pair.gt_flow.clone().unwrap().to_tensor();
        let recipe = FnRecipe {
            leaves: |_| Ok(vec![]),
            build: |g: &mut Graph, l: &[Var]| {
                let feat1 = features(g, l[0], Some(l[1]))?;
                let feat2 = pair_features(g, &pair)?;
                let wv = WeightVars::constants(g, &w);
                let flow = tiny_flow(g, &wv, feat1, feat2, &neighbors)?;
                let t = g.constant(gt.clone());
                epe_loss(g, flow, t)
            },
        };
        let leaves = [pair.pc1.positions_tensor(), pair.pc1.colors_tensor().unwrap()];
        let report = gradcheck_at(&recipe, &leaves).unwrap();
        assert!(report.pass, "{report:?}");
    }
}
