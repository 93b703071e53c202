//! L-infinity attacks on the first frame of a scene pair.
//!
//! Every attack perturbs either the positions or the colors of `pc1`,
//! restricted to the axes of a [`TargetMask`]; `pc2` and the ground truth are
//! never touched. Gradient attacks step along the sign of the EPE gradient
//! with `sign(0) = 0`, so coordinates with a zero gradient stay put.

mod config;
mod mask;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ad::Graph;
use crate::error::Result;
use crate::estimators::{epe_loss, Estimator, EstimatorInput};
use crate::pointcloud::{Point3, PointCloud, ScenePair};

pub use config::{AttackConfig, AttackKind, RandomMode, StepSize};
pub use mask::{Domain, TargetMask};

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub adv_pc1: PointCloud,
    /// Applied perturbation of the masked domain; zero off the mask.
    pub delta: Vec<Point3>,
    pub loss_before: f64,
    pub loss_after: f64,
    pub iters_run: usize,
}

impl AttackResult {
    /// `pair` with its first frame replaced by the adversarial one.
    pub fn adv_pair(&self, pair: &ScenePair) -> ScenePair {
        ScenePair {
            pc1: self.adv_pc1.clone(),
            ..pair.clone()
        }
    }
}

fn with_domain(pc1: &PointCloud, domain: Domain, values: Vec<Point3>) -> PointCloud {
    match domain {
        Domain::Positions => PointCloud {
            positions: values,
            colors: pc1.colors.clone(),
        },
        Domain::Colors => PointCloud {
            positions: pc1.positions.clone(),
            colors: Some(values),
        },
    }
}

fn domain_values(pc1: &PointCloud, domain: Domain) -> &[Point3] {
    match domain {
        Domain::Positions => &pc1.positions,
        Domain::Colors => pc1.colors.as_deref().unwrap_or(&[]),
    }
}

/// EPE of `est` on `pc1` (in place of the pair's own first frame), plus the
/// gradient with respect to `grad_domain` when requested.
fn evaluate(
    pair: &ScenePair,
    pc1: &PointCloud,
    est: &dyn Estimator,
    grad_domain: Option<Domain>,
) -> Result<(f64, Option<Vec<Point3>>)> {
    let gt = pair.require_gt()?;
    let mut g = Graph::new();
    let pos = pc1.positions_tensor();
    let pos1 = if grad_domain == Some(Domain::Positions) {
        g.leaf(pos)
    } else {
        g.constant(pos)
    };
    let col1 = pc1.colors_tensor().map(|c| {
        if grad_domain == Some(Domain::Colors) {
            g.leaf(c)
        } else {
            g.constant(c)
        }
    });
    let input = EstimatorInput { pos1, col1, pair };
    let flow = est.flow_graph(&mut g, &input)?;
    let t = g.constant(gt.to_tensor());
    let loss = epe_loss(&mut g, flow, t)?;
    let value = g.value(loss).data()[0];
    let Some(domain) = grad_domain else {
        return Ok((value, None));
    };
    let leaf = match domain {
        Domain::Positions => pos1,
        Domain::Colors => col1.expect("mask checked against pair"),
    };
    let grad = g.backward(loss)?.take(leaf).expect("leaf gradient");
    Ok((value, Some(grad.to_rows3()?)))
}

/// EPE between the estimate on `pair` and its ground truth.
pub fn attack_loss(pair: &ScenePair, est: &dyn Estimator) -> Result<f64> {
    Ok(evaluate(pair, &pair.pc1, est, None)?.0)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Shared state of the sign-gradient attacks, kept in perturbation space so
/// the ball constraint is a plain clip.
struct Iterate<'a> {
    base: &'a [Point3],
    delta: Vec<Point3>,
    cfg: &'a AttackConfig,
}

impl<'a> Iterate<'a> {
    fn new(base: &'a [Point3], cfg: &'a AttackConfig) -> Self {
        Iterate {
            base,
            delta: vec![[0.0; 3]; base.len()],
            cfg,
        }
    }

    fn values(&self) -> Vec<Point3> {
        self.base
            .iter()
            .zip(&self.delta)
            .map(|(b, d)| std::array::from_fn(|k| b[k] + d[k]))
            .collect()
    }

    fn clamps_colors(&self) -> bool {
        self.cfg.mask.domain == Domain::Colors && self.cfg.clamp_colors
    }

    /// Moves `delta` toward `target`, clips it to the ball and, for colors,
    /// keeps `base + delta` inside `[0, 1]`.
    fn settle(&mut self, i: usize, k: usize, target: f64) {
        let eps = self.cfg.eps;
        let mut d = target.clamp(-eps, eps);
        if self.clamps_colors() {
            let b = self.base[i][k];
            let v = (b + d).clamp(0.0, 1.0);
            if v != b + d {
                d = v - b;
            }
        }
        self.delta[i][k] = d;
    }

    fn step(&mut self, grad: &[Point3], alpha: f64) {
        for i in 0..self.base.len() {
            for k in 0..3 {
                if self.cfg.mask.axes[k] {
                    let target = self.delta[i][k] + alpha * sign(grad[i][k]);
                    self.settle(i, k, target);
                }
            }
        }
    }

    fn finish(
        self,
        pair: &ScenePair,
        est: &dyn Estimator,
        loss_before: f64,
        iters_run: usize,
    ) -> Result<AttackResult> {
        let adv_pc1 = with_domain(&pair.pc1, self.cfg.mask.domain, self.values());
        let loss_after = evaluate(pair, &adv_pc1, est, None)?.0;
        Ok(AttackResult {
            adv_pc1,
            delta: self.delta,
            loss_before,
            loss_after,
            iters_run,
        })
    }
}

/// One step of size `eps` along the sign of the EPE gradient.
pub fn fgsm_sf(pair: &ScenePair, est: &dyn Estimator, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.check(pair)?;
    let domain = cfg.mask.domain;
    let mut it = Iterate::new(domain_values(&pair.pc1, domain), cfg);
    let (loss_before, grad) = evaluate(pair, &pair.pc1, est, Some(domain))?;
    it.step(&grad.expect("gradient requested"), cfg.eps);
    it.finish(pair, est, loss_before, 1)
}

/// Iterated sign-gradient ascent projected onto the eps ball.
///
/// `seed` only drives the optional random start.
pub fn pgd_sf(
    pair: &ScenePair,
    est: &dyn Estimator,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackResult> {
    pgd_sf_observed(pair, est, cfg, seed, |_, _| {})
}

/// [`pgd_sf`] that hands every iterate (0 = start) of the perturbed domain
/// to `observe`.
pub fn pgd_sf_observed(
    pair: &ScenePair,
    est: &dyn Estimator,
    cfg: &AttackConfig,
    seed: u64,
    mut observe: impl FnMut(usize, &[Point3]),
) -> Result<AttackResult> {
    cfg.check(pair)?;
    let domain = cfg.mask.domain;
    let alpha = cfg.resolved_alpha();
    let mut it = Iterate::new(domain_values(&pair.pc1, domain), cfg);
    let mut loss_before = None;
    if cfg.random_start {
        loss_before = Some(attack_loss(pair, est)?);
        fill_random(&mut it, RandomMode::Uniform, seed);
    }
    observe(0, &it.values());
    for t in 0..cfg.iters {
        let current = with_domain(&pair.pc1, domain, it.values());
        let (loss, grad) = evaluate(pair, &current, est, Some(domain))?;
        loss_before.get_or_insert(loss);
        it.step(&grad.expect("gradient requested"), alpha);
        observe(t + 1, &it.values());
    }
    let loss_before = loss_before.expect("at least one iteration");
    it.finish(pair, est, loss_before, cfg.iters)
}

fn fill_random(it: &mut Iterate<'_>, mode: RandomMode, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = it.cfg.eps;
    for i in 0..it.base.len() {
        for k in 0..3 {
            if it.cfg.mask.axes[k] {
                let d = match mode {
                    RandomMode::Uniform => rng.random_range(-eps..=eps),
                    RandomMode::Rademacher => {
                        if rng.random::<bool>() {
                            eps
                        } else {
                            -eps
                        }
                    }
                };
                it.settle(i, k, d);
            }
        }
    }
}

/// Random perturbation inside the eps ball, drawn per masked coordinate.
pub fn random_attack(
    pair: &ScenePair,
    est: &dyn Estimator,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackResult> {
    cfg.check(pair)?;
    let loss_before = attack_loss(pair, est)?;
    let mut it = Iterate::new(domain_values(&pair.pc1, cfg.mask.domain), cfg);
    fill_random(&mut it, cfg.random_mode, seed);
    it.finish(pair, est, loss_before, 1)
}

/// Dispatches on `kind`; `None` returns the pair unchanged.
pub fn run_attack(
    kind: AttackKind,
    pair: &ScenePair,
    est: &dyn Estimator,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackResult> {
    match kind {
        AttackKind::None => {
            let loss = attack_loss(pair, est)?;
            Ok(AttackResult {
                adv_pc1: pair.pc1.clone(),
                delta: vec![[0.0; 3]; pair.pc1.len()],
                loss_before: loss,
                loss_after: loss,
                iters_run: 0,
            })
        }
        AttackKind::Fgsm => fgsm_sf(pair, est, cfg),
        AttackKind::Pgd => pgd_sf(pair, est, cfg, seed),
        AttackKind::Random => random_attack(pair, est, cfg, seed),
    }
}
