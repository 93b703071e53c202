use serde::{Deserialize, Serialize};

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold on the worst relative error.
pub const REL_TOL: f64 = 1e-4;
/// Coordinates whose analytic and numeric values agree to this absolute
/// tolerance count as exact.
pub const ABS_TOL: f64 = 1e-8;

/// A scalar-valued computation over seeded random inputs.
pub trait GradRecipe {
    fn leaves(&self, seed: u64) -> Result<Vec<Tensor>>;
    fn build(&self, g: &mut Graph, leaves: &[Var]) -> Result<Var>;
}

/// Recipe assembled from two closures.
pub struct FnRecipe<L, B> {
    pub leaves: L,
    pub build: B,
}

impl<L, B> GradRecipe for FnRecipe<L, B>
where
    L: Fn(u64) -> Result<Vec<Tensor>>,
    B: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    fn leaves(&self, seed: u64) -> Result<Vec<Tensor>> {
        (self.leaves)(seed)
    }

    fn build(&self, g: &mut Graph, leaves: &[Var]) -> Result<Var> {
        (self.build)(g, leaves)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coordinates: usize,
    pub pass: bool,
}

fn evaluate<R: GradRecipe + ?Sized>(recipe: &R, leaves: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let root = recipe.build(&mut g, &vars)?;
    let value = g
        .value(root)
        .item()
        .ok_or_else(|| Error::Contract("recipe must produce a scalar".into()))?;
    if !value.is_finite() {
        return Err(Error::Domain(format!("non-finite forward value {value}")));
    }
    Ok(value)
}

/// Compares reverse-mode gradients against central finite differences on
/// every coordinate of every leaf produced from `seed`.
pub fn gradcheck<R: GradRecipe + ?Sized>(recipe: &R, seed: u64) -> Result<GradcheckReport> {
    let leaves = recipe.leaves(seed)?;
    gradcheck_at(recipe, &leaves)
}

/// Same as [`gradcheck`] at explicit leaf values.
pub fn gradcheck_at<R: GradRecipe + ?Sized>(
    recipe: &R,
    leaves: &[Tensor],
) -> Result<GradcheckReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let root = recipe.build(&mut g, &vars)?;
    let value = g
        .value(root)
        .item()
        .ok_or_else(|| Error::Contract("recipe must produce a scalar".into()))?;
    if !value.is_finite() {
        return Err(Error::Domain(format!("non-finite forward value {value}")));
    }
    let grads = g.backward(root)?;

    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut coordinates = 0;
    let mut probe: Vec<Tensor> = leaves.to_vec();
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("every leaf has a gradient");
        for c in 0..leaves[li].numel() {
            let x0 = leaves[li].data()[c];
            probe[li].data_mut()[c] = x0 + FD_STEP;
            let up = evaluate(recipe, &probe)?;
            probe[li].data_mut()[c] = x0 - FD_STEP;
            let down = evaluate(recipe, &probe)?;
            probe[li].data_mut()[c] = x0;

            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[c];
            let abs = (a - numeric).abs();
            max_abs = max_abs.max(abs);
            if abs > ABS_TOL {
                max_rel = max_rel.max(abs / a.abs().max(numeric.abs()));
            }
            coordinates += 1;
        }
    }
    Ok(GradcheckReport {
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        coordinates,
        pass: max_rel < REL_TOL,
    })
}
