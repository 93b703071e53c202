//! Scene data types and their file formats.

mod ply;
mod sfp;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ad::Tensor;
use crate::error::{Error, Result};

pub use ply::{load_ply, save_ply};
pub use sfp::{load_sfp, save_sfp, SFP_MAGIC};

pub type Point3 = [f64; 3];

/// Positions of N points with optional per-point RGB in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub positions: Vec<Point3>,
    pub colors: Option<Vec<Point3>>,
}

/// Per-point displacement `(u, v, w)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowField {
    pub vectors: Vec<Point3>,
}

/// Two consecutive frames plus, optionally, the ground-truth flow of `pc1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePair {
    pub id: String,
    pub pc1: PointCloud,
    pub pc2: PointCloud,
    pub gt_flow: Option<FlowField>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

impl PointCloud {
    pub fn new(positions: Vec<Point3>, colors: Option<Vec<Point3>>) -> Result<Self> {
        let cloud = PointCloud { positions, colors };
        let mut v = Vec::new();
        cloud.check("cloud", &mut v);
        match v.first() {
            Some(first) => Err(Error::Validation(first.to_string())),
            None => Ok(cloud),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn has_colors(&self) -> bool {
        self.colors.is_some()
    }

    pub fn positions_tensor(&self) -> Tensor {
        Tensor::from_rows3(&self.positions)
    }

    pub fn colors_tensor(&self) -> Option<Tensor> {
        self.colors.as_deref().map(Tensor::from_rows3)
    }

    fn check(&self, name: &str, out: &mut Vec<Violation>) {
        let mut push = |field: String, rule: &str| {
            out.push(Violation {
                field,
                rule: rule.to_string(),
            })
        };
        if self.positions.is_empty() {
            push(format!("{name}.positions"), "empty cloud");
        }
        if !all_finite(&self.positions) {
            push(format!("{name}.positions"), "non-finite value");
        }
        if let Some(colors) = &self.colors {
            if colors.len() != self.positions.len() {
                push(format!("{name}.colors"), "color length mismatch");
            }
            if !all_finite(colors) {
                push(format!("{name}.colors"), "non-finite value");
            } else if colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
                push(format!("{name}.colors"), "color out of range");
            }
        }
    }
}

impl FlowField {
    pub fn zeros(n: usize) -> Self {
        FlowField {
            vectors: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_rows3(&self.vectors)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(FlowField {
            vectors: t.to_rows3()?,
        })
    }
}

impl ScenePair {
    pub fn has_colors(&self) -> bool {
        self.pc1.has_colors()
    }

    /// Ground truth, or a contract error when the pair carries none.
    pub fn require_gt(&self) -> Result<&FlowField> {
        self.gt_flow
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("pair '{}' has no ground-truth flow", self.id)))
    }

    /// Reads an SFP1 file; the pair id is the file stem.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut pair = load_sfp(&bytes)?;
        pair.id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(pair)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, save_sfp(self)?)?;
        Ok(())
    }
}

fn all_finite(rows: &[Point3]) -> bool {
    rows.iter().flatten().all(|v| v.is_finite())
}

/// Lists every broken invariant of `pair`; empty when the pair is well formed.
pub fn validate(pair: &ScenePair) -> Vec<Violation> {
    let mut out = Vec::new();
    pair.pc1.check("pc1", &mut out);
    pair.pc2.check("pc2", &mut out);
    if pair.pc1.has_colors() != pair.pc2.has_colors() {
        out.push(Violation {
            field: "colors".into(),
            rule: "color presence mismatch".into(),
        });
    }
    if let Some(flow) = &pair.gt_flow {
        if flow.len() != pair.pc1.len() {
            out.push(Violation {
                field: "gt_flow".into(),
                rule: "flow length mismatch".into(),
            });
        }
        if !all_finite(&flow.vectors) {
            out.push(Violation {
                field: "gt_flow".into(),
                rule: "non-finite value".into(),
            });
        }
    }
    out
}

pub(crate) fn ensure_valid(pair: &ScenePair) -> Result<()> {
    match validate(pair).first() {
        Some(v) => Err(Error::Validation(v.to_string())),
        None => Ok(()),
    }
}
