//! Seeded synthetic scene pairs with exact ground-truth flow.
//!
//! `pc1` is drawn uniformly from the cube `[-1, 1]^3`. `pc2` is the moved
//! cloud with optional Gaussian jitter and a fraction of points removed to
//! mimic occlusion. Ground truth is always the noise-free motion of every
//! `pc1` point.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{FlowField, Point3, PointCloud, ScenePair};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionKind {
    Rigid,
    Deform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub kind: MotionKind,
    /// Rotation axis (unit length whenever `angle != 0`). Rigid motion only.
    pub axis: Point3,
    /// Rotation angle in radians.
    pub angle: f64,
    pub translation: Point3,
    pub deform_amplitude: f64,
    /// Standard deviation of per-coordinate jitter added to `pc2`.
    pub noise_sigma: f64,
    /// Fraction of `pc2` points removed, in `[0, 1)`.
    pub drop_fraction: f64,
}

impl Default for MotionSpec {
    fn default() -> Self {
        MotionSpec {
            kind: MotionKind::Rigid,
            axis: [0.0, 0.0, 1.0],
            angle: 0.0,
            translation: [0.0; 3],
            deform_amplitude: 0.0,
            noise_sigma: 0.0,
            drop_fraction: 0.0,
        }
    }
}

impl MotionSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn translation(t: Point3) -> Self {
        MotionSpec {
            translation: t,
            ..Self::default()
        }
    }

    pub fn rotation(axis: Point3, angle: f64) -> Self {
        MotionSpec {
            axis,
            angle,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .axis
            .iter()
            .chain(&self.translation)
            .chain([&self.angle, &self.deform_amplitude, &self.noise_sigma, &self.drop_fraction])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Validation("motion spec has non-finite fields".into()));
        }
        if self.angle != 0.0 {
            let norm = self.axis.iter().map(|a| a * a).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!("rotation axis norm {norm} is not 1")));
            }
        }
        if self.deform_amplitude < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Validation("amplitude and noise must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return Err(Error::Validation(format!(
                "drop_fraction {} outside [0, 1)",
                self.drop_fraction
            )));
        }
        Ok(())
    }

    fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let [x, y, z] = self.axis;
        let (s, c) = self.angle.sin_cos();
        let t = 1.0 - c;
        [
            [c + t * x * x, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, c + t * y * y, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, c + t * z * z],
        ]
    }

    /// The noise-free image of `p`.
    pub fn apply(&self, p: Point3) -> Point3 {
        let t = self.translation;
        match self.kind {
            MotionKind::Rigid => {
                let r = self.rotation_matrix();
                let mut out = [0.0; 3];
                for (i, o) in out.iter_mut().enumerate() {
                    *o = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i];
                }
                out
            }
            MotionKind::Deform => {
                let a = self.deform_amplitude;
                [
                    p[0] + a * (PI * p[1]).sin() + t[0],
                    p[1] + a * (PI * p[2]).sin() + t[1],
                    p[2] + a * (PI * p[0]).sin() + t[2],
                ]
            }
        }
    }
}

/// Builds one pair; a pure function of its arguments.
pub fn make_pair(n_points: usize, spec: &MotionSpec, with_color: bool, seed: u64) -> Result<ScenePair> {
    if n_points == 0 {
        return Err(Error::Validation("n_points must be at least 1".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos1: Vec<Point3> = (0..n_points)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..=1.0)))
        .collect();
    let col1: Option<Vec<Point3>> = with_color.then(|| {
        (0..n_points)
            .map(|_| std::array::from_fn(|_| rng.random_range(0.0..=1.0)))
            .collect()
    });

    let moved: Vec<Point3> = pos1.iter().map(|&p| spec.apply(p)).collect();
    let flow: Vec<Point3> = pos1
        .iter()
        .zip(&moved)
        .map(|(p, q)| [q[0] - p[0], q[1] - p[1], q[2] - p[2]])
        .collect();

    let mut pos2 = moved;
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::Validation(format!("noise: {e}")))?;
        for v in pos2.iter_mut().flatten() {
            *v += normal.sample(&mut rng);
        }
    }

    let n_drop = ((spec.drop_fraction * n_points as f64).floor() as usize).min(n_points - 1);
    let mut keep = vec![true; n_points];
    if n_drop > 0 {
        for i in sample(&mut rng, n_points, n_drop).iter() {
            keep[i] = false;
        }
    }
    let filter = |rows: &[Point3]| -> Vec<Point3> {
        rows.iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(r, _)| *r)
            .collect()
    };
    let pc2 = PointCloud {
        positions: filter(&pos2),
        colors: col1.as_deref().map(filter),
    };
    Ok(ScenePair {
        id: String::new(),
        pc1: PointCloud {
            positions: pos1,
            colors: col1,
        },
        pc2,
        gt_flow: Some(FlowField { vectors: flow }),
    })
}

/// Closed interval `[lo, hi]`; serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl From<[f64; 2]> for Range {
    fn from(v: [f64; 2]) -> Self {
        Range { lo: v[0], hi: v[1] }
    }
}

impl From<Range> for [f64; 2] {
    fn from(r: Range) -> Self {
        [r.lo, r.hi]
    }
}

impl Range {
    pub fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn fixed(v: f64) -> Self {
        Range { lo: v, hi: v }
    }

    fn check(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(Error::Validation(format!(
                "range {name} [{}, {}] is empty",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

/// Ranges from which each pair's [`MotionSpec`] is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSampler {
    pub kind: MotionKind,
    pub n_points: usize,
    pub with_color: bool,
    /// Fixed rotation axis; a uniformly random one when absent.
    pub axis: Option<Point3>,
    pub angle: Range,
    /// One range per translation component.
    pub translation: [Range; 3],
    pub deform_amplitude: Range,
    pub noise_sigma: Range,
    pub drop_fraction: Range,
}

impl MotionSampler {
    /// Small rigid motions typical of consecutive frames.
    pub fn rigid(n_points: usize, with_color: bool) -> Self {
        MotionSampler {
            kind: MotionKind::Rigid,
            n_points,
            with_color,
            axis: None,
            angle: Range::new(-0.15, 0.15),
            translation: [Range::new(-0.15, 0.15); 3],
            deform_amplitude: Range::fixed(0.0),
            noise_sigma: Range::fixed(0.0),
            drop_fraction: Range::fixed(0.0),
        }
    }

    pub fn deform(n_points: usize, with_color: bool) -> Self {
        MotionSampler {
            kind: MotionKind::Deform,
            angle: Range::fixed(0.0),
            deform_amplitude: Range::new(0.02, 0.08),
            ..Self::rigid(n_points, with_color)
        }
    }

    /// Every draw yields `spec`.
    pub fn fixed(spec: &MotionSpec, n_points: usize, with_color: bool) -> Self {
        MotionSampler {
            kind: spec.kind,
            n_points,
            with_color,
            axis: Some(spec.axis),
            angle: Range::fixed(spec.angle),
            translation: spec.translation.map(Range::fixed),
            deform_amplitude: Range::fixed(spec.deform_amplitude),
            noise_sigma: Range::fixed(spec.noise_sigma),
            drop_fraction: Range::fixed(spec.drop_fraction),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 {
            return Err(Error::Validation("n_points must be at least 1".into()));
        }
        self.angle.check("angle")?;
        for (i, t) in self.translation.iter().enumerate() {
            t.check(&format!("translation[{i}]"))?;
        }
        self.deform_amplitude.check("deform_amplitude")?;
        self.noise_sigma.check("noise_sigma")?;
        self.drop_fraction.check("drop_fraction")?;
        Ok(())
    }

    pub fn draw(&self, seed: u64) -> Result<MotionSpec> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let axis = match self.axis {
            Some(a) => a,
            None => loop {
                let v: Point3 = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-6 {
                    break v.map(|x| x / n);
                }
            },
        };
        let spec = MotionSpec {
            kind: self.kind,
            axis,
            angle: self.angle.draw(&mut rng),
            translation: std::array::from_fn(|i| self.translation[i].draw(&mut rng)),
            deform_amplitude: self.deform_amplitude.draw(&mut rng),
            noise_sigma: self.noise_sigma.draw(&mut rng),
            drop_fraction: self.drop_fraction.draw(&mut rng),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A generated pair together with the inputs that reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub pair: ScenePair,
    pub seed: u64,
    pub spec: MotionSpec,
}

/// Regenerates element `index` of [`make_dataset`] on its own.
pub fn make_entry(index: usize, sampler: &MotionSampler, seed: u64) -> Result<DatasetEntry> {
    let tag = (index as u64).to_le_bytes();
    let spec = sampler.draw(derive_seed(seed, &[b"spec", &tag]))?;
    let pair_seed = derive_seed(seed, &[b"pair", &tag]);
    let mut pair = make_pair(sampler.n_points, &spec, sampler.with_color, pair_seed)?;
    pair.id = format!("pair_{index}");
    Ok(DatasetEntry {
        pair,
        seed: pair_seed,
        spec,
    })
}

pub fn make_dataset(count: usize, sampler: &MotionSampler, seed: u64) -> Result<Vec<DatasetEntry>> {
    if count == 0 {
        return Err(Error::Validation("count must be at least 1".into()));
    }
    sampler.validate()?;
    (0..count).map(|i| make_entry(i, sampler, seed)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub seed: u64,
    pub spec: MotionSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub sampler: MotionSampler,
    pub pairs: Vec<ManifestEntry>,
}

/// Writes `<dir>/pair_<k>.sfp` for every entry plus `<dir>/manifest.json`.
pub fn write_dataset(dir: &Path, entries: &[DatasetEntry], sampler: &MotionSampler, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut pairs = Vec::with_capacity(entries.len());
    for e in entries {
        let file = format!("{}.sfp", e.pair.id);
        e.pair.write(&dir.join(&file))?;
        pairs.push(ManifestEntry {
            id: e.pair.id.clone(),
            file,
            seed: e.seed,
            spec: e.spec.clone(),
        });
    }
    let manifest = Manifest {
        seed,
        sampler: sampler.clone(),
        pairs,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

/// Loads every pair of a dataset directory, in manifest order when a
/// manifest exists and by numeric file suffix otherwise.
pub fn read_dataset(dir: &Path) -> Result<Vec<ScenePair>> {
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        return manifest
            .pairs
            .iter()
            .map(|e| {
                let mut p = ScenePair::read(&dir.join(&e.file))?;
                p.id = e.id.clone();
                Ok(p)
            })
            .collect();
    }
    let mut files: Vec<(u64, std::path::PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("sfp") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let k = stem.rsplit('_').next().and_then(|k| k.parse().ok()).unwrap_or(u64::MAX);
        files.push((k, path));
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Validation(format!("no .sfp files in {}", dir.display())));
    }
    files.iter().map(|(_, p)| ScenePair::read(p)).collect()
}
