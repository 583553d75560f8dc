//! Per-Gaussian semantic prediction: voxelize the scene, run a small
//! submanifold sparse convolution stack over occupied voxels, map voxel
//! features back to Gaussians and refine them with an attention adapter.

mod net;

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::autodiff::{AutodiffError, CheckpointError, ConvRulebook, SparseRowMap, Tensor};
use crate::scene::GaussianScene;

pub use net::{
    adapter_forward, forward, map_to_points, predict_semantics, sparse_forward, GsrParams, ParamVars, PreparedScene,
    ATTR_DIM, VOXEL_FEATURE_DIM,
};

/// Number of kernel taps of a 3×3×3 stencil.
pub const TAPS: usize = 27;
/// Tap index of the zero offset.
pub const CENTER_TAP: usize = 13;

#[derive(Debug, Error)]
pub enum GsrError {
    #[error("scene has no Gaussians")]
    EmptyScene,
    #[error("voxel size must be positive and finite, got {0}")]
    NonPositiveVoxelSize(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("voxel index {index} out of range for {bound} voxels")]
    AssignOutOfRange { index: usize, bound: usize },
    #[error("unknown mode {0:?}")]
    UnknownMode(String),
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// How voxel features reach the Gaussians inside them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PointMapping {
    /// Each Gaussian takes its own voxel's row.
    #[default]
    Nearest,
    /// Trilinear weights over the 8 surrounding voxel centers; unoccupied
    /// neighbors drop out and the rest renormalize.
    Trilinear,
}

impl FromStr for PointMapping {
    type Err = GsrError;
    fn from_str(s: &str) -> Result<Self, GsrError> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "trilinear" => Ok(Self::Trilinear),
            _ => Err(GsrError::UnknownMode(s.to_string())),
        }
    }
}

/// Which Gaussians a query attends to in the adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionMode {
    /// Only itself; the attention weight is 1 and `m_i = W_V · attrs_i`.
    #[default]
    SelfOnly,
    /// Every Gaussian sharing its voxel.
    VoxelSet,
}

impl FromStr for AttentionMode {
    type Err = GsrError;
    fn from_str(s: &str) -> Result<Self, GsrError> {
        match s {
            "self" => Ok(Self::SelfOnly),
            "voxel-set" => Ok(Self::VoxelSet),
            _ => Err(GsrError::UnknownMode(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GsrConfig {
    pub voxel_size: f64,
    /// Width of the two inner convolution layers.
    pub hidden_channels: usize,
    /// Width of the two inner adapter MLP layers.
    pub mlp_hidden: usize,
    /// Attention heads; must divide the 11-wide key/value space.
    pub heads: usize,
    pub mapping: PointMapping,
    pub attention: AttentionMode,
}

impl Default for GsrConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.10,
            hidden_channels: 32,
            mlp_hidden: 96,
            heads: 1,
            mapping: PointMapping::Nearest,
            attention: AttentionMode::SelfOnly,
        }
    }
}

impl GsrConfig {
    pub fn validate(&self) -> Result<(), GsrError> {
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(GsrError::NonPositiveVoxelSize(self.voxel_size));
        }
        if self.hidden_channels == 0 || self.mlp_hidden == 0 {
            return Err(GsrError::InvalidConfig("layer widths must be positive".into()));
        }
        if self.heads == 0 || !ATTR_DIM.is_multiple_of(self.heads) {
            return Err(GsrError::InvalidConfig(format!(
                "{} heads do not divide the {ATTR_DIM}-wide attention space",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Occupied voxels of a scene, sorted lexicographically by coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub voxel_size: f64,
    pub coords: Vec<[i64; 3]>,
    /// `|V| × 8`: mean color, mean opacity, ln(1 + count), mean scale.
    pub features: Tensor,
    /// Voxel index of every Gaussian.
    pub assign: Vec<usize>,
    /// Gaussian indices per voxel, ascending.
    pub members: Vec<Vec<u32>>,
}

pub fn voxel_of(p: &[f64; 3], voxel_size: f64) -> [i64; 3] {
    p.map(|v| (v / voxel_size).floor() as i64)
}

pub fn voxelize(scene: &GaussianScene, voxel_size: f64) -> Result<VoxelGrid, GsrError> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(GsrError::NonPositiveVoxelSize(voxel_size));
    }
    if scene.is_empty() {
        return Err(GsrError::EmptyScene);
    }
    let keys: Vec<[i64; 3]> = scene.gaussians.iter().map(|g| voxel_of(&g.position, voxel_size)).collect();
    let mut coords = keys.clone();
    coords.sort_unstable();
    coords.dedup();
    let index: HashMap<[i64; 3], usize> = coords.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let assign: Vec<usize> = keys.iter().map(|k| index[k]).collect();
    let mut members = vec![Vec::new(); coords.len()];
    for (i, &v) in assign.iter().enumerate() {
        members[v].push(i as u32);
    }
    let mut features = Tensor::zeros(&[coords.len(), VOXEL_FEATURE_DIM]);
    for (v, ids) in members.iter().enumerate() {
        let n = ids.len() as f64;
        let row = features.row_mut(v);
        for &i in ids {
            let g = &scene.gaussians[i as usize];
            for k in 0..3 {
                row[k] += g.color[k];
                row[5 + k] += g.scale[k];
            }
            row[3] += g.opacity;
        }
        for k in [0, 1, 2, 3, 5, 6, 7] {
            row[k] /= n;
        }
        row[4] = n.ln_1p();
    }
    Ok(VoxelGrid {
        voxel_size,
        coords,
        features,
        assign,
        members,
    })
}

/// Tap index of offset `(dx, dy, dz)` with components in `{-1, 0, 1}`.
pub fn tap_index(d: [i64; 3]) -> usize {
    ((d[0] + 1) * 9 + (d[1] + 1) * 3 + (d[2] + 1)) as usize
}

/// Submanifold rules: output voxel `o` reads input voxel `o + offset(t)` for
/// every tap `t` whose neighbor is occupied. Output support = input support.
pub fn rulebook(coords: &[[i64; 3]]) -> ConvRulebook {
    let index: HashMap<[i64; 3], u32> = coords.iter().enumerate().map(|(i, c)| (*c, i as u32)).collect();
    let mut rules = ConvRulebook::new(TAPS, coords.len(), coords.len());
    for (o, c) in coords.iter().enumerate() {
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(&i) = index.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        rules.push(tap_index([dx, dy, dz]), i, o as u32);
                    }
                }
            }
        }
    }
    rules
}

/// Row map from voxel features to Gaussians.
pub fn point_map(grid: &VoxelGrid, scene: &GaussianScene, mode: PointMapping) -> Result<SparseRowMap, GsrError> {
    if grid.assign.len() != scene.len() {
        return Err(GsrError::ShapeMismatch(format!(
            "grid covers {} Gaussians, scene has {}",
            grid.assign.len(),
            scene.len()
        )));
    }
    let nv = grid.coords.len();
    let mut map = SparseRowMap::new(nv);
    match mode {
        PointMapping::Nearest => {
            for &v in &grid.assign {
                if v >= nv {
                    return Err(GsrError::AssignOutOfRange { index: v, bound: nv });
                }
                map.push_row([(v as u32, 1.0)]);
            }
        }
        PointMapping::Trilinear => {
            let index: HashMap<[i64; 3], u32> = grid.coords.iter().enumerate().map(|(i, c)| (*c, i as u32)).collect();
            for g in &scene.gaussians {
                let terms = trilinear_terms(&g.position, grid.voxel_size, &index);
                map.push_row(terms);
            }
        }
    }
    Ok(map)
}

fn trilinear_terms(p: &[f64; 3], voxel_size: f64, index: &HashMap<[i64; 3], u32>) -> Vec<(u32, f64)> {
    // Voxel centers sit at (c + ½)·size.
    let u = p.map(|v| v / voxel_size - 0.5);
    let base = u.map(|v| v.floor());
    let t: [f64; 3] = std::array::from_fn(|k| u[k] - base[k]);
    let mut terms = Vec::with_capacity(8);
    for corner in 0..8usize {
        let bit = |k: usize| (corner >> (2 - k)) & 1;
        let c: [i64; 3] = std::array::from_fn(|k| base[k] as i64 + bit(k) as i64);
        let w: f64 = (0..3).map(|k| if bit(k) == 1 { t[k] } else { 1.0 - t[k] }).product();
        if w > 0.0 {
            if let Some(&i) = index.get(&c) {
                terms.push((i, w));
            }
        }
    }
    let total: f64 = terms.iter().map(|t| t.1).sum();
    for t in &mut terms {
        t.1 /= total;
    }
    terms
}

/// Gaussian index sets for voxel-set attention.
pub fn attention_sets(grid: &VoxelGrid, mode: AttentionMode) -> Arc<Vec<Vec<u32>>> {
    Arc::new(match mode {
        AttentionMode::SelfOnly => (0..grid.assign.len() as u32).map(|i| vec![i]).collect(),
        AttentionMode::VoxelSet => grid.assign.iter().map(|&v| grid.members[v].clone()).collect(),
    })
}
