use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    attention_sets, point_map, rulebook, voxelize, AttentionMode, GsrConfig, GsrError, PointMapping, VoxelGrid, TAPS,
};
use crate::autodiff::{Checkpoint, ConvRulebook, Graph, SparseRowMap, Tensor, Var};
use crate::scene::{GaussianScene, SEMANTIC_DIM};

/// Width of the aggregated per-voxel input feature.
pub const VOXEL_FEATURE_DIM: usize = 8;
/// Width of the raw per-Gaussian attribute vector (quaternion, color, scale, opacity).
pub const ATTR_DIM: usize = 11;

const NAMES: [&str; 17] = [
    "embed.w",
    "embed.b",
    "conv1.w",
    "conv1.b",
    "conv2.w",
    "conv2.b",
    "conv3.w",
    "conv3.b",
    "adapter.q.w",
    "adapter.k.w",
    "adapter.v.w",
    "adapter.mlp0.w",
    "adapter.mlp0.b",
    "adapter.mlp1.w",
    "adapter.mlp1.b",
    "adapter.mlp2.w",
    "adapter.mlp2.b",
];

const EMBED_W: usize = 0;
const EMBED_B: usize = 1;
const CONV_W: [usize; 3] = [2, 4, 6];
const CONV_B: [usize; 3] = [3, 5, 7];
const Q_W: usize = 8;
const K_W: usize = 9;
const V_W: usize = 10;
const MLP_W: [usize; 3] = [11, 13, 15];
const MLP_B: [usize; 3] = [12, 14, 16];

fn shapes(cfg: &GsrConfig) -> [Vec<usize>; 17] {
    let (h, m, s) = (cfg.hidden_channels, cfg.mlp_hidden, SEMANTIC_DIM);
    let cat = ATTR_DIM + s;
    [
        vec![VOXEL_FEATURE_DIM, s],
        vec![1, s],
        vec![TAPS, s, h],
        vec![1, h],
        vec![TAPS, h, h],
        vec![1, h],
        vec![TAPS, h, s],
        vec![1, s],
        vec![s, ATTR_DIM],
        vec![ATTR_DIM, ATTR_DIM],
        vec![ATTR_DIM, ATTR_DIM],
        vec![cat, m],
        vec![1, m],
        vec![m, m],
        vec![1, m],
        vec![m, s],
        vec![1, s],
    ]
}

/// Trainable tensors of the sparse network and adapter, in canonical order.
///
/// Linear weights are stored `[in, out]` and applied as `x · W`; biases are
/// `[1, out]`; convolution kernels are `[27, in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GsrParams {
    tensors: Vec<Tensor>,
}

impl GsrParams {
    pub fn names() -> &'static [&'static str] {
        &NAMES
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(cfg: &GsrConfig, seed: u64) -> Result<Self, GsrError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = shapes(cfg)
            .into_iter()
            .zip(NAMES)
            .map(|(shape, name)| {
                if name.ends_with(".b") {
                    return Tensor::zeros(&shape);
                }
                let (fan_in, fan_out) = match shape.as_slice() {
                    [t, i, o] => (t * i, t * o),
                    [i, o] => (*i, *o),
                    _ => unreachable!("weights are rank 2 or 3"),
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
                Tensor::new(shape, data).expect("sized from shape")
            })
            .collect();
        Ok(Self { tensors })
    }

    /// Every tensor filled with `value`.
    pub fn filled(cfg: &GsrConfig, value: f64) -> Result<Self, GsrError> {
        cfg.validate()?;
        Ok(Self {
            tensors: shapes(cfg).iter().map(|s| Tensor::filled(s, value)).collect(),
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        NAMES.iter().position(|n| *n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        NAMES.iter().position(|n| *n == name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        NAMES.iter().copied().zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut Tensor)> {
        NAMES.iter().copied().zip(&mut self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Checks every tensor against the shapes implied by `cfg`.
    pub fn check(&self, cfg: &GsrConfig) -> Result<(), GsrError> {
        cfg.validate()?;
        for ((name, t), want) in self.iter().zip(shapes(cfg)) {
            if t.shape() != want.as_slice() {
                return Err(GsrError::ShapeMismatch(format!("{name}: expected {want:?}, got {:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(GsrError::ShapeMismatch(format!("{name}: non-finite values")));
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) -> Result<(), GsrError> {
        for (name, t) in self.iter() {
            ck.push(name, t.clone())?;
        }
        Ok(())
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &GsrConfig) -> Result<Self, GsrError> {
        cfg.validate()?;
        let tensors = NAMES
            .iter()
            .zip(shapes(cfg))
            .map(|(name, shape)| ck.expect(name, &shape).cloned())
            .collect::<Result<Vec<_>, _>>()?;
        let p = Self { tensors };
        p.check(cfg)?;
        Ok(p)
    }

    /// Registers every tensor in `g` (trainable or constant).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        ParamVars(self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect())
    }
}

/// Graph handles of a bound [`GsrParams`], in canonical order.
#[derive(Debug, Clone)]
pub struct ParamVars(pub Vec<Var>);

impl ParamVars {
    pub fn named(&self) -> impl Iterator<Item = (&'static str, Var)> + '_ {
        NAMES.iter().copied().zip(self.0.iter().copied())
    }
}

/// Geometry-derived inputs of one scene that stay fixed during training.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub grid: VoxelGrid,
    pub rules: Arc<ConvRulebook>,
    pub points: Arc<SparseRowMap>,
    /// `N × 11` raw attributes.
    pub attrs: Tensor,
    pub sets: Arc<Vec<Vec<u32>>>,
}

impl PreparedScene {
    pub fn new(scene: &GaussianScene, cfg: &GsrConfig) -> Result<Self, GsrError> {
        cfg.validate()?;
        let grid = voxelize(scene, cfg.voxel_size)?;
        let rules = Arc::new(rulebook(&grid.coords));
        let points = Arc::new(point_map(&grid, scene, cfg.mapping)?);
        let sets = attention_sets(&grid, cfg.attention);
        Ok(Self {
            rules,
            points,
            attrs: scene.attributes_tensor(),
            sets,
            grid,
        })
    }

    pub fn num_gaussians(&self) -> usize {
        self.grid.assign.len()
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, GsrError> {
    let y = g.matmul(x, w)?;
    Ok(g.add_bias(y, b)?)
}

fn conv_stack(g: &mut Graph, p: &ParamVars, x: Var, rules: &Arc<ConvRulebook>) -> Result<Var, GsrError> {
    let h0 = linear(g, x, p.0[EMBED_W], p.0[EMBED_B])?;
    let layer = |g: &mut Graph, x: Var, l: usize| -> Result<Var, GsrError> {
        let y = g.sparse_conv(x, p.0[CONV_W[l]], rules.clone())?;
        let y = g.add_bias(y, p.0[CONV_B[l]])?;
        Ok(g.relu(y))
    };
    let h1 = layer(g, h0, 0)?;
    let h2 = layer(g, h1, 1)?;
    let h2 = g.add(h2, h1)?;
    layer(g, h2, 2)
}

fn adapter(
    g: &mut Graph,
    p: &ParamVars,
    point_feats: Var,
    attrs: Var,
    mode: AttentionMode,
    heads: usize,
    sets: &Arc<Vec<Vec<u32>>>,
) -> Result<Var, GsrError> {
    let v = g.matmul(attrs, p.0[V_W])?;
    let m = match mode {
        AttentionMode::SelfOnly => v,
        AttentionMode::VoxelSet => {
            let q = g.matmul(point_feats, p.0[Q_W])?;
            let k = g.matmul(attrs, p.0[K_W])?;
            let d = ATTR_DIM / heads;
            let scale = 1.0 / (d as f64).sqrt();
            if heads == 1 {
                g.group_attention(q, k, v, sets.clone(), scale)?
            } else {
                let mut outs = Vec::with_capacity(heads);
                for h in 0..heads {
                    let mut sel = Tensor::zeros(&[ATTR_DIM, d]);
                    for c in 0..d {
                        sel.row_mut(h * d + c)[c] = 1.0;
                    }
                    let sel = g.constant(sel);
                    let (qh, kh, vh) = (g.matmul(q, sel)?, g.matmul(k, sel)?, g.matmul(v, sel)?);
                    outs.push(g.group_attention(qh, kh, vh, sets.clone(), scale)?);
                }
                g.concat(&outs)?
            }
        }
    };
    let mut x = g.concat(&[m, point_feats])?;
    for l in 0..3 {
        x = linear(g, x, p.0[MLP_W[l]], p.0[MLP_B[l]])?;
        if l < 2 {
            x = g.relu(x);
        }
    }
    Ok(g.add(x, point_feats)?)
}

/// Full pipeline inside a graph: returns the `N × 16` semantic vectors.
pub fn forward(g: &mut Graph, p: &ParamVars, scene: &PreparedScene, cfg: &GsrConfig) -> Result<Var, GsrError> {
    let x = g.constant(scene.grid.features.clone());
    let voxel = conv_stack(g, p, x, &scene.rules)?;
    let point_feats = g.row_map(voxel, scene.points.clone())?;
    let attrs = g.constant(scene.attrs.clone());
    adapter(g, p, point_feats, attrs, cfg.attention, cfg.heads, &scene.sets)
}

/// Embedding plus the three sparse convolutions: `|V| × 16`.
pub fn sparse_forward(grid: &VoxelGrid, params: &GsrParams) -> Result<Tensor, GsrError> {
    if grid.features.rank() != 2 || grid.features.cols() != VOXEL_FEATURE_DIM {
        return Err(GsrError::ShapeMismatch(format!("voxel features {:?}", grid.features.shape())));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(grid.features.clone());
    let rules = Arc::new(rulebook(&grid.coords));
    let y = conv_stack(&mut g, &p, x, &rules)?;
    Ok(g.value(y).clone())
}

/// Voxel features to per-Gaussian features.
pub fn map_to_points(
    grid: &VoxelGrid,
    voxel_features: &Tensor,
    scene: &GaussianScene,
    mode: PointMapping,
) -> Result<Tensor, GsrError> {
    let rows = voxel_features.rows();
    if let Some(&bad) = grid.assign.iter().find(|&&v| v >= rows) {
        return Err(GsrError::AssignOutOfRange { index: bad, bound: rows });
    }
    if rows != grid.coords.len() {
        return Err(GsrError::AssignOutOfRange {
            index: grid.coords.len() - 1,
            bound: rows,
        });
    }
    let map = point_map(grid, scene, mode)?;
    let c = voxel_features.cols();
    Ok(Tensor::matrix(scene.len(), c, map.apply(voxel_features.data(), c))?)
}

/// Adapter on its own: `N × 16` point features and `N × 11` attributes in.
pub fn adapter_forward(
    point_feats: &Tensor,
    attrs: &Tensor,
    params: &GsrParams,
    mode: AttentionMode,
    heads: usize,
    grid: &VoxelGrid,
) -> Result<Tensor, GsrError> {
    let n = grid.assign.len();
    if point_feats.shape() != [n, SEMANTIC_DIM] || attrs.shape() != [n, ATTR_DIM] {
        return Err(GsrError::ShapeMismatch(format!(
            "point features {:?} and attributes {:?} for {n} Gaussians",
            point_feats.shape(),
            attrs.shape()
        )));
    }
    if heads == 0 || !ATTR_DIM.is_multiple_of(heads) {
        return Err(GsrError::InvalidConfig(format!("{heads} heads")));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let pf = g.constant(point_feats.clone());
    let at = g.constant(attrs.clone());
    let sets = attention_sets(grid, mode);
    let y = adapter(&mut g, &p, pf, at, mode, heads, &sets)?;
    Ok(g.value(y).clone())
}

/// Fills every Gaussian's semantic vector from the network.
pub fn predict_semantics(
    scene: &GaussianScene,
    params: &GsrParams,
    cfg: &GsrConfig,
) -> Result<GaussianScene, GsrError> {
    params.check(cfg)?;
    let prepared = PreparedScene::new(scene, cfg)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let s = forward(&mut g, &p, &prepared, cfg)?;
    let mut out = scene.clone();
    out.set_semantics(g.value(s));
    Ok(out)
}
