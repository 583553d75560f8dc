//! Screen-space projection and front-to-back alpha compositing.
//!
//! Rendering runs in two phases. The first walks every pixel and records the
//! ordered list of `(gaussian, weight)` pairs that reach it; the second blends
//! any per-Gaussian quantity with those weights. Because geometry is fixed,
//! the semantic map is a linear function of the semantic vectors and its
//! backward pass is the transpose of the recorded weight matrix.

mod export;

use std::sync::Arc;

use nalgebra::{Matrix2, Matrix2x3};
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{SparseRowMap, Tensor};
use crate::scene::{Camera, DenseTargetMap, Gaussian, GaussianScene, SceneError, IGNORE_LABEL, SEMANTIC_DIM};

pub use export::{
    decode_label_image, decode_pgm, decode_ppm, decode_slm, encode_pgm, encode_ppm, encode_slm, load_label_image,
    save_label_image, ImageError, LabelImage, RgbImage, SLM_MAGIC,
};

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("semantic channel requested but the scene carries no semantic vectors")]
    MissingSemantics,
    #[error("label channel requested but the scene carries no labels")]
    MissingLabels,
    #[error("render output was produced without contribution lists")]
    ContribNotRetained,
    #[error("expected a {expected:?} array, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// How per-Gaussian opacities combine along a ray.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Compositing {
    /// `w_i = a_i · Π_{j<i} (1 − a_j)`.
    #[default]
    FrontToBack,
    /// `w_i = a_i` with no transmittance and no early stop.
    Additive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterConfig {
    /// Added to the diagonal of every screen-space covariance (px²).
    pub dilation: f64,
    /// Contributions with `a_i` below this are skipped.
    pub min_alpha: f64,
    /// Compositing stops once transmittance falls below this.
    pub transmittance_stop: f64,
    pub alpha_clamp: f64,
    /// Footprint radius in standard deviations.
    pub cutoff_sigma: f64,
    /// Gaussians nearer than this (camera z, meters) are culled.
    pub near: f64,
    pub tile_size: u32,
    pub compositing: Compositing,
    /// The Jacobian is evaluated with `x/z` and `y/z` clamped to this multiple
    /// of the image half-extent, so Gaussians far outside the view at shallow
    /// depth keep a bounded footprint. Infinite disables the clamp.
    pub jacobian_guard: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            dilation: 0.3,
            min_alpha: 1.0 / 255.0,
            transmittance_stop: 1e-4,
            alpha_clamp: 0.999,
            cutoff_sigma: 3.0,
            near: 0.01,
            tile_size: 16,
            compositing: Compositing::FrontToBack,
            jacobian_guard: 1.3,
        }
    }
}

impl RasterConfig {
    /// No clamping, skipping or early termination; footprint still truncated.
    pub fn exact() -> Self {
        Self {
            min_alpha: 0.0,
            transmittance_stop: 0.0,
            alpha_clamp: 1.0,
            jacobian_guard: f64::INFINITY,
            ..Self::default()
        }
    }
}

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub mean2d: [f64; 2],
    pub cov2d: [[f64; 2]; 2],
    pub depth: f64,
    pub in_frustum: bool,
}

impl Projection {
    /// Inverse covariance `[a, b, c]` for `a·dx² + 2b·dx·dy + c·dy²`.
    pub fn conic(&self) -> Option<[f64; 3]> {
        let [[a, b], [_, c]] = self.cov2d;
        let det = a * c - b * b;
        (det > 0.0 && det.is_finite()).then(|| [c / det, -b / det, a / det])
    }

    /// Footprint value `exp(−½ Δᵀ Σ⁻¹ Δ)` at a screen point.
    pub fn footprint(&self, x: f64, y: f64) -> f64 {
        match self.conic() {
            Some(q) => (-0.5 * mahalanobis2(&q, x - self.mean2d[0], y - self.mean2d[1])).exp(),
            None => 0.0,
        }
    }

    /// Half extents of the axis-aligned box around the `k`σ ellipse.
    pub fn extent(&self, k: f64) -> [f64; 2] {
        [k * self.cov2d[0][0].max(0.0).sqrt(), k * self.cov2d[1][1].max(0.0).sqrt()]
    }
}

fn mahalanobis2(q: &[f64; 3], dx: f64, dy: f64) -> f64 {
    q[0] * dx * dx + 2.0 * q[1] * dx * dy + q[2] * dy * dy
}

/// Perspective projection with the default 0.3 px² dilation and near plane.
pub fn project_gaussian(g: &Gaussian, cam: &Camera) -> Projection {
    project_with(g, cam, &RasterConfig::default())
}

/// EWA projection: `cov2d = J W Σ Wᵀ Jᵀ + dilation · I`, with `J` the
/// Jacobian of the pinhole map at the camera-space mean (lateral offsets
/// limited by [`RasterConfig::jacobian_guard`]).
pub fn project_with(g: &Gaussian, cam: &Camera, cfg: &RasterConfig) -> Projection {
    let t = cam.to_camera(&g.position_vec());
    let depth = t.z;
    let mut p = Projection {
        mean2d: [f64::NAN; 2],
        cov2d: [[cfg.dilation, 0.0], [0.0, cfg.dilation]],
        depth,
        in_frustum: false,
    };
    if !(depth > cfg.near) {
        return p;
    }
    let iz = 1.0 / depth;
    p.mean2d = [cam.fx * t.x * iz + cam.cx, cam.fy * t.y * iz + cam.cy];
    let (w, h) = (cam.width as f64, cam.height as f64);
    let lim_x = cfg.jacobian_guard * cam.cx.max(w - cam.cx) / cam.fx;
    let lim_y = cfg.jacobian_guard * cam.cy.max(h - cam.cy) / cam.fy;
    let (tx, ty) = ((t.x * iz).clamp(-lim_x, lim_x), (t.y * iz).clamp(-lim_y, lim_y));
    let j = Matrix2x3::new(cam.fx * iz, 0.0, -cam.fx * tx * iz, 0.0, cam.fy * iz, -cam.fy * ty * iz);
    let m = j * cam.rotation();
    let c: Matrix2<f64> = m * g.covariance() * m.transpose() + Matrix2::identity() * cfg.dilation;
    let off = 0.5 * (c[(0, 1)] + c[(1, 0)]);
    p.cov2d = [[c[(0, 0)], off], [off, c[(1, 1)]]];
    let [rx, ry] = p.extent(cfg.cutoff_sigma);
    let [mx, my] = p.mean2d;
    p.in_frustum = p.conic().is_some()
        && mx + rx >= 0.0
        && mx - rx <= cam.width as f64
        && my + ry >= 0.0
        && my - ry <= cam.height as f64;
    p
}

/// Which per-pixel outputs to produce. Alpha and transmittance are always filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Channels {
    pub color: bool,
    pub semantic: bool,
    pub depth: bool,
    pub label: bool,
    /// Keep the per-pixel weight lists for blending and backward.
    pub contrib: bool,
}

impl Channels {
    pub const ALL: Channels = Channels {
        color: true,
        semantic: true,
        depth: true,
        label: true,
        contrib: true,
    };
    /// Only the weights; semantic maps are blended later from a tensor.
    pub const WEIGHTS: Channels = Channels {
        color: false,
        semantic: false,
        depth: false,
        label: false,
        contrib: true,
    };
    pub const COLOR: Channels = Channels {
        color: true,
        semantic: false,
        depth: false,
        label: false,
        contrib: false,
    };
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: u32,
    pub height: u32,
    pub num_gaussians: usize,
    /// `[H·W, 3]`, pixel-major.
    pub color: Option<Tensor>,
    /// `[H·W, 16]`.
    pub semantic_map: Option<Tensor>,
    /// Weight-averaged camera depth; 0 where nothing contributed.
    pub depth: Option<Vec<f64>>,
    pub alpha: Vec<f64>,
    /// Transmittance left after the last processed contributor.
    pub transmittance: Vec<f64>,
    /// Row `p` lists `(gaussian, w)` in compositing order.
    pub contrib: Option<Arc<SparseRowMap>>,
    pub label_map: Option<Vec<u16>>,
}

impl RenderOutput {
    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Blends an `[N, C]` per-Gaussian array into `[H·W, C]`.
    pub fn blend(&self, values: &Tensor) -> Result<Tensor, RasterError> {
        let contrib = self.contrib.as_ref().ok_or(RasterError::ContribNotRetained)?;
        if values.rank() != 2 || values.rows() != self.num_gaussians {
            return Err(RasterError::ShapeMismatch {
                expected: vec![self.num_gaussians, values.shape().get(1).copied().unwrap_or(0)],
                got: values.shape().to_vec(),
            });
        }
        let c = values.cols();
        Ok(Tensor::new(vec![self.pixel_count(), c], contrib.apply(values.data(), c)).expect("shape matches"))
    }

    /// Semantic map as an `SDM1`-compatible dense map.
    pub fn semantic_dense_map(&self) -> Option<DenseTargetMap> {
        let s = self.semantic_map.as_ref()?;
        let data = s.data().iter().map(|&v| v as f32).collect();
        DenseTargetMap::new(self.height, self.width, SEMANTIC_DIM as u32, data).ok()
    }

    /// Color as 8-bit RGB, clamped to `[0, 1]`.
    pub fn color_image(&self) -> Option<RgbImage> {
        let c = self.color.as_ref()?;
        Some(RgbImage {
            width: self.width,
            height: self.height,
            data: c.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        })
    }
}

struct PixelTerms {
    terms: Vec<(u32, f64)>,
    transmittance: f64,
}

/// Renders the requested channels.
///
/// Gaussians are ordered by camera depth of their means (ties by index) and
/// composited front to back at pixel centers `(x + 0.5, y + 0.5)`. The image
/// is split into tiles rendered in parallel; every pixel is owned by one tile
/// so the output does not depend on the thread count.
pub fn render(
    scene: &GaussianScene,
    cam: &Camera,
    channels: Channels,
    cfg: &RasterConfig,
) -> Result<RenderOutput, RasterError> {
    cam.validate()?;
    if channels.semantic && !scene.has_semantics {
        return Err(RasterError::MissingSemantics);
    }
    if channels.label && !scene.has_labels {
        return Err(RasterError::MissingLabels);
    }
    let (w, h) = (cam.width as usize, cam.height as usize);
    let proj: Vec<Projection> = scene.gaussians.par_iter().map(|g| project_with(g, cam, cfg)).collect();
    let mut order: Vec<usize> = (0..proj.len()).filter(|&i| proj[i].in_frustum).collect();
    order.sort_by(|&a, &b| proj[a].depth.total_cmp(&proj[b].depth).then(a.cmp(&b)));

    let tile = cfg.tile_size.max(1) as usize;
    let (tiles_x, tiles_y) = (w.div_ceil(tile), h.div_ceil(tile));
    let mut bins: Vec<Vec<(u32, [f64; 3], [usize; 4])>> = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        let p = &proj[i];
        let Some(q) = p.conic() else { continue };
        let [rx, ry] = p.extent(cfg.cutoff_sigma);
        let [mx, my] = p.mean2d;
        let x0 = (mx - rx - 0.5).ceil().max(0.0);
        let x1 = (mx + rx - 0.5).floor().min(w as f64 - 1.0);
        let y0 = (my - ry - 0.5).ceil().max(0.0);
        let y1 = (my + ry - 0.5).floor().min(h as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        let rect = [x0 as usize, x1 as usize, y0 as usize, y1 as usize];
        for ty in rect[2] / tile..=rect[3] / tile {
            for tx in rect[0] / tile..=rect[1] / tile {
                bins[ty * tiles_x + tx].push((i as u32, q, rect));
            }
        }
    }

    let cutoff2 = cfg.cutoff_sigma * cfg.cutoff_sigma;
    let per_tile: Vec<Vec<(usize, PixelTerms)>> = bins
        .par_iter()
        .enumerate()
        .map(|(t, bin)| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let mut out = Vec::with_capacity(tile * tile);
            for y in ty * tile..((ty + 1) * tile).min(h) {
                for x in tx * tile..((tx + 1) * tile).min(w) {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t_acc = 1.0;
                    let mut terms = Vec::new();
                    for &(i, q, rect) in bin {
                        if x < rect[0] || x > rect[1] || y < rect[2] || y > rect[3] {
                            continue;
                        }
                        let p = &proj[i as usize];
                        let d2 = mahalanobis2(&q, px - p.mean2d[0], py - p.mean2d[1]);
                        if d2 > cutoff2 {
                            continue;
                        }
                        let a = (scene.gaussians[i as usize].opacity * (-0.5 * d2).exp()).clamp(0.0, cfg.alpha_clamp);
                        if a < cfg.min_alpha || a == 0.0 {
                            continue;
                        }
                        match cfg.compositing {
                            Compositing::FrontToBack => {
                                terms.push((i, a * t_acc));
                                t_acc *= 1.0 - a;
                                if t_acc < cfg.transmittance_stop {
                                    break;
                                }
                            }
                            Compositing::Additive => terms.push((i, a)),
                        }
                    }
                    out.push((
                        y * w + x,
                        PixelTerms {
                            terms,
                            transmittance: t_acc,
                        },
                    ));
                }
            }
            out
        })
        .collect();

    let mut pixels: Vec<Option<PixelTerms>> = (0..w * h).map(|_| None).collect();
    for (p, terms) in per_tile.into_iter().flatten() {
        pixels[p] = Some(terms);
    }
    let pixels: Vec<PixelTerms> = pixels.into_iter().map(|p| p.expect("every pixel owned by a tile")).collect();

    let alpha: Vec<f64> = pixels
        .iter()
        .map(|p| p.terms.iter().map(|&(_, wt)| wt).sum::<f64>().clamp(0.0, 1.0))
        .collect();
    let transmittance = pixels.iter().map(|p| p.transmittance).collect();
    let blend_with = |dim: usize, value: &dyn Fn(&Gaussian, usize) -> f64| {
        let mut data = vec![0.0; w * h * dim];
        for (p, px) in pixels.iter().enumerate() {
            let row = &mut data[p * dim..(p + 1) * dim];
            for &(i, wt) in &px.terms {
                let g = &scene.gaussians[i as usize];
                for (k, r) in row.iter_mut().enumerate() {
                    *r += wt * value(g, k);
                }
            }
        }
        Tensor::new(vec![w * h, dim], data).expect("sized above")
    };
    let color = channels.color.then(|| blend_with(3, &|g, k| g.color[k]));
    let semantic_map = channels.semantic.then(|| blend_with(SEMANTIC_DIM, &|g, k| g.semantic[k]));
    let depth = channels.depth.then(|| {
        pixels
            .iter()
            .map(|px| {
                let (mut num, mut den) = (0.0, 0.0);
                for &(i, wt) in &px.terms {
                    num += wt * proj[i as usize].depth;
                    den += wt;
                }
                if den > 0.0 {
                    num / den
                } else {
                    0.0
                }
            })
            .collect()
    });
    let label_map = channels.label.then(|| {
        pixels
            .iter()
            .zip(&alpha)
            .map(|(px, &a)| {
                if a < 0.5 {
                    return IGNORE_LABEL;
                }
                let mut best: Option<(u32, f64)> = None;
                for &(i, wt) in &px.terms {
                    if best.is_none_or(|(_, bw)| wt > bw) {
                        best = Some((i, wt));
                    }
                }
                best.map_or(IGNORE_LABEL, |(i, _)| scene.gaussians[i as usize].label)
            })
            .collect()
    });
    let contrib = channels.contrib.then(|| {
        let mut m = SparseRowMap::new(scene.len());
        for px in &pixels {
            m.push_row(px.terms.iter().copied());
        }
        Arc::new(m)
    });
    Ok(RenderOutput {
        width: cam.width,
        height: cam.height,
        num_gaussians: scene.len(),
        color,
        semantic_map,
        depth,
        alpha,
        transmittance,
        contrib,
        label_map,
    })
}

/// `ds_i = Σ_p w_i(p) · grad(p)`, accumulated pixel by pixel.
pub fn render_backward(out: &RenderOutput, grad_semantic_map: &Tensor) -> Result<Tensor, RasterError> {
    let contrib = out.contrib.as_ref().ok_or(RasterError::ContribNotRetained)?;
    let expected = vec![out.pixel_count(), SEMANTIC_DIM];
    if grad_semantic_map.shape() != expected.as_slice() {
        return Err(RasterError::ShapeMismatch {
            expected,
            got: grad_semantic_map.shape().to_vec(),
        });
    }
    let ds = contrib.apply_transpose(grad_semantic_map.data(), SEMANTIC_DIM);
    Ok(Tensor::new(vec![out.num_gaussians, SEMANTIC_DIM], ds).expect("shape matches"))
}

/// Hard label render: label of the largest-weight contributor, or the ignore
/// label where alpha < 0.5.
pub fn rasterize_labels(scene: &GaussianScene, cam: &Camera, cfg: &RasterConfig) -> Result<Vec<u16>, RasterError> {
    let channels = Channels {
        label: true,
        ..Channels::default()
    };
    Ok(render(scene, cam, channels, cfg)?.label_map.expect("requested"))
}
