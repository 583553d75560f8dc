//! Decoders from the 16-d semantic space to the text-embedding space and the
//! alignment losses used for training.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Checkpoint, CheckpointError, Graph, Tensor, Var};
use crate::scene::{DenseTargetMap, LabelVocabulary, IGNORE_LABEL, SEMANTIC_DIM};

/// Hidden width of both decoders.
pub const DECODER_HIDDEN: usize = 128;

#[derive(Debug, Error)]
pub enum CclError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no Gaussian or pixel carries a trainable label")]
    NoValidTargets,
    #[error("label {label} outside a {classes}-class vocabulary")]
    LabelOutOfRange { label: u16, classes: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite loss term: {0}")]
    NonFinite(String),
    #[error("unknown reduction {0:?}")]
    UnknownReduction(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl FromStr for Reduction {
    type Err = CclError;
    fn from_str(s: &str) -> Result<Self, CclError> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            _ => Err(CclError::UnknownReduction(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Logits are divided by this.
    pub temperature: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            reduction: Reduction::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoder {
    /// Used by both cross-entropy terms.
    Phi,
    /// Used by the dense cosine term.
    Psi,
}

const NAMES: [&str; 8] = [
    "phi.w1", "phi.b1", "phi.w2", "phi.b2", "psi.w1", "psi.b1", "psi.w2", "psi.b2",
];

impl Decoder {
    fn offset(self) -> usize {
        match self {
            Decoder::Phi => 0,
            Decoder::Psi => 4,
        }
    }
}

/// Two independent `16 → 128 → D` rectified MLPs.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    tensors: Vec<Tensor>,
}

fn shapes(dim: usize) -> [Vec<usize>; 8] {
    let one = [
        vec![SEMANTIC_DIM, DECODER_HIDDEN],
        vec![1, DECODER_HIDDEN],
        vec![DECODER_HIDDEN, dim],
        vec![1, dim],
    ];
    [
        one[0].clone(),
        one[1].clone(),
        one[2].clone(),
        one[3].clone(),
        one[0].clone(),
        one[1].clone(),
        one[2].clone(),
        one[3].clone(),
    ]
}

impl DecoderParams {
    pub fn names() -> &'static [&'static str] {
        &NAMES
    }

    /// Xavier-uniform weights, zero biases; `dim` is the embedding width.
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = shapes(dim)
            .into_iter()
            .map(|shape| {
                if shape[0] == 1 {
                    return Tensor::zeros(&shape);
                }
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let data = (0..shape[0] * shape[1]).map(|_| rng.gen_range(-limit..limit)).collect();
                Tensor::new(shape, data).expect("sized from shape")
            })
            .collect();
        Self { tensors }
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Self {
            tensors: shapes(dim).iter().map(|s| Tensor::filled(s, value)).collect(),
        }
    }

    /// Output width D.
    pub fn dim(&self) -> usize {
        self.tensors[2].cols()
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

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) -> Result<(), CclError> {
        for (name, t) in self.iter() {
            ck.push(name, t.clone())?;
        }
        Ok(())
    }

    pub fn from_checkpoint(ck: &Checkpoint, dim: usize) -> Result<Self, CclError> {
        let tensors = NAMES
            .iter()
            .zip(shapes(dim))
            .map(|(name, shape)| ck.expect(name, &shape).cloned())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { tensors })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DecoderVars {
        DecoderVars(self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect())
    }
}

/// Graph handles of bound [`DecoderParams`], in canonical order.
#[derive(Debug, Clone)]
pub struct DecoderVars(pub Vec<Var>);

impl DecoderVars {
    pub fn named(&self) -> impl Iterator<Item = (&'static str, Var)> + '_ {
        NAMES.iter().copied().zip(self.0.iter().copied())
    }

    fn w(&self, which: Decoder, k: usize) -> Var {
        self.0[which.offset() + k]
    }
}

fn check_width(g: &Graph, x: Var) -> Result<(), CclError> {
    let s = g.value(x).shape();
    if s.len() != 2 || s[1] != SEMANTIC_DIM {
        return Err(CclError::ShapeMismatch(format!("decoder input {s:?}, expected [n, {SEMANTIC_DIM}]")));
    }
    Ok(())
}

fn hidden(g: &mut Graph, d: &DecoderVars, which: Decoder, x: Var) -> Result<Var, CclError> {
    check_width(g, x)?;
    let h = g.matmul(x, d.w(which, 0))?;
    let h = g.add_bias(h, d.w(which, 1))?;
    Ok(g.relu(h))
}

/// `relu(x W1 + b1) W2 + b2`, row by row.
pub fn decode_graph(g: &mut Graph, d: &DecoderVars, which: Decoder, x: Var) -> Result<Var, CclError> {
    let h = hidden(g, d, which, x)?;
    let y = g.matmul(h, d.w(which, 2))?;
    Ok(g.add_bias(y, d.w(which, 3))?)
}

pub fn decode(params: &DecoderParams, which: Decoder, feats: &Tensor) -> Result<Tensor, CclError> {
    let mut g = Graph::new();
    let d = params.bind(&mut g, false);
    let x = g.constant(feats.clone());
    let y = decode_graph(&mut g, &d, which, x)?;
    Ok(g.value(y).clone())
}

/// Vocabulary rows the training softmax may use and the label → column map.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSubset {
    pub classes: Vec<usize>,
    column: Vec<Option<usize>>,
}

impl ClassSubset {
    /// Seen classes only.
    pub fn training(vocab: &LabelVocabulary) -> Self {
        Self::from_classes(vocab.len(), vocab.seen_classes())
    }

    pub fn all(vocab: &LabelVocabulary) -> Self {
        Self::from_classes(vocab.len(), vocab.all_classes())
    }

    fn from_classes(total: usize, classes: Vec<usize>) -> Self {
        let mut column = vec![None; total];
        for (c, &k) in classes.iter().enumerate() {
            column[k] = Some(c);
        }
        Self { classes, column }
    }

    /// Softmax column of `label`, `None` for ignore and excluded classes.
    pub fn column(&self, label: u16) -> Result<Option<usize>, CclError> {
        if label == IGNORE_LABEL {
            return Ok(None);
        }
        match self.column.get(label as usize) {
            Some(c) => Ok(*c),
            None => Err(CclError::LabelOutOfRange {
                label,
                classes: self.column.len(),
            }),
        }
    }

    /// `|classes| × D` embedding rows, transposed to `D × |classes|`.
    fn embeddings_t(&self, vocab: &LabelVocabulary) -> Tensor {
        let e = vocab.embeddings();
        let rows: Vec<&[f64]> = self.classes.iter().map(|&k| e.row(k)).collect();
        Tensor::from_rows(&rows).expect("vocabulary rows share a width").transpose()
    }
}

/// Cross-entropy of `φ(x) · Eᵀ / T` against `labels` over the rows whose
/// label maps to a column of `subset`. Returns the scalar and the row count.
///
/// The product is evaluated as `h · (W2 Eᵀ) + b2 Eᵀ`, which equals the
/// decoded dot product without materialising `n × D` decoder outputs.
#[allow(clippy::too_many_arguments)]
pub fn cross_entropy_graph(
    g: &mut Graph,
    d: &DecoderVars,
    x: Var,
    labels: &[u16],
    vocab: &LabelVocabulary,
    subset: &ClassSubset,
    cfg: &LossConfig,
) -> Result<(Var, usize), CclError> {
    let n = g.value(x).rows();
    if labels.len() != n {
        return Err(CclError::ShapeMismatch(format!("{n} rows but {} labels", labels.len())));
    }
    let w2 = g.value(d.w(Decoder::Phi, 2)).shape().to_vec();
    if w2[1] != vocab.dim() {
        return Err(CclError::DimensionMismatch(format!(
            "decoder width {} vs vocabulary width {}",
            w2[1],
            vocab.dim()
        )));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if let Some(c) = subset.column(l)? {
            rows.push(i);
            targets.push(c);
        }
    }
    if rows.is_empty() {
        return Err(CclError::NoValidTargets);
    }
    let count = rows.len();
    let xs = if count == n { x } else { g.gather_rows(x, rows)? };
    let h = hidden(g, d, Decoder::Phi, xs)?;
    let et = g.constant(subset.embeddings_t(vocab));
    let w = g.matmul(d.w(Decoder::Phi, 2), et)?;
    let b = g.matmul(d.w(Decoder::Phi, 3), et)?;
    let logits = g.matmul(h, w)?;
    let logits = g.add_bias(logits, b)?;
    let logits = g.scale(logits, 1.0 / cfg.temperature);
    let ce = g.softmax_cross_entropy(logits, &targets)?;
    let loss = match cfg.reduction {
        Reduction::Mean => g.mean(ce),
        Reduction::Sum => g.sum(ce),
    };
    Ok((loss, count))
}

fn scalar_loss(
    feats: &Tensor,
    labels: &[u16],
    vocab: &LabelVocabulary,
    params: &DecoderParams,
    cfg: &LossConfig,
) -> Result<f64, CclError> {
    let mut g = Graph::new();
    let d = params.bind(&mut g, false);
    let x = g.constant(feats.clone());
    let (l, _) = cross_entropy_graph(&mut g, &d, x, labels, vocab, &ClassSubset::training(vocab), cfg)?;
    Ok(g.value(l).item())
}

/// 3D-to-text term over per-Gaussian semantics (`N × 16`).
pub fn loss_3d_to_text(
    semantics: &Tensor,
    labels: &[u16],
    vocab: &LabelVocabulary,
    params: &DecoderParams,
    cfg: &LossConfig,
) -> Result<f64, CclError> {
    scalar_loss(semantics, labels, vocab, params, cfg)
}

/// 2D-to-text term over a rendered map (`H·W × 16`, pixel-major).
pub fn loss_2d_to_text(
    semantic_map: &Tensor,
    label_map: &[u16],
    vocab: &LabelVocabulary,
    params: &DecoderParams,
    cfg: &LossConfig,
) -> Result<f64, CclError> {
    scalar_loss(semantic_map, label_map, vocab, params, cfg)
}

/// Pixels below this norm on either side are left out of the cosine term.
pub const COSINE_NORM_FLOOR: f64 = 1e-8;

/// `−mean cos(S(p), ψ(M(p)))` over pixels where both vectors are non-degenerate.
pub fn cosine_graph(
    g: &mut Graph,
    d: &DecoderVars,
    map: Var,
    target: &DenseTargetMap,
    cfg: &LossConfig,
) -> Result<(Var, usize), CclError> {
    let n = g.value(map).rows();
    let dim = g.value(d.w(Decoder::Psi, 2)).cols();
    if target.height as usize * target.width as usize != n || target.dim as usize != dim {
        return Err(CclError::DimensionMismatch(format!(
            "target {}x{}x{} vs {n} pixels decoded to {dim}",
            target.height, target.width, target.dim
        )));
    }
    let decoded = decode_graph(g, d, Decoder::Psi, map)?;
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rows: Vec<usize> = (0..n)
        .filter(|&p| {
            let t = target.pixel(p);
            let tn = t.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            tn > COSINE_NORM_FLOOR && norm(g.value(decoded).row(p)) > COSINE_NORM_FLOOR
        })
        .collect();
    if rows.is_empty() {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok((zero, 0));
    }
    let mut tdata = Vec::with_capacity(rows.len() * dim);
    for &p in &rows {
        tdata.extend(target.pixel(p).iter().map(|&v| v as f64));
    }
    let count = rows.len();
    let t = g.constant(Tensor::matrix(count, dim, tdata)?);
    let sel = g.gather_rows(decoded, rows)?;
    let cos = g.cosine_rows(t, sel)?;
    let agg = match cfg.reduction {
        Reduction::Mean => g.mean(cos),
        Reduction::Sum => g.sum(cos),
    };
    Ok((g.scale(agg, -1.0), count))
}

/// Dense cosine term for a rendered map (`H·W × 16`).
pub fn loss_cosine(
    semantic_map: &Tensor,
    target: &DenseTargetMap,
    params: &DecoderParams,
    cfg: &LossConfig,
) -> Result<f64, CclError> {
    let mut g = Graph::new();
    let d = params.bind(&mut g, false);
    let x = g.constant(semantic_map.clone());
    let (l, _) = cosine_graph(&mut g, &d, x, target, cfg)?;
    Ok(g.value(l).item())
}

/// Per-term values of one evaluation of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub l_3d_text: f64,
    pub l_2d_text: f64,
    pub l_cosine: f64,
    pub total: f64,
    pub gaussians: usize,
    pub pixels: usize,
    pub cosine_pixels: usize,
}

/// Unweighted sum of the three terms.
pub fn total_loss(
    l_3d_text: f64,
    l_2d_text: f64,
    l_cosine: f64,
    counts: (usize, usize, usize),
) -> Result<LossBreakdown, CclError> {
    for (name, v) in [("3d-to-text", l_3d_text), ("2d-to-text", l_2d_text), ("cosine", l_cosine)] {
        if !v.is_finite() {
            return Err(CclError::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(LossBreakdown {
        l_3d_text,
        l_2d_text,
        l_cosine,
        total: l_3d_text + l_2d_text + l_cosine,
        gaussians: counts.0,
        pixels: counts.1,
        cosine_pixels: counts.2,
    })
}
