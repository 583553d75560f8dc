//! Text-query classification, mIoU and the evaluation protocols.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::ccl::{decode, CclError, Decoder, DecoderParams};
use crate::data::{Dataset, SceneData, Split};
use crate::gsr::{predict_semantics, GsrError};
use crate::raster::{render, Channels, RasterError};
use crate::scene::{GaussianScene, LabelVocabulary, IGNORE_LABEL, SEMANTIC_DIM};
use crate::train::{Model, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scene carries no semantic vectors")]
    MissingSemantics,
    #[error("prediction has {pred} entries, ground truth {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("nothing to evaluate: {0}")]
    EmptySplit(String),
    #[error("unknown protocol {0:?}")]
    UnknownProtocol(String),
    #[error("alpha has {alpha} entries for {pixels} pixels")]
    AlphaMismatch { alpha: usize, pixels: usize },
    #[error(transparent)]
    Ccl(#[from] CclError),
    #[error(transparent)]
    Gsr(#[from] GsrError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Class with the largest `e_m · y / T`; ties go to the lowest id.
fn argmax_rows(decoded: &Tensor, vocab: &LabelVocabulary, temperature: f64) -> Vec<u16> {
    let e = vocab.embeddings();
    (0..decoded.rows())
        .map(|i| {
            let y = decoded.row(i);
            let mut best = (f64::NEG_INFINITY, 0usize);
            for m in 0..vocab.len() {
                let z = e.row(m).iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / temperature;
                if z > best.0 {
                    best = (z, m);
                }
            }
            best.1 as u16
        })
        .collect()
}

/// Classifies `N × 16` semantic rows against the full vocabulary.
pub fn classify_features(
    feats: &Tensor,
    vocab: &LabelVocabulary,
    decoder: &DecoderParams,
    temperature: f64,
) -> Result<Vec<u16>, EvalError> {
    if feats.rows() == 0 {
        return Ok(Vec::new());
    }
    let decoded = decode(decoder, Decoder::Phi, feats)?;
    if decoded.cols() != vocab.dim() {
        return Err(CclError::DimensionMismatch(format!(
            "decoder width {} vs vocabulary width {}",
            decoded.cols(),
            vocab.dim()
        ))
        .into());
    }
    Ok(argmax_rows(&decoded, vocab, temperature))
}

pub fn classify_gaussians(
    scene: &GaussianScene,
    vocab: &LabelVocabulary,
    decoder: &DecoderParams,
    temperature: f64,
) -> Result<Vec<u16>, EvalError> {
    if !scene.has_semantics {
        return Err(EvalError::MissingSemantics);
    }
    classify_features(&scene.semantics_tensor(), vocab, decoder, temperature)
}

/// Pixel analogue of [`classify_gaussians`]; pixels with alpha below 0.5 are
/// marked ignore.
pub fn classify_pixels(
    semantic_map: &Tensor,
    alpha: &[f64],
    vocab: &LabelVocabulary,
    decoder: &DecoderParams,
    temperature: f64,
) -> Result<Vec<u16>, EvalError> {
    if semantic_map.rank() != 2 || semantic_map.cols() != SEMANTIC_DIM {
        return Err(CclError::ShapeMismatch(format!("semantic map {:?}", semantic_map.shape())).into());
    }
    if alpha.len() != semantic_map.rows() {
        return Err(EvalError::AlphaMismatch {
            alpha: alpha.len(),
            pixels: semantic_map.rows(),
        });
    }
    let covered: Vec<usize> = (0..alpha.len()).filter(|&p| alpha[p] >= 0.5).collect();
    let mut out = vec![IGNORE_LABEL; alpha.len()];
    if covered.is_empty() {
        return Ok(out);
    }
    let rows: Vec<&[f64]> = covered.iter().map(|&p| semantic_map.row(p)).collect();
    let feats = Tensor::from_rows(&rows).expect("rows share a width");
    for (&p, c) in covered.iter().zip(classify_features(&feats, vocab, decoder, temperature)?) {
        out[p] = c;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "CSA3D")]
    Csa3d,
    #[serde(rename = "CSA2D")]
    Csa2d,
    #[serde(rename = "OVA3D")]
    Ova3d,
    #[serde(rename = "OVA2D")]
    Ova2d,
    #[serde(rename = "NVA")]
    Nva,
    #[serde(rename = "CDA3D")]
    Cda3d,
    #[serde(rename = "CDA2D")]
    Cda2d,
}

impl Protocol {
    pub const ALL: [Protocol; 7] = [
        Protocol::Csa3d,
        Protocol::Csa2d,
        Protocol::Ova3d,
        Protocol::Ova2d,
        Protocol::Nva,
        Protocol::Cda3d,
        Protocol::Cda2d,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Protocol::Csa3d => "CSA3D",
            Protocol::Csa2d => "CSA2D",
            Protocol::Ova3d => "OVA3D",
            Protocol::Ova2d => "OVA2D",
            Protocol::Nva => "NVA",
            Protocol::Cda3d => "CDA3D",
            Protocol::Cda2d => "CDA2D",
        }
    }

    pub fn split(self) -> Split {
        match self {
            Protocol::Csa3d | Protocol::Csa2d | Protocol::Ova3d | Protocol::Ova2d => Split::Val,
            Protocol::Nva => Split::NovelView,
            Protocol::Cda3d | Protocol::Cda2d => Split::CrossDomain,
        }
    }

    /// Scored on Gaussians rather than pixels.
    pub fn is_3d(self) -> bool {
        matches!(self, Protocol::Csa3d | Protocol::Ova3d | Protocol::Cda3d)
    }
}

impl FromStr for Protocol {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, EvalError> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| EvalError::UnknownProtocol(s.to_string()))
    }
}

/// Per-class true positive, false positive and false negative counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    /// Positions where `gt` is ignore or out of range are skipped; an
    /// out-of-range prediction counts as a miss of the true class only.
    pub fn add(&mut self, pred: &[u16], gt: &[u16]) -> Result<(), EvalError> {
        if pred.len() != gt.len() {
            return Err(EvalError::LengthMismatch {
                pred: pred.len(),
                gt: gt.len(),
            });
        }
        let m = self.classes();
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if g == IGNORE_LABEL as usize || g >= m {
                continue;
            }
            if p == g {
                self.tp[g] += 1;
            } else {
                self.fn_[g] += 1;
                if p < m {
                    self.fp[p] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for c in 0..self.classes().min(other.classes()) {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
    }

    /// IoU of class `c`, or `None` when it has neither support nor predictions.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let denom = self.tp[c] + self.fp[c] + self.fn_[c];
        (denom > 0).then(|| self.tp[c] as f64 / denom as f64)
    }

    /// Report over `scored` classes; the rest appear with a null IoU.
    pub fn report(&self, names: &[String], scored: &[usize], protocol: Option<Protocol>) -> MetricReport {
        let scored: BTreeSet<usize> = scored.iter().copied().collect();
        let per_class: Vec<ClassScore> = (0..self.classes())
            .map(|c| ClassScore {
                id: c,
                name: names.get(c).cloned().unwrap_or_else(|| c.to_string()),
                iou: if scored.contains(&c) { self.iou(c) } else { None },
                tp: self.tp[c],
                fp: self.fp[c],
                fn_: self.fn_[c],
            })
            .collect();
        let ious: Vec<f64> = per_class.iter().filter_map(|c| c.iou).collect();
        MetricReport {
            protocol,
            miou: if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 },
            scored_classes: ious.len(),
            seen_miou: None,
            per_class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub id: usize,
    pub name: String,
    /// Null when the class was not scored or had no support and no predictions.
    pub iou: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub protocol: Option<Protocol>,
    /// Mean over classes with a non-null IoU; 0 when there are none.
    pub miou: f64,
    pub scored_classes: usize,
    /// Open-vocabulary protocols only: mean IoU of seen classes, counted over
    /// positions whose ground truth is a seen class.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seen_miou: Option<f64>,
    pub per_class: Vec<ClassScore>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let width = self.per_class.iter().map(|c| c.name.len()).max().unwrap_or(4).max(5);
        let mut s = String::new();
        let tag = self.protocol.map_or("-", Protocol::tag);
        let _ = writeln!(s, "protocol {tag}  mIoU {:.4}  classes {}", self.miou, self.scored_classes);
        if let Some(seen) = self.seen_miou {
            let _ = writeln!(s, "seen-class mIoU {seen:.4}");
        }
        let _ = writeln!(s, "{:>3}  {:<width$}  {:>7}  {:>9}  {:>9}  {:>9}", "id", "class", "IoU", "TP", "FP", "FN");
        for c in &self.per_class {
            let iou = c.iou.map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                s,
                "{:>3}  {:<width$}  {:>7}  {:>9}  {:>9}  {:>9}",
                c.id, c.name, iou, c.tp, c.fp, c.fn_
            );
        }
        s
    }
}

/// mIoU of one prediction over `classes` ids, all classes scored.
pub fn miou(pred: &[u16], gt: &[u16], classes: usize) -> Result<MetricReport, EvalError> {
    let mut c = Confusion::new(classes);
    c.add(pred, gt)?;
    let all: Vec<usize> = (0..classes).collect();
    Ok(c.report(&[], &all, None))
}

/// Predictions and ground truth for one scene under one protocol.
fn scene_pairs(
    entry: &SceneData,
    model: &Model,
    vocab: &LabelVocabulary,
    cfg: &TrainConfig,
    three_d: bool,
) -> Result<Vec<(Vec<u16>, Vec<u16>)>, EvalError> {
    let predicted = predict_semantics(&entry.scene, &model.gsr, &cfg.gsr)?;
    let t = cfg.loss.temperature;
    if three_d {
        let pred = classify_gaussians(&predicted, vocab, &model.decoder, t)?;
        return Ok(vec![(pred, entry.scene.labels())]);
    }
    let channels = Channels {
        semantic: true,
        label: true,
        ..Channels::default()
    };
    entry
        .cameras
        .iter()
        .map(|cam| {
            let out = render(&predicted, cam, channels, &cfg.raster)?;
            let map = out.semantic_map.as_ref().expect("semantic channel requested");
            let pred = classify_pixels(map, &out.alpha, vocab, &model.decoder, t)?;
            Ok((pred, out.label_map.expect("label channel requested")))
        })
        .collect()
}

fn present_classes<'a>(entries: impl Iterator<Item = &'a SceneData>, classes: usize) -> BTreeSet<usize> {
    entries
        .flat_map(|e| e.scene.gaussians.iter().map(|g| g.label as usize))
        .filter(|&l| l < classes)
        .collect()
}

/// Scores `model` on the protocol's split of `dataset`.
///
/// OVA averages unseen classes only and adds the seen-class mean; CDA maps
/// ground truth outside the classes shared by the training and cross-domain
/// scenes to ignore and averages the shared ones.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    protocol: Protocol,
    cfg: &TrainConfig,
) -> Result<MetricReport, EvalError> {
    let vocab = cfg.vocabulary(&dataset.vocabulary)?;
    let m = vocab.len();
    let entries: Vec<&SceneData> = dataset
        .split(protocol.split())
        .filter(|e| protocol.is_3d() || !e.cameras.is_empty())
        .collect();
    if entries.is_empty() {
        return Err(EvalError::EmptySplit(format!("no {:?} scenes for {}", protocol.split(), protocol.tag())));
    }
    let scored: Vec<usize> = match protocol {
        Protocol::Ova3d | Protocol::Ova2d => vocab.unseen_classes(),
        Protocol::Cda3d | Protocol::Cda2d => {
            let train = present_classes(dataset.split(Split::Train), m);
            let cross = present_classes(entries.iter().copied(), m);
            train.intersection(&cross).copied().collect()
        }
        _ => vocab.all_classes(),
    };
    if scored.is_empty() {
        return Err(EvalError::EmptySplit(format!("no classes to score for {}", protocol.tag())));
    }
    let pairs: Vec<Vec<(Vec<u16>, Vec<u16>)>> = entries
        .par_iter()
        .map(|e| scene_pairs(e, model, &vocab, cfg, protocol.is_3d()))
        .collect::<Result<_, _>>()?;

    let restricted = matches!(protocol, Protocol::Cda3d | Protocol::Cda2d);
    let keep: Vec<bool> = (0..m).map(|c| !restricted || scored.contains(&c)).collect();
    let seen: Vec<bool> = (0..m).map(|c| !vocab.unseen_mask()[c]).collect();
    let mask = |gt: &[u16], allow: &[bool]| -> Vec<u16> {
        gt.iter()
            .map(|&g| if (g as usize) < m && allow[g as usize] { g } else { IGNORE_LABEL })
            .collect()
    };
    let mut conf = Confusion::new(m);
    let mut seen_conf = Confusion::new(m);
    for (pred, gt) in pairs.iter().flatten() {
        conf.add(pred, &mask(gt, &keep))?;
        seen_conf.add(pred, &mask(gt, &seen))?;
    }
    let mut report = conf.report(vocab.names(), &scored, Some(protocol));
    if matches!(protocol, Protocol::Ova3d | Protocol::Ova2d) {
        let r = seen_conf.report(vocab.names(), &vocab.seen_classes(), None);
        report.seen_miou = Some(r.miou);
    }
    Ok(report)
}
