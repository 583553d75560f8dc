//! Scene, point-cloud, dense-map, camera and vocabulary file formats.
//!
//! Binary formats are little-endian:
//!
//! | file | header | record |
//! |------|--------|--------|
//! | `SGS1` scene | magic, version u32, count u64, flags u64 (24 B) | position 3×f32, rotation 4×f32, scale 3×f32, opacity f32, color 3×f32, semantic 16×f32, label u16, instance u32 (126 B) |
//! | `SPC1` point cloud | magic, version u32, count u64 (16 B) | position 3×f32, label u16, instance u32 (18 B) |
//! | `SDM1` dense map | magic, H u32, W u32, D u32 (16 B) | H·W·D f32, row-major |
//!
//! Cameras are JSON objects; vocabularies are text (`M D` header line, then
//! `name v1 … vD` per class).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Camera, DenseTargetMap, Gaussian, GaussianScene, LabelVocabulary, LabeledPointCloud, SceneError, SEMANTIC_DIM};
use crate::autodiff::Tensor;
use crate::bytes::Reader;

pub const SCENE_MAGIC: &[u8; 4] = b"SGS1";
pub const SCENE_VERSION: u32 = 1;
pub const SCENE_HEADER_BYTES: usize = 24;
pub const SCENE_RECORD_BYTES: usize = 4 * (3 + 4 + 3 + 1 + 3 + SEMANTIC_DIM) + 2 + 4;
pub const FLAG_SEMANTICS: u64 = 1;
pub const FLAG_LABELS: u64 = 2;

pub const CLOUD_MAGIC: &[u8; 4] = b"SPC1";
pub const CLOUD_VERSION: u32 = 1;
pub const CLOUD_HEADER_BYTES: usize = 16;
pub const CLOUD_RECORD_BYTES: usize = 12 + 2 + 4;

pub const DENSE_MAGIC: &[u8; 4] = b"SDM1";
pub const DENSE_HEADER_BYTES: usize = 16;

/// Quaternions further than this from unit norm are rejected at load.
const QUAT_RENORM_LIMIT: f64 = 1e-3;

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, SceneError> {
    fs::read(path).map_err(|source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), SceneError> {
    fs::write(path, bytes).map_err(|source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn push_f32s(out: &mut Vec<u8>, vals: &[f64]) {
    for &v in vals {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn read_f32s<const N: usize>(r: &mut Reader<'_>) -> [f64; N] {
    let mut a = [0.0; N];
    for v in &mut a {
        *v = r.f32().expect("record length checked") as f64;
    }
    a
}

fn record_count(declared: u64, payload: usize, record: usize) -> Result<usize, SceneError> {
    let actual = (payload / record) as u64;
    if !payload.is_multiple_of(record) || actual != declared {
        return Err(SceneError::CountMismatch { declared, actual });
    }
    Ok(actual as usize)
}

pub fn encode_scene(scene: &GaussianScene) -> Result<Vec<u8>, SceneError> {
    scene.validate()?;
    let mut out = Vec::with_capacity(SCENE_HEADER_BYTES + scene.len() * SCENE_RECORD_BYTES);
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    out.extend_from_slice(&(scene.len() as u64).to_le_bytes());
    let mut flags = 0u64;
    if scene.has_semantics {
        flags |= FLAG_SEMANTICS;
    }
    if scene.has_labels {
        flags |= FLAG_LABELS;
    }
    out.extend_from_slice(&flags.to_le_bytes());
    for g in &scene.gaussians {
        push_f32s(&mut out, &g.position);
        push_f32s(&mut out, &g.rotation);
        push_f32s(&mut out, &g.scale);
        push_f32s(&mut out, &[g.opacity]);
        push_f32s(&mut out, &g.color);
        push_f32s(&mut out, &g.semantic);
        out.extend_from_slice(&g.label.to_le_bytes());
        out.extend_from_slice(&g.instance.to_le_bytes());
    }
    Ok(out)
}

/// Parses an `SGS1` buffer. Quaternions within 1e-3 of unit norm are
/// renormalized when they miss the 1e-6 invariant; others are rejected.
pub fn decode_scene(bytes: &[u8]) -> Result<GaussianScene, SceneError> {
    let mut r = Reader::new(bytes);
    let header = |what: &str| SceneError::MalformedHeader(what.to_string());
    let magic = r.take(4).map_err(|_| header("shorter than magic"))?;
    if magic != SCENE_MAGIC {
        return Err(header("missing SGS1 magic"));
    }
    let version = r.u32().map_err(|_| header("truncated header"))?;
    if version != SCENE_VERSION {
        return Err(SceneError::MalformedHeader(format!("unsupported version {version}")));
    }
    let declared = r.u64().map_err(|_| header("truncated header"))?;
    let flags = r.u64().map_err(|_| header("truncated header"))?;
    if flags & !(FLAG_SEMANTICS | FLAG_LABELS) != 0 {
        return Err(SceneError::MalformedHeader(format!("unknown flag bits {flags:#x}")));
    }
    let n = record_count(declared, r.remaining(), SCENE_RECORD_BYTES)?;
    let mut gaussians = Vec::with_capacity(n);
    for index in 0..n {
        let mut g = Gaussian {
            position: read_f32s(&mut r),
            rotation: read_f32s(&mut r),
            scale: read_f32s(&mut r),
            opacity: read_f32s::<1>(&mut r)[0],
            color: read_f32s(&mut r),
            semantic: read_f32s(&mut r),
            label: r.u16().expect("record length checked"),
            instance: r.u32().expect("record length checked"),
        };
        let norm = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm.is_finite() && (norm - 1.0).abs() > 1e-6 && (norm - 1.0).abs() <= QUAT_RENORM_LIMIT {
            g.rotation.iter_mut().for_each(|v| *v /= norm);
        }
        g.validate(index)?;
        gaussians.push(g);
    }
    Ok(GaussianScene {
        gaussians,
        scene_id: String::new(),
        domain_tag: String::new(),
        has_semantics: flags & FLAG_SEMANTICS != 0,
        has_labels: flags & FLAG_LABELS != 0,
    })
}

/// Loads a scene; its id is the file stem.
pub fn load_scene(path: &Path) -> Result<GaussianScene, SceneError> {
    let mut scene = decode_scene(&read_file(path)?)?;
    scene.scene_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(scene)
}

pub fn save_scene(scene: &GaussianScene, path: &Path) -> Result<(), SceneError> {
    write_file(path, &encode_scene(scene)?)
}

pub fn encode_point_cloud(cloud: &LabeledPointCloud) -> Result<Vec<u8>, SceneError> {
    cloud.validate()?;
    let mut out = Vec::with_capacity(CLOUD_HEADER_BYTES + cloud.len() * CLOUD_RECORD_BYTES);
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    for k in 0..cloud.len() {
        push_f32s(&mut out, &cloud.positions[k]);
        out.extend_from_slice(&cloud.labels[k].to_le_bytes());
        out.extend_from_slice(&cloud.instances[k].to_le_bytes());
    }
    Ok(out)
}

pub fn decode_point_cloud(bytes: &[u8]) -> Result<LabeledPointCloud, SceneError> {
    let mut r = Reader::new(bytes);
    let header = |what: &str| SceneError::MalformedHeader(what.to_string());
    if r.take(4).map_err(|_| header("shorter than magic"))? != CLOUD_MAGIC {
        return Err(header("missing SPC1 magic"));
    }
    let version = r.u32().map_err(|_| header("truncated header"))?;
    if version != CLOUD_VERSION {
        return Err(SceneError::MalformedHeader(format!("unsupported version {version}")));
    }
    let declared = r.u64().map_err(|_| header("truncated header"))?;
    let n = record_count(declared, r.remaining(), CLOUD_RECORD_BYTES)?;
    let mut cloud = LabeledPointCloud {
        positions: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        instances: Vec::with_capacity(n),
    };
    for index in 0..n {
        let p: [f64; 3] = read_f32s(&mut r);
        if !p.iter().all(|v| v.is_finite()) {
            return Err(SceneError::InvariantViolation {
                index,
                field: "position",
                detail: format!("{p:?}"),
            });
        }
        cloud.positions.push(p);
        cloud.labels.push(r.u16().expect("record length checked"));
        cloud.instances.push(r.u32().expect("record length checked"));
    }
    Ok(cloud)
}

pub fn load_point_cloud(path: &Path) -> Result<LabeledPointCloud, SceneError> {
    decode_point_cloud(&read_file(path)?)
}

pub fn save_point_cloud(cloud: &LabeledPointCloud, path: &Path) -> Result<(), SceneError> {
    write_file(path, &encode_point_cloud(cloud)?)
}

pub fn encode_dense_map(map: &DenseTargetMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(DENSE_HEADER_BYTES + map.data.len() * 4);
    out.extend_from_slice(DENSE_MAGIC);
    out.extend_from_slice(&map.height.to_le_bytes());
    out.extend_from_slice(&map.width.to_le_bytes());
    out.extend_from_slice(&map.dim.to_le_bytes());
    for v in &map.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_dense_map(bytes: &[u8]) -> Result<DenseTargetMap, SceneError> {
    let mut r = Reader::new(bytes);
    let header = |what: &str| SceneError::MalformedHeader(what.to_string());
    if r.take(4).map_err(|_| header("shorter than magic"))? != DENSE_MAGIC {
        return Err(header("missing SDM1 magic"));
    }
    let h = r.u32().map_err(|_| header("truncated header"))?;
    let w = r.u32().map_err(|_| header("truncated header"))?;
    let d = r.u32().map_err(|_| header("truncated header"))?;
    let declared = (h as u64) * (w as u64) * (d as u64);
    let n = record_count(declared, r.remaining(), 4)?;
    let data = r
        .take(n * 4)
        .expect("length checked")
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    DenseTargetMap::new(h, w, d, data)
}

pub fn load_dense_map(path: &Path) -> Result<DenseTargetMap, SceneError> {
    decode_dense_map(&read_file(path)?)
}

pub fn save_dense_map(map: &DenseTargetMap, path: &Path) -> Result<(), SceneError> {
    write_file(path, &encode_dense_map(map))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    world_to_camera: Vec<f64>,
}

pub fn parse_camera(text: &str) -> Result<Camera, SceneError> {
    let j: CameraJson = serde_json::from_str(text).map_err(|e| SceneError::InvalidCamera(e.to_string()))?;
    let m: [f64; 16] = j.world_to_camera.as_slice().try_into().map_err(|_| {
        SceneError::InvalidCamera(format!("world_to_camera needs 16 numbers, got {}", j.world_to_camera.len()))
    })?;
    let cam = Camera {
        fx: j.fx,
        fy: j.fy,
        cx: j.cx,
        cy: j.cy,
        width: j.width,
        height: j.height,
        world_to_camera: m,
    };
    cam.validate()?;
    Ok(cam)
}

pub fn camera_to_json(cam: &Camera) -> String {
    let j = CameraJson {
        fx: cam.fx,
        fy: cam.fy,
        cx: cam.cx,
        cy: cam.cy,
        width: cam.width,
        height: cam.height,
        world_to_camera: cam.world_to_camera.to_vec(),
    };
    serde_json::to_string_pretty(&j).expect("camera serializes")
}

pub fn load_camera(path: &Path) -> Result<Camera, SceneError> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| SceneError::InvalidCamera(e.to_string()))?;
    parse_camera(text)
}

pub fn save_camera(cam: &Camera, path: &Path) -> Result<(), SceneError> {
    write_file(path, camera_to_json(cam).as_bytes())
}

pub fn parse_vocabulary(text: &str) -> Result<LabelVocabulary, SceneError> {
    let bad = |s: String| SceneError::InvalidVocabulary(s);
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let head = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let mut it = head.split_whitespace();
    let (m, d) = match (it.next(), it.next(), it.next()) {
        (Some(m), Some(d), None) => (
            m.parse::<usize>().map_err(|e| bad(format!("class count: {e}")))?,
            d.parse::<usize>().map_err(|e| bad(format!("dimension: {e}")))?,
        ),
        _ => return Err(bad(format!("header must be \"M D\", got {head:?}"))),
    };
    if d == 0 {
        return Err(bad("dimension must be positive".into()));
    }
    let mut names = Vec::new();
    let mut data = Vec::new();
    for (k, line) in lines.enumerate() {
        if k >= m {
            return Err(bad(format!("more than {m} class lines")));
        }
        let mut it = line.split_whitespace();
        let name = it.next().expect("non-empty line");
        let before = data.len();
        for tok in it {
            let v: f64 = tok.parse().map_err(|e| bad(format!("class {name:?}: {e}")))?;
            if !v.is_finite() {
                return Err(bad(format!("class {name:?}: non-finite value")));
            }
            data.push(v);
        }
        if data.len() - before != d {
            return Err(bad(format!("class {name:?} has {} values, expected {d}", data.len() - before)));
        }
        names.push(name.to_string());
    }
    if names.len() != m {
        return Err(bad(format!("header declares {m} classes, found {}", names.len())));
    }
    let e = Tensor::matrix(m, d, data).map_err(|e| bad(e.to_string()))?;
    LabelVocabulary::new(names, e)
}

/// Text form; values use the shortest representation that parses back exactly.
pub fn vocabulary_to_text(v: &LabelVocabulary) -> String {
    let mut s = format!("{} {}\n", v.len(), v.dim());
    for (i, name) in v.names().iter().enumerate() {
        s.push_str(name);
        for x in v.embeddings().row(i) {
            s.push(' ');
            s.push_str(&x.to_string());
        }
        s.push('\n');
    }
    s
}

pub fn load_vocabulary(path: &Path) -> Result<LabelVocabulary, SceneError> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| SceneError::InvalidVocabulary(e.to_string()))?;
    parse_vocabulary(text)
}

pub fn save_vocabulary(v: &LabelVocabulary, path: &Path) -> Result<(), SceneError> {
    write_file(path, vocabulary_to_text(v).as_bytes())
}
