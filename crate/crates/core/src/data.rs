//! Dataset manifests: which scenes, cameras and dense targets make up each
//! split, plus a writer for fully synthetic datasets.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::raster::{rasterize_labels, RasterConfig, RasterError};
use crate::scene::io::{
    load_camera, load_dense_map, load_scene, load_vocabulary, save_camera, save_dense_map, save_point_cloud,
    save_scene, save_vocabulary,
};
use crate::scene::{
    synth_cameras, synth_scene, Camera, CameraRig, DenseTargetMap, GaussianScene, LabelVocabulary, RoomSpec,
    SceneError, IGNORE_LABEL,
};

/// Default vocabulary file name, looked up next to the manifest.
pub const VOCABULARY_FILE: &str = "vocabulary.txt";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Scene {
        path: PathBuf,
        #[source]
        source: SceneError,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    NovelView,
    CrossDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub scene: PathBuf,
    pub cameras: Vec<PathBuf>,
    /// Either empty or one (possibly null) dense target per camera.
    #[serde(default)]
    pub targets: Vec<Option<PathBuf>>,
    pub split: Split,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, String> {
    let entries: Vec<ManifestEntry> = serde_json::from_str(text).map_err(|e| e.to_string())?;
    for (i, e) in entries.iter().enumerate() {
        if !e.targets.is_empty() && e.targets.len() != e.cameras.len() {
            return Err(format!(
                "entry {i}: {} targets for {} cameras",
                e.targets.len(),
                e.cameras.len()
            ));
        }
    }
    Ok(entries)
}

/// One manifest entry with every file loaded.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub path: PathBuf,
    pub scene: Arc<GaussianScene>,
    pub cameras: Vec<Camera>,
    pub targets: Vec<Option<Arc<DenseTargetMap>>>,
    pub split: Split,
}

impl SceneData {
    pub fn target(&self, view: usize) -> Option<&Arc<DenseTargetMap>> {
        self.targets.get(view).and_then(|t| t.as_ref())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub entries: Vec<SceneData>,
    pub vocabulary: LabelVocabulary,
}

impl Dataset {
    /// Loads a manifest and everything it references. Relative paths resolve
    /// against the manifest's directory; the vocabulary defaults to
    /// [`VOCABULARY_FILE`] beside it.
    pub fn load(manifest: &Path, vocabulary: Option<&Path>) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(manifest).map_err(|source| DataError::Io {
            path: manifest.to_path_buf(),
            source,
        })?;
        let entries = parse_manifest(&text).map_err(|detail| DataError::Manifest {
            path: manifest.to_path_buf(),
            detail,
        })?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let scene_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| DataError::Scene { path, source }
        };
        let vocab_path = vocabulary.map(Path::to_path_buf).unwrap_or_else(|| base.join(VOCABULARY_FILE));
        let vocabulary = load_vocabulary(&vocab_path).map_err(scene_err(&vocab_path))?;

        let mut loaded = Vec::with_capacity(entries.len());
        for e in entries {
            let path = resolve(&e.scene);
            let scene = load_scene(&path).map_err(scene_err(&path))?;
            let mut cameras = Vec::with_capacity(e.cameras.len());
            for c in &e.cameras {
                let p = resolve(c);
                cameras.push(load_camera(&p).map_err(scene_err(&p))?);
            }
            let mut targets = Vec::with_capacity(e.targets.len());
            for (t, cam) in e.targets.iter().zip(&cameras) {
                targets.push(match t {
                    Some(t) => {
                        let p = resolve(t);
                        let map = load_dense_map(&p).map_err(scene_err(&p))?;
                        map.check_camera(cam).map_err(scene_err(&p))?;
                        Some(Arc::new(map))
                    }
                    None => None,
                });
            }
            loaded.push(SceneData {
                path,
                scene: Arc::new(scene),
                cameras,
                targets,
                split: e.split,
            });
        }
        Ok(Self {
            entries: loaded,
            vocabulary,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SceneData> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Layout of a generated dataset. Scenes of one family share the class list
/// and differ in room size and object placement.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub classes: Vec<String>,
    pub gaussians_per_class: usize,
    pub extent: [f64; 3],
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Scenes with enlarged rooms and objects that omit the last class.
    pub cross_domain_scenes: usize,
    pub views_per_scene: usize,
    /// Extra cameras per training scene listed under `novel_view`.
    pub held_out_views: usize,
    pub rig: CameraRig,
    pub embedding_dim: usize,
    /// Write a dense target per view: the class embedding of the rendered label.
    pub targets: bool,
    pub seed: u64,
}

impl Default for SyntheticDataset {
    fn default() -> Self {
        Self {
            classes: ["floor", "wall", "cabinet", "chair", "sofa"].map(String::from).to_vec(),
            gaussians_per_class: 160,
            extent: [4.0, 3.5, 2.6],
            train_scenes: 6,
            val_scenes: 2,
            cross_domain_scenes: 0,
            views_per_scene: 8,
            held_out_views: 2,
            rig: CameraRig::default(),
            embedding_dim: 512,
            targets: false,
            seed: 0,
        }
    }
}

/// Dense target whose pixels are the embeddings of the rendered labels.
pub fn label_embedding_target(
    scene: &GaussianScene,
    cam: &Camera,
    vocab: &LabelVocabulary,
    cfg: &RasterConfig,
) -> Result<DenseTargetMap, RasterError> {
    let labels = rasterize_labels(scene, cam, cfg)?;
    let d = vocab.dim();
    let mut data = vec![0f32; labels.len() * d];
    for (p, &l) in labels.iter().enumerate() {
        if l != IGNORE_LABEL && (l as usize) < vocab.len() {
            for (o, &v) in data[p * d..(p + 1) * d].iter_mut().zip(vocab.embeddings().row(l as usize)) {
                *o = v as f32;
            }
        }
    }
    Ok(DenseTargetMap::new(cam.height, cam.width, d as u32, data)?)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes scenes, point clouds, cameras, optional targets, the vocabulary and
/// `manifest.json` into `dir`. Returns the manifest path.
pub fn write_synthetic_dataset(dir: &Path, spec: &SyntheticDataset) -> Result<PathBuf, DataError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let names: Vec<&str> = spec.classes.iter().map(String::as_str).collect();
    let vocab_path = dir.join(VOCABULARY_FILE);
    let scene_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Scene { path, source }
    };
    let vocab = LabelVocabulary::orthonormal(&names, spec.embedding_dim).map_err(scene_err(&vocab_path))?;
    save_vocabulary(&vocab, &vocab_path).map_err(scene_err(&vocab_path))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let plan = [
        (Split::Train, spec.train_scenes),
        (Split::Val, spec.val_scenes),
        (Split::CrossDomain, spec.cross_domain_scenes),
    ];
    let raster = RasterConfig::default();
    let mut manifest = Vec::new();
    let mut index = 0usize;
    for (split, count) in plan {
        for _ in 0..count {
            let stem = format!("scene-{index:02}");
            index += 1;
            let jitter: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.85..1.15));
            let mut extent: [f64; 3] = std::array::from_fn(|k| spec.extent[k] * jitter[k]);
            let mut room_names = names.clone();
            let mut thing_scale = 1.0;
            if split == Split::CrossDomain {
                extent = extent.map(|v| v * 1.3);
                thing_scale = 1.4;
                if room_names.len() > 2 {
                    room_names.pop();
                }
            }
            let mut room = RoomSpec::new(extent, &room_names, spec.gaussians_per_class);
            room.thing_scale = thing_scale;
            let scene_seed = rng.gen::<u64>();
            let scene_path = dir.join(format!("{stem}.sgs"));
            let (scene, cloud) = synth_scene(&room, scene_seed).map_err(scene_err(&scene_path))?;
            save_scene(&scene, &scene_path).map_err(scene_err(&scene_path))?;
            let cloud_path = dir.join(format!("{stem}.spc"));
            save_point_cloud(&cloud, &cloud_path).map_err(scene_err(&cloud_path))?;

            let held = if split == Split::Train { spec.held_out_views } else { 0 };
            let cams = synth_cameras(extent, &spec.rig, spec.views_per_scene + held, rng.gen());
            let mut groups = vec![(split, &cams[..spec.views_per_scene], 0usize)];
            if held > 0 {
                groups.push((Split::NovelView, &cams[spec.views_per_scene..], spec.views_per_scene));
            }
            for (split, cams, offset) in groups {
                let mut cam_paths = Vec::new();
                let mut target_paths = Vec::new();
                for (k, cam) in cams.iter().enumerate() {
                    let rel = PathBuf::from(format!("{stem}-cam{:02}.json", offset + k));
                    let p = dir.join(&rel);
                    save_camera(cam, &p).map_err(scene_err(&p))?;
                    cam_paths.push(rel);
                    if spec.targets {
                        let rel = PathBuf::from(format!("{stem}-cam{:02}.sdm", offset + k));
                        let p = dir.join(&rel);
                        let map = label_embedding_target(&scene, cam, &vocab, &raster)?;
                        save_dense_map(&map, &p).map_err(scene_err(&p))?;
                        target_paths.push(Some(rel));
                    }
                }
                manifest.push(ManifestEntry {
                    scene: PathBuf::from(format!("{stem}.sgs")),
                    cameras: cam_paths,
                    targets: target_paths,
                    split,
                });
            }
        }
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

/// Random unit-row vocabulary, handy for fixtures that do not need a basis.
pub fn random_vocabulary(names: &[&str], dim: usize, seed: u64) -> Result<LabelVocabulary, SceneError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..names.len() * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let e = Tensor::matrix(names.len(), dim, data).map_err(|e| SceneError::InvalidVocabulary(e.to_string()))?;
    LabelVocabulary::new(names.iter().map(|s| s.to_string()).collect(), e)
}
