//! Seeded synthetic rooms: an axis-aligned box of "stuff" surfaces (floor,
//! walls, ceiling) plus one box or ellipsoid "thing" per remaining class.
//!
//! Every class keeps the same base color, shape kind and nominal size in
//! every room (they are derived from the class name), so the appearance
//! statistics transfer across scenes the way real object categories do.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Camera, Gaussian, GaussianScene, LabeledPointCloud, SceneError};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub label: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoomSpec {
    /// Room size along x, y, z in meters; the floor is z = 0.
    pub extent: [f64; 3],
    pub classes: Vec<ClassSpec>,
    pub gaussians_per_class: usize,
    /// Multiplies every thing's nominal size.
    pub thing_scale: f64,
    /// Half-width of the uniform per-Gaussian color noise.
    pub color_jitter: f64,
    /// Point-cloud density relative to the Gaussians.
    pub points_per_gaussian: usize,
}

impl RoomSpec {
    /// Labels follow the order of `names`.
    pub fn new(extent: [f64; 3], names: &[&str], gaussians_per_class: usize) -> Self {
        Self {
            extent,
            classes: names
                .iter()
                .enumerate()
                .map(|(i, n)| ClassSpec {
                    name: n.to_string(),
                    label: i as u16,
                })
                .collect(),
            gaussians_per_class,
            thing_scale: 1.0,
            color_jitter: 0.05,
            points_per_gaussian: 4,
        }
    }
}

fn is_stuff(name: &str) -> bool {
    matches!(name, "floor" | "wall" | "walls" | "ceiling")
}

fn name_seed(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Per-class constants shared by every room.
struct ClassLook {
    color: [f64; 3],
    ellipsoid: bool,
    size: [f64; 3],
}

fn class_look(name: &str) -> ClassLook {
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(name));
    let color = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    ClassLook {
        color,
        ellipsoid: rng.gen_bool(0.5),
        size: [rng.gen_range(0.4..1.2), rng.gen_range(0.4..1.2), rng.gen_range(0.4..1.4)],
    }
}

#[derive(Debug, Clone, Copy)]
enum Surface {
    /// `origin + a·u + b·v` for `a, b ∈ [0, 1]`.
    Rect {
        origin: Vector3<f64>,
        u: Vector3<f64>,
        v: Vector3<f64>,
        normal: Vector3<f64>,
    },
    Ellipsoid {
        center: Vector3<f64>,
        radii: Vector3<f64>,
    },
}

impl Surface {
    fn area(&self) -> f64 {
        match *self {
            Surface::Rect { u, v, .. } => u.cross(&v).norm(),
            Surface::Ellipsoid { radii, .. } => {
                // Thomsen's approximation.
                let p = 1.6075;
                let (a, b, c) = (radii.x.powf(p), radii.y.powf(p), radii.z.powf(p));
                4.0 * std::f64::consts::PI * ((a * b + a * c + b * c) / 3.0).powf(1.0 / p)
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> (Vector3<f64>, Vector3<f64>) {
        match *self {
            Surface::Rect { origin, u, v, normal } => {
                let (a, b): (f64, f64) = (rng.gen(), rng.gen());
                (origin + u * a + v * b, normal)
            }
            Surface::Ellipsoid { center, radii } => {
                let z: f64 = rng.gen_range(-1.0..1.0);
                let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = (1.0 - z * z).sqrt();
                let d = Vector3::new(r * phi.cos(), r * phi.sin(), z);
                let p = center + d.component_mul(&radii);
                let n = d.component_div(&radii).normalize();
                (p, n)
            }
        }
    }
}

fn rect(origin: [f64; 3], u: [f64; 3], v: [f64; 3], normal: [f64; 3]) -> Surface {
    Surface::Rect {
        origin: origin.into(),
        u: u.into(),
        v: v.into(),
        normal: normal.into(),
    }
}

fn stuff_surfaces(name: &str, e: [f64; 3]) -> Vec<Surface> {
    let [x, y, z] = e;
    match name {
        "floor" => vec![rect([0.0, 0.0, 0.0], [x, 0.0, 0.0], [0.0, y, 0.0], [0.0, 0.0, 1.0])],
        "ceiling" => vec![rect([0.0, 0.0, z], [x, 0.0, 0.0], [0.0, y, 0.0], [0.0, 0.0, -1.0])],
        _ => vec![
            rect([0.0, 0.0, 0.0], [x, 0.0, 0.0], [0.0, 0.0, z], [0.0, 1.0, 0.0]),
            rect([0.0, y, 0.0], [x, 0.0, 0.0], [0.0, 0.0, z], [0.0, -1.0, 0.0]),
            rect([0.0, 0.0, 0.0], [0.0, y, 0.0], [0.0, 0.0, z], [1.0, 0.0, 0.0]),
            rect([x, 0.0, 0.0], [0.0, y, 0.0], [0.0, 0.0, z], [-1.0, 0.0, 0.0]),
        ],
    }
}

fn thing_surfaces<R: Rng>(look: &ClassLook, spec: &RoomSpec, rng: &mut R) -> Vec<Surface> {
    let [ex, ey, ez] = spec.extent;
    let jitter = |rng: &mut R| rng.gen_range(0.8..1.2) * spec.thing_scale;
    let size = Vector3::new(
        (look.size[0] * jitter(rng)).min(0.45 * ex),
        (look.size[1] * jitter(rng)).min(0.45 * ey),
        (look.size[2] * jitter(rng)).min(0.9 * ez),
    );
    let cx = rng.gen_range(size.x / 2.0 + 0.05..ex - size.x / 2.0 - 0.05);
    let cy = rng.gen_range(size.y / 2.0 + 0.05..ey - size.y / 2.0 - 0.05);
    if look.ellipsoid {
        return vec![Surface::Ellipsoid {
            center: Vector3::new(cx, cy, size.z / 2.0),
            radii: size / 2.0,
        }];
    }
    let (x0, y0) = (cx - size.x / 2.0, cy - size.y / 2.0);
    let (sx, sy, sz) = (size.x, size.y, size.z);
    vec![
        rect([x0, y0, sz], [sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, 1.0]),
        rect([x0, y0, 0.0], [sx, 0.0, 0.0], [0.0, 0.0, sz], [0.0, -1.0, 0.0]),
        rect([x0, y0 + sy, 0.0], [sx, 0.0, 0.0], [0.0, 0.0, sz], [0.0, 1.0, 0.0]),
        rect([x0, y0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, sz], [-1.0, 0.0, 0.0]),
        rect([x0 + sx, y0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, sz], [1.0, 0.0, 0.0]),
    ]
}

fn pick<R: Rng>(surfaces: &[Surface], areas: &[f64], total: f64, rng: &mut R) -> Surface {
    let mut t = rng.gen_range(0.0..total);
    for (s, a) in surfaces.iter().zip(areas) {
        if t < *a {
            return *s;
        }
        t -= a;
    }
    *surfaces.last().expect("non-empty")
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Orientation whose local z axis is `normal`, spun by `spin` about it.
fn surface_quaternion(normal: &Vector3<f64>, spin: f64) -> [f64; 4] {
    let align = UnitQuaternion::rotation_between(&Vector3::z(), normal)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
    let q = align * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), spin);
    let q = q.into_inner();
    [q.w, q.i, q.j, q.k].map(f32_round)
}

/// Generates a labeled Gaussian room and a denser labeled point cloud of the
/// same surfaces. Fully determined by `seed`. All stored values are exactly
/// representable in 32-bit floats.
pub fn synth_scene(spec: &RoomSpec, seed: u64) -> Result<(GaussianScene, LabeledPointCloud), SceneError> {
    if spec.classes.is_empty() || !spec.extent.iter().all(|&e| e > 0.0 && e.is_finite()) {
        return Err(SceneError::EmptySpec);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussians = Vec::with_capacity(spec.classes.len() * spec.gaussians_per_class);
    let mut cloud = LabeledPointCloud::default();
    for (k, class) in spec.classes.iter().enumerate() {
        let look = class_look(&class.name);
        let stuff = is_stuff(&class.name);
        let surfaces = if stuff {
            stuff_surfaces(&class.name, spec.extent)
        } else {
            thing_surfaces(&look, spec, &mut rng)
        };
        let instance = if stuff { 0 } else { k as u32 + 1 };
        let areas: Vec<f64> = surfaces.iter().map(Surface::area).collect();
        let total: f64 = areas.iter().sum();
        let n = spec.gaussians_per_class.max(1);
        let sigma_t = (0.6 * (total / n as f64).sqrt()).clamp(0.01, 0.5);
        let sigma_n = (0.15 * sigma_t).max(0.003);
        for _ in 0..spec.gaussians_per_class {
            let surface = pick(&surfaces, &areas, total, &mut rng);
            let (p, normal) = surface.sample(&mut rng);
            let spin = rng.gen_range(0.0..std::f64::consts::TAU);
            let color = look
                .color
                .map(|c| f32_round((c + rng.gen_range(-spec.color_jitter..=spec.color_jitter)).clamp(0.0, 1.0)));
            gaussians.push(Gaussian {
                position: [p.x, p.y, p.z].map(f32_round),
                rotation: surface_quaternion(&normal, spin),
                scale: [
                    sigma_t * rng.gen_range(0.8..1.2),
                    sigma_t * rng.gen_range(0.8..1.2),
                    sigma_n,
                ]
                .map(f32_round),
                opacity: f32_round(rng.gen_range(0.5..0.95)),
                color,
                label: class.label,
                instance,
                ..Default::default()
            });
        }
        for _ in 0..spec.gaussians_per_class * spec.points_per_gaussian {
            let surface = pick(&surfaces, &areas, total, &mut rng);
            let (p, _) = surface.sample(&mut rng);
            cloud.positions.push([p.x, p.y, p.z].map(f32_round));
            cloud.labels.push(class.label);
            cloud.instances.push(instance);
        }
    }
    let scene = GaussianScene {
        gaussians,
        scene_id: format!("room-{seed}"),
        domain_tag: String::new(),
        has_semantics: false,
        has_labels: true,
    };
    Ok((scene, cloud))
}

/// Viewpoint sampling inside a room.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub width: u32,
    pub height: u32,
    /// Focal length as a fraction of image width.
    pub focal_factor: f64,
    /// Eye height range in meters.
    pub eye_height: (f64, f64),
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            width: 40,
            height: 30,
            focal_factor: 0.5,
            eye_height: (1.0, 1.8),
        }
    }
}

/// `count` cameras placed inside the room looking toward its middle.
pub fn synth_cameras(extent: [f64; 3], rig: &CameraRig, count: usize, seed: u64) -> Vec<Camera> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let [ex, ey, ez] = extent;
    let top = rig.eye_height.1.min(ez * 0.9).max(rig.eye_height.0.min(ez * 0.5));
    let bottom = rig.eye_height.0.min(top);
    (0..count)
        .map(|_| loop {
            let eye = [
                rng.gen_range(0.15 * ex..0.85 * ex),
                rng.gen_range(0.15 * ey..0.85 * ey),
                if top > bottom { rng.gen_range(bottom..top) } else { bottom },
            ];
            let target = [
                rng.gen_range(0.25 * ex..0.75 * ex),
                rng.gen_range(0.25 * ey..0.75 * ey),
                rng.gen_range(0.1 * ez..0.4 * ez),
            ];
            let d: f64 = (0..3).map(|k| (eye[k] - target[k]).powi(2)).sum::<f64>().sqrt();
            if d > 0.5 {
                break Camera::look_at(eye, target, rig.width, rig.height, rig.focal_factor * rig.width as f64);
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::io::{decode_scene, encode_scene};

    #[test]
    fn single_class_room() {
        let spec = RoomSpec::new([3.0, 3.0, 2.5], &["chair"], 10);
        let (scene, cloud) = synth_scene(&spec, 1).unwrap();
        assert_eq!(scene.len(), 10);
        assert!(scene.gaussians.iter().all(|g| g.label == 0));
        assert_eq!(cloud.len(), 40);
        scene.validate().unwrap();
    }

    #[test]
    fn label_histogram_matches_spec() {
        let spec = RoomSpec::new([4.0, 4.0, 2.5], &["floor", "wall", "sofa"], 200);
        let (scene, _) = synth_scene(&spec, 9).unwrap();
        let mut hist = [0usize; 3];
        for g in &scene.gaussians {
            hist[g.label as usize] += 1;
        }
        assert_eq!(hist, [200, 200, 200]);
    }

    #[test]
    fn deterministic_and_f32_exact() {
        let spec = RoomSpec::new([4.0, 5.0, 2.5], &["floor", "wall", "bed", "lamp"], 50);
        let (a, ca) = synth_scene(&spec, 5).unwrap();
        let (b, cb) = synth_scene(&spec, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        let back = decode_scene(&encode_scene(&a).unwrap()).unwrap();
        assert_eq!(back.gaussians, a.gaussians);
    }

    #[test]
    fn stuff_lies_on_room_surfaces() {
        let spec = RoomSpec::new([4.0, 5.0, 2.5], &["floor", "ceiling"], 30);
        let (scene, _) = synth_scene(&spec, 2).unwrap();
        for g in &scene.gaussians {
            let z = g.position[2];
            if g.label == 0 {
                assert_eq!(z, 0.0);
            } else {
                assert_eq!(z, 2.5);
            }
            // Flat along the surface normal.
            let n = g.rotation_matrix().column(2).into_owned();
            assert!(n.z.abs() > 1.0 - 1e-6);
        }
    }

    #[test]
    fn empty_spec_is_rejected() {
        let spec = RoomSpec::new([4.0, 5.0, 2.5], &[], 3);
        assert!(matches!(synth_scene(&spec, 0), Err(SceneError::EmptySpec)));
        let spec = RoomSpec::new([4.0, 0.0, 2.5], &["floor"], 3);
        assert!(matches!(synth_scene(&spec, 0), Err(SceneError::EmptySpec)));
    }

    #[test]
    fn cameras_are_valid_and_inside() {
        let cams = synth_cameras([4.0, 5.0, 2.5], &CameraRig::default(), 8, 3);
        assert_eq!(cams.len(), 8);
        for c in &cams {
            c.validate().unwrap();
        }
        assert_eq!(cams, synth_cameras([4.0, 5.0, 2.5], &CameraRig::default(), 8, 3));
    }
}
