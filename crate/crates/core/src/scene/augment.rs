use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::GaussianScene;

/// Random similarity augmentation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Uniform scale factor range `[lo, hi]`.
    pub scale_range: (f64, f64),
    /// Rotation about +z drawn from `[0, rotation_range)` radians.
    pub rotation_range: f64,
    /// Independent probability of mirroring x and of mirroring y.
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_range: (0.9, 1.1),
            rotation_range: std::f64::consts::TAU,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            scale_range: (1.0, 1.0),
            rotation_range: 0.0,
            flip_prob: 0.0,
        }
    }
}

/// Scale, then rotate about +z, then optional x / y mirror.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub angle: f64,
    pub flip_x: bool,
    pub flip_y: bool,
}

fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

impl Similarity {
    pub const IDENTITY: Similarity = Similarity {
        scale: 1.0,
        angle: 0.0,
        flip_x: false,
        flip_y: false,
    };

    /// Draws a transform. Always consumes four values so streams stay aligned.
    pub fn sample<R: Rng>(rng: &mut R, cfg: &AugmentConfig) -> Self {
        let (lo, hi) = cfg.scale_range;
        let u: f64 = rng.gen();
        let t: f64 = rng.gen();
        let fx: f64 = rng.gen();
        let fy: f64 = rng.gen();
        Self {
            scale: lo + (hi - lo) * u,
            angle: cfg.rotation_range * t,
            flip_x: fx < cfg.flip_prob,
            flip_y: fy < cfg.flip_prob,
        }
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let [x, y, z] = p.map(|v| v * self.scale);
        let (s, c) = self.angle.sin_cos();
        let mut out = if self.angle == 0.0 {
            [x, y, z]
        } else {
            [c * x - s * y, s * x + c * y, z]
        };
        if self.flip_x {
            out[0] = -out[0];
        }
        if self.flip_y {
            out[1] = -out[1];
        }
        out
    }

    /// Orientation part; a mirror `F` maps rotation `R` to `F R F`.
    pub fn apply_rotation(&self, q: [f64; 4]) -> [f64; 4] {
        let mut q = if self.angle == 0.0 {
            q
        } else {
            let (s, c) = (self.angle / 2.0).sin_cos();
            quat_mul([c, 0.0, 0.0, s], q)
        };
        if self.flip_x {
            q = [q[0], q[1], -q[2], -q[3]];
        }
        if self.flip_y {
            q = [q[0], -q[1], q[2], -q[3]];
        }
        q
    }

    /// Transforms positions, orientations and per-axis scales. Labels, colors,
    /// opacities and semantics are copied unchanged.
    pub fn apply(&self, scene: &GaussianScene) -> GaussianScene {
        let mut out = scene.clone();
        for g in &mut out.gaussians {
            g.position = self.apply_point(g.position);
            g.rotation = self.apply_rotation(g.rotation);
            g.scale = g.scale.map(|v| v * self.scale);
        }
        out
    }
}

/// Seeded random similarity augmentation.
pub fn augment(scene: &GaussianScene, seed: u64, cfg: &AugmentConfig) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Similarity::sample(&mut rng, cfg).apply(scene)
}
