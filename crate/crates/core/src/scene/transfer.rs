use std::collections::HashMap;

use super::{GaussianScene, LabeledPointCloud, SceneError};

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Index of the nearest point by exhaustive scan; ties go to the lowest index.
pub fn nearest_point_brute_force(points: &[[f64; 3]], q: &[f64; 3]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, p) in points.iter().enumerate() {
        let d = dist2(p, q);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| i)
}

/// Uniform-grid spatial hash over a point set with exact nearest-neighbor queries.
pub struct PointGrid<'a> {
    points: &'a [[f64; 3]],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<u32>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [[f64; 3]], cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "cell size {cell}");
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let k = Self::key_for(p, cell);
            for a in 0..3 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
            cells.entry(k).or_default().push(i as u32);
        }
        Self {
            points,
            cell,
            cells,
            lo,
            hi,
        }
    }

    /// Grid sized at twice the median nearest-neighbor spacing of `points`.
    pub fn with_median_spacing(points: &'a [[f64; 3]]) -> Self {
        let provisional = Self::new(points, provisional_cell(points));
        let mut spacing: Vec<f64> = (0..points.len())
            .filter_map(|i| provisional.nearest_excluding(&points[i], Some(i)).map(|j| dist2(&points[i], &points[j])))
            .map(f64::sqrt)
            .collect();
        if spacing.is_empty() {
            return provisional;
        }
        spacing.sort_by(f64::total_cmp);
        let median = spacing[spacing.len() / 2];
        if median > 0.0 && median.is_finite() {
            Self::new(points, 2.0 * median)
        } else {
            provisional
        }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    fn key_for(p: &[f64; 3], cell: f64) -> [i64; 3] {
        [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ]
    }

    pub fn nearest(&self, q: &[f64; 3]) -> Option<usize> {
        self.nearest_excluding(q, None)
    }

    /// Searches shells of cells around `q` outward. After shell `r` every
    /// unvisited point is at least `r · cell` away, so the search stops once
    /// the best distance is within that bound.
    fn nearest_excluding(&self, q: &[f64; 3], skip: Option<usize>) -> Option<usize> {
        if self.points.is_empty() {
            return None;
        }
        let c = Self::key_for(q, self.cell);
        let mut reach = 0i64;
        for a in 0..3 {
            reach = reach.max((c[a] - self.lo[a]).abs()).max((self.hi[a] - c[a]).abs());
        }
        let mut best: Option<(f64, usize)> = None;
        let consider = |best: &mut Option<(f64, usize)>, i: usize| {
            if Some(i) == skip {
                return;
            }
            let d = dist2(&self.points[i], q);
            match *best {
                Some((bd, bi)) if d > bd || (d == bd && i > bi) => {}
                _ => *best = Some((d, i)),
            }
        };
        for r in 0..=reach {
            let side = (2 * r + 1) as u128;
            if side * side * side > 8 * self.cells.len() as u128 {
                // Shells now cost more than a full scan.
                let mut best: Option<(f64, usize)> = None;
                for (i, p) in self.points.iter().enumerate() {
                    let d = dist2(p, q);
                    if Some(i) != skip && best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, i));
                    }
                }
                return best.map(|(_, i)| i);
            }
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            ids.iter().for_each(|&i| consider(&mut best, i as usize));
                        }
                    }
                }
            }
            if let Some((bd, _)) = best {
                let bound = r as f64 * self.cell;
                if bd < bound * bound {
                    break;
                }
            }
        }
        best.map(|(_, i)| i)
    }
}

fn provisional_cell(points: &[[f64; 3]]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let ext: Vec<f64> = (0..3).map(|a| (hi[a] - lo[a]).max(0.0)).collect();
    let longest = ext.iter().cloned().fold(0.0, f64::max);
    if !(longest > 0.0 && longest.is_finite()) {
        return 1.0;
    }
    let vol: f64 = ext.iter().map(|e| e.max(longest * 1e-3)).product();
    (vol / points.len() as f64).cbrt().max(longest * 1e-6)
}

/// Gives each Gaussian the semantic and instance label of its nearest
/// annotated point (ties: lowest point index). Geometry is untouched.
pub fn transfer_labels(scene: &GaussianScene, cloud: &LabeledPointCloud) -> Result<GaussianScene, SceneError> {
    cloud.validate()?;
    if cloud.is_empty() {
        return Err(SceneError::EmptyCloud);
    }
    let grid = PointGrid::with_median_spacing(&cloud.positions);
    let mut out = scene.clone();
    for g in &mut out.gaussians {
        let k = grid.nearest(&g.position).expect("non-empty cloud");
        g.label = cloud.labels[k];
        g.instance = cloud.instances[k];
    }
    out.has_labels = true;
    Ok(out)
}
