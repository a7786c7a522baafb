//! Uniform hash-grid index for radius and k-nearest queries over 3D points.
//!
//! Results are exact: k-nearest queries return neighbours ordered by
//! `(squared distance, index)`, so ties resolve to the lower index.

use std::collections::HashMap;

use nalgebra::Point3;

type Cell = [i64; 3];

#[derive(Debug, Clone)]
pub struct PointGrid {
    cell_size: f64,
    cells: HashMap<Cell, Vec<usize>>,
    points: Vec<Point3<f64>>,
    lo: Cell,
    hi: Cell,
}

impl PointGrid {
    pub fn new(cell_size: f64) -> Self {
        assert!(
            cell_size > 0.0 && cell_size.is_finite(),
            "cell size must be positive"
        );
        Self {
            cell_size,
            cells: HashMap::new(),
            points: Vec::new(),
            lo: [i64::MAX; 3],
            hi: [i64::MIN; 3],
        }
    }

    pub fn from_points(points: &[Point3<f64>], cell_size: f64) -> Self {
        let mut grid = Self::new(cell_size);
        for p in points {
            grid.insert(*p);
        }
        grid
    }

    /// Chooses a cell size giving a few points per cell for the given cloud.
    pub fn auto(points: &[Point3<f64>]) -> Self {
        let diag = crate::mesh::bbox_diagonal(points);
        let n = points.len().max(1) as f64;
        let cell = if diag > 0.0 {
            (diag / n.cbrt()).max(diag * 1e-6)
        } else {
            1.0
        };
        Self::from_points(points, cell)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &Point3<f64> {
        &self.points[i]
    }

    fn cell_of(&self, p: &Point3<f64>) -> Cell {
        [
            (p.x / self.cell_size).floor() as i64,
            (p.y / self.cell_size).floor() as i64,
            (p.z / self.cell_size).floor() as i64,
        ]
    }

    /// Inserts a point, returning its index.
    pub fn insert(&mut self, p: Point3<f64>) -> usize {
        let id = self.points.len();
        let c = self.cell_of(&p);
        for a in 0..3 {
            self.lo[a] = self.lo[a].min(c[a]);
            self.hi[a] = self.hi[a].max(c[a]);
        }
        self.cells.entry(c).or_default().push(id);
        self.points.push(p);
        id
    }

    /// True if some indexed point lies strictly closer than `radius` to `q`.
    pub fn any_within(&self, q: &Point3<f64>, radius: f64) -> bool {
        let reach = (radius / self.cell_size).ceil() as i64;
        let c = self.cell_of(q);
        let r2 = radius * radius;
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        if ids
                            .iter()
                            .any(|&i| (self.points[i] - q).norm_squared() < r2)
                        {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    /// Nearest point within `max_dist` (inclusive), lower index on ties.
    pub fn nearest_within(&self, q: &Point3<f64>, max_dist: f64) -> Option<(usize, f64)> {
        let hit = self.knn_filtered(q, 1, |_| true).into_iter().next()?;
        (hit.1 <= max_dist).then_some(hit)
    }

    /// The `k` nearest points to `q` as `(index, distance)`.
    pub fn knn(&self, q: &Point3<f64>, k: usize) -> Vec<(usize, f64)> {
        self.knn_filtered(q, k, |_| true)
    }

    /// k-nearest restricted to indices accepted by `keep`.
    pub fn knn_filtered(
        &self,
        q: &Point3<f64>,
        k: usize,
        keep: impl Fn(usize) -> bool,
    ) -> Vec<(usize, f64)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let c = self.cell_of(q);
        let max_ring = (0..3)
            .map(|a| (c[a] - self.lo[a]).abs().max((self.hi[a] - c[a]).abs()))
            .max()
            .unwrap_or(0);
        let mut found: Vec<(f64, usize)> = Vec::new();
        for ring in 0..=max_ring {
            if shell_cells(ring) > self.cells.len() {
                // sparse grid: scanning every point is cheaper than the shell
                found = (0..self.points.len())
                    .filter(|&i| keep(i))
                    .map(|i| ((self.points[i] - q).norm_squared(), i))
                    .collect();
                break;
            }
            self.visit_ring(c, ring, |ids| {
                for &i in ids {
                    if keep(i) {
                        found.push(((self.points[i] - q).norm_squared(), i));
                    }
                }
            });
            if found.len() >= k {
                found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                found.truncate(k);
                // every point strictly inside this radius has been visited
                let covered = ring as f64 * self.cell_size;
                if found[k - 1].0.sqrt() < covered {
                    break;
                }
            }
        }
        found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        found.truncate(k);
        found.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
    }

    fn visit_ring(&self, c: Cell, ring: i64, mut f: impl FnMut(&[usize])) {
        if ring == 0 {
            if let Some(ids) = self.cells.get(&c) {
                f(ids);
            }
            return;
        }
        for dx in -ring..=ring {
            for dy in -ring..=ring {
                let on_shell = dx.abs() == ring || dy.abs() == ring;
                let dz_values: Box<dyn Iterator<Item = i64>> = if on_shell {
                    Box::new(-ring..=ring)
                } else {
                    Box::new([-ring, ring].into_iter())
                };
                for dz in dz_values {
                    if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        f(ids);
                    }
                }
            }
        }
    }
}

fn shell_cells(ring: i64) -> usize {
    if ring == 0 {
        1
    } else {
        let (outer, inner) = (2 * ring + 1, 2 * ring - 1);
        (outer.pow(3) - inner.pow(3)) as usize
    }
}
