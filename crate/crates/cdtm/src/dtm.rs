//! Digital terrain map: bilinear interpolation, tangent-plane normals,
//! ray-terrain intersection and synthetic terrain generation.

use nalgebra::{DMatrix, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DtmError {
    #[error("query point ({0}, {1}) outside grid extent")]
    OutOfExtent(f64, f64),
    #[error("ray exits the grid extent without intersecting the terrain")]
    NoIntersection,
    #[error("ray origin is below the terrain surface")]
    StartBelowSurface,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

/// Regular square-cell height grid. `heights[(row, col)]` is the
/// elevation at `(origin.x + col * spacing, origin.y + row * spacing)`.
#[derive(Debug, Clone)]
pub struct TerrainGrid {
    origin: Vector2<f64>,
    spacing: f64,
    heights: DMatrix<f64>,
    max_height: f64,
}

/// Point on the interpolated surface with the local tangent-plane
/// normal, normalized so that `n.z == 1`.
#[derive(Debug, Clone, Copy)]
pub struct SurfacePoint {
    pub g: Vector3<f64>,
    pub n: Vector3<f64>,
}

impl TerrainGrid {
    pub fn new(
        origin: Vector2<f64>,
        spacing: f64,
        heights: DMatrix<f64>,
    ) -> Result<Self, DtmError> {
        if spacing <= 0.0 || !spacing.is_finite() {
            return Err(DtmError::InvalidGrid(format!("spacing {spacing} must be positive")));
        }
        if heights.nrows() < 2 || heights.ncols() < 2 {
            return Err(DtmError::InvalidGrid("grid needs at least 2x2 nodes".into()));
        }
        if heights.iter().any(|h| !h.is_finite()) {
            return Err(DtmError::InvalidGrid("non-finite height".into()));
        }
        let max_height = heights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            origin,
            spacing,
            heights,
            max_height,
        })
    }

    pub fn rows(&self) -> usize {
        self.heights.nrows()
    }

    pub fn cols(&self) -> usize {
        self.heights.ncols()
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn origin(&self) -> Vector2<f64> {
        self.origin
    }

    pub fn heights(&self) -> &DMatrix<f64> {
        &self.heights
    }

    pub fn node_height(&self, row: usize, col: usize) -> f64 {
        self.heights[(row, col)]
    }

    pub fn min_height(&self) -> f64 {
        self.heights.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_height(&self) -> f64 {
        self.max_height
    }

    /// (width, depth) of the covered rectangle in meters.
    pub fn extent(&self) -> (f64, f64) {
        (
            (self.cols() - 1) as f64 * self.spacing,
            (self.rows() - 1) as f64 * self.spacing,
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (w, d) = self.extent();
        let gx = x - self.origin.x;
        let gy = y - self.origin.y;
        (0.0..=w).contains(&gx) && (0.0..=d).contains(&gy)
    }

    /// Cell index and in-cell fractions for a point inside the extent.
    fn locate(&self, x: f64, y: f64) -> Result<(usize, usize, f64, f64), DtmError> {
        if !self.contains(x, y) {
            return Err(DtmError::OutOfExtent(x, y));
        }
        let gx = (x - self.origin.x) / self.spacing;
        let gy = (y - self.origin.y) / self.spacing;
        let col = (gx.floor() as usize).min(self.cols() - 2);
        let row = (gy.floor() as usize).min(self.rows() - 2);
        Ok((row, col, gx - col as f64, gy - row as f64))
    }

    /// Bilinear interpolation over the enclosing cell.
    pub fn height_at(&self, x: f64, y: f64) -> Result<f64, DtmError> {
        let (row, col, tx, ty) = self.locate(x, y)?;
        let h00 = self.heights[(row, col)];
        let h10 = self.heights[(row, col + 1)];
        let h01 = self.heights[(row + 1, col)];
        let h11 = self.heights[(row + 1, col + 1)];
        Ok((1.0 - tx) * (1.0 - ty) * h00
            + tx * (1.0 - ty) * h10
            + (1.0 - tx) * ty * h01
            + tx * ty * h11)
    }

    /// Tangent-plane normal `(-dh/dx, -dh/dy, 1)` of the bilinear patch.
    pub fn normal_at(&self, x: f64, y: f64) -> Result<Vector3<f64>, DtmError> {
        let (row, col, tx, ty) = self.locate(x, y)?;
        let h00 = self.heights[(row, col)];
        let h10 = self.heights[(row, col + 1)];
        let h01 = self.heights[(row + 1, col)];
        let h11 = self.heights[(row + 1, col + 1)];
        let dhdx = ((1.0 - ty) * (h10 - h00) + ty * (h11 - h01)) / self.spacing;
        let dhdy = ((1.0 - tx) * (h01 - h00) + tx * (h11 - h10)) / self.spacing;
        Ok(Vector3::new(-dhdx, -dhdy, 1.0))
    }

    /// First intersection of the ray `p + lambda * d` (lambda > 0) with
    /// the interpolated surface. Coarse march at spacing/4 followed by
    /// bisection.
    pub fn raycast(&self, p: &Vector3<f64>, d: &Vector3<f64>) -> Result<SurfacePoint, DtmError> {
        let dir = d / d.norm();
        let f0 = p.z - self.height_at(p.x, p.y)?;
        if f0 <= 0.0 {
            return Err(DtmError::StartBelowSurface);
        }
        let step = self.spacing / 4.0;
        // skip the part of the ray that is above every grid node
        let mut lo = if dir.z < 0.0 && p.z > self.max_height {
            (self.max_height - p.z) / dir.z
        } else {
            0.0
        };
        if self.value_above(p, &dir, lo).map_or(true, |f| f < 0.0) {
            // conservative restart if the skip landed past the surface
            lo = 0.0;
        }
        let mut lambda = lo;
        loop {
            lambda += step;
            let q = p + dir * lambda;
            if dir.z >= 0.0 && q.z > self.max_height {
                // climbing ray already above every node: can never hit
                return Err(DtmError::NoIntersection);
            }
            match self.value_above(p, &dir, lambda) {
                None => return Err(DtmError::NoIntersection),
                Some(f) => {
                    if f <= 0.0 {
                        let g = self.bisect(p, &dir, lo, lambda);
                        let n = self.normal_at(g.x, g.y)?;
                        return Ok(SurfacePoint { g, n });
                    }
                    lo = lambda;
                }
            }
        }
    }

    fn value_above(&self, p: &Vector3<f64>, dir: &Vector3<f64>, lambda: f64) -> Option<f64> {
        let q = p + dir * lambda;
        self.height_at(q.x, q.y).ok().map(|h| q.z - h)
    }

    fn bisect(&self, p: &Vector3<f64>, dir: &Vector3<f64>, mut lo: f64, mut hi: f64) -> Vector3<f64> {
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            match self.value_above(p, dir, mid) {
                Some(f) if f > 0.0 => lo = mid,
                _ => hi = mid,
            }
        }
        let lambda = 0.5 * (lo + hi);
        p + dir * lambda
    }

    /// Copy with a smooth error field `a + b (x - cx) + c (y - cy)`
    /// added to every node: offset `a ~ N(0, sigma^2)` and tilt
    /// slopes `b, c ~ N(0, slope_sigma^2)`, centered on `(cx, cy)`.
    /// Models a long-correlation-length height error around a point of
    /// interest; bilinear interpolation reproduces the field exactly.
    pub fn with_affine_node_noise(
        &self,
        center: Vector2<f64>,
        sigma: f64,
        slope_sigma: f64,
        rng: &mut impl Rng,
    ) -> TerrainGrid {
        let a = sigma * gaussian(rng);
        let b = slope_sigma * gaussian(rng);
        let c = slope_sigma * gaussian(rng);
        let mut heights = self.heights.clone();
        for r in 0..heights.nrows() {
            for col in 0..heights.ncols() {
                let x = self.origin.x + col as f64 * self.spacing - center.x;
                let y = self.origin.y + r as f64 * self.spacing - center.y;
                heights[(r, col)] += a + b * x + c * y;
            }
        }
        let max_height = heights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        TerrainGrid {
            origin: self.origin,
            spacing: self.spacing,
            heights,
            max_height,
        }
    }

    /// Samples the interpolated surface on a new grid with the given
    /// node spacing (same origin, covering as much of the extent as the
    /// new spacing divides). Used to derive coarser or finer height
    /// maps of one fixed underlying surface.
    pub fn resample(&self, new_spacing: f64) -> Result<TerrainGrid, DtmError> {
        if new_spacing <= 0.0 || !new_spacing.is_finite() {
            return Err(DtmError::InvalidGrid(format!(
                "spacing {new_spacing} must be positive"
            )));
        }
        let (w, d) = self.extent();
        let cols = (w / new_spacing).floor() as usize + 1;
        let rows = (d / new_spacing).floor() as usize + 1;
        let mut heights = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let x = self.origin.x + c as f64 * new_spacing;
                let y = self.origin.y + r as f64 * new_spacing;
                heights[(r, c)] = self.height_at(x, y)?;
            }
        }
        TerrainGrid::new(self.origin, new_spacing, heights)
    }

    /// Copy with a spatially correlated zero-mean Gaussian error field
    /// added to the nodes: white node noise smoothed by a separable
    /// Gaussian kernel of `corr_cells` cells, renormalized so every
    /// node keeps variance `sigma^2`. Models the map-wide height error
    /// a single survey leaves behind: nearby nodes err together.
    pub fn with_correlated_node_noise(
        &self,
        sigma: f64,
        corr_cells: f64,
        rng: &mut impl Rng,
    ) -> TerrainGrid {
        let rows = self.rows();
        let cols = self.cols();
        let mut field = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                field[(r, c)] = gaussian(rng);
            }
        }
        let radius = (3.0 * corr_cells).ceil() as i64;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|k| (-0.5 * (k as f64 / corr_cells).powi(2)).exp())
            .collect();
        // separable smoothing; each pass rescales by the in-bounds
        // kernel energy so the variance stays exact up to the borders
        let smooth_axis = |src: &DMatrix<f64>, along_rows: bool| -> DMatrix<f64> {
            let mut out = DMatrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    let mut acc = 0.0;
                    let mut energy = 0.0;
                    for (ki, kw) in kernel.iter().enumerate() {
                        let off = ki as i64 - radius;
                        let (rr, cc) = if along_rows {
                            (r as i64 + off, c as i64)
                        } else {
                            (r as i64, c as i64 + off)
                        };
                        if rr < 0 || cc < 0 || rr >= rows as i64 || cc >= cols as i64 {
                            continue;
                        }
                        acc += kw * src[(rr as usize, cc as usize)];
                        energy += kw * kw;
                    }
                    out[(r, c)] = acc / energy.sqrt();
                }
            }
            out
        };
        let field = smooth_axis(&smooth_axis(&field, true), false);
        let mut heights = self.heights.clone();
        for r in 0..rows {
            for c in 0..cols {
                heights[(r, c)] += sigma * field[(r, c)];
            }
        }
        let max_height = heights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        TerrainGrid {
            origin: self.origin,
            spacing: self.spacing,
            heights,
            max_height,
        }
    }

    /// Copy with the whole map shifted horizontally by `(dx, dy)`,
    /// i.e. a map whose georegistration is off by that offset.
    pub fn with_origin_offset(&self, dx: f64, dy: f64) -> TerrainGrid {
        TerrainGrid {
            origin: Vector2::new(self.origin.x + dx, self.origin.y + dy),
            spacing: self.spacing,
            heights: self.heights.clone(),
            max_height: self.max_height,
        }
    }

    /// Copy with independent zero-mean Gaussian noise added to every
    /// node, in fixed row-major order.
    pub fn with_node_noise(&self, sigma: f64, rng: &mut impl Rng) -> TerrainGrid {
        let mut heights = self.heights.clone();
        for r in 0..heights.nrows() {
            for c in 0..heights.ncols() {
                heights[(r, c)] += sigma * gaussian(rng);
            }
        }
        let max_height = heights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        TerrainGrid {
            origin: self.origin,
            spacing: self.spacing,
            heights,
            max_height,
        }
    }
}

/// Standard normal sample via Box-Muller, kept local so streams stay
/// stable across dependency updates.
pub(crate) fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// DTM height error model: sigma_h grows linearly with grid spacing,
/// anchored at 2.4 m for a 30 m grid.
pub fn height_noise_sigma(spacing: f64) -> f64 {
    0.08 * spacing
}

/// Tiles `cell` `clones_x` by `clones_y` times, mirroring alternate
/// clones so heights stay continuous at the seams, then scales heights
/// about their mean by `amplitude_scale`.
pub fn synth_terrain(
    cell: &TerrainGrid,
    clones_x: usize,
    clones_y: usize,
    amplitude_scale: f64,
) -> Result<TerrainGrid, DtmError> {
    if clones_x < 1 || clones_y < 1 {
        return Err(DtmError::InvalidGrid("clone counts must be >= 1".into()));
    }
    if amplitude_scale <= 0.0 {
        return Err(DtmError::InvalidGrid("amplitude scale must be positive".into()));
    }
    let cr = cell.rows();
    let cc = cell.cols();
    let rows = (cr - 1) * clones_y + 1;
    let cols = (cc - 1) * clones_x + 1;
    let mirror = |idx: usize, len: usize| {
        let clone = idx / (len - 1);
        let within = idx - clone * (len - 1);
        if clone % 2 == 0 {
            within
        } else {
            len - 1 - within
        }
    };
    let mut heights = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            heights[(r, c)] = cell.node_height(mirror(r, cr), mirror(c, cc));
        }
    }
    if amplitude_scale != 1.0 {
        let mean = heights.iter().sum::<f64>() / (rows * cols) as f64;
        for h in heights.iter_mut() {
            *h = mean + amplitude_scale * (*h - mean);
        }
    }
    TerrainGrid::new(cell.origin(), cell.spacing(), heights)
}

/// Per-octave amplitudes of the diamond-square synthesis, coarsest
/// octave first. Power is concentrated in the few-hundred-meter scales
/// that give a camera footprint a rich mix of surface normals, while
/// the finest octaves stay weak so the surface remains smooth at the
/// grid scale and is well approximated by its facet tangent planes.
const OCTAVE_AMPLITUDES: [f64; 8] = [0.3, 0.5, 0.9, 1.0, 0.9, 0.3, 0.06, 0.01];

fn octave_amplitude(octave: usize) -> f64 {
    OCTAVE_AMPLITUDES[octave.min(OCTAVE_AMPLITUDES.len() - 1)]
}

/// Deterministic fractal terrain (diamond-square), affinely rescaled so
/// max - min equals `elevation_range` exactly (flat when the range is 0).
pub fn fractal_terrain(
    rows: usize,
    cols: usize,
    spacing: f64,
    elevation_range: f64,
    seed: u64,
) -> Result<TerrainGrid, DtmError> {
    if rows < 2 || cols < 2 {
        return Err(DtmError::InvalidGrid("grid needs at least 2x2 nodes".into()));
    }
    if elevation_range < 0.0 {
        return Err(DtmError::InvalidGrid("elevation range must be >= 0".into()));
    }
    let span = rows.max(cols) - 1;
    let mut size = 1usize;
    while size < span {
        size *= 2;
    }
    let n = size + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = DMatrix::zeros(n, n);
    for corner in [(0, 0), (0, size), (size, 0), (size, size)] {
        field[corner] = gaussian(&mut rng);
    }
    let mut half = size / 2;
    let mut octave = 0usize;
    while half >= 1 {
        let amp = octave_amplitude(octave);
        // diamond step
        for r in (half..size).step_by(2 * half) {
            for c in (half..size).step_by(2 * half) {
                let avg = (field[(r - half, c - half)]
                    + field[(r - half, c + half)]
                    + field[(r + half, c - half)]
                    + field[(r + half, c + half)])
                    / 4.0;
                field[(r, c)] = avg + amp * gaussian(&mut rng);
            }
        }
        // square step
        for r in (0..=size).step_by(half) {
            let start = if (r / half) % 2 == 0 { half } else { 0 };
            for c in (start..=size).step_by(2 * half) {
                let mut sum = 0.0;
                let mut count = 0.0;
                if r >= half {
                    sum += field[(r - half, c)];
                    count += 1.0;
                }
                if r + half <= size {
                    sum += field[(r + half, c)];
                    count += 1.0;
                }
                if c >= half {
                    sum += field[(r, c - half)];
                    count += 1.0;
                }
                if c + half <= size {
                    sum += field[(r, c + half)];
                    count += 1.0;
                }
                field[(r, c)] = sum / count + amp * gaussian(&mut rng);
            }
        }
        octave += 1;
        half /= 2;
    }
    let mut heights = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            heights[(r, c)] = field[(r, c)];
        }
    }
    let min = heights.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = heights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if elevation_range == 0.0 || max == min {
        heights.fill(0.0);
    } else {
        let scale = elevation_range / (max - min);
        for h in heights.iter_mut() {
            *h = (*h - min) * scale;
        }
    }
    TerrainGrid::new(Vector2::zeros(), spacing, heights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn ramp_grid() -> TerrainGrid {
        // h = 0.1 * x on a 30 m grid
        let mut heights = DMatrix::zeros(5, 5);
        for r in 0..5 {
            for c in 0..5 {
                heights[(r, c)] = 0.1 * (c as f64 * 30.0);
            }
        }
        TerrainGrid::new(Vector2::zeros(), 30.0, heights).unwrap()
    }

    fn rough_grid(seed: u64) -> TerrainGrid {
        fractal_terrain(33, 33, 30.0, 120.0, seed).unwrap()
    }

    #[test]
    fn height_exact_at_nodes() {
        let g = rough_grid(1);
        for r in 0..g.rows() {
            for c in 0..g.cols() {
                let h = g.height_at(c as f64 * 30.0, r as f64 * 30.0).unwrap();
                assert_abs_diff_eq!(h, g.node_height(r, c), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn height_bilinear_center() {
        let heights = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 4.0]);
        let g = TerrainGrid::new(Vector2::zeros(), 1.0, heights).unwrap();
        assert_abs_diff_eq!(g.height_at(0.5, 0.5).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn height_convex_combination() {
        let g = rough_grid(2);
        let mut rng = StdRng::seed_from_u64(3);
        use rand::Rng;
        for _ in 0..1000 {
            let col = rng.gen_range(0..g.cols() - 1);
            let row = rng.gen_range(0..g.rows() - 1);
            let x = (col as f64 + rng.gen::<f64>()) * 30.0;
            let y = (row as f64 + rng.gen::<f64>()) * 30.0;
            let corners = [
                g.node_height(row, col),
                g.node_height(row, col + 1),
                g.node_height(row + 1, col),
                g.node_height(row + 1, col + 1),
            ];
            let lo = corners.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let h = g.height_at(x, y).unwrap();
            assert!(h >= lo - 1e-9 && h <= hi + 1e-9);
        }
    }

    #[test]
    fn height_continuous_across_edges() {
        let g = rough_grid(4);
        for c in 1..g.cols() - 1 {
            for k in 0..10 {
                let y = 3.0 + k as f64 * 7.0;
                let x = c as f64 * 30.0;
                let left = g.height_at(x - 1e-9, y).unwrap();
                let right = g.height_at(x + 1e-9, y).unwrap();
                assert_abs_diff_eq!(left, right, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn height_out_of_extent() {
        let g = ramp_grid();
        assert!(matches!(g.height_at(-1.0, 0.0), Err(DtmError::OutOfExtent(_, _))));
        assert!(matches!(g.height_at(0.0, 121.0), Err(DtmError::OutOfExtent(_, _))));
    }

    #[test]
    fn normal_flat_and_ramp() {
        let flat = TerrainGrid::new(Vector2::zeros(), 10.0, DMatrix::from_element(3, 3, 7.0)).unwrap();
        assert_abs_diff_eq!(
            flat.normal_at(12.0, 8.0).unwrap(),
            Vector3::new(0.0, 0.0, 1.0),
            epsilon = 1e-14
        );
        let ramp = ramp_grid();
        assert_abs_diff_eq!(
            ramp.normal_at(47.0, 55.0).unwrap(),
            Vector3::new(-0.1, 0.0, 1.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn normal_matches_finite_differences() {
        let g = rough_grid(5);
        let mut rng = StdRng::seed_from_u64(6);
        use rand::Rng;
        let step = 30.0 / 100.0;
        for _ in 0..200 {
            // stay inside one cell so the bilinear patch is smooth
            let col = rng.gen_range(0..g.cols() - 1);
            let row = rng.gen_range(0..g.rows() - 1);
            let x = (col as f64 + rng.gen_range(0.05..0.95)) * 30.0;
            let y = (row as f64 + rng.gen_range(0.05..0.95)) * 30.0;
            let n = g.normal_at(x, y).unwrap();
            let dhdx = (g.height_at(x + step, y).unwrap() - g.height_at(x - step, y).unwrap())
                / (2.0 * step);
            let dhdy = (g.height_at(x, y + step).unwrap() - g.height_at(x, y - step).unwrap())
                / (2.0 * step);
            let scale = 1.0 + dhdx.abs().max(dhdy.abs());
            assert!((n.x + dhdx).abs() < 1e-6 * scale);
            assert!((n.y + dhdy).abs() < 1e-6 * scale);
            assert_eq!(n.z, 1.0);
        }
    }

    #[test]
    fn raycast_vertical_on_flat() {
        let g = TerrainGrid::new(Vector2::zeros(), 30.0, DMatrix::from_element(4, 4, 100.0)).unwrap();
        let sp = g
            .raycast(&Vector3::new(45.0, 60.0, 500.0), &Vector3::new(0.0, 0.0, -1.0))
            .unwrap();
        assert_abs_diff_eq!(sp.g, Vector3::new(45.0, 60.0, 100.0), epsilon = 1e-9);
        assert_abs_diff_eq!(sp.n, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn raycast_45_degrees() {
        let g = TerrainGrid::new(Vector2::zeros(), 100.0, DMatrix::zeros(7, 7)).unwrap();
        let sp = g
            .raycast(&Vector3::new(0.0, 0.0, 500.0), &Vector3::new(1.0, 0.0, -1.0))
            .unwrap();
        assert_abs_diff_eq!(sp.g, Vector3::new(500.0, 0.0, 0.0), epsilon = 1e-6);
    }

    #[test]
    fn raycast_no_intersection_and_bad_start() {
        let g = TerrainGrid::new(Vector2::zeros(), 30.0, DMatrix::zeros(4, 4)).unwrap();
        assert_eq!(
            g.raycast(&Vector3::new(45.0, 45.0, 500.0), &Vector3::new(0.0, 0.0, 1.0))
                .unwrap_err(),
            DtmError::NoIntersection
        );
        assert!(matches!(
            g.raycast(&Vector3::new(-10.0, 45.0, 500.0), &Vector3::new(0.0, 0.0, -1.0)),
            Err(DtmError::OutOfExtent(_, _))
        ));
        let bumpy = TerrainGrid::new(Vector2::zeros(), 30.0, DMatrix::from_element(4, 4, 10.0)).unwrap();
        assert_eq!(
            bumpy
                .raycast(&Vector3::new(45.0, 45.0, 5.0), &Vector3::new(0.0, 0.0, -1.0))
                .unwrap_err(),
            DtmError::StartBelowSurface
        );
    }

    /// Independent dense-march oracle: sample the ray at spacing/50 and
    /// bisect the first sign change.
    fn raycast_oracle(g: &TerrainGrid, p: &Vector3<f64>, d: &Vector3<f64>) -> Option<Vector3<f64>> {
        let dir = d / d.norm();
        let step = g.spacing() / 50.0;
        let value = |lambda: f64| {
            let q = p + dir * lambda;
            g.height_at(q.x, q.y).ok().map(|h| q.z - h)
        };
        let mut lo = 0.0;
        let mut lambda = 0.0;
        loop {
            lambda += step;
            match value(lambda) {
                None => return None,
                Some(f) if f <= 0.0 => break,
                Some(_) => lo = lambda,
            }
        }
        let mut hi = lambda;
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            match value(mid) {
                Some(f) if f > 0.0 => lo = mid,
                _ => hi = mid,
            }
        }
        Some(p + dir * (0.5 * (lo + hi)))
    }

    #[test]
    fn raycast_matches_dense_march() {
        let g = rough_grid(7);
        let mut rng = StdRng::seed_from_u64(8);
        use rand::Rng;
        let mut checked = 0;
        while checked < 50 {
            let p = Vector3::new(
                rng.gen_range(200.0..760.0),
                rng.gen_range(200.0..760.0),
                rng.gen_range(400.0..700.0),
            );
            let d = Vector3::new(
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
                -1.0,
            );
            let got = match g.raycast(&p, &d) {
                Ok(sp) => sp,
                Err(_) => continue,
            };
            let want = raycast_oracle(&g, &p, &d).expect("oracle should intersect too");
            assert!(
                (got.g - want).norm() < 1e-4,
                "raycast {:?} vs oracle {:?}",
                got.g,
                want
            );
            // on-surface check
            let h = g.height_at(got.g.x, got.g.y).unwrap();
            assert!((h - got.g.z).abs() < 1e-6);
            checked += 1;
        }
    }

    #[test]
    fn synth_identity_and_scaling() {
        let cell = rough_grid(9);
        let same = synth_terrain(&cell, 1, 1, 1.0).unwrap();
        assert_eq!(same.heights(), cell.heights());
        let doubled = synth_terrain(&cell, 1, 1, 2.0).unwrap();
        let span = cell.max_height() - cell.min_height();
        let span2 = doubled.max_height() - doubled.min_height();
        assert_abs_diff_eq!(span2, 2.0 * span, epsilon = 1e-9);
    }

    #[test]
    fn synth_seam_continuity() {
        let cell = rough_grid(10);
        let tiled = synth_terrain(&cell, 3, 2, 1.0).unwrap();
        let cc = cell.cols();
        let cr = cell.rows();
        // mirrored tiling makes heights symmetric about every seam
        for clone in 1..3 {
            let seam = clone * (cc - 1);
            for r in 0..tiled.rows() {
                for w in 1..4 {
                    assert_eq!(tiled.node_height(r, seam - w), tiled.node_height(r, seam + w));
                }
            }
        }
        let seam = cr - 1;
        for c in 0..tiled.cols() {
            for w in 1..4 {
                assert_eq!(tiled.node_height(seam - w, c), tiled.node_height(seam + w, c));
            }
        }
    }

    #[test]
    fn fractal_determinism_and_range() {
        let a = fractal_terrain(101, 101, 30.0, 300.0, 42).unwrap();
        let b = fractal_terrain(101, 101, 30.0, 300.0, 42).unwrap();
        assert_eq!(a.heights(), b.heights());
        let realized = a.max_height() - a.min_height();
        assert!((realized - 300.0).abs() < 3.0, "realized range {realized}");
        let flat = fractal_terrain(9, 9, 30.0, 0.0, 1).unwrap();
        assert_eq!(flat.max_height(), flat.min_height());
    }

    #[test]
    fn sigma_model() {
        assert_abs_diff_eq!(height_noise_sigma(30.0), 2.4, epsilon = 1e-12);
        assert_abs_diff_eq!(height_noise_sigma(100.0), 8.0, epsilon = 1e-12);
        assert!(height_noise_sigma(1e-9) < 1e-9);
    }
}
