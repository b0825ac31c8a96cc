//! Raster digital terrain model.
//!
//! Each cell takes a low percentile of the elevations in its lowest layer
//! (points within a fixed height of the cell minimum, so that stems standing
//! in a cell cannot outvote the ground), optionally after removing the local
//! ground slope estimated from the neighbouring cells, so the value refers to
//! the cell centre rather than its downhill edge. Cells without points
//! inherit the nearest observed cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{KdTree, Point, PointCloud};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DtmConfig {
    /// Cell edge in meters.
    pub cell_size: f64,
    /// Percentile of cell elevations taken as ground, in `[0, 100]`.
    pub percentile: f64,
    /// Only points within this height of the lowest point in a cell enter
    /// the percentile; `None` uses every point.
    pub ground_layer: Option<f64>,
    pub slope_correction: bool,
}

impl Default for DtmConfig {
    fn default() -> Self {
        DtmConfig {
            cell_size: 0.5,
            percentile: 5.0,
            ground_layer: Some(0.5),
            slope_correction: true,
        }
    }
}

impl DtmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::Config(format!("dtm cell_size must be positive, got {}", self.cell_size)));
        }
        if !(0.0..=100.0).contains(&self.percentile) {
            return Err(Error::Config(format!(
                "dtm percentile must lie in [0, 100], got {}",
                self.percentile
            )));
        }
        if let Some(w) = self.ground_layer {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("dtm ground_layer must be positive, got {w}")));
            }
        }
        Ok(())
    }

    fn cell_height(&self, mut values: Vec<f64>) -> f64 {
        if let Some(w) = self.ground_layer {
            let low = values.iter().copied().fold(f64::INFINITY, f64::min);
            values.retain(|z| *z <= low + w);
        }
        percentile(values, self.percentile)
    }
}

/// Ground heights on a regular grid; row-major with x varying fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterDtm {
    origin: [f64; 2],
    cell_size: f64,
    nx: usize,
    ny: usize,
    heights: Vec<f64>,
    /// Whether a cell held points; the others were filled from a neighbour.
    observed: Vec<bool>,
}

/// Sidecar metadata written next to a CSV raster export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtmSidecar {
    pub origin: [f64; 2],
    pub cell_size: f64,
    pub nx: usize,
    pub ny: usize,
    pub observed_cells: usize,
}

pub fn build_dtm(map: &PointCloud, config: &DtmConfig) -> Result<RasterDtm> {
    config.validate()?;
    let bounds = map.bounds().ok_or(Error::InsufficientPoints { needed: 1, got: 0 })?;
    let cs = config.cell_size;
    let origin = [bounds.min().x, bounds.min().y];
    let nx = ((bounds.max().x - origin[0]) / cs).floor() as usize + 1;
    let ny = ((bounds.max().y - origin[1]) / cs).floor() as usize + 1;
    let mut dtm = RasterDtm {
        origin,
        cell_size: cs,
        nx,
        ny,
        heights: vec![f64::NAN; nx * ny],
        observed: vec![false; nx * ny],
    };

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); nx * ny];
    for (i, p) in map.points().iter().enumerate() {
        members[dtm.cell_index(p.x, p.y)].push(i);
    }
    let points = map.points();
    let raw: Vec<f64> = members
        .iter()
        .map(|m| {
            if m.is_empty() {
                f64::NAN
            } else {
                config.cell_height(m.iter().map(|&i| points[i].z).collect())
            }
        })
        .collect();

    for cell in 0..nx * ny {
        if members[cell].is_empty() {
            continue;
        }
        let height = if config.slope_correction {
            let (gx, gy) = dtm.gradient(&raw, cell);
            let (cx, cy) = dtm.cell_center(cell);
            let detrended = members[cell]
                .iter()
                .map(|&i| points[i].z - gx * (points[i].x - cx) - gy * (points[i].y - cy))
                .collect();
            config.cell_height(detrended)
        } else {
            raw[cell]
        };
        dtm.heights[cell] = height;
        dtm.observed[cell] = true;
    }

    dtm.fill_from_nearest();
    Ok(dtm)
}

impl RasterDtm {
    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn dimensions(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    /// Ground height of the cell containing `(x, y)`; positions outside the
    /// grid clamp to the nearest edge cell.
    pub fn ground_height(&self, x: f64, y: f64) -> f64 {
        self.heights[self.cell_index(x, y)]
    }

    pub fn cell_index(&self, x: f64, y: f64) -> usize {
        let clamp = |v: f64, n: usize| -> usize {
            if v.is_nan() || v < 0.0 {
                0
            } else {
                (v.floor() as usize).min(n - 1)
            }
        };
        let ix = clamp((x - self.origin[0]) / self.cell_size, self.nx);
        let iy = clamp((y - self.origin[1]) / self.cell_size, self.ny);
        iy * self.nx + ix
    }

    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let (ix, iy) = (cell % self.nx, cell / self.nx);
        (
            self.origin[0] + (ix as f64 + 0.5) * self.cell_size,
            self.origin[1] + (iy as f64 + 0.5) * self.cell_size,
        )
    }

    /// Finite-difference slope of `raw` around `cell`, central where both
    /// neighbours are observed, one-sided where only one is, zero otherwise.
    fn gradient(&self, raw: &[f64], cell: usize) -> (f64, f64) {
        let (ix, iy) = (cell % self.nx, cell / self.nx);
        let at = |x: usize, y: usize| raw[y * self.nx + x];
        let axis = |lo: Option<f64>, hi: Option<f64>| -> f64 {
            let here = raw[cell];
            let lo = lo.filter(|v| !v.is_nan());
            let hi = hi.filter(|v| !v.is_nan());
            match (lo, hi) {
                (Some(a), Some(b)) => (b - a) / (2.0 * self.cell_size),
                (Some(a), None) => (here - a) / self.cell_size,
                (None, Some(b)) => (b - here) / self.cell_size,
                (None, None) => 0.0,
            }
        };
        let gx = axis(ix.checked_sub(1).map(|x| at(x, iy)), (ix + 1 < self.nx).then(|| at(ix + 1, iy)));
        let gy = axis(iy.checked_sub(1).map(|y| at(ix, y)), (iy + 1 < self.ny).then(|| at(ix, iy + 1)));
        (gx, gy)
    }

    fn fill_from_nearest(&mut self) {
        let observed: Vec<usize> = (0..self.heights.len()).filter(|&c| self.observed[c]).collect();
        if observed.len() == self.heights.len() {
            return;
        }
        let centers: Vec<Point> = observed
            .iter()
            .map(|&c| {
                let (x, y) = self.cell_center(c);
                Point::new(x, y, 0.0)
            })
            .collect();
        let tree = KdTree::new(&centers);
        for cell in 0..self.heights.len() {
            if !self.observed[cell] {
                let (x, y) = self.cell_center(cell);
                let nearest = tree.nearest_k(&Point::new(x, y, 0.0), 1)[0];
                self.heights[cell] = self.heights[observed[nearest]];
            }
        }
    }

    /// Rows `x_center,y_center,height`, one per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x_center,y_center,height\n");
        for cell in 0..self.heights.len() {
            let (x, y) = self.cell_center(cell);
            out.push_str(&format!("{x},{y},{}\n", self.heights[cell]));
        }
        out
    }

    pub fn sidecar(&self) -> DtmSidecar {
        DtmSidecar {
            origin: self.origin,
            cell_size: self.cell_size,
            nx: self.nx,
            ny: self.ny,
            observed_cells: self.observed.iter().filter(|&&o| o).count(),
        }
    }
}

/// Linear-interpolated percentile (`p` in percent) of a non-empty sample.
pub(crate) fn percentile(mut values: Vec<f64>, p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane(n: usize, slope: f64, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let (x, y) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
                Point::new(x, y, slope * x)
            })
            .collect()
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(vec![3.0], 5.0), 3.0);
        assert_eq!(percentile(vec![0.0, 10.0], 50.0), 5.0);
        assert_eq!(percentile(vec![4.0, 0.0, 2.0], 0.0), 0.0);
    }

    #[test]
    fn flat_ground_with_stem() {
        let mut pts = plane(10_000, 0.0, 1);
        for k in 0..2000 {
            let t = k as f64 * 0.01;
            pts.push(Point::new(0.15 * t.cos(), 0.15 * t.sin(), 0.002 * k as f64));
        }
        let dtm = build_dtm(&PointCloud::new(pts).unwrap(), &DtmConfig::default()).unwrap();
        for h in dtm.heights() {
            assert!(h.abs() < 0.01, "{h}");
        }
        assert_eq!(dtm.ground_height(3.2, -1.7), dtm.heights()[dtm.cell_index(3.2, -1.7)]);
        assert!(dtm.ground_height(3.2, -1.7).abs() < 0.01);
    }

    #[test]
    fn sloped_plane_matches_cell_centres() {
        let dtm = build_dtm(&PointCloud::new(plane(20_000, 0.3, 2)).unwrap(), &DtmConfig::default()).unwrap();
        for cell in 0..dtm.heights().len() {
            if dtm.observed()[cell] {
                let (cx, _) = dtm.cell_center(cell);
                assert!((dtm.heights()[cell] - 0.3 * cx).abs() < 0.02, "cell {cell}");
            }
        }
        let h = dtm.ground_height(2.0, 0.0);
        assert!((h - 0.6).abs() <= 0.3 * dtm.cell_size() / 2.0 + 0.02, "{h}");
    }

    #[test]
    fn plain_percentile_is_biased_downhill_on_slopes() {
        let config = DtmConfig {
            slope_correction: false,
            ..DtmConfig::default()
        };
        let dtm = build_dtm(&PointCloud::new(plane(20_000, 0.3, 2)).unwrap(), &config).unwrap();
        let cell = dtm.cell_index(0.1, 0.1);
        let (cx, _) = dtm.cell_center(cell);
        // About 0.3 * 0.5 * 0.45 below the centre value.
        assert!(0.3 * cx - dtm.heights()[cell] > 0.05);
    }

    #[test]
    fn stem_outvotes_ground_without_layer() {
        let mut pts = plane(10_000, 0.0, 1);
        for k in 0..2000 {
            let t = k as f64 * 0.01;
            pts.push(Point::new(0.15 * t.cos(), 0.15 * t.sin(), 0.002 * k as f64));
        }
        let config = DtmConfig {
            ground_layer: None,
            ..DtmConfig::default()
        };
        let dtm = build_dtm(&PointCloud::new(pts).unwrap(), &config).unwrap();
        assert!(dtm.ground_height(0.0, 0.0) > 0.05);
    }

    #[test]
    fn single_point_fills_everywhere() {
        let dtm = build_dtm(&PointCloud::from_xyz(&[[1.0, 1.0, 5.0]]).unwrap(), &DtmConfig::default()).unwrap();
        assert_eq!(dtm.dimensions(), (1, 1));
        assert_eq!(dtm.ground_height(1.0, 1.0), 5.0);
        assert_eq!(dtm.ground_height(-40.0, 17.0), 5.0);
    }

    #[test]
    fn empty_cells_take_nearest() {
        let pts = [[0.1, 0.1, 1.0], [2.9, 0.1, 3.0]];
        let dtm = build_dtm(&PointCloud::from_xyz(&pts).unwrap(), &DtmConfig::default()).unwrap();
        assert_eq!(dtm.dimensions(), (6, 1));
        assert_eq!(dtm.ground_height(0.8, 0.1), 1.0);
        assert_eq!(dtm.ground_height(2.2, 0.1), 3.0);
        assert!(dtm.heights().iter().all(|h| h.is_finite()));
    }

    #[test]
    fn empty_map_is_an_error() {
        assert!(build_dtm(&PointCloud::empty(), &DtmConfig::default()).is_err());
        let bad = DtmConfig {
            cell_size: 0.0,
            ..DtmConfig::default()
        };
        assert!(build_dtm(&PointCloud::from_xyz(&[[0.0; 3]]).unwrap(), &bad).is_err());
    }

    proptest! {
        #[test]
        fn z_shift_equivariance(seed in 0u64..1000, dz in -50.0..50.0f64) {
            let pts = plane(500, 0.2, seed);
            let shifted: Vec<Point> = pts.iter().map(|p| Point::new(p.x, p.y, p.z + dz)).collect();
            let a = build_dtm(&PointCloud::new(pts).unwrap(), &DtmConfig::default()).unwrap();
            let b = build_dtm(&PointCloud::new(shifted).unwrap(), &DtmConfig::default()).unwrap();
            for (ha, hb) in a.heights().iter().zip(b.heights()) {
                prop_assert!((ha + dz - hb).abs() < 1e-9);
            }
        }

        #[test]
        fn constant_within_a_cell(seed in 0u64..1000, fx in 0.01..0.99f64, fy in 0.01..0.99f64) {
            let dtm = build_dtm(&PointCloud::new(plane(500, 0.1, seed)).unwrap(), &DtmConfig::default()).unwrap();
            let cs = dtm.cell_size();
            let [ox, oy] = dtm.origin();
            let (x0, y0) = (ox + 3.0 * cs, oy + 4.0 * cs);
            prop_assert_eq!(dtm.ground_height(x0 + 0.001, y0 + 0.001), dtm.ground_height(x0 + fx * cs, y0 + fy * cs));
        }
    }
}
