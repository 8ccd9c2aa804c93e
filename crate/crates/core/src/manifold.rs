//! Array manifolds for the BS, UE and RIS: steering vectors, angle to
//! spatial-frequency conversion and sampled dictionaries.
//!
//! URA steering vectors are `a_x(w1) ⊗ a_y(w2)`, so the linear element index
//! of a URA runs y-fastest: element `(ix, iy)` sits at `ix·count_y + iy`.
//! Spatial frequencies are kept wrapped to `(-π, π]`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CMat, CVec, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArrayKind {
    Ula,
    Ura,
}

/// Geometry of a uniform array. Spacings are in wavelengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub kind: ArrayKind,
    pub count_x: usize,
    pub count_y: usize,
    pub spacing_x: f64,
    pub spacing_y: f64,
}

impl ArraySpec {
    pub fn ula(count: usize, spacing: f64) -> Result<Self> {
        let spec = ArraySpec {
            kind: ArrayKind::Ula,
            count_x: count,
            count_y: 1,
            spacing_x: spacing,
            spacing_y: spacing,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn ura(count_x: usize, count_y: usize, spacing_x: f64, spacing_y: f64) -> Result<Self> {
        let spec = ArraySpec {
            kind: ArrayKind::Ura,
            count_x,
            count_y,
            spacing_x,
            spacing_y,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Half-wavelength ULA.
    pub fn half_wave_ula(count: usize) -> Self {
        Self::ula(count.max(1), 0.5).expect("valid half-wave ULA")
    }

    pub fn validate(&self) -> Result<()> {
        if self.count_x == 0 || self.count_y == 0 {
            return Err(Error::arg("array counts must be at least 1"));
        }
        if self.kind == ArrayKind::Ula && self.count_y != 1 {
            return Err(Error::arg("a ULA has count_y = 1"));
        }
        if !(self.spacing_x > 0.0) || (self.kind == ArrayKind::Ura && !(self.spacing_y > 0.0)) {
            return Err(Error::arg("array spacings must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.count_x * self.count_y
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of spatial-frequency axes (1 for a ULA, 2 for a URA).
    pub fn axes(&self) -> usize {
        match self.kind {
            ArrayKind::Ula => 1,
            ArrayKind::Ura => 2,
        }
    }
}

/// A 1D or 2D spatial frequency in radians per element. `w2` is zero for
/// linear arrays.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpatialFreq {
    pub w1: f64,
    pub w2: f64,
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap(w: f64) -> f64 {
    let mut r = (w + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

impl SpatialFreq {
    pub fn new(w1: f64, w2: f64) -> Self {
        SpatialFreq {
            w1: wrap(w1),
            w2: wrap(w2),
        }
    }

    pub fn linear(w1: f64) -> Self {
        Self::new(w1, 0.0)
    }

    pub const ZERO: SpatialFreq = SpatialFreq { w1: 0.0, w2: 0.0 };

    pub fn plus(self, other: SpatialFreq) -> Self {
        Self::new(self.w1 + other.w1, self.w2 + other.w2)
    }

    pub fn minus(self, other: SpatialFreq) -> Self {
        Self::new(self.w1 - other.w1, self.w2 - other.w2)
    }

    pub fn neg(self) -> Self {
        Self::new(-self.w1, -self.w2)
    }

    pub fn component(&self, axis: usize) -> f64 {
        if axis == 0 {
            self.w1
        } else {
            self.w2
        }
    }

    /// Largest per-axis distance on the circle.
    pub fn distance(&self, other: &SpatialFreq) -> f64 {
        wrap(self.w1 - other.w1)
            .abs()
            .max(wrap(self.w2 - other.w2).abs())
    }
}

/// `[1, e^{jw}, ..., e^{j(count-1)w}]`.
pub fn ula_steering(w: f64, count: usize) -> CVec {
    CVec::from_fn(count, |m, _| C64::from_polar(1.0, m as f64 * w))
}

/// `a_x(w1) ⊗ a_y(w2)` for a URA.
pub fn ura_steering(w: SpatialFreq, spec: &ArraySpec) -> Result<CVec> {
    if spec.kind != ArrayKind::Ura {
        return Err(Error::arg("ura_steering called with a ULA spec"));
    }
    Ok(planar(w, spec.count_x, spec.count_y))
}

fn planar(w: SpatialFreq, nx: usize, ny: usize) -> CVec {
    CVec::from_fn(nx * ny, |i, _| {
        let (ix, iy) = (i / ny, i % ny);
        C64::from_polar(1.0, ix as f64 * w.w1 + iy as f64 * w.w2)
    })
}

/// Steering vector for any array kind; `w.w2` is ignored for a ULA.
pub fn steering(w: SpatialFreq, spec: &ArraySpec) -> CVec {
    match spec.kind {
        ArrayKind::Ula => ula_steering(w.w1, spec.count_x),
        ArrayKind::Ura => planar(w, spec.count_x, spec.count_y),
    }
}

/// Derivative of [`steering`] with respect to the frequency along `axis`:
/// `j·diag(index along axis)·a`.
pub fn steering_derivative(w: SpatialFreq, spec: &ArraySpec, axis: usize) -> CVec {
    let a = steering(w, spec);
    let ny = spec.count_y;
    CVec::from_fn(a.len(), |i, _| {
        let idx = match (spec.kind, axis) {
            (ArrayKind::Ula, 0) => i,
            (ArrayKind::Ula, _) => 0,
            (ArrayKind::Ura, 0) => i / ny,
            (ArrayKind::Ura, _) => i % ny,
        };
        C64::new(0.0, idx as f64) * a[i]
    })
}

/// Matrix whose columns are steering vectors at `freqs`.
pub fn steering_matrix(freqs: &[SpatialFreq], spec: &ArraySpec) -> CMat {
    let mut out = CMat::zeros(spec.len(), freqs.len());
    for (k, w) in freqs.iter().enumerate() {
        out.set_column(k, &steering(*w, spec));
    }
    out
}

/// Maps azimuth/elevation (degrees) to spatial frequencies:
/// `w1 = 2πΔx sin(az)`, `w2 = 2πΔy sin(el) cos(az)` (zero for a ULA).
pub fn freq_from_angles(azimuth_deg: f64, elevation_deg: f64, spec: &ArraySpec) -> Result<SpatialFreq> {
    if !(-90.0..=90.0).contains(&azimuth_deg) {
        return Err(Error::arg(format!("azimuth {azimuth_deg} outside [-90, 90]")));
    }
    if !(0.0..=90.0).contains(&elevation_deg) {
        return Err(Error::arg(format!("elevation {elevation_deg} outside [0, 90]")));
    }
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let w1 = 2.0 * PI * spec.spacing_x * az.sin();
    let w2 = match spec.kind {
        ArrayKind::Ula => 0.0,
        ArrayKind::Ura => 2.0 * PI * spec.spacing_y * el.sin() * az.cos(),
    };
    Ok(SpatialFreq::new(w1, w2))
}

/// Uniform frequency grid on `(-π, π]` per axis, enumerated in increasing
/// lexicographic `(w1, w2)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqGrid {
    resolution: Vec<usize>,
}

pub const DEFAULT_GRID_1D: usize = 256;
pub const DEFAULT_GRID_2D: usize = 64;

impl FreqGrid {
    pub fn uniform(resolution: &[usize]) -> Result<Self> {
        if resolution.is_empty() || resolution.iter().any(|&r| r == 0) {
            return Err(Error::arg("grid resolution must be positive on every axis"));
        }
        Ok(FreqGrid {
            resolution: resolution.to_vec(),
        })
    }

    pub fn uniform_1d(n: usize) -> Result<Self> {
        Self::uniform(&[n])
    }

    pub fn uniform_2d(n1: usize, n2: usize) -> Result<Self> {
        Self::uniform(&[n1, n2])
    }

    /// Default grid for an array: 256 points for a ULA, 64×64 for a URA.
    pub fn for_array(spec: &ArraySpec) -> Self {
        match spec.kind {
            ArrayKind::Ula => FreqGrid {
                resolution: vec![DEFAULT_GRID_1D],
            },
            ArrayKind::Ura => FreqGrid {
                resolution: vec![DEFAULT_GRID_2D, DEFAULT_GRID_2D],
            },
        }
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn axes(&self) -> usize {
        self.resolution.len()
    }

    pub fn len(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid spacing along `axis` in radians.
    pub fn cell(&self, axis: usize) -> f64 {
        2.0 * PI / self.resolution[axis] as f64
    }

    /// Frequency of sample `i` on `axis`: `-π + 2π(i+1)/n`.
    pub fn axis_value(&self, axis: usize, i: usize) -> f64 {
        let n = self.resolution[axis] as f64;
        -PI + 2.0 * PI * (i as f64 + 1.0) / n
    }

    /// Multi-index of flat point `flat` (last axis fastest).
    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.axes()];
        for axis in (0..self.axes()).rev() {
            idx[axis] = flat % self.resolution[axis];
            flat /= self.resolution[axis];
        }
        idx
    }

    pub fn ravel(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.resolution)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    /// Coordinates of flat point `flat`.
    pub fn coords(&self, flat: usize) -> Vec<f64> {
        self.unravel(flat)
            .iter()
            .enumerate()
            .map(|(axis, &i)| self.axis_value(axis, i))
            .collect()
    }

    /// Grid points as spatial frequencies (axes beyond the second are
    /// dropped; intended for 1D and 2D grids).
    pub fn points(&self) -> Vec<SpatialFreq> {
        (0..self.len())
            .map(|i| {
                let c = self.coords(i);
                SpatialFreq {
                    w1: c[0],
                    w2: c.get(1).copied().unwrap_or(0.0),
                }
            })
            .collect()
    }

    /// Nearest grid index along `axis` for frequency `w`.
    pub fn nearest_index(&self, axis: usize, w: f64) -> usize {
        let n = self.resolution[axis];
        let pos = (wrap(w) + PI) / self.cell(axis) - 1.0;
        (pos.round() as i64).rem_euclid(n as i64) as usize
    }
}

/// Dictionary whose column `i` is the steering vector at grid point `i`.
pub fn build_dictionary(spec: &ArraySpec, grid: &FreqGrid) -> Result<CMat> {
    if grid.is_empty() {
        return Err(Error::arg("empty grid"));
    }
    if grid.axes() != spec.axes() {
        return Err(Error::dim(format!(
            "{}-axis grid for a {}-axis array",
            grid.axes(),
            spec.axes()
        )));
    }
    Ok(steering_matrix(&grid.points(), spec))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: C64, b: C64) -> bool {
        (a - b).norm() < 1e-14
    }

    #[test]
    fn ula_examples() {
        let a = ula_steering(0.0, 4);
        assert!(a.iter().all(|&z| z == C64::new(1.0, 0.0)));
        let b = ula_steering(PI, 2);
        assert!(close(b[0], C64::new(1.0, 0.0)) && close(b[1], C64::new(-1.0, 0.0)));
        let q = ula_steering(PI / 2.0, 4);
        let expect = [
            C64::new(1., 0.),
            C64::new(0., 1.),
            C64::new(-1., 0.),
            C64::new(0., -1.),
        ];
        for (x, e) in q.iter().zip(expect) {
            assert!(close(*x, e));
        }
        assert_eq!(ula_steering(1.234, 7)[0], C64::new(1.0, 0.0));
    }

    #[test]
    fn ura_examples() {
        let spec = ArraySpec::ura(2, 2, 0.5, 0.5).unwrap();
        let ones = ura_steering(SpatialFreq::ZERO, &spec).unwrap();
        assert!(ones.iter().all(|&z| close(z, C64::new(1.0, 0.0))));
        let x = ura_steering(SpatialFreq::new(PI, 0.0), &spec).unwrap();
        let expect = [1.0, 1.0, -1.0, -1.0];
        for (z, e) in x.iter().zip(expect) {
            assert!(close(*z, C64::new(e, 0.0)));
        }
        let m = ura_steering(SpatialFreq::new(PI / 2.0, PI), &spec).unwrap();
        let expect = [
            C64::new(1., 0.),
            C64::new(-1., 0.),
            C64::new(0., 1.),
            C64::new(0., -1.),
        ];
        for (z, e) in m.iter().zip(expect) {
            assert!(close(*z, e));
        }
        assert!(ura_steering(SpatialFreq::ZERO, &ArraySpec::half_wave_ula(3)).is_err());
    }

    #[test]
    fn angle_conversion_examples() {
        let ula = ArraySpec::half_wave_ula(4);
        assert_eq!(freq_from_angles(0.0, 0.0, &ula).unwrap().w1, 0.0);
        assert!((freq_from_angles(90.0, 0.0, &ula).unwrap().w1 - PI).abs() < 1e-15);
        let ura = ArraySpec::ura(4, 4, 0.5, 0.5).unwrap();
        let w = freq_from_angles(30.0, 60.0, &ura).unwrap();
        assert!((w.w1 - PI * 0.5).abs() < 1e-14);
        assert!((w.w2 - PI * 0.75).abs() < 1e-14);
        assert!(freq_from_angles(91.0, 0.0, &ula).is_err());
        assert!(freq_from_angles(0.0, -1.0, &ura).is_err());
    }

    #[test]
    fn dictionary_examples() {
        let g = FreqGrid::uniform_1d(1).unwrap();
        // a single-point grid sits at π; build an explicit zero-frequency column instead
        assert_eq!(g.points()[0].w1, PI);
        let d = steering_matrix(&[SpatialFreq::ZERO], &ArraySpec::half_wave_ula(3));
        assert!(d.iter().all(|&z| z == C64::new(1.0, 0.0)));

        let g2 = FreqGrid::uniform_1d(2).unwrap();
        let pts = g2.points();
        assert_eq!(pts[0].w1, 0.0);
        assert_eq!(pts[1].w1, PI);
        let d2 = build_dictionary(&ArraySpec::half_wave_ula(2), &g2).unwrap();
        assert!(close(d2[(0, 0)], C64::new(1., 0.)) && close(d2[(0, 1)], C64::new(1., 0.)));
        assert!(close(d2[(1, 0)], C64::new(1., 0.)) && close(d2[(1, 1)], C64::new(-1., 0.)));

        let spec = ArraySpec::half_wave_ula(8);
        let grid = FreqGrid::uniform_1d(32).unwrap();
        let dict = build_dictionary(&spec, &grid).unwrap();
        let truth = steering(grid.points()[11], &spec);
        let corr = (dict.column(11).adjoint() * &truth)[0].norm() / 8.0;
        assert!((corr - 1.0).abs() < 1e-14);
        assert!(build_dictionary(&spec, &FreqGrid::uniform_2d(4, 4).unwrap()).is_err());
    }

    #[test]
    fn grid_is_lexicographically_increasing() {
        let g = FreqGrid::uniform_2d(4, 3).unwrap();
        let pts = g.points();
        for w in pts.windows(2) {
            assert!((w[0].w1, w[0].w2) < (w[1].w1, w[1].w2));
        }
        assert!(pts.iter().all(|p| p.w1 > -PI && p.w1 <= PI));
        for i in 0..g.len() {
            assert_eq!(g.ravel(&g.unravel(i)), i);
        }
        assert_eq!(g.nearest_index(0, pts[7].w1), g.unravel(7)[0]);
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap(PI), PI);
        assert_eq!(wrap(-PI), PI);
        assert!((wrap(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert!(wrap(7.0) <= PI && wrap(7.0) > -PI);
    }
}
