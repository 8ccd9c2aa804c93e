//! Angle estimation primitives and the decoupled two-stage estimator of the
//! composite channel under the geometric model.
//!
//! Stage 1 holds the RIS fixed and reads the BS angles of arrival (and, when
//! the UE array is large enough, the UE angles of departure) off the pilot
//! block. Stage 2 cycles the RIS, removes the known BS/UE factors and is left
//! with single-frequency problems on the RIS manifold as seen through the RIS
//! schedule. Sparse recovery is greedy: pick the strongest grid atom, refine
//! it within one grid cell, deflate, repeat; a coordinate-wise polish of the
//! DML criterion finishes the job.

use rand::Rng;
use rayon::prelude::*;

use crate::channel::{ChannelSet, GeometricParams, PathCounts, SystemGeometry};
use crate::error::{Error, Result};
use crate::linalg::{condition_number, guarded_lstsq, kron, kron_vec, pinv, vec_cols, CMat, CVec, C64};
use crate::manifold::{build_dictionary, steering, steering_derivative, ArraySpec, FreqGrid, SpatialFreq};
use crate::training::{
    dft_ris_sequence, orthogonal_pilots, ris_columns, simulate_uplink, MeasurementOperator, Protocol,
    TrainingPlan,
};

/// Golden-section iterations per axis (bracket shrinks by ≈1e−9).
pub const GOLDEN_ITERS: usize = 40;
/// Coordinate sweeps, then Gauss-Newton iterations, of the DML polish.
pub const COORDINATE_SWEEPS: usize = 4;
pub const POLISH_SWEEPS: usize = 50;
/// Condition number above which a steering or reduction matrix counts as
/// rank deficient.
pub const RANK_CONDITION: f64 = 1e8;

/// Map from a spatial frequency to a response vector.
pub trait Manifold: Sync {
    fn len(&self) -> usize;
    fn axes(&self) -> usize;
    fn vector(&self, w: SpatialFreq) -> CVec;
    /// `∂vector/∂w` along `axis`.
    fn derivative(&self, w: SpatialFreq, axis: usize) -> CVec;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn matrix(&self, freqs: &[SpatialFreq]) -> CMat {
        let mut out = CMat::zeros(self.len(), freqs.len());
        for (k, &w) in freqs.iter().enumerate() {
            out.set_column(k, &self.vector(w));
        }
        out
    }

    /// Responses at every grid point, one column each.
    fn dictionary(&self, grid: &FreqGrid) -> Result<CMat> {
        check_grid(self.axes(), grid)?;
        Ok(self.matrix(&grid.points()))
    }
}

fn check_grid(axes: usize, grid: &FreqGrid) -> Result<()> {
    if grid.axes() != axes {
        return Err(Error::dim(format!("{}-axis grid for a {axes}-axis manifold", grid.axes())));
    }
    Ok(())
}

impl Manifold for ArraySpec {
    fn len(&self) -> usize {
        ArraySpec::len(self)
    }

    fn axes(&self) -> usize {
        ArraySpec::axes(self)
    }

    fn vector(&self, w: SpatialFreq) -> CVec {
        steering(w, self)
    }

    fn derivative(&self, w: SpatialFreq, axis: usize) -> CVec {
        steering_derivative(w, self, axis)
    }

    fn dictionary(&self, grid: &FreqGrid) -> Result<CMat> {
        build_dictionary(self, grid)
    }
}

/// `w ↦ map · a(w)`, or `map · a*(w)` when `conjugate`; e.g. the RIS
/// manifold seen through a training schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    pub map: CMat,
    pub spec: ArraySpec,
    pub conjugate: bool,
}

impl Projected {
    pub fn new(map: CMat, spec: ArraySpec) -> Result<Self> {
        if map.ncols() != spec.len() {
            return Err(Error::dim(format!(
                "map has {} columns for a {}-element array",
                map.ncols(),
                spec.len()
            )));
        }
        Ok(Projected {
            map,
            spec,
            conjugate: false,
        })
    }
}

impl Manifold for Projected {
    fn len(&self) -> usize {
        self.map.nrows()
    }

    fn axes(&self) -> usize {
        self.spec.axes()
    }

    fn vector(&self, w: SpatialFreq) -> CVec {
        let a = steering(w, &self.spec);
        if self.conjugate {
            &self.map * a.map(|z| z.conj())
        } else {
            &self.map * a
        }
    }

    fn derivative(&self, w: SpatialFreq, axis: usize) -> CVec {
        let d = steering_derivative(w, &self.spec, axis);
        if self.conjugate {
            &self.map * d.map(|z| z.conj())
        } else {
            &self.map * d
        }
    }

    fn dictionary(&self, grid: &FreqGrid) -> Result<CMat> {
        let base = build_dictionary(&self.spec, grid)?;
        Ok(if self.conjugate {
            &self.map * base.map(|z| z.conj())
        } else {
            &self.map * base
        })
    }
}

/// Snapshots `data` (M'×n) observed on `manifold` with `d` sources.
#[derive(Debug, Clone)]
pub struct AoaProblem<M> {
    pub data: CMat,
    pub manifold: M,
    pub d: usize,
}

impl<M: Manifold> AoaProblem<M> {
    pub fn new(data: CMat, manifold: M, d: usize) -> Result<Self> {
        if data.nrows() != manifold.len() {
            return Err(Error::dim(format!(
                "{} data rows on a {}-element manifold",
                data.nrows(),
                manifold.len()
            )));
        }
        if data.ncols() == 0 {
            return Err(Error::arg("at least one snapshot is needed"));
        }
        if d == 0 || d >= manifold.len() {
            return Err(Error::arg(format!(
                "model order {d} must be positive and below the array size {}",
                manifold.len()
            )));
        }
        Ok(AoaProblem { data, manifold, d })
    }
}

/// `(1/n) Y Yᴴ`.
pub fn sample_covariance(y: &CMat) -> Result<CMat> {
    if y.ncols() == 0 {
        return Err(Error::arg("sample covariance of zero snapshots"));
    }
    Ok(y * y.adjoint() / C64::new(y.ncols() as f64, 0.0))
}

/// Normalized beamforming spectrum `‖dᵢᴴY‖² / (n‖dᵢ‖²)` over dictionary
/// columns.
fn dictionary_spectrum(dict: &CMat, norms: &[f64], y: &CMat) -> Vec<f64> {
    let corr = dict.adjoint() * y;
    let n = y.ncols() as f64;
    (0..dict.ncols())
        .map(|i| {
            if norms[i] == 0.0 {
                0.0
            } else {
                corr.row(i).norm_squared() / (n * norms[i])
            }
        })
        .collect()
}

fn column_norms(dict: &CMat) -> Vec<f64> {
    dict.column_iter().map(|c| c.norm_squared()).collect()
}

/// Beamforming spectrum on a grid, in grid order.
pub fn beamform_spectrum<M: Manifold>(problem: &AoaProblem<M>, grid: &FreqGrid) -> Result<Vec<f64>> {
    let dict = problem.manifold.dictionary(grid)?;
    Ok(dictionary_spectrum(&dict, &column_norms(&dict), &problem.data))
}

/// Flat indices of the grid neighbors of `flat` (periodic, all axes).
fn neighbors(grid: &FreqGrid, flat: usize) -> Vec<usize> {
    let idx = grid.unravel(flat);
    let res = grid.resolution();
    let axes = grid.axes();
    let mut out = Vec::new();
    for code in 0..3usize.pow(axes as u32) {
        let mut c = code;
        let mut moved = idx.clone();
        let mut zero = true;
        for axis in 0..axes {
            let step = (c % 3) as i64 - 1;
            c /= 3;
            zero &= step == 0;
            moved[axis] = (idx[axis] as i64 + step).rem_euclid(res[axis] as i64) as usize;
        }
        let j = grid.ravel(&moved);
        if !zero && j != flat {
            out.push(j);
        }
    }
    out
}

/// Strict local maxima of `values` on `grid`, strongest first; ties go to
/// the lowest flat index (lowest lexicographic frequency).
pub fn local_maxima(values: &[f64], grid: &FreqGrid) -> Vec<usize> {
    let mut peaks: Vec<usize> = (0..values.len())
        .filter(|&i| neighbors(grid, i).iter().all(|&j| values[i] > values[j]))
        .collect();
    peaks.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    peaks
}

/// `d` strongest strict local maxima of the beamforming spectrum.
pub fn beamform_peaks<M: Manifold>(problem: &AoaProblem<M>, grid: &FreqGrid) -> Result<Vec<SpatialFreq>> {
    let spectrum = beamform_spectrum(problem, grid)?;
    let peaks = local_maxima(&spectrum, grid);
    if peaks.len() < problem.d {
        return Err(Error::PeakShortfall {
            found: peaks.len(),
            wanted: problem.d,
        });
    }
    let points = grid.points();
    Ok(peaks[..problem.d].iter().map(|&i| points[i]).collect())
}

/// Indices of the `d` dictionary columns best correlated with `y`
/// (normalized); ties go to the lower index.
pub fn dictionary_peaks(y: &CMat, dict: &CMat, d: usize) -> Result<Vec<usize>> {
    if dict.nrows() != y.nrows() {
        return Err(Error::dim("dictionary and data disagree on the row count"));
    }
    if d > dict.ncols() {
        return Err(Error::PeakShortfall {
            found: dict.ncols(),
            wanted: d,
        });
    }
    let s = dictionary_spectrum(dict, &column_norms(dict), y);
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    order.truncate(d);
    Ok(order)
}

/// Dictionary of composite columns `a_R(w_R) ⊗ a_U*(w_U) ⊗ a_B(w_B)` over
/// the product of three grids; column index is `(i_R·|U| + i_U)·|B| + i_B`.
pub fn composite_dictionary(
    ris: &ArraySpec,
    ris_grid: &FreqGrid,
    ue: &ArraySpec,
    ue_grid: &FreqGrid,
    bs: &ArraySpec,
    bs_grid: &FreqGrid,
) -> Result<CMat> {
    let dr = build_dictionary(ris, ris_grid)?;
    let du = build_dictionary(ue, ue_grid)?.map(|z| z.conj());
    let db = build_dictionary(bs, bs_grid)?;
    let mut out = CMat::zeros(dr.nrows() * du.nrows() * db.nrows(), dr.ncols() * du.ncols() * db.ncols());
    let mut col = 0;
    for r in dr.column_iter() {
        for u in du.column_iter() {
            let ru = kron_vec(&r.into_owned(), &u.into_owned());
            for b in db.column_iter() {
                out.set_column(col, &kron_vec(&ru, &b.into_owned()));
                col += 1;
            }
        }
    }
    Ok(out)
}

fn orthonormal_basis(a: &CMat) -> Result<CMat> {
    if a.ncols() == 0 {
        return Ok(CMat::zeros(a.nrows(), 0));
    }
    if a.ncols() > a.nrows() {
        return Err(Error::unidentifiable(format!(
            "{} steering vectors in a {}-dimensional space",
            a.ncols(),
            a.nrows()
        )));
    }
    let svd = a.clone().svd(true, false);
    let s = &svd.singular_values;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let smin = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(smax > 0.0) || smax / smin > RANK_CONDITION {
        return Err(Error::unidentifiable("steering matrix drops rank"));
    }
    Ok(svd.u.expect("u requested").columns(0, a.ncols()).into_owned())
}

/// `P⊥_A Y`.
fn project_out(y: &CMat, a: &CMat) -> Result<CMat> {
    let q = orthonormal_basis(a)?;
    Ok(y - &q * (q.adjoint() * y))
}

/// Deterministic ML criterion `‖P⊥_A Y‖²_F`: residual energy after
/// projecting the snapshots onto the span of `A`. For a single snapshot this
/// is `yᴴ P⊥_A y`; divide by `n` for the `tr(P⊥_A R_Y)` form.
pub fn dml_objective(y: &CMat, a: &CMat) -> Result<f64> {
    if y.nrows() != a.nrows() {
        return Err(Error::dim("data and steering matrix disagree on the row count"));
    }
    Ok(project_out(y, a)?.norm_squared())
}

/// Maximizer of a unimodal `f` on `[lo, hi]`.
fn golden_max(mut f: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..GOLDEN_ITERS {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

fn with_axis(w: SpatialFreq, axis: usize, v: f64) -> SpatialFreq {
    if axis == 0 {
        SpatialFreq { w1: v, ..w }
    } else {
        SpatialFreq { w2: v, ..w }
    }
}

fn correlation<M: Manifold>(y: &CMat, manifold: &M, w: SpatialFreq) -> f64 {
    let a = manifold.vector(w);
    let e = a.norm_squared();
    if e == 0.0 {
        0.0
    } else {
        (a.adjoint() * y).norm_squared() / e
    }
}

/// Offset within ± one grid cell (per axis) that maximizes the normalized
/// correlation `‖a(ω)ᴴY‖²/‖a(ω)‖²` around `coarse`. Returns a zero offset
/// when nothing beats the coarse point.
pub fn refine_rotation<M: Manifold>(y: &CMat, coarse: SpatialFreq, manifold: &M, grid: &FreqGrid) -> Result<SpatialFreq> {
    check_grid(manifold.axes(), grid)?;
    let start = correlation(y, manifold, coarse);
    let mut w = coarse;
    for axis in 0..manifold.axes() {
        let c = w.component(axis);
        let h = grid.cell(axis);
        let best = golden_max(|v| correlation(y, manifold, with_axis(w, axis, v)), c - h, c + h);
        w = with_axis(w, axis, best);
    }
    if !(correlation(y, manifold, w) > start) {
        return Ok(SpatialFreq::ZERO);
    }
    Ok(SpatialFreq {
        w1: w.w1 - coarse.w1,
        w2: w.w2 - coarse.w2,
    })
}

fn raw_plus(a: SpatialFreq, b: SpatialFreq) -> SpatialFreq {
    SpatialFreq {
        w1: a.w1 + b.w1,
        w2: a.w2 + b.w2,
    }
}

/// DML refinement: a few coordinate-wise golden-section sweeps (each
/// frequency, one axis at a time, within ± one grid cell) followed by
/// Gauss-Newton steps on the variable-projection residual `P⊥_A Y`, which
/// converge where coupled paths make coordinate descent crawl.
pub fn dml_polish<M: Manifold>(y: &CMat, manifold: &M, freqs: &mut [SpatialFreq], grid: &FreqGrid) -> Result<f64> {
    let objective = |f: &[SpatialFreq]| dml_objective(y, &manifold.matrix(f)).unwrap_or(f64::INFINITY);
    let mut current = objective(freqs);
    if !current.is_finite() {
        return Err(Error::unidentifiable("initial steering matrix drops rank"));
    }
    let floor = 1e-30 * y.norm_squared();
    for _ in 0..COORDINATE_SWEEPS {
        let before = current;
        for i in 0..freqs.len() {
            for axis in 0..manifold.axes() {
                let c = freqs[i].component(axis);
                let h = grid.cell(axis);
                let mut trial = freqs.to_vec();
                let best = golden_max(
                    |v| {
                        trial[i] = with_axis(freqs[i], axis, v);
                        -objective(&trial)
                    },
                    c - h,
                    c + h,
                );
                let mut candidate = freqs.to_vec();
                candidate[i] = with_axis(freqs[i], axis, best);
                let value = objective(&candidate);
                if value < current {
                    freqs[i] = candidate[i];
                    current = value;
                }
            }
        }
        if current <= floor || before - current <= 1e-12 * before {
            break;
        }
    }
    for _ in 0..POLISH_SWEEPS {
        if current <= floor {
            break;
        }
        let Some(step) = gauss_newton_step(y, manifold, freqs) else {
            break;
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<SpatialFreq> = freqs
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let mut out = *w;
                    for axis in 0..manifold.axes() {
                        out = with_axis(out, axis, w.component(axis) + t * step[i * manifold.axes() + axis]);
                    }
                    out
                })
                .collect();
            let value = objective(&trial);
            if value < current {
                freqs.copy_from_slice(&trial);
                current = value;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        let size = step.iter().fold(0.0_f64, |m, v| m.max(v.abs())) * t;
        if !accepted || size < 1e-14 {
            break;
        }
    }
    for w in freqs.iter_mut() {
        *w = SpatialFreq::new(w.w1, w.w2);
    }
    Ok(current)
}

/// Gauss-Newton direction for `min ‖P⊥_A(ω) Y‖²` using the Kaufman
/// approximation `∂r/∂ω ≈ −P⊥_A (∂A/∂ω) A⁺Y`.
fn gauss_newton_step<M: Manifold>(y: &CMat, manifold: &M, freqs: &[SpatialFreq]) -> Option<Vec<f64>> {
    let a = manifold.matrix(freqs);
    let q = orthonormal_basis(&a).ok()?;
    let s = pinv(&a) * y;
    let r = y - &a * &s;
    let axes = manifold.axes();
    let np = freqs.len() * axes;
    let rows = y.nrows() * y.ncols();
    let mut jac = CMat::zeros(rows, np);
    for (i, &w) in freqs.iter().enumerate() {
        for axis in 0..axes {
            let da = manifold.derivative(w, axis);
            let perp = &da - &q * (q.adjoint() * &da);
            let block = -(&perp * s.row(i));
            jac.set_column(i * axes + axis, &vec_cols(&block));
        }
    }
    let rv = vec_cols(&r);
    let g = (jac.adjoint() * &jac).map(|z| z.re);
    let b = (jac.adjoint() * rv).map(|z| -z.re);
    let step = g.lu().solve(&b)?;
    step.iter().all(|v| v.is_finite()).then(|| step.iter().copied().collect())
}

/// Greedy sparse recovery on a fixed manifold and grid.
struct Searcher<'a, M> {
    manifold: &'a M,
    grid: &'a FreqGrid,
    dict: CMat,
    norms: Vec<f64>,
    points: Vec<SpatialFreq>,
}

impl<'a, M: Manifold> Searcher<'a, M> {
    fn new(manifold: &'a M, grid: &'a FreqGrid) -> Result<Self> {
        let dict = manifold.dictionary(grid)?;
        let norms = column_norms(&dict);
        Ok(Searcher {
            manifold,
            grid,
            dict,
            norms,
            points: grid.points(),
        })
    }

    fn near(&self, a: usize, b: usize) -> bool {
        let (ia, ib) = (self.grid.unravel(a), self.grid.unravel(b));
        ia.iter().zip(&ib).zip(self.grid.resolution()).all(|((&x, &y), &n)| {
            let d = x.abs_diff(y);
            d.min(n - d) <= 1
        })
    }

    /// Pick, refine, deflate `d` times, then polish the DML criterion.
    fn fit(&self, y: &CMat, d: usize) -> Result<Vec<SpatialFreq>> {
        if d >= self.manifold.len() {
            return Err(Error::arg(format!(
                "model order {d} must be below the array size {}",
                self.manifold.len()
            )));
        }
        let mut residual = y.clone();
        let mut picked: Vec<usize> = Vec::new();
        let mut freqs: Vec<SpatialFreq> = Vec::new();
        for _ in 0..d {
            let s = dictionary_spectrum(&self.dict, &self.norms, &residual);
            let best = (0..s.len())
                .filter(|&i| !picked.iter().any(|&p| self.near(i, p)))
                .fold(None, |acc: Option<usize>, i| match acc {
                    Some(j) if s[j] >= s[i] => Some(j),
                    _ => Some(i),
                });
            let Some(best) = best.filter(|&i| s[i] > 0.0) else {
                return Err(Error::PeakShortfall {
                    found: freqs.len(),
                    wanted: d,
                });
            };
            picked.push(best);
            let coarse = self.points[best];
            let offset = refine_rotation(&residual, coarse, self.manifold, self.grid)?;
            freqs.push(raw_plus(coarse, offset));
            residual = project_out(y, &self.manifold.matrix(&freqs))?;
        }
        dml_polish(y, self.manifold, &mut freqs, self.grid)?;
        Ok(freqs)
    }
}

/// Greedy grid matching with rotation refinement and DML polish.
pub fn estimate_frequencies<M: Manifold>(problem: &AoaProblem<M>, grid: &FreqGrid) -> Result<Vec<SpatialFreq>> {
    Searcher::new(&problem.manifold, grid)?.fit(&problem.data, problem.d)
}

/// Least-squares amplitudes `A(ω)⁺ Y` (one row per frequency).
pub fn fit_amplitudes<M: Manifold>(y: &CMat, manifold: &M, freqs: &[SpatialFreq]) -> Result<CMat> {
    guarded_lstsq(&manifold.matrix(freqs), y)
}

/// Search grids for every array in the system.
#[derive(Debug, Clone, PartialEq)]
pub struct Grids {
    pub bs: FreqGrid,
    pub ris: FreqGrid,
    pub ue: Vec<FreqGrid>,
}

impl Grids {
    pub fn for_geometry(geometry: &SystemGeometry) -> Self {
        Grids {
            bs: FreqGrid::for_array(&geometry.bs),
            ris: FreqGrid::for_array(&geometry.ris),
            ue: geometry.users.iter().map(FreqGrid::for_array).collect(),
        }
    }
}

/// Stage-1 angles. `w_ug[u]` is empty when the UE array of user `u` is too
/// small to resolve its paths (K_u ≤ d_G,u); those angles are then recovered
/// in stage 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Result {
    pub w_bh: Vec<SpatialFreq>,
    pub w_ug: Vec<Vec<SpatialFreq>>,
}

fn check_orthogonal(x: &CMat) -> Result<f64> {
    let gram = x * x.adjoint();
    let scale = gram.trace().re / x.nrows() as f64;
    let err = (&gram - CMat::identity(x.nrows(), x.nrows()) * C64::new(scale, 0.0)).norm();
    if !(scale > 0.0) || err > 1e-9 * scale * x.nrows() as f64 {
        return Err(Error::arg("pilot block must have orthogonal rows of equal energy"));
    }
    Ok(scale)
}

/// BS AoAs from the stage-1 snapshots `Y₁` (M×T₁) and, per user with
/// K_u > d_G,u, UE AoDs from the rows of `X₁Y₁ᴴ/(T₁√P_u)`.
pub fn stage1_angles(
    y1: &CMat,
    x1: &CMat,
    geometry: &SystemGeometry,
    counts: &PathCounts,
    grids: &Grids,
) -> Result<Stage1Result> {
    geometry.validate()?;
    let (m, k_total) = (geometry.m(), geometry.k_total());
    if y1.nrows() != m || x1.ncols() != y1.ncols() || x1.nrows() != k_total {
        return Err(Error::dim("stage-1 data must be M×T₁ with a K×T₁ pilot matrix"));
    }
    if counts.d_g.len() != geometry.user_count() {
        return Err(Error::dim("path counts must be given per user"));
    }
    if counts.d_h >= m {
        return Err(Error::arg(format!("d_H = {} needs more than {m} BS antennas", counts.d_h)));
    }
    let energy = check_orthogonal(x1)?;
    let w_bh = Searcher::new(&geometry.bs, &grids.bs)?.fit(y1, counts.d_h)?;
    let corr = x1 * y1.adjoint() / C64::new(energy, 0.0);
    let offsets = geometry.k_offsets();
    let mut w_ug = Vec::with_capacity(geometry.user_count());
    for (u, ue) in geometry.users.iter().enumerate() {
        let k = geometry.k(u);
        if k <= counts.d_g[u] {
            w_ug.push(Vec::new());
            continue;
        }
        let rows = corr.rows(offsets[u], k) / C64::new(geometry.powers[u].sqrt(), 0.0);
        w_ug.push(Searcher::new(ue, &grids.ue[u])?.fit(&rows, counts.d_g[u])?);
    }
    Ok(Stage1Result { w_bh, w_ug })
}

/// How a user's stage-2 data was reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Both BS and UE factors removed: column `ℓ·d_H + p` is
    /// `Ψ a_R(w_RG,ℓ − w_RH,p)·γ_H,p γ*_G,ℓ`.
    Full,
    /// Only the BS factor removed: columns `p·K_u .. (p+1)·K_u` hold
    /// `Ψ A_R(w_RG − w_RH,p) Γ A_Uᴴ` for BS path `p`.
    PerBsPath,
}

/// Stage-2 data of one user, one row per RIS state.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedUser {
    pub user: usize,
    pub kind: Reduction,
    pub data: CMat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Data {
    pub users: Vec<ReducedUser>,
    /// RIS states, one row `φ_bᵀ` per block.
    pub schedule: CMat,
}

/// Removes the stage-1 factors from the stage-2 samples. The plan must
/// repeat one orthogonal K×K pilot block per RIS state; the reduction works
/// per block because a single sample only sees `xᵀA_U*`, which collapses the
/// UE dimension.
pub fn stage2_reduce(
    y2: &CVec,
    plan2: &TrainingPlan,
    geometry: &SystemGeometry,
    stage1: &Stage1Result,
) -> Result<Stage2Data> {
    plan2.validate(geometry)?;
    if plan2.protocol != Protocol::BlockRepeat || plan2.include_direct {
        return Err(Error::arg("stage 2 needs a block-repeat plan without the direct column"));
    }
    let (m, k_total) = (geometry.m(), geometry.k_total());
    if y2.len() != m * plan2.t() {
        return Err(Error::dim(format!("{} samples for {} expected", y2.len(), m * plan2.t())));
    }
    if stage1.w_ug.len() != geometry.user_count() {
        return Err(Error::dim("stage-1 result and geometry disagree on the user count"));
    }
    let x_blk = plan2.x.columns(0, k_total).into_owned();
    let energy = check_orthogonal(&x_blk)?;
    let blocks = plan2.psi.nrows();
    let n = geometry.n();
    let mut schedule = CMat::zeros(blocks, n);
    for b in 0..blocks {
        schedule.set_row(b, &plan2.ris_phases(b * k_total).transpose());
    }
    let a_b = steering_of(&geometry.bs, &stage1.w_bh);
    let d_h = stage1.w_bh.len();
    let offsets = geometry.k_offsets();

    // per user: either pinv of A_U* ⊗ A_B or of A_B
    let mut out = Vec::new();
    let mut left = Vec::new();
    for u in 0..geometry.user_count() {
        let k = geometry.k(u);
        let (kind, map, cols) = if stage1.w_ug[u].is_empty() {
            (Reduction::PerBsPath, rank_checked_pinv(&a_b)?, d_h * k)
        } else {
            let a_u = steering_of(&geometry.users[u], &stage1.w_ug[u]).map(|z| z.conj());
            let b = kron(&a_u, &a_b);
            (Reduction::Full, rank_checked_pinv(&b)?, b.ncols())
        };
        left.push(map);
        out.push(ReducedUser {
            user: u,
            kind,
            data: CMat::zeros(blocks, cols),
        });
    }
    for b in 0..blocks {
        let yb = CMat::from_column_slice(m, k_total, y2.rows(b * k_total * m, k_total * m).as_slice());
        let w = yb * x_blk.adjoint() / C64::new(energy, 0.0);
        for (u, red) in out.iter_mut().enumerate() {
            let k = geometry.k(u);
            let wu = w.columns(offsets[u], k) / C64::new(geometry.powers[u].sqrt(), 0.0);
            match red.kind {
                Reduction::Full => {
                    let row = &left[u] * vec_cols(&wu.into_owned());
                    red.data.set_row(b, &row.transpose());
                }
                Reduction::PerBsPath => {
                    let r = &left[u] * wu;
                    for p in 0..d_h {
                        for i in 0..k {
                            red.data[(b, p * k + i)] = r[(p, i)];
                        }
                    }
                }
            }
        }
    }
    Ok(Stage2Data { users: out, schedule })
}

fn steering_of(spec: &ArraySpec, freqs: &[SpatialFreq]) -> CMat {
    spec.matrix(freqs)
}

fn rank_checked_pinv(a: &CMat) -> Result<CMat> {
    if a.ncols() > a.nrows() || condition_number(a) > RANK_CONDITION {
        return Err(Error::unidentifiable(format!(
            "{}×{} reduction matrix is rank deficient",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(pinv(a))
}

/// Stage-2 solver variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage2Mode {
    /// Independent fits per column; composite paths only.
    General,
    /// Single-antenna users: one d_G-sparse fit on BS path 0, then one
    /// shift fit per remaining BS path, giving separated RIS angles and gains
    /// under `w_RH[0] = 0`, `γ_H[0] = 1`.
    SingleAntennaUe,
}

/// One column of the composite steering matrix with its gain:
/// `gain · a_R(ris_diff) ⊗ a_U*(ue_aod) ⊗ a_B(bs_aoa)` in the block of `user`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositePath {
    pub user: usize,
    pub ris_diff: SpatialFreq,
    pub ue_aod: SpatialFreq,
    pub bs_aoa: SpatialFreq,
    pub gain: C64,
}

/// RIS-side parameters of one user from the single-antenna solver.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatedPaths {
    pub user: usize,
    pub w_rg: Vec<SpatialFreq>,
    pub w_rh: Vec<SpatialFreq>,
    pub gamma_g: Vec<C64>,
    pub gamma_h: Vec<C64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Result {
    pub paths: Vec<CompositePath>,
    /// Filled in [`Stage2Mode::SingleAntennaUe`] only.
    pub separated: Vec<SeparatedPaths>,
}

/// Single-frequency fit with LS gain.
fn single_fit<M: Manifold>(searcher: &Searcher<'_, M>, y: &CMat) -> Result<(SpatialFreq, C64)> {
    let w = searcher.fit(y, 1)?;
    let a = searcher.manifold.vector(w[0]);
    let gain = a.dotc(&y.column(0)) / C64::new(a.norm_squared(), 0.0);
    Ok((w[0], gain))
}

/// Recovers RIS difference frequencies and gains from the reduced data.
pub fn stage2_solve(
    data: &Stage2Data,
    stage1: &Stage1Result,
    geometry: &SystemGeometry,
    counts: &PathCounts,
    grids: &Grids,
    mode: Stage2Mode,
) -> Result<Stage2Result> {
    let ris = Projected::new(data.schedule.clone(), geometry.ris.clone())?;
    let searcher = Searcher::new(&ris, &grids.ris)?;
    let d_h = stage1.w_bh.len();
    if mode == Stage2Mode::SingleAntennaUe && geometry.users.iter().any(|u| u.len() != 1) {
        return Err(Error::arg("single-antenna mode needs K_u = 1 for every user"));
    }
    let mut paths = Vec::new();
    let mut separated = Vec::new();
    for red in &data.users {
        let u = red.user;
        let d_g = counts.d_g[u];
        match (mode, red.kind) {
            (_, Reduction::Full) => {
                let fits = (0..red.data.ncols())
                    .into_par_iter()
                    .map(|k| single_fit(&searcher, &red.data.columns(k, 1).into_owned()))
                    .collect::<Result<Vec<_>>>()?;
                for (k, (w, gain)) in fits.into_iter().enumerate() {
                    paths.push(CompositePath {
                        user: u,
                        ris_diff: w,
                        ue_aod: stage1.w_ug[u][k / d_h],
                        bs_aoa: stage1.w_bh[k % d_h],
                        gain,
                    });
                }
            }
            (Stage2Mode::General, Reduction::PerBsPath) => {
                let k = geometry.k(u);
                let ue = &geometry.users[u];
                let ue_searcher = if k > 1 { Some(Searcher::new(ue, &grids.ue[u])?) } else { None };
                for p in 0..d_h {
                    let r = red.data.columns(p * k, k).into_owned();
                    let diffs = searcher.fit(&r, d_g)?;
                    let q = fit_amplitudes(&r, &ris, &diffs)?;
                    for (l, &diff) in diffs.iter().enumerate() {
                        // row ℓ of Q is c·a_U(w_UG,ℓ)ᴴ
                        let (ue_aod, gain) = match &ue_searcher {
                            Some(s) => {
                                let (w, g) = single_fit(s, &CMat::from_column_slice(k, 1, q.row(l).adjoint().as_slice()))?;
                                (w, g.conj())
                            }
                            None => (SpatialFreq::ZERO, q[(l, 0)]),
                        };
                        paths.push(CompositePath {
                            user: u,
                            ris_diff: diff,
                            ue_aod,
                            bs_aoa: stage1.w_bh[p],
                            gain,
                        });
                    }
                }
            }
            (Stage2Mode::SingleAntennaUe, Reduction::PerBsPath) => {
                let sep = single_antenna_solve(red, &ris, &searcher, &grids.ris, d_h, d_g)?;
                for (l, (&w_rg, &g)) in sep.w_rg.iter().zip(&sep.gamma_g).enumerate() {
                    let _ = l;
                    for p in 0..d_h {
                        paths.push(CompositePath {
                            user: u,
                            ris_diff: w_rg.minus(sep.w_rh[p]),
                            ue_aod: SpatialFreq::ZERO,
                            bs_aoa: stage1.w_bh[p],
                            gain: sep.gamma_h[p] * g.conj(),
                        });
                    }
                }
                separated.push(sep);
            }
        }
    }
    Ok(Stage2Result { paths, separated })
}

fn single_antenna_solve(
    red: &ReducedUser,
    ris: &Projected,
    searcher: &Searcher<'_, Projected>,
    grid: &FreqGrid,
    d_h: usize,
    d_g: usize,
) -> Result<SeparatedPaths> {
    let first = red.data.columns(0, 1).into_owned();
    let w_rg = searcher.fit(&first, d_g)?;
    let c = fit_amplitudes(&first, ris, &w_rg)?;
    // template Σ_ℓ c_ℓ a_R(w_RG,ℓ − ω) = diag(Σ_ℓ c_ℓ a_R(w_RG,ℓ)) a_R*(ω)
    let mut s = CVec::zeros(ris.spec.len());
    for (l, &w) in w_rg.iter().enumerate() {
        s += steering(w, &ris.spec) * c[(l, 0)];
    }
    let shifted = Projected {
        map: &ris.map * CMat::from_diagonal(&s),
        spec: ris.spec.clone(),
        conjugate: true,
    };
    let shift_searcher = Searcher::new(&shifted, grid)?;
    let mut w_rh = vec![SpatialFreq::ZERO];
    let mut gamma_h = vec![C64::new(1.0, 0.0)];
    for p in 1..d_h {
        let (w, g) = single_fit(&shift_searcher, &red.data.columns(p, 1).into_owned())?;
        w_rh.push(w);
        gamma_h.push(g);
    }
    Ok(SeparatedPaths {
        user: red.user,
        w_rg,
        w_rh,
        gamma_g: (0..d_g).map(|l| c[(l, 0)].conj()).collect(),
        gamma_h,
    })
}

/// Composite paths of a parameter set (no direct channel).
pub fn composite_paths(params: &GeometricParams) -> Vec<CompositePath> {
    let mut out = Vec::new();
    for (u, up) in params.users.iter().enumerate() {
        for l in 0..up.d_g() {
            for p in 0..params.d_h() {
                out.push(CompositePath {
                    user: u,
                    ris_diff: up.w_rg[l].minus(params.w_rh[p]),
                    ue_aod: up.w_ug[l],
                    bs_aoa: params.w_bh[p],
                    gain: params.gamma_h[p] * up.gamma_g[l].conj(),
                });
            }
        }
    }
    out
}

fn path_column(path: &CompositePath, geometry: &SystemGeometry) -> CVec {
    let ar = steering(path.ris_diff, &geometry.ris);
    let au = steering(path.ue_aod, &geometry.users[path.user]).map(|z| z.conj());
    kron_vec(&ar, &kron_vec(&au, &steering(path.bs_aoa, &geometry.bs)))
}

fn user_offsets(geometry: &SystemGeometry) -> Vec<usize> {
    let (m, n) = (geometry.m(), geometry.n());
    geometry.k_offsets().iter().map(|&o| o * m * n).collect()
}

/// Composite channel vector (user-major, no direct block) from paths.
pub fn reconstruct_composite(paths: &[CompositePath], geometry: &SystemGeometry) -> Result<CVec> {
    let offsets = user_offsets(geometry);
    let mut out = CVec::zeros(geometry.composite_len(false));
    for path in paths {
        if path.user >= geometry.user_count() {
            return Err(Error::arg(format!("path refers to user {}", path.user)));
        }
        let col = path_column(path, geometry) * path.gain;
        let mut dst = out.rows_mut(offsets[path.user], col.len());
        dst += col;
    }
    Ok(out)
}

/// LS gains for frozen angles: `(Z A(ω̂))⁺ y` with per-user powers folded
/// into `Z`.
pub fn refit_gains(
    y: &CVec,
    op: &MeasurementOperator,
    paths: &[CompositePath],
    geometry: &SystemGeometry,
) -> Result<Vec<C64>> {
    if op.include_direct {
        return Err(Error::arg("gain refit assumes no direct channel"));
    }
    let offsets = user_offsets(geometry);
    let z = op.with_powers(geometry);
    let len = geometry.composite_len(false);
    let mut za = CMat::zeros(y.len(), paths.len());
    for (j, path) in paths.iter().enumerate() {
        let mut h = CVec::zeros(len);
        let col = path_column(path, geometry);
        h.rows_mut(offsets[path.user], col.len()).copy_from(&col);
        za.set_column(j, &z.apply(&h)?);
    }
    let g = guarded_lstsq(&za, &CMat::from_column_slice(y.len(), 1, y.as_slice()))?;
    Ok(g.column(0).iter().copied().collect())
}

/// Training for the decoupled estimator: one fixed RIS state `phi1` over
/// the stage-1 pilots `x1`, then a block-repeat stage-2 plan.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledPlan {
    pub x1: CMat,
    pub phi1: CVec,
    pub stage2: TrainingPlan,
}

impl DecoupledPlan {
    /// Orthogonal pilots repeated `t1_blocks` times in stage 1 under random
    /// RIS phases, and `blocks2` DFT RIS states in stage 2. Fewer than N+1
    /// states keep the leading rows of the (N+1)-point DFT schedule.
    pub fn new<R: Rng + ?Sized>(geometry: &SystemGeometry, t1_blocks: usize, blocks2: usize, rng: &mut R) -> Result<Self> {
        let k = geometry.k_total();
        if t1_blocks == 0 || blocks2 == 0 {
            return Err(Error::arg("each stage needs at least one pilot block"));
        }
        let pilots = orthogonal_pilots(k);
        let mut x1 = CMat::zeros(k, k * t1_blocks);
        for b in 0..t1_blocks {
            x1.columns_mut(b * k, k).copy_from(&pilots);
        }
        let phi1 = CVec::from_fn(geometry.n(), |_, _| {
            C64::from_polar(1.0, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
        });
        let n = geometry.n();
        let psi = ris_columns(&dft_ris_sequence(blocks2.max(n + 1), n)?.rows(0, blocks2).into_owned());
        let stage2 = TrainingPlan::block_repeat(&pilots, psi, false)?;
        Ok(DecoupledPlan { x1, phi1, stage2 })
    }

    pub fn stage1_plan(&self) -> Result<TrainingPlan> {
        let t1 = self.x1.ncols();
        let row = self.phi1.adjoint();
        let mut psi = CMat::zeros(t1, row.ncols());
        for t in 0..t1 {
            psi.set_row(t, &row);
        }
        TrainingPlan::per_sample(self.x1.clone(), psi, false)
    }

    pub fn total_training(&self) -> usize {
        self.x1.ncols() + self.stage2.t()
    }
}

/// Noisy stage-1 snapshots (M×T₁) and stacked stage-2 samples.
pub fn simulate_decoupled<R: Rng + ?Sized>(
    channels: &ChannelSet,
    plan: &DecoupledPlan,
    geometry: &SystemGeometry,
    rng: &mut R,
) -> Result<(CMat, CVec)> {
    let y1 = simulate_uplink(channels, &plan.stage1_plan()?, geometry, rng)?;
    let y2 = simulate_uplink(channels, &plan.stage2, geometry, rng)?;
    Ok((CMat::from_column_slice(geometry.m(), plan.x1.ncols(), y1.as_slice()), y2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledEstimate {
    pub stage1: Stage1Result,
    pub stage2: Stage2Result,
    pub h_c: CVec,
}

/// Stage 1, stage-2 reduction and solve, and reconstruction.
pub fn decoupled_estimate(
    y1: &CMat,
    y2: &CVec,
    plan: &DecoupledPlan,
    geometry: &SystemGeometry,
    counts: &PathCounts,
    grids: &Grids,
    mode: Stage2Mode,
) -> Result<DecoupledEstimate> {
    let stage1 = stage1_angles(y1, &plan.x1, geometry, counts, grids)?;
    let data = stage2_reduce(y2, &plan.stage2, geometry, &stage1)?;
    let stage2 = stage2_solve(&data, &stage1, geometry, counts, grids, mode)?;
    let h_c = reconstruct_composite(&stage2.paths, geometry)?;
    Ok(DecoupledEstimate { stage1, stage2, h_c })
}
