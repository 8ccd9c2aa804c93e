//! Fisher information and Cramér-Rao bounds for the composite channel under
//! the unstructured and the geometric (path-based) parameterizations.
//!
//! Real quantities stack complex ones as `[Re; Im]`. The geometric parameter
//! vector η holds, in order: BS AoAs of the RIS→BS paths, their gains and
//! RIS AoDs (the first path excluded once normalized), then per user the RIS
//! AoAs, gains and UE AoDs of the RIS→UE paths followed by the BS AoAs, gains
//! and UE AoAs of the direct paths. Gains contribute `[Re, Im]` per path and
//! 2D frequencies `[w1, w2]` per path. UE frequencies are omitted for
//! single-antenna users, whose array has no angular response.

use crate::channel::{GeometricParams, SystemGeometry};
use crate::error::{Error, Result};
use crate::linalg::{
    hermitian_inverse, kron_vec, real_rep, real_stack, symmetric_eigen_real, CMat, CVec, RMat, RVec,
    C64, CONDITION_LIMIT, J,
};
use crate::manifold::{steering, steering_derivative, ArraySpec, SpatialFreq};
use crate::training::{assemble_measurement, MeasurementOperator, TrainingPlan};

/// Bound matrix (when kept) and its mean diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CrbReport {
    pub matrix: Option<RMat>,
    pub mean_diag: f64,
    pub mean_diag_db: f64,
}

impl CrbReport {
    fn new(matrix: Option<RMat>, mean_diag: f64) -> Self {
        CrbReport {
            matrix,
            mean_diag,
            mean_diag_db: 10.0 * mean_diag.log10(),
        }
    }
}

/// `(σ²/2P)(Z̆ᵀZ̆)⁻¹ = (σ²/2P)·realrep((ZᴴZ)⁻¹)`.
pub fn crb_unstructured(z: &MeasurementOperator, p: f64, sigma2: f64) -> Result<CrbReport> {
    let core_inv = unstructured_core_inverse(z)?;
    let full = crate::linalg::kron(&core_inv, &CMat::identity(z.m, z.m));
    let matrix = real_rep(&full).scale(sigma2 / (2.0 * p));
    let mean = matrix.trace() / matrix.nrows() as f64;
    Ok(CrbReport::new(Some(matrix), mean))
}

/// Mean diagonal of the unstructured bound without forming it.
pub fn crb_unstructured_mean_diag(z: &MeasurementOperator, p: f64, sigma2: f64) -> Result<f64> {
    let core_inv = unstructured_core_inverse(z)?;
    Ok(sigma2 / (2.0 * p) * core_inv.trace().re / core_inv.nrows() as f64)
}

fn unstructured_core_inverse(z: &MeasurementOperator) -> Result<CMat> {
    if z.core.nrows() < z.core.ncols() {
        return Err(Error::Identifiability {
            reason: format!(
                "{} samples for {} unknowns per BS antenna",
                z.core.nrows(),
                z.core.ncols()
            ),
            null_params: Vec::new(),
        });
    }
    hermitian_inverse(&z.gram_core())
}

/// One real entry of η.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    BhFreq { path: usize, axis: usize },
    HGainRe { path: usize },
    HGainIm { path: usize },
    RhFreq { path: usize, axis: usize },
    RgFreq { user: usize, path: usize, axis: usize },
    GGainRe { user: usize, path: usize },
    GGainIm { user: usize, path: usize },
    UgFreq { user: usize, path: usize, axis: usize },
    BfFreq { user: usize, path: usize, axis: usize },
    FGainRe { user: usize, path: usize },
    FGainIm { user: usize, path: usize },
    UfFreq { user: usize, path: usize, axis: usize },
}

/// Ordered list of the real parameters in η.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaLayout {
    pub params: Vec<Param>,
    pub normalized: bool,
    pub d_h: usize,
    pub d_g: Vec<usize>,
    pub d_f: Vec<usize>,
}

impl EtaLayout {
    /// Layout matching the path counts of `params`. With `normalized`, the
    /// first RIS→BS path's RIS AoD and gain are fixed and excluded.
    pub fn new(params: &GeometricParams, geometry: &SystemGeometry, normalized: bool) -> Result<Self> {
        params.validate()?;
        if params.users.len() != geometry.user_count() {
            return Err(Error::dim("parameter set and geometry disagree on the user count"));
        }
        let (bs_axes, ris_axes) = (geometry.bs.axes(), geometry.ris.axes());
        let d_h = params.d_h();
        let first = normalized as usize;
        let mut out = Vec::new();
        for path in 0..d_h {
            for axis in 0..bs_axes {
                out.push(Param::BhFreq { path, axis });
            }
        }
        for path in first..d_h {
            out.push(Param::HGainRe { path });
            out.push(Param::HGainIm { path });
        }
        for path in first..d_h {
            for axis in 0..ris_axes {
                out.push(Param::RhFreq { path, axis });
            }
        }
        for (user, up) in params.users.iter().enumerate() {
            let ue = &geometry.users[user];
            let ue_axes = if ue.len() > 1 { ue.axes() } else { 0 };
            for path in 0..up.d_g() {
                for axis in 0..ris_axes {
                    out.push(Param::RgFreq { user, path, axis });
                }
            }
            for path in 0..up.d_g() {
                out.push(Param::GGainRe { user, path });
                out.push(Param::GGainIm { user, path });
            }
            for path in 0..up.d_g() {
                for axis in 0..ue_axes {
                    out.push(Param::UgFreq { user, path, axis });
                }
            }
            let d_f = up.direct.d();
            for path in 0..d_f {
                for axis in 0..bs_axes {
                    out.push(Param::BfFreq { user, path, axis });
                }
            }
            for path in 0..d_f {
                out.push(Param::FGainRe { user, path });
                out.push(Param::FGainIm { user, path });
            }
            for path in 0..d_f {
                for axis in 0..ue_axes {
                    out.push(Param::UfFreq { user, path, axis });
                }
            }
        }
        Ok(EtaLayout {
            params: out,
            normalized,
            d_h,
            d_g: params.users.iter().map(|u| u.d_g()).collect(),
            d_f: params.users.iter().map(|u| u.direct.d()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

fn comp(w: &SpatialFreq, axis: usize) -> f64 {
    if axis == 0 {
        w.w1
    } else {
        w.w2
    }
}

fn set_comp(w: &mut SpatialFreq, axis: usize, v: f64) {
    if axis == 0 {
        w.w1 = v;
    } else {
        w.w2 = v;
    }
}

fn get(params: &GeometricParams, p: Param) -> f64 {
    match p {
        Param::BhFreq { path, axis } => comp(&params.w_bh[path], axis),
        Param::HGainRe { path } => params.gamma_h[path].re,
        Param::HGainIm { path } => params.gamma_h[path].im,
        Param::RhFreq { path, axis } => comp(&params.w_rh[path], axis),
        Param::RgFreq { user, path, axis } => comp(&params.users[user].w_rg[path], axis),
        Param::GGainRe { user, path } => params.users[user].gamma_g[path].re,
        Param::GGainIm { user, path } => params.users[user].gamma_g[path].im,
        Param::UgFreq { user, path, axis } => comp(&params.users[user].w_ug[path], axis),
        Param::BfFreq { user, path, axis } => comp(&params.users[user].direct.w_bf[path], axis),
        Param::FGainRe { user, path } => params.users[user].direct.gamma_f[path].re,
        Param::FGainIm { user, path } => params.users[user].direct.gamma_f[path].im,
        Param::UfFreq { user, path, axis } => comp(&params.users[user].direct.w_uf[path], axis),
    }
}

fn set(params: &mut GeometricParams, p: Param, v: f64) {
    match p {
        Param::BhFreq { path, axis } => set_comp(&mut params.w_bh[path], axis, v),
        Param::HGainRe { path } => params.gamma_h[path].re = v,
        Param::HGainIm { path } => params.gamma_h[path].im = v,
        Param::RhFreq { path, axis } => set_comp(&mut params.w_rh[path], axis, v),
        Param::RgFreq { user, path, axis } => set_comp(&mut params.users[user].w_rg[path], axis, v),
        Param::GGainRe { user, path } => params.users[user].gamma_g[path].re = v,
        Param::GGainIm { user, path } => params.users[user].gamma_g[path].im = v,
        Param::UgFreq { user, path, axis } => set_comp(&mut params.users[user].w_ug[path], axis, v),
        Param::BfFreq { user, path, axis } => set_comp(&mut params.users[user].direct.w_bf[path], axis, v),
        Param::FGainRe { user, path } => params.users[user].direct.gamma_f[path].re = v,
        Param::FGainIm { user, path } => params.users[user].direct.gamma_f[path].im = v,
        Param::UfFreq { user, path, axis } => set_comp(&mut params.users[user].direct.w_uf[path], axis, v),
    }
}

/// Packs η. A normalized layout refuses parameters that are not normalized.
pub fn pack_eta(params: &GeometricParams, layout: &EtaLayout) -> Result<RVec> {
    if layout.normalized && !params.is_normalized() {
        return Err(Error::arg("parameters are not normalized (w_RH[0] = 0, γ_H[0] = 1 expected)"));
    }
    Ok(RVec::from_iterator(layout.len(), layout.params.iter().map(|&p| get(params, p))))
}

/// Inverse of [`pack_eta`]. Entries outside η take their fixed values: the
/// normalization `w_RH[0] = 0`, `γ_H[0] = 1`, and zero UE frequencies for
/// single-antenna users.
pub fn unpack_eta(v: &RVec, layout: &EtaLayout) -> Result<GeometricParams> {
    if v.len() != layout.len() {
        return Err(Error::dim(format!("η has {} entries, layout {}", v.len(), layout.len())));
    }
    let zeros = |n: usize| vec![SpatialFreq::ZERO; n];
    let mut gamma_h = vec![C64::new(0.0, 0.0); layout.d_h];
    if layout.normalized && layout.d_h > 0 {
        gamma_h[0] = C64::new(1.0, 0.0);
    }
    let mut params = GeometricParams {
        w_bh: zeros(layout.d_h),
        w_rh: zeros(layout.d_h),
        gamma_h,
        users: layout
            .d_g
            .iter()
            .zip(&layout.d_f)
            .map(|(&dg, &df)| crate::channel::UserPaths {
                w_rg: zeros(dg),
                w_ug: zeros(dg),
                gamma_g: vec![C64::new(0.0, 0.0); dg],
                direct: crate::channel::DirectPaths {
                    w_bf: zeros(df),
                    w_uf: zeros(df),
                    gamma_f: vec![C64::new(0.0, 0.0); df],
                },
            })
            .collect(),
    };
    for (&p, &x) in layout.params.iter().zip(v.iter()) {
        set(&mut params, p, x);
    }
    Ok(params)
}

/// Steering factors and their derivatives for one path endpoint.
fn d_steer(w: SpatialFreq, spec: &ArraySpec, axis: usize) -> CVec {
    steering_derivative(w, spec, axis)
}

/// `μ_t = Σ_u √P_u (F_u + H Φ_t G_uᴴ) x_{t,u}`, stacked sample-major.
pub fn noiseless_mean(params: &GeometricParams, plan: &TrainingPlan, geometry: &SystemGeometry) -> Result<CVec> {
    plan.validate(geometry)?;
    let ch = crate::channel::synth_geometric(params, geometry)?;
    let (m, t_len) = (geometry.m(), plan.t());
    let k_off = geometry.k_offsets();
    let mut out = CVec::zeros(m * t_len);
    for t in 0..t_len {
        let phi = plan.ris_phases(t);
        for u in 0..geometry.user_count() {
            let x = plan.x.view((k_off[u], t), (geometry.k(u), 1));
            let y = ch.effective_channel(u, &phi) * x * C64::new(geometry.powers[u].sqrt(), 0.0);
            let mut dst = out.rows_mut(t * m, m);
            dst += y.column(0);
        }
    }
    Ok(out)
}

fn stack_column(out: &mut RMat, col: usize, v: &CVec) {
    let n = v.len();
    for i in 0..n {
        out[(i, col)] = v[i].re;
        out[(i + n, col)] = v[i].im;
    }
}

/// `∂[Re μ; Im μ]/∂η` from rank-one perturbations of H, G_u and F_u.
pub fn mean_jacobian(
    params: &GeometricParams,
    layout: &EtaLayout,
    plan: &TrainingPlan,
    geometry: &SystemGeometry,
) -> Result<RMat> {
    plan.validate(geometry)?;
    let ch = crate::channel::synth_geometric(params, geometry)?;
    let (m, t_len, users) = (geometry.m(), plan.t(), geometry.user_count());
    let k_off = geometry.k_offsets();
    let (bs, ris) = (&geometry.bs, &geometry.ris);
    let phis: Vec<CVec> = (0..t_len).map(|t| plan.ris_phases(t)).collect();
    let xs: Vec<Vec<CVec>> = (0..users)
        .map(|u| {
            (0..t_len)
                .map(|t| plan.x.view((k_off[u], t), (geometry.k(u), 1)).column(0).into_owned())
                .collect()
        })
        .collect();
    let sp: Vec<C64> = geometry.powers.iter().map(|p| C64::new(p.sqrt(), 0.0)).collect();
    // q[u][t] = φ_t ⊙ (G_uᴴ x_{t,u})
    let q: Vec<Vec<CVec>> = (0..users)
        .map(|u| {
            let gh = ch.g[u].adjoint();
            (0..t_len).map(|t| (&gh * &xs[u][t]).component_mul(&phis[t])).collect()
        })
        .collect();

    // dH = a bᴴ: dμ_t = Σ_u √P_u a (bᴴ q_{t,u})
    let d_h = |a: &CVec, b: &CVec| {
        let mut out = CVec::zeros(m * t_len);
        for t in 0..t_len {
            let s: C64 = (0..users).map(|u| sp[u] * b.dotc(&q[u][t])).sum();
            out.rows_mut(t * m, m).copy_from(&(a * s));
        }
        out
    };
    // dG_uᴴ = r sᴴ: dμ_t = √P_u H(φ_t ⊙ r)(sᴴ x)
    let d_g = |u: usize, r: &CVec, s: &CVec| {
        let mut out = CVec::zeros(m * t_len);
        for t in 0..t_len {
            let c = sp[u] * s.dotc(&xs[u][t]);
            out.rows_mut(t * m, m).copy_from(&(&ch.h * r.component_mul(&phis[t]) * c));
        }
        out
    };
    // dF_u = a sᴴ: dμ_t = √P_u a (sᴴ x)
    let d_f = |u: usize, a: &CVec, s: &CVec| {
        let mut out = CVec::zeros(m * t_len);
        for t in 0..t_len {
            out.rows_mut(t * m, m).copy_from(&(a * (sp[u] * s.dotc(&xs[u][t]))));
        }
        out
    };

    let mut jac = RMat::zeros(2 * m * t_len, layout.len());
    for (col, &p) in layout.params.iter().enumerate() {
        let v = match p {
            Param::BhFreq { path, axis } => d_h(
                &(d_steer(params.w_bh[path], bs, axis) * params.gamma_h[path]),
                &steering(params.w_rh[path], ris),
            ),
            Param::HGainRe { path } | Param::HGainIm { path } => {
                let g = if matches!(p, Param::HGainRe { .. }) { C64::new(1.0, 0.0) } else { J };
                d_h(&(steering(params.w_bh[path], bs) * g), &steering(params.w_rh[path], ris))
            }
            Param::RhFreq { path, axis } => d_h(
                &(steering(params.w_bh[path], bs) * params.gamma_h[path]),
                &d_steer(params.w_rh[path], ris, axis),
            ),
            Param::RgFreq { user, path, axis } => {
                let up = &params.users[user];
                let ue = &geometry.users[user];
                d_g(
                    user,
                    &(d_steer(up.w_rg[path], ris, axis) * up.gamma_g[path].conj()),
                    &steering(up.w_ug[path], ue),
                )
            }
            Param::GGainRe { user, path } | Param::GGainIm { user, path } => {
                let up = &params.users[user];
                let ue = &geometry.users[user];
                // Gᴴ carries conj(γ): ∂/∂Re → 1, ∂/∂Im → −j
                let g = if matches!(p, Param::GGainRe { .. }) { C64::new(1.0, 0.0) } else { -J };
                d_g(user, &(steering(up.w_rg[path], ris) * g), &steering(up.w_ug[path], ue))
            }
            Param::UgFreq { user, path, axis } => {
                let up = &params.users[user];
                let ue = &geometry.users[user];
                d_g(
                    user,
                    &(steering(up.w_rg[path], ris) * up.gamma_g[path].conj()),
                    &d_steer(up.w_ug[path], ue, axis),
                )
            }
            Param::BfFreq { user, path, axis } => {
                let dp = &params.users[user].direct;
                let ue = &geometry.users[user];
                d_f(
                    user,
                    &(d_steer(dp.w_bf[path], bs, axis) * dp.gamma_f[path]),
                    &steering(dp.w_uf[path], ue),
                )
            }
            Param::FGainRe { user, path } | Param::FGainIm { user, path } => {
                let dp = &params.users[user].direct;
                let ue = &geometry.users[user];
                let g = if matches!(p, Param::FGainRe { .. }) { C64::new(1.0, 0.0) } else { J };
                d_f(user, &(steering(dp.w_bf[path], bs) * g), &steering(dp.w_uf[path], ue))
            }
            Param::UfFreq { user, path, axis } => {
                let dp = &params.users[user].direct;
                let ue = &geometry.users[user];
                d_f(
                    user,
                    &(steering(dp.w_bf[path], bs) * dp.gamma_f[path]),
                    &d_steer(dp.w_uf[path], ue, axis),
                )
            }
        };
        stack_column(&mut jac, col, &v);
    }
    Ok(jac)
}

/// `(2/σ²) JᵀJ`.
pub fn fim_from_jacobian(jac: &RMat, sigma2: f64) -> Result<RMat> {
    if !(sigma2 > 0.0) {
        return Err(Error::arg("Fisher information needs a positive noise variance"));
    }
    Ok(jac.transpose() * jac * (2.0 / sigma2))
}

pub fn fim_eta(
    params: &GeometricParams,
    layout: &EtaLayout,
    plan: &TrainingPlan,
    geometry: &SystemGeometry,
) -> Result<RMat> {
    fim_from_jacobian(&mean_jacobian(params, layout, plan, geometry)?, geometry.sigma2)
}

/// Composite channel vector (user-major) from path parameters through
/// `h_c = Σ γ_G* γ_H a_R(w_RG − w_RH) ⊗ a_U*(w_UG) ⊗ a_B(w_BH)`, with the
/// direct block `vec(F_u) = Σ γ_F a_U*(w_UF) ⊗ a_B(w_BF)` first when
/// `include_direct`.
pub fn composite_from_params(
    params: &GeometricParams,
    geometry: &SystemGeometry,
    include_direct: bool,
) -> Result<CVec> {
    let layout = EtaLayout::new(params, geometry, false)?;
    Ok(ChannelTerms::new(params, geometry, include_direct, &layout)?.value())
}

struct ChannelTerms<'a> {
    params: &'a GeometricParams,
    geometry: &'a SystemGeometry,
    include_direct: bool,
    offsets: Vec<usize>,
    len: usize,
}

impl<'a> ChannelTerms<'a> {
    fn new(
        params: &'a GeometricParams,
        geometry: &'a SystemGeometry,
        include_direct: bool,
        _layout: &EtaLayout,
    ) -> Result<Self> {
        let (m, n) = (geometry.m(), geometry.n());
        let cols = n + include_direct as usize;
        let mut offsets = Vec::new();
        let mut off = 0;
        for u in 0..geometry.user_count() {
            offsets.push(off);
            off += m * geometry.k(u) * cols;
        }
        if params.has_direct() && !include_direct {
            return Err(Error::arg("direct paths present but the composite excludes them"));
        }
        Ok(ChannelTerms {
            params,
            geometry,
            include_direct,
            offsets,
            len: off,
        })
    }

    fn cascaded_offset(&self, u: usize) -> usize {
        self.offsets[u] + if self.include_direct { self.geometry.m() * self.geometry.k(u) } else { 0 }
    }

    /// Adds `scale · a_R ⊗ a_U* ⊗ a_B` to the cascaded block of user `u`.
    fn add_cascaded(&self, out: &mut CVec, u: usize, ar: &CVec, au: &CVec, ab: &CVec, scale: C64) {
        let v = kron_vec(ar, &kron_vec(&au.map(|z| z.conj()), ab));
        let mut dst = out.rows_mut(self.cascaded_offset(u), v.len());
        dst += v * scale;
    }

    fn add_direct(&self, out: &mut CVec, u: usize, au: &CVec, ab: &CVec, scale: C64) {
        let v = kron_vec(&au.map(|z| z.conj()), ab);
        let mut dst = out.rows_mut(self.offsets[u], v.len());
        dst += v * scale;
    }

    fn value(&self) -> CVec {
        let p = self.params;
        let g = self.geometry;
        let mut out = CVec::zeros(self.len);
        for (u, up) in p.users.iter().enumerate() {
            let ue = &g.users[u];
            for l in 0..up.d_g() {
                for q in 0..p.d_h() {
                    let ar = steering(up.w_rg[l].minus(p.w_rh[q]), &g.ris);
                    let s = up.gamma_g[l].conj() * p.gamma_h[q];
                    self.add_cascaded(&mut out, u, &ar, &steering(up.w_ug[l], ue), &steering(p.w_bh[q], &g.bs), s);
                }
            }
            for f in 0..up.direct.d() {
                let dp = &up.direct;
                self.add_direct(&mut out, u, &steering(dp.w_uf[f], ue), &steering(dp.w_bf[f], &g.bs), dp.gamma_f[f]);
            }
        }
        out
    }

    fn derivative(&self, param: Param) -> CVec {
        let p = self.params;
        let g = self.geometry;
        let (bs, ris) = (&g.bs, &g.ris);
        let mut out = CVec::zeros(self.len);
        let one = C64::new(1.0, 0.0);
        match param {
            Param::BhFreq { path: q, .. }
            | Param::HGainRe { path: q }
            | Param::HGainIm { path: q }
            | Param::RhFreq { path: q, .. } => {
                for (u, up) in p.users.iter().enumerate() {
                    let ue = &g.users[u];
                    for l in 0..up.d_g() {
                        let diff = up.w_rg[l].minus(p.w_rh[q]);
                        let base = up.gamma_g[l].conj() * p.gamma_h[q];
                        let (ar, ab, s) = match param {
                            Param::BhFreq { axis, .. } => (steering(diff, ris), d_steer(p.w_bh[q], bs, axis), base),
                            Param::HGainRe { .. } => (steering(diff, ris), steering(p.w_bh[q], bs), up.gamma_g[l].conj()),
                            Param::HGainIm { .. } => (steering(diff, ris), steering(p.w_bh[q], bs), up.gamma_g[l].conj() * J),
                            // ∂/∂w_RH of a_R(w_RG − w_RH)
                            Param::RhFreq { axis, .. } => (-d_steer(diff, ris, axis), steering(p.w_bh[q], bs), base),
                            _ => unreachable!(),
                        };
                        self.add_cascaded(&mut out, u, &ar, &steering(up.w_ug[l], ue), &ab, s);
                    }
                }
            }
            Param::RgFreq { user, path: l, .. }
            | Param::GGainRe { user, path: l }
            | Param::GGainIm { user, path: l }
            | Param::UgFreq { user, path: l, .. } => {
                let up = &p.users[user];
                let ue = &g.users[user];
                for q in 0..p.d_h() {
                    let diff = up.w_rg[l].minus(p.w_rh[q]);
                    let base = up.gamma_g[l].conj() * p.gamma_h[q];
                    let ab = steering(p.w_bh[q], bs);
                    let (ar, au, s) = match param {
                        Param::RgFreq { axis, .. } => (d_steer(diff, ris, axis), steering(up.w_ug[l], ue), base),
                        Param::GGainRe { .. } => (steering(diff, ris), steering(up.w_ug[l], ue), p.gamma_h[q]),
                        Param::GGainIm { .. } => (steering(diff, ris), steering(up.w_ug[l], ue), -J * p.gamma_h[q]),
                        // a_U* is differentiated; add_cascaded conjugates its argument
                        Param::UgFreq { axis, .. } => (steering(diff, ris), d_steer(up.w_ug[l], ue, axis), base),
                        _ => unreachable!(),
                    };
                    self.add_cascaded(&mut out, user, &ar, &au, &ab, s);
                }
            }
            Param::BfFreq { user, path: f, .. }
            | Param::FGainRe { user, path: f }
            | Param::FGainIm { user, path: f }
            | Param::UfFreq { user, path: f, .. } => {
                let dp = &p.users[user].direct;
                let ue = &g.users[user];
                let (au, ab, s) = match param {
                    Param::BfFreq { axis, .. } => (steering(dp.w_uf[f], ue), d_steer(dp.w_bf[f], bs, axis), dp.gamma_f[f]),
                    Param::FGainRe { .. } => (steering(dp.w_uf[f], ue), steering(dp.w_bf[f], bs), one),
                    Param::FGainIm { .. } => (steering(dp.w_uf[f], ue), steering(dp.w_bf[f], bs), J),
                    Param::UfFreq { axis, .. } => (d_steer(dp.w_uf[f], ue, axis), steering(dp.w_bf[f], bs), dp.gamma_f[f]),
                    _ => unreachable!(),
                };
                self.add_direct(&mut out, user, &au, &ab, s);
            }
        }
        out
    }
}

/// `∂[Re h_c; Im h_c]/∂η` from the path expansion of the composite channel.
pub fn channel_jacobian(
    params: &GeometricParams,
    layout: &EtaLayout,
    geometry: &SystemGeometry,
    include_direct: bool,
) -> Result<RMat> {
    let terms = ChannelTerms::new(params, geometry, include_direct, layout)?;
    let mut jac = RMat::zeros(2 * terms.len, layout.len());
    for (col, &p) in layout.params.iter().enumerate() {
        stack_column(&mut jac, col, &terms.derivative(p));
    }
    Ok(jac)
}

/// Inverse of a symmetric positive definite FIM. When the condition number
/// exceeds the limit the error lists the parameters that load the numerical
/// null space.
pub fn invert_fim(fim: &RMat) -> Result<RMat> {
    let (vals, vecs) = symmetric_eigen_real(fim);
    let lmax = vals.iter().cloned().fold(0.0_f64, f64::max);
    let limit = lmax / CONDITION_LIMIT;
    let null: Vec<usize> = (0..vals.len()).filter(|&i| !(vals[i] > limit)).collect();
    if !(lmax > 0.0) || !null.is_empty() {
        let mut params: Vec<usize> = Vec::new();
        for &j in &null {
            for i in 0..vecs.nrows() {
                if vecs[(i, j)].abs() > 0.1 && !params.contains(&i) {
                    params.push(i);
                }
            }
        }
        params.sort_unstable();
        return Err(Error::Identifiability {
            reason: format!("FIM has {} eigenvalue(s) below {limit:e}", null.len()),
            null_params: params,
        });
    }
    let mut scaled = vecs.clone();
    for (j, &l) in vals.iter().enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / l);
    }
    let inv = scaled * vecs.transpose();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Ingredients shared by the full and the summary structured bound.
fn structured_parts(
    params: &GeometricParams,
    plan: &TrainingPlan,
    geometry: &SystemGeometry,
) -> Result<(RMat, RMat)> {
    let layout = EtaLayout::new(params, geometry, true)?;
    if !params.is_normalized() {
        return Err(Error::arg("structured bound expects normalized parameters"));
    }
    let fim = fim_eta(params, &layout, plan, geometry)?;
    let jh = channel_jacobian(params, &layout, geometry, plan.include_direct)?;
    Ok((invert_fim(&fim)?, jh))
}

/// `CRB_s = J_h FIM⁻¹ J_hᵀ` over the normalized η.
pub fn crb_structured(params: &GeometricParams, plan: &TrainingPlan, geometry: &SystemGeometry) -> Result<CrbReport> {
    let (inv, jh) = structured_parts(params, plan, geometry)?;
    let matrix = &jh * inv * jh.transpose();
    let matrix = (&matrix + matrix.transpose()) * 0.5;
    let mean = matrix.trace() / matrix.nrows() as f64;
    Ok(CrbReport::new(Some(matrix), mean))
}

/// Mean diagonal of `CRB_s` without forming the bound: `tr(FIM⁻¹ J_hᵀJ_h)/rows`.
pub fn crb_structured_mean_diag(params: &GeometricParams, plan: &TrainingPlan, geometry: &SystemGeometry) -> Result<f64> {
    let (inv, jh) = structured_parts(params, plan, geometry)?;
    let gram = jh.transpose() * &jh;
    Ok((inv * gram).trace() / jh.nrows() as f64)
}

/// Unstructured bound for the plan, with power taken from the first user.
pub fn crb_unstructured_for_plan(plan: &TrainingPlan, geometry: &SystemGeometry) -> Result<f64> {
    let z = assemble_measurement(plan, geometry)?;
    crb_unstructured_mean_diag(&z, geometry.powers[0], geometry.sigma2)
}

/// Central differences of a vector function, for gradient checks.
pub fn numerical_jacobian<F>(f: F, x: &RVec, step: f64) -> Result<RMat>
where
    F: Fn(&RVec) -> Result<RVec>,
{
    let mut cols = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi[i] += step;
        lo[i] -= step;
        cols.push((f(&hi)? - f(&lo)?) / (2.0 * step));
    }
    let rows = cols.first().map_or(0, |c| c.len());
    let mut out = RMat::zeros(rows, x.len());
    for (j, c) in cols.iter().enumerate() {
        out.set_column(j, c);
    }
    Ok(out)
}

/// Largest column-wise relative error between two Jacobians.
pub fn max_column_relative_error(analytic: &RMat, numeric: &RMat) -> f64 {
    (0..analytic.ncols())
        .map(|j| {
            let a = analytic.column(j);
            let d = (a - numeric.column(j)).norm();
            let scale = a.norm().max(numeric.column(j).norm());
            if scale == 0.0 { d } else { d / scale }
        })
        .fold(0.0, f64::max)
}

/// Real-stacked noiseless mean as a function of η, for finite differences.
pub fn mean_of_eta(
    eta: &RVec,
    layout: &EtaLayout,
    plan: &TrainingPlan,
    geometry: &SystemGeometry,
) -> Result<RVec> {
    Ok(real_stack(&noiseless_mean(&unpack_eta(eta, layout)?, plan, geometry)?))
}

/// Real-stacked composite channel as a function of η.
pub fn channel_of_eta(eta: &RVec, layout: &EtaLayout, geometry: &SystemGeometry, include_direct: bool) -> Result<RVec> {
    Ok(real_stack(&composite_from_params(&unpack_eta(eta, layout)?, geometry, include_direct)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{synth_geometric, GainRule, PathCounts};
    use crate::training::{dft_ris_sequence, noiseless_uplink, one_hot_ris_sequence, orthogonal_pilots};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dft_plan(k: usize, blocks: usize, n: usize, direct: bool) -> TrainingPlan {
        let mut psi = dft_ris_sequence(blocks, n).unwrap();
        if !direct {
            psi = crate::training::ris_columns(&psi);
        }
        TrainingPlan::block_repeat(&orthogonal_pilots(k), psi, direct).unwrap()
    }

    fn ula_geometry(m: usize, n: usize, k: usize) -> SystemGeometry {
        SystemGeometry::single_user(m, ArraySpec::half_wave_ula(n), k, 1.0, 1.0)
    }

    #[test]
    fn unstructured_examples() {
        let g = ula_geometry(1, 7, 1);
        let z = assemble_measurement(&dft_plan(1, 8, 7, true), &g).unwrap();
        let crb = crb_unstructured(&z, 1.0, 1.0).unwrap();
        let m = crb.matrix.as_ref().unwrap();
        assert!(m.diagonal().iter().all(|&d| (d - 0.0625).abs() < 1e-12));
        let doubled = crb_unstructured(&z, 2.0, 1.0).unwrap();
        assert!((doubled.matrix.unwrap() * 2.0 - m).norm() < 1e-14);

        let hot = TrainingPlan::block_repeat(&orthogonal_pilots(1), one_hot_ris_sequence(3, false).unwrap(), false).unwrap();
        let z = assemble_measurement(&hot, &ula_geometry(1, 3, 1)).unwrap();
        let crb = crb_unstructured(&z, 1.0, 1.0).unwrap();
        assert!(crb.matrix.unwrap().diagonal().iter().all(|&d| (d - 0.5).abs() < 1e-12));
        assert!((crb_unstructured_mean_diag(&z, 1.0, 1.0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn eta_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ura = ArraySpec::ura(6, 5, 0.5, 0.5).unwrap();
        let g = SystemGeometry::single_user(30, ura, 2, 1.0, 1.0);
        let p = GeometricParams::random(&g, &PathCounts::uniform(2, 5, 0, 1), GainRule::Unit, &mut rng).unwrap();
        assert_eq!(EtaLayout::new(&p, &g, true).unwrap().len(), 31);
        let g2 = SystemGeometry {
            users: vec![ArraySpec::half_wave_ula(2); 2],
            powers: vec![1.0; 2],
            ..g
        };
        let p2 = GeometricParams::random(&g2, &PathCounts::uniform(2, 3, 2, 2), GainRule::Unit, &mut rng).unwrap();
        let layout = EtaLayout::new(&p2, &g2, true).unwrap();
        assert_eq!(layout.len(), 52);
        let eta = pack_eta(&p2, &layout).unwrap();
        let back = unpack_eta(&eta, &layout).unwrap();
        assert_eq!(pack_eta(&back, &layout).unwrap(), eta);
        assert_eq!(back, p2);
        let raw = p2.with_ambiguity(SpatialFreq::new(0.2, 0.1), C64::new(2.0, 1.0));
        assert!(pack_eta(&raw, &layout).is_err());
        assert_eq!(EtaLayout::new(&p2, &g2, false).unwrap().len(), 56);
    }

    #[test]
    fn mean_examples() {
        let g = ula_geometry(1, 1, 1);
        let p = GeometricParams {
            w_bh: vec![SpatialFreq::ZERO],
            w_rh: vec![SpatialFreq::ZERO],
            gamma_h: vec![C64::new(1.0, 0.0)],
            users: vec![crate::channel::UserPaths {
                w_rg: vec![SpatialFreq::ZERO],
                w_ug: vec![SpatialFreq::ZERO],
                gamma_g: vec![C64::new(1.0, 0.0)],
                direct: Default::default(),
            }],
        };
        let plan = TrainingPlan::per_sample(
            CMat::from_element(1, 1, C64::new(1.0, 0.0)),
            CMat::from_element(1, 1, C64::new(1.0, 0.0)),
            false,
        )
        .unwrap();
        let mut g4 = g.clone();
        g4.powers = vec![4.0];
        let mu = noiseless_mean(&p, &plan, &g4).unwrap();
        assert!((mu[0] - C64::new(2.0, 0.0)).norm() < 1e-15);
        let mut zero = p.clone();
        zero.gamma_h[0] = C64::new(0.0, 0.0);
        assert_eq!(noiseless_mean(&zero, &plan, &g).unwrap().norm(), 0.0);
    }

    fn random_case(seed: u64, direct: bool) -> (GeometricParams, TrainingPlan, SystemGeometry) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ura = ArraySpec::ura(3, 2, 0.5, 0.5).unwrap();
        let g = SystemGeometry::single_user(4, ura, 2, 1.5, 0.5);
        let p = GeometricParams::random(&g, &PathCounts::uniform(2, 2, direct as usize, 1), GainRule::Unit, &mut rng).unwrap();
        (p, dft_plan(2, 7, 6, direct), g)
    }

    #[test]
    fn mean_matches_uplink_and_finite_differences() {
        for (seed, direct) in [(3, false), (4, true)] {
            let (p, plan, g) = random_case(seed, direct);
            let mut quiet = g.clone();
            quiet.sigma2 = 0.0;
            let ch = synth_geometric(&p, &g).unwrap();
            let y = noiseless_uplink(&ch, &plan, &quiet).unwrap();
            assert!((noiseless_mean(&p, &plan, &g).unwrap() - y).norm() < 1e-12);

            let layout = EtaLayout::new(&p, &g, true).unwrap();
            let eta = pack_eta(&p, &layout).unwrap();
            let analytic = mean_jacobian(&p, &layout, &plan, &g).unwrap();
            let numeric = numerical_jacobian(|e| mean_of_eta(e, &layout, &plan, &g), &eta, 1e-6).unwrap();
            assert!(max_column_relative_error(&analytic, &numeric) < 1e-5);

            let jh = channel_jacobian(&p, &layout, &g, direct).unwrap();
            let nh = numerical_jacobian(|e| channel_of_eta(e, &layout, &g, direct), &eta, 1e-6).unwrap();
            assert!(max_column_relative_error(&jh, &nh) < 1e-5);
        }
    }

    #[test]
    fn chain_identity() {
        let (p, plan, g) = random_case(5, false);
        let layout = EtaLayout::new(&p, &g, true).unwrap();
        let jm = mean_jacobian(&p, &layout, &plan, &g).unwrap();
        let jh = channel_jacobian(&p, &layout, &g, false).unwrap();
        let z = assemble_measurement(&plan, &g).unwrap().dense().unwrap();
        let chained = real_rep(&z) * jh * g.powers[0].sqrt();
        assert!((&jm - &chained).norm() < 1e-10 * jm.norm());
        let hc = composite_from_params(&p, &g, false).unwrap();
        assert!((hc - synth_geometric(&p, &g).unwrap().composite_vector(false).unwrap()).norm() < 1e-12);
    }

    #[test]
    fn gain_columns_are_linear() {
        let (p, plan, g) = random_case(6, false);
        let layout = EtaLayout::new(&p, &g, true).unwrap();
        let jm = mean_jacobian(&p, &layout, &plan, &g).unwrap();
        let col = layout.params.iter().position(|&q| q == Param::HGainRe { path: 1 }).unwrap();
        // the mean is linear in γ_H[1]: μ(γ=1, others fixed) − μ(γ=0)
        let mut one = p.clone();
        one.gamma_h[1] = C64::new(1.0, 0.0);
        let mut zero = p.clone();
        zero.gamma_h[1] = C64::new(0.0, 0.0);
        let diff = real_stack(&(noiseless_mean(&one, &plan, &g).unwrap() - noiseless_mean(&zero, &plan, &g).unwrap()));
        assert!((jm.column(col) - diff).norm() < 1e-12);
    }

    #[test]
    fn fim_properties() {
        let (p, plan, g) = random_case(7, true);
        let layout = EtaLayout::new(&p, &g, true).unwrap();
        let fim = fim_eta(&p, &layout, &plan, &g).unwrap();
        assert!((&fim - fim.transpose()).norm() < 1e-12 * fim.norm());
        let (vals, _) = symmetric_eigen_real(&fim);
        assert!(vals.iter().all(|&v| v >= -1e-9 * fim.norm()));
        let mut loud = g.clone();
        loud.sigma2 *= 4.0;
        let f4 = fim_eta(&p, &layout, &plan, &loud).unwrap();
        assert!((f4 * 4.0 - &fim).norm() < 1e-12 * fim.norm());
    }

    #[test]
    fn unnormalized_fim_is_singular() {
        let (p, plan, g) = random_case(8, false);
        let layout = EtaLayout::new(&p, &g, false).unwrap();
        let fim = fim_eta(&p, &layout, &plan, &g).unwrap();
        match invert_fim(&fim) {
            Err(Error::Identifiability { null_params, .. }) => {
                let rh0 = layout.params.iter().position(|&q| q == Param::RhFreq { path: 0, axis: 0 }).unwrap();
                let h0 = layout.params.iter().position(|&q| q == Param::HGainRe { path: 0 }).unwrap();
                assert!(null_params.contains(&rh0) || null_params.contains(&h0));
            }
            other => panic!("expected a singular FIM, got {other:?}"),
        }
    }

    #[test]
    fn structured_below_unstructured() {
        let (p, plan, g) = random_case(9, false);
        let s = crb_structured(&p, &plan, &g).unwrap();
        let z = assemble_measurement(&plan, &g).unwrap();
        let u = crb_unstructured(&z, g.powers[0], g.sigma2).unwrap();
        let (um, sm) = (u.matrix.unwrap(), s.matrix.unwrap());
        let (vals, _) = symmetric_eigen_real(&(&um - &sm));
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min >= -1e-9 * um.norm());
        assert!((crb_structured_mean_diag(&p, &plan, &g).unwrap() - s.mean_diag).abs() < 1e-12 * s.mean_diag);
        let mut g2 = g.clone();
        g2.powers = vec![2.0 * g.powers[0]];
        let s2 = crb_structured_mean_diag(&p, &plan, &g2).unwrap();
        assert!((s2 * 2.0 - s.mean_diag).abs() < 1e-10 * s.mean_diag);
    }
}
