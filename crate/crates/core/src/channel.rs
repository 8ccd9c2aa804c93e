//! Channel synthesis for the RIS uplink.
//!
//! Conventions used throughout the crate:
//!
//! * `H` is the RIS→BS channel (M×N), `G[u]` the RIS→UE channel of user `u`
//!   (K_u×N) and `Hd[u]` the direct UE→BS channel (M×K_u).
//! * The received pilot is `(Hd + H·diag(φ)·Gᴴ)·x`, so the composite channel of
//!   a user is `[vec(Hd), G* ⋄ H]`, an MK×(N+1) matrix whose column `n+1` is
//!   `g_n* ⊗ h_n`.
//! * With several users the composite *vector* is user-major: the column-major
//!   vectorisations of the per-user composite matrices, one after another.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{khatri_rao, psd_sqrt, vec_cols, CMat, CVec, C64};
use crate::manifold::{freq_from_angles, steering, steering_matrix, ArraySpec, SpatialFreq};

/// Antenna/element counts, array geometry and link budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemGeometry {
    pub bs: ArraySpec,
    pub ris: ArraySpec,
    /// One array per user.
    pub users: Vec<ArraySpec>,
    /// Transmit power per user.
    pub powers: Vec<f64>,
    pub sigma2: f64,
}

impl SystemGeometry {
    /// Single user, half-wavelength ULAs at both ends.
    pub fn single_user(m: usize, ris: ArraySpec, k: usize, power: f64, sigma2: f64) -> Self {
        SystemGeometry {
            bs: ArraySpec::half_wave_ula(m),
            ris,
            users: vec![ArraySpec::half_wave_ula(k)],
            powers: vec![power],
            sigma2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bs.validate()?;
        self.ris.validate()?;
        if self.users.is_empty() {
            return Err(Error::arg("at least one user is required"));
        }
        for u in &self.users {
            u.validate()?;
        }
        if self.powers.len() != self.users.len() {
            return Err(Error::dim(format!(
                "{} powers for {} users",
                self.powers.len(),
                self.users.len()
            )));
        }
        if self.powers.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::arg("powers must be positive"));
        }
        if !(self.sigma2 >= 0.0) {
            return Err(Error::arg("noise variance must be non-negative"));
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.bs.len()
    }

    pub fn n(&self) -> usize {
        self.ris.len()
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn k(&self, user: usize) -> usize {
        self.users[user].len()
    }

    /// Total UE antennas over all users.
    pub fn k_total(&self) -> usize {
        self.users.iter().map(|u| u.len()).sum()
    }

    /// First global antenna index of each user.
    pub fn k_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.users
            .iter()
            .map(|u| {
                let o = acc;
                acc += u.len();
                o
            })
            .collect()
    }

    /// Length of the composite channel vector.
    pub fn composite_len(&self, include_direct: bool) -> usize {
        self.m() * self.k_total() * (self.n() + include_direct as usize)
    }
}

/// Direct-channel paths of one user.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DirectPaths {
    pub w_bf: Vec<SpatialFreq>,
    pub w_uf: Vec<SpatialFreq>,
    pub gamma_f: Vec<C64>,
}

impl DirectPaths {
    pub fn d(&self) -> usize {
        self.gamma_f.len()
    }
}

/// RIS→UE paths of one user plus its optional direct paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserPaths {
    pub w_rg: Vec<SpatialFreq>,
    pub w_ug: Vec<SpatialFreq>,
    pub gamma_g: Vec<C64>,
    pub direct: DirectPaths,
}

impl UserPaths {
    pub fn d_g(&self) -> usize {
        self.gamma_g.len()
    }
}

/// Path parameters of every channel in the system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometricParams {
    pub w_bh: Vec<SpatialFreq>,
    pub w_rh: Vec<SpatialFreq>,
    pub gamma_h: Vec<C64>,
    pub users: Vec<UserPaths>,
}

/// How path gains are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainRule {
    /// CN(0, 1) for every path.
    Unit,
    /// CN(0, 1/d) so each channel carries unit total power.
    InversePathCount,
}

/// Path counts for a random geometric draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PathCounts {
    pub d_h: usize,
    pub d_g: Vec<usize>,
    pub d_f: Vec<usize>,
}

impl PathCounts {
    pub fn uniform(d_h: usize, d_g: usize, d_f: usize, users: usize) -> Self {
        PathCounts {
            d_h,
            d_g: vec![d_g; users],
            d_f: vec![d_f; users],
        }
    }
}

fn cn<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> C64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(s * re, s * im)
}

/// Matrix of i.i.d. CN(0, 1) entries.
pub fn complex_gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMat {
    let mut out = CMat::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            out[(i, j)] = cn(rng, 1.0);
        }
    }
    out
}

fn random_freq<R: Rng + ?Sized>(spec: &ArraySpec, rng: &mut R) -> SpatialFreq {
    // a single antenna has no spatial response; keep the stored value canonical
    if spec.len() == 1 {
        return SpatialFreq::ZERO;
    }
    let az = Uniform::new_inclusive(-90.0, 90.0).expect("valid range");
    let el = Uniform::new_inclusive(0.0, 90.0).expect("valid range");
    freq_from_angles(az.sample(rng), el.sample(rng), spec).expect("angles drawn in range")
}

fn gains<R: Rng + ?Sized>(d: usize, rule: GainRule, rng: &mut R) -> Vec<C64> {
    let var = match rule {
        GainRule::Unit => 1.0,
        GainRule::InversePathCount => 1.0 / d.max(1) as f64,
    };
    (0..d).map(|_| cn(rng, var)).collect()
}

impl GeometricParams {
    /// Draws azimuths from U[-90°, 90°], elevations from U[0°, 90°] and gains
    /// per `rule`, then normalizes.
    pub fn random<R: Rng + ?Sized>(
        geometry: &SystemGeometry,
        counts: &PathCounts,
        rule: GainRule,
        rng: &mut R,
    ) -> Result<Self> {
        let users = geometry.user_count();
        if counts.d_g.len() != users || counts.d_f.len() != users {
            return Err(Error::dim("path counts must be given per user"));
        }
        if counts.d_h == 0 {
            return Err(Error::arg("d_H must be at least 1"));
        }
        let w_bh = (0..counts.d_h).map(|_| random_freq(&geometry.bs, rng)).collect();
        let w_rh = (0..counts.d_h).map(|_| random_freq(&geometry.ris, rng)).collect();
        let gamma_h = gains(counts.d_h, rule, rng);
        let mut user_paths = Vec::with_capacity(users);
        for u in 0..users {
            let (dg, df) = (counts.d_g[u], counts.d_f[u]);
            let ue = &geometry.users[u];
            let w_rg = (0..dg).map(|_| random_freq(&geometry.ris, rng)).collect();
            let w_ug = (0..dg).map(|_| random_freq(ue, rng)).collect();
            let gamma_g = gains(dg, rule, rng);
            let w_bf = (0..df).map(|_| random_freq(&geometry.bs, rng)).collect();
            let w_uf = (0..df).map(|_| random_freq(ue, rng)).collect();
            let gamma_f = gains(df, rule, rng);
            user_paths.push(UserPaths {
                w_rg,
                w_ug,
                gamma_g,
                direct: DirectPaths {
                    w_bf,
                    w_uf,
                    gamma_f,
                },
            });
        }
        GeometricParams {
            w_bh,
            w_rh,
            gamma_h,
            users: user_paths,
        }
        .normalized()
    }

    pub fn d_h(&self) -> usize {
        self.gamma_h.len()
    }

    pub fn has_direct(&self) -> bool {
        self.users.iter().any(|u| u.direct.d() > 0)
    }

    pub fn validate(&self) -> Result<()> {
        let d_h = self.d_h();
        if d_h == 0 || self.w_bh.len() != d_h || self.w_rh.len() != d_h {
            return Err(Error::dim("RIS→BS path lists must share a nonzero length"));
        }
        for (u, p) in self.users.iter().enumerate() {
            let d = p.d_g();
            if p.w_rg.len() != d || p.w_ug.len() != d {
                return Err(Error::dim(format!("user {u}: RIS→UE path lists differ in length")));
            }
            let f = p.direct.d();
            if p.direct.w_bf.len() != f || p.direct.w_uf.len() != f {
                return Err(Error::dim(format!("user {u}: direct path lists differ in length")));
            }
        }
        Ok(())
    }

    /// True when `w_RH[0] = 0` and `γ_H[0] = 1` (exactly, up to 1e-12).
    pub fn is_normalized(&self) -> bool {
        self.w_rh
            .first()
            .is_some_and(|w| w.w1.abs() < 1e-12 && w.w2.abs() < 1e-12)
            && self.gamma_h.first().is_some_and(|g| (g - C64::new(1.0, 0.0)).norm() < 1e-12)
    }

    /// Removes the RIS shift and gain ambiguities: every RIS frequency is
    /// shifted by `-w_RH[0]`, `γ_H` is divided by `α = γ_H[0]` and every `γ_G`
    /// multiplied by `conj(α)`. The composite channel is unchanged.
    pub fn normalized(&self) -> Result<Self> {
        self.validate()?;
        let alpha = self.gamma_h[0];
        if alpha.norm() == 0.0 {
            return Err(Error::arg("leading RIS→BS gain is zero"));
        }
        let shift = self.w_rh[0];
        let mut out = self.clone();
        for w in out.w_rh.iter_mut() {
            *w = w.minus(shift);
        }
        out.w_rh[0] = SpatialFreq::ZERO;
        for g in out.gamma_h.iter_mut() {
            *g /= alpha;
        }
        out.gamma_h[0] = C64::new(1.0, 0.0);
        for u in out.users.iter_mut() {
            for w in u.w_rg.iter_mut() {
                *w = w.minus(shift);
            }
            for g in u.gamma_g.iter_mut() {
                *g *= alpha.conj();
            }
        }
        Ok(out)
    }

    /// Applies the shift/scale ambiguity: RIS frequencies `+shift`,
    /// `γ_H·α`, `γ_G / conj(α)`.
    pub fn with_ambiguity(&self, shift: SpatialFreq, alpha: C64) -> Self {
        let mut out = self.clone();
        for w in out.w_rh.iter_mut() {
            *w = w.plus(shift);
        }
        for g in out.gamma_h.iter_mut() {
            *g *= alpha;
        }
        for u in out.users.iter_mut() {
            for w in u.w_rg.iter_mut() {
                *w = w.plus(shift);
            }
            for g in u.gamma_g.iter_mut() {
                *g /= alpha.conj();
            }
        }
        out
    }
}

/// Realized channel matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    pub h: CMat,
    pub g: Vec<CMat>,
    /// Direct channels, one M×K_u matrix per user, when modelled.
    pub hd: Option<Vec<CMat>>,
}

fn path_matrix(
    left: &ArraySpec,
    w_left: &[SpatialFreq],
    gains: &[C64],
    right: &ArraySpec,
    w_right: &[SpatialFreq],
) -> CMat {
    let mut a = steering_matrix(w_left, left);
    for (j, g) in gains.iter().enumerate() {
        for i in 0..a.nrows() {
            a[(i, j)] *= g;
        }
    }
    a * steering_matrix(w_right, right).adjoint()
}

/// `H = A_B Γ_H A_Rᴴ`, `G_u = A_U Γ_G A_Rᴴ` and `Hd_u = A_B Γ_F A_Uᴴ`.
/// Direct channels are produced when any user has direct paths (zero
/// matrices for users without them).
pub fn synth_geometric(params: &GeometricParams, geometry: &SystemGeometry) -> Result<ChannelSet> {
    params.validate()?;
    geometry.validate()?;
    if params.users.len() != geometry.user_count() {
        return Err(Error::dim(format!(
            "{} user path sets for {} users",
            params.users.len(),
            geometry.user_count()
        )));
    }
    let h = path_matrix(&geometry.bs, &params.w_bh, &params.gamma_h, &geometry.ris, &params.w_rh);
    let g = params
        .users
        .iter()
        .zip(&geometry.users)
        .map(|(p, ue)| path_matrix(ue, &p.w_ug, &p.gamma_g, &geometry.ris, &p.w_rg))
        .collect();
    let hd = params.has_direct().then(|| {
        params
            .users
            .iter()
            .zip(&geometry.users)
            .map(|(p, ue)| {
                path_matrix(&geometry.bs, &p.direct.w_bf, &p.direct.gamma_f, ue, &p.direct.w_uf)
            })
            .collect()
    });
    Ok(ChannelSet { h, g, hd })
}

impl ChannelSet {
    /// Composite matrix `[vec(Hd_u), G_u* ⋄ H]` of one user.
    pub fn user_composite(&self, user: usize, include_direct: bool) -> Result<CMat> {
        let g = self
            .g
            .get(user)
            .ok_or_else(|| Error::arg(format!("no user {user}")))?;
        let cascaded = khatri_rao(&g.map(|z| z.conj()), &self.h)?;
        if !include_direct {
            return Ok(cascaded);
        }
        let (m, k) = (self.h.nrows(), g.nrows());
        let direct = match &self.hd {
            Some(hd) => {
                let d = &hd[user];
                if d.shape() != (m, k) {
                    return Err(Error::dim(format!("direct channel of user {user} is not {m}×{k}")));
                }
                vec_cols(d)
            }
            None => CVec::zeros(m * k),
        };
        let mut out = CMat::zeros(m * k, cascaded.ncols() + 1);
        out.set_column(0, &direct);
        out.columns_mut(1, cascaded.ncols()).copy_from(&cascaded);
        Ok(out)
    }

    /// Composite vector in user-major order.
    pub fn composite_vector(&self, include_direct: bool) -> Result<CVec> {
        let parts = (0..self.g.len())
            .map(|u| self.user_composite(u, include_direct).map(|c| vec_cols(&c)))
            .collect::<Result<Vec<_>>>()?;
        let len = parts.iter().map(|p| p.len()).sum();
        let mut out = CVec::zeros(len);
        let mut off = 0;
        for p in parts {
            out.rows_mut(off, p.len()).copy_from(&p);
            off += p.len();
        }
        Ok(out)
    }

    /// `vec(Hd_u + H·diag(φ)·G_uᴴ)` for one user.
    pub fn effective_channel(&self, user: usize, phi: &CVec) -> CMat {
        let g = &self.g[user];
        let mut hphi = self.h.clone();
        for (j, p) in phi.iter().enumerate() {
            for i in 0..hphi.nrows() {
                hphi[(i, j)] *= p;
            }
        }
        let mut out = hphi * g.adjoint();
        if let Some(hd) = &self.hd {
            out += &hd[user];
        }
        out
    }
}

/// Composite matrix; with several users the per-user blocks are stacked
/// row-wise, which equals the single-user form over the concatenated
/// antennas of all users.
pub fn composite_channel(channels: &ChannelSet, include_direct: bool) -> Result<CMat> {
    let blocks = (0..channels.g.len())
        .map(|u| channels.user_composite(u, include_direct))
        .collect::<Result<Vec<_>>>()?;
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let mut out = CMat::zeros(rows, cols);
    let mut off = 0;
    for b in blocks {
        out.rows_mut(off, b.nrows()).copy_from(&b);
        off += b.nrows();
    }
    Ok(out)
}

/// Second-order statistics of the correlated Rayleigh model
/// `H = R_HB^{1/2} H̃ R_HR^{H/2}`, `G_u = R_GU^{1/2} G̃ R_GR^{H/2}`,
/// `Hd_u = R_HdB^{1/2} H̃d R_HdU^{H/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationModel {
    pub r_hb: CMat,
    pub r_hr: CMat,
    pub r_gr: CMat,
    /// Per user.
    pub r_gu: Vec<CMat>,
    pub r_hdb: CMat,
    /// Per user.
    pub r_hdu: Vec<CMat>,
    /// Whether direct channels are drawn.
    pub direct: bool,
}

fn scaled_identity(n: usize, v: f64) -> CMat {
    CMat::identity(n, n).scale(v)
}

impl CorrelationModel {
    /// Uncorrelated fading with variances `σ²_Hd`, `σ²_H`, `σ²_G`.
    pub fn uncorrelated(geometry: &SystemGeometry, var_hd: f64, var_h: f64, var_g: f64, direct: bool) -> Self {
        let (m, n) = (geometry.m(), geometry.n());
        CorrelationModel {
            r_hb: scaled_identity(m, var_h),
            r_hr: CMat::identity(n, n),
            r_gr: CMat::identity(n, n),
            r_gu: geometry.users.iter().map(|u| scaled_identity(u.len(), var_g)).collect(),
            r_hdb: scaled_identity(m, var_hd),
            r_hdu: geometry.users.iter().map(|u| CMat::identity(u.len(), u.len())).collect(),
            direct,
        }
    }

    pub fn identity(geometry: &SystemGeometry, direct: bool) -> Self {
        Self::uncorrelated(geometry, 1.0, 1.0, 1.0, direct)
    }

    fn check(&self) -> Result<()> {
        let all = [&self.r_hb, &self.r_hr, &self.r_gr, &self.r_hdb]
            .into_iter()
            .chain(self.r_gu.iter())
            .chain(self.r_hdu.iter());
        for r in all {
            if r.nrows() != r.ncols() {
                return Err(Error::dim("correlation matrices must be square"));
            }
            if (r - r.adjoint()).norm() > 1e-12 * r.norm().max(1.0) {
                return Err(Error::arg("correlation matrix is not Hermitian"));
            }
        }
        if self.r_gu.len() != self.r_hdu.len() {
            return Err(Error::dim("per-user correlation lists differ in length"));
        }
        if self.r_gr.nrows() != self.r_hr.nrows() {
            return Err(Error::dim("RIS-side correlations differ in size"));
        }
        Ok(())
    }
}

/// Draws a channel set from the correlated Rayleigh model.
pub fn synth_unstructured<R: Rng + ?Sized>(
    corr: &CorrelationModel,
    geometry: &SystemGeometry,
    rng: &mut R,
) -> Result<ChannelSet> {
    corr.check()?;
    let (m, n) = (geometry.m(), geometry.n());
    if corr.r_hb.nrows() != m || corr.r_hr.nrows() != n || corr.r_gu.len() != geometry.user_count() {
        return Err(Error::dim("correlation model does not match the geometry"));
    }
    let s_hb = psd_sqrt(&corr.r_hb)?;
    let s_hr = psd_sqrt(&corr.r_hr)?;
    let s_gr = psd_sqrt(&corr.r_gr)?;
    let h = &s_hb * complex_gaussian(m, n, rng) * s_hr.adjoint();
    let mut g = Vec::with_capacity(geometry.user_count());
    for (u, r_gu) in corr.r_gu.iter().enumerate() {
        let k = geometry.k(u);
        if r_gu.nrows() != k {
            return Err(Error::dim(format!("R_GU of user {u} is not {k}×{k}")));
        }
        g.push(psd_sqrt(r_gu)? * complex_gaussian(k, n, rng) * s_gr.adjoint());
    }
    let hd = if corr.direct {
        let s_hdb = psd_sqrt(&corr.r_hdb)?;
        let mut out = Vec::with_capacity(geometry.user_count());
        for (u, r_hdu) in corr.r_hdu.iter().enumerate() {
            let k = geometry.k(u);
            if r_hdu.nrows() != k {
                return Err(Error::dim(format!("R_HdU of user {u} is not {k}×{k}")));
            }
            out.push(&s_hdb * complex_gaussian(m, k, rng) * psd_sqrt(r_hdu)?.adjoint());
        }
        Some(out)
    } else {
        None
    };
    Ok(ChannelSet { h, g, hd })
}

/// Covariance of the user-major composite vector:
/// per user `blkdiag(R_HdUᵀ ⊗ R_HdB, (R_GR ⊙ R_HRᵀ) ⊗ R_GUᵀ ⊗ R_HB)`; users
/// are mutually uncorrelated. The direct block is omitted when the model has
/// no direct channel.
pub fn composite_covariance(corr: &CorrelationModel) -> Result<CMat> {
    corr.check()?;
    let r_r = corr.r_gr.component_mul(&corr.r_hr.transpose());
    let mut blocks = Vec::with_capacity(corr.r_gu.len());
    for (r_gu, r_hdu) in corr.r_gu.iter().zip(&corr.r_hdu) {
        let cascaded = crate::linalg::kron(&r_r, &crate::linalg::kron(&r_gu.transpose(), &corr.r_hb));
        if corr.direct {
            let d = crate::linalg::kron(&r_hdu.transpose(), &corr.r_hdb);
            blocks.push(block_diag(&[d, cascaded]));
        } else {
            blocks.push(cascaded);
        }
    }
    Ok(block_diag(&blocks))
}

pub fn block_diag(blocks: &[CMat]) -> CMat {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = CMat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Sums each run of `group` consecutive columns: `H_c (I ⊗ 1_J)`. The input
/// must not contain the direct column.
pub fn group_channel(hc: &CMat, group: usize) -> Result<CMat> {
    if group == 0 || hc.ncols() % group != 0 {
        return Err(Error::arg(format!(
            "group size {group} does not divide {} RIS elements",
            hc.ncols()
        )));
    }
    let groups = hc.ncols() / group;
    let mut out = CMat::zeros(hc.nrows(), groups);
    for gi in 0..groups {
        for j in 0..group {
            let col = hc.column(gi * group + j).into_owned();
            let mut dst = out.column_mut(gi);
            dst += col;
        }
    }
    Ok(out)
}

/// Column `ℓ·d_H + p` is `a_R(w_RG[ℓ] − w_RH[p])`: the RIS factor of the
/// composite steering matrix for one user.
pub fn ris_difference_matrix(
    ris: &ArraySpec,
    w_rg: &[SpatialFreq],
    w_rh: &[SpatialFreq],
) -> CMat {
    let mut out = CMat::zeros(ris.len(), w_rg.len() * w_rh.len());
    for (l, wg) in w_rg.iter().enumerate() {
        for (p, wh) in w_rh.iter().enumerate() {
            out.set_column(l * w_rh.len() + p, &steering(wg.minus(*wh), ris));
        }
    }
    out
}
