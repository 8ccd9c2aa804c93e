//! Pilot and RIS training schedules, the stacked measurement operator and
//! uplink simulation.
//!
//! Sample `t` of the uplink is `y_t = Σ_u √P_u (φ̃_tᵀ ⊗ x_{t,u}ᵀ ⊗ I_M) h_c,u + n_t`
//! with `φ̃_t = [1; φ_t]` when the direct path is modelled and `φ̃_t = φ_t`
//! otherwise. Stacking all samples gives `Z = V ⊗ I_M` where row `t` of the
//! core matrix `V` holds `φ̃_tᵀ ⊗ x_{t,u}ᵀ` for every user (user-major), so the
//! operator never has to be materialized.
//!
//! A RIS schedule `Ψ` stores `φ̃_bᴴ` in row `b`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::channel::{ChannelSet, SystemGeometry};
use crate::error::{Error, Result};
use crate::linalg::{kron, unvec, vec_cols, CMat, CVec, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// The RIS holds each state for one block of K samples, during which the
    /// UE antennas send a K×K orthogonal pilot block.
    BlockRepeat,
    /// A new RIS state every sample.
    PerSample,
}

/// Pilots and RIS states for one training interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPlan {
    /// K_total×T pilot matrix; rows are grouped by user.
    pub x: CMat,
    /// Rows `φ̃_bᴴ`, one per RIS state.
    pub psi: CMat,
    pub protocol: Protocol,
    pub include_direct: bool,
}

/// Default cap for materializing `Z` densely (bytes).
pub const DENSE_LIMIT_BYTES: usize = 2 << 30;

impl TrainingPlan {
    /// Block-repeat plan: every RIS state in `psi` is held for one pilot
    /// block `x_block` (K×K).
    pub fn block_repeat(x_block: &CMat, psi: CMat, include_direct: bool) -> Result<Self> {
        let k = x_block.nrows();
        if x_block.ncols() != k || k == 0 {
            return Err(Error::dim("pilot block must be square and nonempty"));
        }
        let blocks = psi.nrows();
        let mut x = CMat::zeros(k, k * blocks);
        for b in 0..blocks {
            x.columns_mut(b * k, k).copy_from(x_block);
        }
        Ok(TrainingPlan {
            x,
            psi,
            protocol: Protocol::BlockRepeat,
            include_direct,
        })
    }

    /// One RIS state per sample; `psi` has one row per column of `x`.
    pub fn per_sample(x: CMat, psi: CMat, include_direct: bool) -> Result<Self> {
        if x.ncols() != psi.nrows() {
            return Err(Error::dim(format!(
                "{} pilot samples but {} RIS states",
                x.ncols(),
                psi.nrows()
            )));
        }
        Ok(TrainingPlan {
            x,
            psi,
            protocol: Protocol::PerSample,
            include_direct,
        })
    }

    pub fn t(&self) -> usize {
        self.x.ncols()
    }

    pub fn k_total(&self) -> usize {
        self.x.nrows()
    }

    /// RIS state index used at sample `t`.
    pub fn block_of(&self, t: usize) -> usize {
        match self.protocol {
            Protocol::BlockRepeat => t / self.k_total(),
            Protocol::PerSample => t,
        }
    }

    /// `φ̃_t` (conjugate of row `block_of(t)` of `Ψ`).
    pub fn phi_tilde(&self, t: usize) -> CVec {
        self.psi.row(self.block_of(t)).adjoint()
    }

    /// RIS reflection vector `φ_t` without the direct-path entry.
    pub fn ris_phases(&self, t: usize) -> CVec {
        let full = self.phi_tilde(t);
        if self.include_direct {
            full.rows(1, full.len() - 1).into_owned()
        } else {
            full
        }
    }

    pub fn validate(&self, geometry: &SystemGeometry) -> Result<()> {
        let cols = geometry.n() + self.include_direct as usize;
        if self.psi.ncols() != cols {
            return Err(Error::dim(format!(
                "RIS schedule has {} columns, expected {cols}",
                self.psi.ncols()
            )));
        }
        if self.x.nrows() != geometry.k_total() {
            return Err(Error::dim(format!(
                "pilot matrix has {} rows for {} UE antennas",
                self.x.nrows(),
                geometry.k_total()
            )));
        }
        let needed = match self.protocol {
            Protocol::BlockRepeat => self.psi.nrows() * self.k_total(),
            Protocol::PerSample => self.psi.nrows(),
        };
        if self.t() != needed {
            return Err(Error::dim(format!(
                "{} samples do not match {} RIS states",
                self.t(),
                self.psi.nrows()
            )));
        }
        if self.include_direct {
            for b in 0..self.psi.nrows() {
                if (self.psi[(b, 0)] - C64::new(1.0, 0.0)).norm() > 1e-12 {
                    return Err(Error::arg("direct-path column of the RIS schedule must be all ones"));
                }
            }
        }
        Ok(())
    }
}

/// `blocks`×(N+1) DFT schedule `[Ψ]_{mn} = e^{j2π mn/blocks}`.
pub fn dft_ris_sequence(blocks: usize, n: usize) -> Result<CMat> {
    if blocks < n + 1 {
        return Err(Error::InsufficientTraining(format!(
            "{blocks} RIS states cannot resolve {} unknowns",
            n + 1
        )));
    }
    Ok(CMat::from_fn(blocks, n + 1, |m, k| {
        C64::from_polar(1.0, 2.0 * PI * ((m * k) % blocks) as f64 / blocks as f64)
    }))
}

/// First N+1 columns of the Sylvester-Hadamard matrix of order `blocks`.
pub fn hadamard_ris_sequence(blocks: usize, n: usize) -> Result<CMat> {
    if !blocks.is_power_of_two() {
        return Err(Error::arg(format!(
            "Hadamard schedules need a power-of-two state count, got {blocks}"
        )));
    }
    if blocks < n + 1 {
        return Err(Error::InsufficientTraining(format!(
            "{blocks} RIS states cannot resolve {} unknowns",
            n + 1
        )));
    }
    Ok(CMat::from_fn(blocks, n + 1, |m, k| {
        // Sylvester: H[m,k] = (-1)^{popcount(m & k)}
        let s = if (m & k).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
        C64::new(s, 0.0)
    }))
}

/// One element on at a time: `Ψ = I_N`. Only valid without a direct path.
pub fn one_hot_ris_sequence(n: usize, include_direct: bool) -> Result<CMat> {
    if include_direct {
        return Err(Error::arg(
            "one-element-at-a-time training cannot separate the direct path",
        ));
    }
    Ok(CMat::identity(n, n))
}

/// Drops the leading all-ones column of a schedule built for a model with a
/// direct path.
pub fn ris_columns(psi: &CMat) -> CMat {
    psi.columns(1, psi.ncols() - 1).into_owned()
}

/// `T`×N schedule of i.i.d. uniform phases (no direct column).
pub fn random_ris_sequence<R: Rng + ?Sized>(rows: usize, n: usize, rng: &mut R) -> CMat {
    CMat::from_fn(rows, n, |_, _| C64::from_polar(1.0, rng.random_range(-PI..PI)))
}

/// Prepends the all-ones direct-path column.
pub fn with_direct_column(psi: &CMat) -> CMat {
    let mut out = CMat::from_element(psi.nrows(), psi.ncols() + 1, C64::new(1.0, 0.0));
    out.columns_mut(1, psi.ncols()).copy_from(psi);
    out
}

/// K×K DFT pilot block, `X Xᴴ = K·I`.
pub fn orthogonal_pilots(k: usize) -> CMat {
    CMat::from_fn(k, k, |i, j| {
        C64::from_polar(1.0, -2.0 * PI * ((i * j) % k.max(1)) as f64 / k.max(1) as f64)
    })
}

/// Stacked measurement operator `Z = V ⊗ I_M`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementOperator {
    /// T × Σ_u K_u(N+δ) core; column index for user `u` is
    /// `off_u + c·K_u + k`.
    pub core: CMat,
    pub m: usize,
    pub include_direct: bool,
    /// Column range of each user's block in `core`.
    pub user_cols: Vec<(usize, usize)>,
}

/// Builds the core `V` of the measurement operator.
pub fn assemble_measurement(plan: &TrainingPlan, geometry: &SystemGeometry) -> Result<MeasurementOperator> {
    plan.validate(geometry)?;
    let cols_per_k = geometry.n() + plan.include_direct as usize;
    let t_len = plan.t();
    let mut user_cols = Vec::with_capacity(geometry.user_count());
    let mut off = 0;
    for u in 0..geometry.user_count() {
        let w = geometry.k(u) * cols_per_k;
        user_cols.push((off, w));
        off += w;
    }
    let k_off = geometry.k_offsets();
    let mut core = CMat::zeros(t_len, off);
    for t in 0..t_len {
        let phi = plan.phi_tilde(t);
        for (u, &(start, _)) in user_cols.iter().enumerate() {
            let ku = geometry.k(u);
            for c in 0..cols_per_k {
                for k in 0..ku {
                    core[(t, start + c * ku + k)] = phi[c] * plan.x[(k_off[u] + k, t)];
                }
            }
        }
    }
    Ok(MeasurementOperator {
        core,
        m: geometry.m(),
        include_direct: plan.include_direct,
        user_cols,
    })
}

impl MeasurementOperator {
    pub fn rows(&self) -> usize {
        self.core.nrows() * self.m
    }

    pub fn cols(&self) -> usize {
        self.core.ncols() * self.m
    }

    /// Dense `Z`. Fails above [`DENSE_LIMIT_BYTES`].
    pub fn dense(&self) -> Result<CMat> {
        self.dense_with_limit(DENSE_LIMIT_BYTES)
    }

    pub fn dense_with_limit(&self, limit_bytes: usize) -> Result<CMat> {
        let bytes = self.rows() * self.cols() * std::mem::size_of::<C64>();
        if bytes > limit_bytes {
            return Err(Error::arg(format!(
                "dense operator needs {bytes} bytes, limit is {limit_bytes}"
            )));
        }
        Ok(kron(&self.core, &CMat::identity(self.m, self.m)))
    }

    /// `Z h` without forming `Z`: `vec(H Vᵀ)` with `H` the M-row reshape of `h`.
    pub fn apply(&self, h: &CVec) -> Result<CVec> {
        let hm = unvec(h, self.m, self.core.ncols())?;
        Ok(vec_cols(&(hm * self.core.transpose())))
    }

    /// `Zᴴ y = vec(Y V*)`.
    pub fn adjoint_apply(&self, y: &CVec) -> Result<CVec> {
        let ym = unvec(y, self.m, self.core.nrows())?;
        Ok(vec_cols(&(ym * self.core.map(|z| z.conj()))))
    }

    /// `VᴴV`; the Gram matrix of `Z` is this core Kronecker `I_M`.
    pub fn gram_core(&self) -> CMat {
        self.core.adjoint() * &self.core
    }

    /// Scales the columns of user `u` by `s[u]` (used for unequal powers).
    pub fn scaled_by_user(&self, s: &[f64]) -> Self {
        let mut out = self.clone();
        for (&(start, width), &f) in self.user_cols.iter().zip(s) {
            out.core.columns_mut(start, width).scale_mut(f);
        }
        out
    }

    /// Per-user power weights `√P_u` applied to the core.
    pub fn with_powers(&self, geometry: &SystemGeometry) -> Self {
        let s: Vec<f64> = geometry.powers.iter().map(|p| p.sqrt()).collect();
        self.scaled_by_user(&s)
    }
}

fn noise<R: Rng + ?Sized>(len: usize, sigma2: f64, rng: &mut R) -> CVec {
    let s = (sigma2 / 2.0).sqrt();
    CVec::from_fn(len, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        C64::new(s * re, s * im)
    })
}

/// Noise-free received samples `Σ_u √P_u Z_u h_c,u`, stacked sample-major
/// (`M` entries per sample).
pub fn noiseless_uplink(channels: &ChannelSet, plan: &TrainingPlan, geometry: &SystemGeometry) -> Result<CVec> {
    let z = assemble_measurement(plan, geometry)?.with_powers(geometry);
    z.apply(&channels.composite_vector(plan.include_direct)?)
}

/// `√P Z h_c + n` with i.i.d. CN(0, σ²) noise.
pub fn simulate_uplink<R: Rng + ?Sized>(
    channels: &ChannelSet,
    plan: &TrainingPlan,
    geometry: &SystemGeometry,
    rng: &mut R,
) -> Result<CVec> {
    let clean = noiseless_uplink(channels, plan, geometry)?;
    Ok(&clean + noise(clean.len(), geometry.sigma2, rng))
}

/// Adds CN(0, σ²) noise to a clean vector.
pub fn add_noise<R: Rng + ?Sized>(clean: &CVec, sigma2: f64, rng: &mut R) -> CVec {
    clean + noise(clean.len(), sigma2, rng)
}
