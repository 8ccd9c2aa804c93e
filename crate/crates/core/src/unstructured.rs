//! Estimators for the unstructured composite channel: LS, LMMSE, low-rank
//! LMMSE, the per-block reduction of the block-repeat protocol, and the
//! two-step estimator that exploits the RIS→BS channel shared by all users.

use rand::Rng;

use crate::channel::{ChannelSet, SystemGeometry};
use crate::error::{Error, Result};
use crate::linalg::{
    guarded_lstsq, hermitian_eigen, hermitian_inverse, kron, pinv, unvec, vec_cols, CMat, CVec, C64,
};
use crate::training::{add_noise, assemble_measurement, random_ris_sequence, MeasurementOperator, TrainingPlan};

/// LS estimate and its covariance `(σ²/P)(ZᴴZ)⁻¹ = cov_core ⊗ I_M`.
#[derive(Debug, Clone, PartialEq)]
pub struct LsResult {
    pub h_hat: CVec,
    pub cov_core: CMat,
    pub m: usize,
}

impl LsResult {
    pub fn covariance(&self) -> CMat {
        kron(&self.cov_core, &CMat::identity(self.m, self.m))
    }

    pub fn covariance_trace(&self) -> f64 {
        self.cov_core.trace().re * self.m as f64
    }
}

fn check_power(p: f64, sigma2: f64) -> Result<()> {
    if !(p > 0.0) || !(sigma2 >= 0.0) {
        return Err(Error::arg("power must be positive and noise variance non-negative"));
    }
    Ok(())
}

/// `ĥ = (ZᴴZ)⁻¹Zᴴy/√P`, computed through the Kronecker core.
pub fn ls_estimate(y: &CVec, z: &MeasurementOperator, p: f64, sigma2: f64) -> Result<LsResult> {
    check_power(p, sigma2)?;
    if y.len() != z.rows() {
        return Err(Error::dim(format!("{} samples for a {}-row operator", y.len(), z.rows())));
    }
    let (t, cols) = z.core.shape();
    if t < cols {
        return Err(Error::Identifiability {
            reason: format!("{t} training samples for {cols} unknowns per BS antenna"),
            null_params: Vec::new(),
        });
    }
    let g_inv = hermitian_inverse(&z.gram_core())?;
    let b = unvec(&z.adjoint_apply(y)?, z.m, cols)?;
    let h = b * g_inv.transpose() / C64::new(p.sqrt(), 0.0);
    Ok(LsResult {
        h_hat: vec_cols(&h),
        cov_core: g_inv * C64::new(sigma2 / p, 0.0),
        m: z.m,
    })
}

/// Splits sample-major data into per-block M×K matrices.
pub fn split_blocks(y: &CVec, m: usize, k: usize) -> Result<Vec<CMat>> {
    if m == 0 || k == 0 || y.len() % (m * k) != 0 {
        return Err(Error::dim("data length is not a whole number of M×K blocks"));
    }
    Ok((0..y.len() / (m * k))
        .map(|b| CMat::from_column_slice(m, k, y.rows(b * m * k, m * k).as_slice()))
        .collect())
}

/// Per-block reduction of the block-repeat protocol:
/// `𝔶_b = vec(Y_b Xᴴ)/(K√P) = H_c φ̃_b + noise`, then `Ĥ_c = 𝔜 Ψ (ΨᴴΨ)⁻¹`.
pub fn subblock_ls(y_blocks: &[CMat], x: &CMat, psi: &CMat, p: f64) -> Result<CMat> {
    let k = x.nrows();
    if x.ncols() != k {
        return Err(Error::dim("pilot block must be square"));
    }
    let xx = x * x.adjoint();
    if (&xx - CMat::identity(k, k).scale(k as f64)).norm() > 1e-9 * k as f64 {
        return Err(Error::arg("pilot block is not orthogonal"));
    }
    if y_blocks.len() != psi.nrows() {
        return Err(Error::dim(format!(
            "{} data blocks for {} RIS states",
            y_blocks.len(),
            psi.nrows()
        )));
    }
    let gram = psi.adjoint() * psi;
    let scale = gram.trace().re / gram.nrows() as f64;
    if !(scale > 0.0) || (&gram - CMat::identity(gram.nrows(), gram.nrows()).scale(scale)).norm() > 1e-9 * scale {
        return Err(Error::arg("RIS schedule is not orthogonal"));
    }
    let rows = y_blocks.first().map_or(0, |b| b.nrows() * k);
    let mut yc = CMat::zeros(rows, y_blocks.len());
    let norm = C64::new(k as f64 * p.sqrt(), 0.0);
    for (b, yb) in y_blocks.iter().enumerate() {
        if yb.ncols() != k {
            return Err(Error::dim("data block width differs from the pilot length"));
        }
        yc.set_column(b, &(vec_cols(&(yb * x.adjoint())) / norm));
    }
    Ok(yc * psi / C64::new(scale, 0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmmseResult {
    pub h_hat: CVec,
    pub error_cov: CMat,
}

fn is_scaled_identity(g: &CMat) -> Option<f64> {
    let n = g.nrows();
    let s = g.trace().re / n as f64;
    ((g - CMat::identity(n, n).scale(s)).norm() <= 1e-10 * s.abs().max(1e-300)).then_some(s)
}

/// Zero-mean LMMSE estimate with prior covariance `R`.
///
/// Computed as `√P (P R ZᴴZ + σ²I)⁻¹ R Zᴴy`, equivalent to
/// `√P R Zᴴ(P Z R Zᴴ + σ²I)⁻¹ y` but sized by the channel rather than the
/// data. When `ZᴴZ = T·I` the eigenvectors of `R` diagonalize everything.
pub fn lmmse_estimate(y: &CVec, z: &MeasurementOperator, r: &CMat, p: f64, sigma2: f64) -> Result<LmmseResult> {
    check_power(p, sigma2)?;
    let n = z.cols();
    if r.shape() != (n, n) {
        return Err(Error::dim(format!("prior is {:?}, expected {n}×{n}", r.shape())));
    }
    if y.len() != z.rows() {
        return Err(Error::dim("data length does not match the operator"));
    }
    let zy = z.adjoint_apply(y)?;
    let sp = C64::new(p.sqrt(), 0.0);
    if let Some(t) = is_scaled_identity(&z.gram_core()) {
        let (vals, vecs) = hermitian_eigen(r);
        let gain = vals.map(|l| {
            let l = l.max(0.0);
            let d = p * t * l + sigma2;
            if d > 0.0 { l / d } else { 0.0 }
        });
        let err = vals.map(|l| {
            let l = l.max(0.0);
            let d = p * t * l + sigma2;
            if d > 0.0 { l * sigma2 / d } else { 0.0 }
        });
        let apply = |w: &nalgebra::DVector<f64>| {
            let mut s = vecs.clone();
            for (j, &v) in w.iter().enumerate() {
                s.column_mut(j).scale_mut(v);
            }
            s * vecs.adjoint()
        };
        return Ok(LmmseResult {
            h_hat: apply(&gain) * zy * sp,
            error_cov: apply(&err),
        });
    }
    let gram = kron(&z.gram_core(), &CMat::identity(z.m, z.m));
    let a = r * &gram * C64::new(p, 0.0) + CMat::identity(n, n).scale(sigma2);
    let lu = a.clone().lu();
    let solve = |b: CMat| lu.solve(&b).unwrap_or_else(|| pinv(&a) * b);
    let rzy = CMat::from_column_slice(n, 1, (r * &zy).as_slice());
    let h_hat = solve(rzy).column(0) * sp;
    let correction = solve(r * &gram * r) * C64::new(p, 0.0);
    let error_cov = r - correction;
    Ok(LmmseResult {
        h_hat: h_hat.into_owned(),
        error_cov: (&error_cov + error_cov.adjoint()).scale(0.5),
    })
}

/// LMMSE with a rank-`r` prior `R = U Uᴴ`, inverting only an r×r matrix:
/// `ĥ = (√P/σ²) U [I − W(W + σ²/P·I)⁻¹] Uᴴ Zᴴ y`, `W = Uᴴ ZᴴZ U`.
pub fn lowrank_lmmse(y: &CVec, z: &MeasurementOperator, u: &CMat, p: f64, sigma2: f64) -> Result<CVec> {
    check_power(p, sigma2)?;
    if !(sigma2 > 0.0) {
        return Err(Error::arg("low-rank form needs a positive noise variance"));
    }
    if u.nrows() != z.cols() {
        return Err(Error::dim("prior factor rows do not match the operator"));
    }
    let r = u.ncols();
    let mut zu = CMat::zeros(z.rows(), r);
    for j in 0..r {
        zu.set_column(j, &z.apply(&u.column(j).into_owned())?);
    }
    let w = zu.adjoint() * &zu;
    let reg = &w + CMat::identity(r, r).scale(sigma2 / p);
    let inner = CMat::identity(r, r) - &w * hermitian_inverse(&reg)?;
    let uzy = u.adjoint() * z.adjoint_apply(y)?;
    Ok(u * inner * uzy * C64::new(p.sqrt() / sigma2, 0.0))
}

/// Training for the two-step common-channel estimator with single-antenna
/// users. Step 1: user 0 alone, DFT block-repeat plan over N+1 states.
/// Step 2: users 1.. with per-sample RIS states.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStepPlan {
    pub step1: TrainingPlan,
    /// (users−1)×T₂ pilots.
    pub x2: CMat,
    /// T₂×N RIS reflection coefficients, one row per sample (not conjugated).
    pub phases2: CMat,
}

/// Smallest total training length: `N+1 + ⌈(K−1)(M+N)/M⌉`.
pub fn two_step_min_training(m: usize, n: usize, users: usize) -> usize {
    let extra = (users.saturating_sub(1) * (m + n)).div_ceil(m.max(1));
    n + 1 + extra
}

impl TwoStepPlan {
    /// Minimum-length plan; the step-2 phases are random because repeated
    /// entries across samples (as in the first DFT rows) make the step-2
    /// system singular.
    pub fn minimal<R: Rng + ?Sized>(m: usize, n: usize, users: usize, rng: &mut R) -> Result<Self> {
        if users == 0 {
            return Err(Error::arg("at least one user"));
        }
        let psi = crate::training::dft_ris_sequence(n + 1, n)?;
        let step1 = TrainingPlan::block_repeat(&CMat::identity(1, 1), psi, true)?;
        let t2 = two_step_min_training(m, n, users) - (n + 1);
        let x2 = CMat::from_fn(users - 1, t2, |_, _| {
            C64::from_polar(1.0, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
        });
        let phases2 = random_ris_sequence(t2, n, rng);
        Ok(TwoStepPlan { step1, x2, phases2 })
    }

    pub fn total_training(&self) -> usize {
        self.step1.t() + self.x2.ncols()
    }
}

/// Output of the two-step estimator. `h_tilde` estimates `H·diag(g₀*)`; the
/// composite channel of user `u` is `[h_d[u], h_tilde·diag(ris_coeffs[u])]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStepEstimate {
    pub h_tilde: CMat,
    pub h_d: Vec<CVec>,
    pub ris_coeffs: Vec<CVec>,
}

impl TwoStepEstimate {
    pub fn composite(&self, user: usize) -> CMat {
        let (m, n) = self.h_tilde.shape();
        let mut out = CMat::zeros(m, n + 1);
        out.set_column(0, &self.h_d[user]);
        for j in 0..n {
            out.set_column(j + 1, &(self.h_tilde.column(j) * self.ris_coeffs[user][j]));
        }
        out
    }
}

fn single_antenna_check(geometry: &SystemGeometry) -> Result<()> {
    if geometry.users.iter().any(|u| u.len() != 1) {
        return Err(Error::arg("the two-step estimator assumes single-antenna users"));
    }
    Ok(())
}

fn single_user_geometry(geometry: &SystemGeometry, user: usize) -> SystemGeometry {
    SystemGeometry {
        bs: geometry.bs,
        ris: geometry.ris,
        users: vec![geometry.users[user]],
        powers: vec![geometry.powers[user]],
        sigma2: geometry.sigma2,
    }
}

/// Simulates both training steps on a channel set.
pub fn simulate_two_step<R: Rng + ?Sized>(
    channels: &ChannelSet,
    plan: &TwoStepPlan,
    geometry: &SystemGeometry,
    rng: &mut R,
) -> Result<(CVec, CVec)> {
    single_antenna_check(geometry)?;
    let g1 = single_user_geometry(geometry, 0);
    let ch1 = ChannelSet {
        h: channels.h.clone(),
        g: vec![channels.g[0].clone()],
        hd: channels.hd.as_ref().map(|hd| vec![hd[0].clone()]),
    };
    let y1 = crate::training::simulate_uplink(&ch1, &plan.step1, &g1, rng)?;
    let m = geometry.m();
    let t2 = plan.x2.ncols();
    let mut clean = CVec::zeros(m * t2);
    for t in 0..t2 {
        let phi = plan.phases2.row(t).transpose();
        for u in 1..geometry.user_count() {
            let eff = channels.effective_channel(u, &phi);
            let s = C64::new(geometry.powers[u].sqrt(), 0.0) * plan.x2[(u - 1, t)];
            let mut dst = clean.rows_mut(t * m, m);
            dst += eff.column(0) * s;
        }
    }
    Ok((y1, add_noise(&clean, geometry.sigma2, rng)))
}

/// Two-step estimator. Step 1 is LS on user 0's composite channel; step 2
/// solves `ỹ_t = √P Σ_u x_{t,u} [I_M, Ĥ̃ Φ_t] [h_d,u; c_u] + n_t` jointly for
/// every other user. User 0's RIS coefficients are all ones by construction.
pub fn two_step_common(
    y1: &CVec,
    y2: &CVec,
    plan: &TwoStepPlan,
    geometry: &SystemGeometry,
    p: f64,
) -> Result<TwoStepEstimate> {
    single_antenna_check(geometry)?;
    let (m, n, users) = (geometry.m(), geometry.n(), geometry.user_count());
    if plan.step1.t() < n + 1 {
        return Err(Error::InsufficientTraining(format!(
            "step 1 has {} samples, needs {}",
            plan.step1.t(),
            n + 1
        )));
    }
    let g1 = single_user_geometry(geometry, 0);
    let z1 = assemble_measurement(&plan.step1, &g1)?;
    let step1 = ls_estimate(y1, &z1, p, geometry.sigma2.max(0.0))?;
    let hc1 = unvec(&step1.h_hat, m, n + 1)?;
    let h_tilde = hc1.columns(1, n).into_owned();
    let mut h_d = vec![hc1.column(0).into_owned()];
    let mut ris_coeffs = vec![CVec::from_element(n, C64::new(1.0, 0.0))];
    if users == 1 {
        return Ok(TwoStepEstimate { h_tilde, h_d, ris_coeffs });
    }
    let t2 = plan.x2.ncols();
    let unknowns = (users - 1) * (m + n);
    if m * t2 < unknowns || plan.x2.nrows() != users - 1 || plan.phases2.shape() != (t2, n) {
        return Err(Error::InsufficientTraining(format!(
            "step 2 has {} equations for {unknowns} unknowns",
            m * t2
        )));
    }
    if y2.len() != m * t2 {
        return Err(Error::dim("step-2 data length mismatch"));
    }
    let per = m + n;
    let mut zt = CMat::zeros(m * t2, unknowns);
    for t in 0..t2 {
        let mut block = CMat::zeros(m, per);
        block.view_mut((0, 0), (m, m)).fill_with_identity();
        for j in 0..n {
            block.set_column(m + j, &(h_tilde.column(j) * plan.phases2[(t, j)]));
        }
        for u in 0..users - 1 {
            let s = plan.x2[(u, t)] * C64::new(p.sqrt(), 0.0);
            zt.view_mut((t * m, u * per), (m, per)).copy_from(&(&block * s));
        }
    }
    let sol = guarded_lstsq(&zt, &CMat::from_column_slice(m * t2, 1, y2.as_slice()))?;
    for u in 0..users - 1 {
        h_d.push(sol.view((u * per, 0), (m, 1)).column(0).into_owned());
        ris_coeffs.push(sol.view((u * per + m, 0), (n, 1)).column(0).into_owned());
    }
    Ok(TwoStepEstimate { h_tilde, h_d, ris_coeffs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{complex_gaussian, synth_unstructured, CorrelationModel};
    use crate::linalg::psd_sqrt;
    use crate::manifold::ArraySpec;
    use crate::training::{dft_ris_sequence, noiseless_uplink, orthogonal_pilots, simulate_uplink};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geometry(m: usize, n: usize, k: usize, sigma2: f64) -> SystemGeometry {
        SystemGeometry::single_user(m, ArraySpec::half_wave_ula(n), k, 1.0, sigma2)
    }

    fn dft_plan(k: usize, blocks: usize, n: usize) -> TrainingPlan {
        TrainingPlan::block_repeat(&orthogonal_pilots(k), dft_ris_sequence(blocks, n).unwrap(), true).unwrap()
    }

    fn rel(a: &CVec, b: &CVec) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn ls_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = geometry(2, 3, 2, 0.0);
        let ch = synth_unstructured(&CorrelationModel::identity(&g, true), &g, &mut rng).unwrap();
        let plan = dft_plan(2, 5, 3);
        let y = noiseless_uplink(&ch, &plan, &g).unwrap();
        let z = assemble_measurement(&plan, &g).unwrap();
        let est = ls_estimate(&y, &z, 1.0, 0.0).unwrap();
        assert!(rel(&est.h_hat, &ch.composite_vector(true).unwrap()) < 1e-10);

        let g1 = geometry(1, 15, 1, 1.0);
        let z16 = assemble_measurement(&dft_plan(1, 16, 15), &g1).unwrap();
        let ls = ls_estimate(&CVec::zeros(16), &z16, 1.0, 1.0).unwrap();
        assert!(ls.covariance().diagonal().iter().all(|d| (d.re - 1.0 / 16.0).abs() < 1e-14));

        let short = TrainingPlan::block_repeat(
            &orthogonal_pilots(2),
            crate::training::random_ris_sequence(3, 4, &mut rng),
            false,
        )
        .unwrap();
        let g4 = geometry(2, 4, 2, 1.0);
        let zs = assemble_measurement(&short, &g4).unwrap();
        assert!(matches!(
            ls_estimate(&CVec::zeros(zs.rows()), &zs, 1.0, 1.0),
            Err(Error::Identifiability { .. })
        ));
    }

    #[test]
    fn subblock_matches_stacked_ls() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = geometry(3, 4, 2, 0.5);
        let ch = synth_unstructured(&CorrelationModel::identity(&g, true), &g, &mut rng).unwrap();
        let plan = dft_plan(2, 6, 4);
        let y = simulate_uplink(&ch, &plan, &g, &mut rng).unwrap();
        let z = assemble_measurement(&plan, &g).unwrap();
        let ls = ls_estimate(&y, &z, 1.0, 0.5).unwrap();
        let blocks = split_blocks(&y, 3, 2).unwrap();
        let hc = subblock_ls(&blocks, &orthogonal_pilots(2), &plan.psi, 1.0).unwrap();
        assert!((vec_cols(&hc) - &ls.h_hat).norm() < 1e-10 * ls.h_hat.norm());

        let mut quiet = g.clone();
        quiet.sigma2 = 0.0;
        let y0 = noiseless_uplink(&ch, &plan, &quiet).unwrap();
        let hc0 = subblock_ls(&split_blocks(&y0, 3, 2).unwrap(), &orthogonal_pilots(2), &plan.psi, 1.0).unwrap();
        assert!((hc0 - crate::channel::composite_channel(&ch, true).unwrap()).norm() < 1e-10);

        // K = 1: each reduced block is the received vector itself
        let g1 = geometry(2, 2, 1, 0.0);
        let ch1 = synth_unstructured(&CorrelationModel::identity(&g1, true), &g1, &mut rng).unwrap();
        let plan1 = dft_plan(1, 3, 2);
        let y1 = noiseless_uplink(&ch1, &plan1, &g1).unwrap();
        let b1 = split_blocks(&y1, 2, 1).unwrap();
        assert_eq!(b1[1].column(0), y1.rows(2, 2));
        let hc1 = subblock_ls(&b1, &orthogonal_pilots(1), &plan1.psi, 1.0).unwrap();
        assert!((hc1 - crate::channel::composite_channel(&ch1, true).unwrap()).norm() < 1e-10);

        let bad = crate::training::random_ris_sequence(6, 5, &mut rng);
        assert!(subblock_ls(&blocks, &orthogonal_pilots(2), &bad, 1.0).is_err());
    }

    #[test]
    fn lmmse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // ν = PTv/(PTv+σ²) = 10/11 for v=1, P=1, T=10, σ²=1
        let g = geometry(1, 4, 2, 1.0);
        let plan = dft_plan(2, 5, 4);
        let z = assemble_measurement(&plan, &g).unwrap();
        let ch = synth_unstructured(&CorrelationModel::identity(&g, true), &g, &mut rng).unwrap();
        let y = simulate_uplink(&ch, &plan, &g, &mut rng).unwrap();
        let n = z.cols();
        let lm = lmmse_estimate(&y, &z, &CMat::identity(n, n), 1.0, 1.0).unwrap();
        let ls = ls_estimate(&y, &z, 1.0, 1.0).unwrap();
        assert!((&lm.h_hat - ls.h_hat.scale(10.0 / 11.0)).norm() < 1e-10 * ls.h_hat.norm());
        assert!(lm.error_cov.diagonal().iter().all(|d| (d.re - 1.0 / 11.0).abs() < 1e-12));

        let sigma2 = 1e-8;
        let lm = lmmse_estimate(&y, &z, &CMat::identity(n, n), 1.0, sigma2).unwrap();
        let ls = ls_estimate(&y, &z, 1.0, sigma2).unwrap();
        assert!(rel(&lm.h_hat, &ls.h_hat) < 1e-3);

        let zero = lmmse_estimate(&y, &z, &CMat::zeros(n, n), 1.0, 1.0).unwrap();
        assert_eq!(zero.h_hat.norm(), 0.0);
        assert_eq!(zero.error_cov.norm(), 0.0);
    }

    #[test]
    fn general_lmmse_matches_data_domain_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = geometry(2, 2, 1, 0.7);
        let plan = TrainingPlan::per_sample(
            CMat::from_element(1, 5, C64::new(1.0, 0.0)),
            crate::training::with_direct_column(&crate::training::random_ris_sequence(5, 2, &mut rng)),
            true,
        )
        .unwrap();
        let z = assemble_measurement(&plan, &g).unwrap();
        let b = complex_gaussian(6, 6, &mut rng);
        let r = &b * b.adjoint();
        let y = complex_gaussian(10, 1, &mut rng).column(0).into_owned();
        let (p, s2) = (2.0, 0.7);
        let lm = lmmse_estimate(&y, &z, &r, p, s2).unwrap();
        let zd = z.dense().unwrap();
        let cy = &zd * &r * zd.adjoint() * C64::new(p, 0.0) + CMat::identity(10, 10).scale(s2);
        let ci = cy.clone().try_inverse().unwrap();
        let h = &r * zd.adjoint() * &ci * &y * C64::new(p.sqrt(), 0.0);
        assert!(rel(&lm.h_hat, &h) < 1e-10);
        let e = &r - &r * zd.adjoint() * &ci * &zd * &r * C64::new(p, 0.0);
        assert!((&lm.error_cov - &e).norm() < 1e-9 * e.norm());
        // error covariance below the prior
        let (vals, _) = hermitian_eigen(&(&r - &lm.error_cov));
        assert!(vals.iter().all(|&v| v > -1e-9));
    }

    #[test]
    fn lowrank_matches_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = geometry(2, 3, 2, 0.3);
        let plan = dft_plan(2, 4, 3);
        let z = assemble_measurement(&plan, &g).unwrap();
        let n = z.cols();
        let y = complex_gaussian(z.rows(), 1, &mut rng).column(0).into_owned();
        for r in [1usize, 3] {
            let u = complex_gaussian(n, r, &mut rng);
            let full = lmmse_estimate(&y, &z, &(&u * u.adjoint()), 1.5, 0.3).unwrap();
            let low = lowrank_lmmse(&y, &z, &u, 1.5, 0.3).unwrap();
            assert!(rel(&low, &full.h_hat) < 1e-9);
            if r == 1 {
                let proj = &u * (u.adjoint() * &low) / C64::new(u.norm_squared(), 0.0);
                assert!(rel(&proj, &low) < 1e-12);
            }
        }
        let b = complex_gaussian(n, n, &mut rng);
        let rfull = &b * b.adjoint();
        let u = psd_sqrt(&rfull).unwrap();
        let full = lmmse_estimate(&y, &z, &rfull, 1.0, 0.3).unwrap();
        assert!(rel(&lowrank_lmmse(&y, &z, &u, 1.0, 0.3).unwrap(), &full.h_hat) < 1e-9);
    }

    #[test]
    fn two_step_examples() {
        assert_eq!(two_step_min_training(30, 30, 2), 33);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = SystemGeometry {
            bs: ArraySpec::half_wave_ula(4),
            ris: ArraySpec::half_wave_ula(6),
            users: vec![ArraySpec::half_wave_ula(1); 3],
            powers: vec![1.0; 3],
            sigma2: 0.0,
        };
        let ch = synth_unstructured(&CorrelationModel::identity(&g, true), &g, &mut rng).unwrap();
        let plan = TwoStepPlan::minimal(4, 6, 3, &mut rng).unwrap();
        assert_eq!(plan.total_training(), two_step_min_training(4, 6, 3));
        let (y1, y2) = simulate_two_step(&ch, &plan, &g, &mut rng).unwrap();
        let est = two_step_common(&y1, &y2, &plan, &g, 1.0).unwrap();
        for u in 0..3 {
            let truth = ch.user_composite(u, true).unwrap();
            assert!(crate::linalg::relative_frobenius(&est.composite(u), &truth) < 1e-8);
        }

        let g1 = SystemGeometry { users: vec![ArraySpec::half_wave_ula(1)], powers: vec![1.0], ..g };
        let ch1 = ChannelSet { h: ch.h.clone(), g: vec![ch.g[0].clone()], hd: ch.hd.as_ref().map(|d| vec![d[0].clone()]) };
        let plan1 = TwoStepPlan::minimal(4, 6, 1, &mut rng).unwrap();
        let (y1, y2) = simulate_two_step(&ch1, &plan1, &g1, &mut rng).unwrap();
        assert_eq!(y2.len(), 0);
        let est = two_step_common(&y1, &y2, &plan1, &g1, 1.0).unwrap();
        let z = assemble_measurement(&plan1.step1, &g1).unwrap();
        let ls = ls_estimate(&y1, &z, 1.0, 0.0).unwrap();
        assert!((vec_cols(&est.composite(0)) - ls.h_hat).norm() < 1e-12);
    }
}
