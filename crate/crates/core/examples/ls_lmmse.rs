//! LS and LMMSE composite-channel estimates against SNR on an orthogonal
//! plan, with the LS error covariance as reference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ris_core::channel::{composite_covariance, synth_unstructured, CorrelationModel, SystemGeometry};
use ris_core::manifold::ArraySpec;
use ris_core::training::{assemble_measurement, dft_ris_sequence, orthogonal_pilots, simulate_uplink, TrainingPlan};
use ris_core::unstructured::{lmmse_estimate, ls_estimate};

fn main() -> ris_core::Result<()> {
    let (m, n, k) = (4, 8, 2);
    let plan = TrainingPlan::block_repeat(&orthogonal_pilots(k), dft_ris_sequence(n + 1, n)?, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    println!("snr_db  ls_mse     lmmse_mse  ls_bound");
    for snr_db in [-10.0, 0.0, 10.0, 20.0] {
        let p = 10f64.powf(snr_db / 10.0);
        let geometry = SystemGeometry::single_user(m, ArraySpec::half_wave_ula(n), k, p, 1.0);
        let corr = CorrelationModel::identity(&geometry, true);
        let prior = composite_covariance(&corr)?;
        let z = assemble_measurement(&plan, &geometry)?;
        let (mut ls, mut lmmse, mut bound) = (0.0, 0.0, 0.0);
        let trials = 200;
        for _ in 0..trials {
            let ch = synth_unstructured(&corr, &geometry, &mut rng)?;
            let truth = ch.composite_vector(true)?;
            let y = simulate_uplink(&ch, &plan, &geometry, &mut rng)?;
            let est = ls_estimate(&y, &z, p, 1.0)?;
            ls += (&est.h_hat - &truth).norm_squared();
            bound = est.covariance_trace();
            lmmse += (lmmse_estimate(&y, &z, &prior, p, 1.0)?.h_hat - &truth).norm_squared();
        }
        let t = trials as f64;
        println!("{snr_db:>6}  {:<9.5}  {:<9.5}  {bound:.5}", ls / t, lmmse / t);
    }
    Ok(())
}
