//! Two-step common-channel estimation for single-antenna users: one user
//! trains the full cascade, the others only their RIS coefficients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ris_core::channel::{synth_unstructured, CorrelationModel, SystemGeometry};
use ris_core::manifold::ArraySpec;
use ris_core::unstructured::{simulate_two_step, two_step_common, two_step_min_training, TwoStepPlan};

fn main() -> ris_core::Result<()> {
    let (m, n, users) = (16, 24, 4);
    let mut geometry = SystemGeometry::single_user(m, ArraySpec::half_wave_ula(n), 1, 100.0, 1.0);
    geometry.users = vec![ArraySpec::half_wave_ula(1); users];
    geometry.powers = vec![100.0; users];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let plan = TwoStepPlan::minimal(m, n, users, &mut rng)?;
    println!(
        "two-step training {} samples (minimum {}), plain LS needs {}",
        plan.total_training(),
        two_step_min_training(m, n, users),
        users * (n + 1)
    );
    let channels = synth_unstructured(&CorrelationModel::identity(&geometry, true), &geometry, &mut rng)?;
    let (y1, y2) = simulate_two_step(&channels, &plan, &geometry, &mut rng)?;
    let est = two_step_common(&y1, &y2, &plan, &geometry, 100.0)?;
    for u in 0..users {
        let truth = channels.user_composite(u, true)?;
        println!("user {u}: relative error {:.3e}", (est.composite(u) - &truth).norm() / truth.norm());
    }
    Ok(())
}
