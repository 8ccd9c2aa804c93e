//! Training schedules and the Gram matrix of the measurement operator:
//! orthogonal designs give `T·I`, random phases do not.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ris_core::channel::SystemGeometry;
use ris_core::crb::crb_unstructured_for_plan;
use ris_core::linalg::{condition_number, CMat};
use ris_core::manifold::ArraySpec;
use ris_core::training::{
    assemble_measurement, dft_ris_sequence, hadamard_ris_sequence, orthogonal_pilots, random_ris_sequence,
    with_direct_column, TrainingPlan,
};

fn main() -> ris_core::Result<()> {
    let (n, k) = (7, 2);
    let geometry = SystemGeometry::single_user(4, ArraySpec::half_wave_ula(n), k, 1.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let schedules: [(&str, CMat); 3] = [
        ("dft", dft_ris_sequence(8, n)?),
        ("hadamard", hadamard_ris_sequence(8, n)?),
        ("random", with_direct_column(&random_ris_sequence(8, n, &mut rng))),
    ];
    for (name, psi) in schedules {
        let plan = TrainingPlan::block_repeat(&orthogonal_pilots(k), psi, true)?;
        let z = assemble_measurement(&plan, &geometry)?;
        let gram = z.gram_core();
        println!(
            "{name:>8}: T = {}, cond(ZᴴZ) = {:.3e}, mean CRB diag = {:.5}",
            plan.t(),
            condition_number(&gram),
            crb_unstructured_for_plan(&plan, &geometry)?
        );
    }
    Ok(())
}
