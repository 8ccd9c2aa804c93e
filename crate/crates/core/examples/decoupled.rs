//! Decoupled geometric estimation: BS angles from a short first stage, then
//! sparse recovery of the cascaded paths. Compared against LS on the same
//! channel with the same training length.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ris_core::channel::{synth_geometric, GainRule, GeometricParams, PathCounts, SystemGeometry};
use ris_core::geometric::{decoupled_estimate, simulate_decoupled, DecoupledPlan, Grids, Stage2Mode};
use ris_core::manifold::ArraySpec;
use ris_core::training::{assemble_measurement, dft_ris_sequence, orthogonal_pilots, ris_columns, simulate_uplink, TrainingPlan};
use ris_core::unstructured::ls_estimate;

fn main() -> ris_core::Result<()> {
    let p = 10.0;
    let geometry = SystemGeometry::single_user(8, ArraySpec::ura(4, 4, 0.5, 0.5)?, 2, p, 1.0);
    let counts = PathCounts::uniform(2, 2, 0, 1);
    let grids = Grids::for_geometry(&geometry);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = GeometricParams::random(&geometry, &counts, GainRule::Unit, &mut rng)?;
    let channels = synth_geometric(&params, &geometry)?;
    let truth = channels.composite_vector(false)?;

    let plan = DecoupledPlan::new(&geometry, 1, 17, &mut rng)?;
    let (y1, y2) = simulate_decoupled(&channels, &plan, &geometry, &mut rng)?;
    let est = decoupled_estimate(&y1, &y2, &plan, &geometry, &counts, &grids, Stage2Mode::General)?;
    println!("BS angles: truth {:?}", params.w_bh.iter().map(|w| w.w1).collect::<Vec<_>>());
    println!("           found {:?}", est.stage1.w_bh.iter().map(|w| w.w1).collect::<Vec<_>>());
    let err = (&est.h_c - &truth).norm_squared() / truth.norm_squared();
    println!("decoupled: T = {}, NMSE {:.2} dB", plan.total_training(), 10.0 * err.log10());

    let ls_plan = TrainingPlan::block_repeat(&orthogonal_pilots(2), ris_columns(&dft_ris_sequence(18, 16)?), false)?;
    let z = assemble_measurement(&ls_plan, &geometry)?;
    let y = simulate_uplink(&channels, &ls_plan, &geometry, &mut rng)?;
    let ls = ls_estimate(&y, &z, p, 1.0)?;
    let err = (&ls.h_hat - &truth).norm_squared() / truth.norm_squared();
    println!("ls:        T = {}, NMSE {:.2} dB", ls_plan.t(), 10.0 * err.log10());
    Ok(())
}
