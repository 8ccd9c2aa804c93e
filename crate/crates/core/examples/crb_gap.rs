//! Structured vs unstructured CRB at M = N = 30 (6×5 RIS), K = 2, T = 62.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ris_core::channel::{GainRule, GeometricParams, PathCounts, SystemGeometry};
use ris_core::crb::{crb_structured_mean_diag, crb_unstructured_for_plan};
use ris_core::manifold::ArraySpec;
use ris_core::training::{dft_ris_sequence, orthogonal_pilots, random_ris_sequence, ris_columns, TrainingPlan};

fn main() -> ris_core::Result<()> {
    let snr_db = 5.0;
    let ris = ArraySpec::ura(6, 5, 0.5, 0.5)?;
    let geometry = SystemGeometry::single_user(30, ris, 2, 10f64.powf(snr_db / 10.0), 1.0);
    let counts = PathCounts::uniform(2, 5, 0, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pilots = orthogonal_pilots(2);
    let realizations = 20;
    for (name, random) in [("dft", false), ("random", true)] {
        let (mut su, mut ss) = (0.0, 0.0);
        for _ in 0..realizations {
            let psi = if random {
                random_ris_sequence(31, 30, &mut rng)
            } else {
                ris_columns(&dft_ris_sequence(31, 30)?)
            };
            let plan = TrainingPlan::block_repeat(&pilots, psi, false)?;
            let params = GeometricParams::random(&geometry, &counts, GainRule::Unit, &mut rng)?;
            su += crb_unstructured_for_plan(&plan, &geometry)?;
            ss += crb_structured_mean_diag(&params, &plan, &geometry)?;
        }
        let (u, s) = (su / realizations as f64, ss / realizations as f64);
        println!(
            "{name:>6}: unstructured {:.2} dB, structured {:.2} dB, gap {:.2} dB",
            10.0 * u.log10(),
            10.0 * s.log10(),
            10.0 * (u / s).log10()
        );
    }
    Ok(())
}
