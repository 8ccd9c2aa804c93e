//! Geometric channel draw, its composite (cascaded) form, and the two
//! ambiguities the composite channel cannot see.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ris_core::channel::{composite_channel, synth_geometric, GainRule, GeometricParams, PathCounts, SystemGeometry};
use ris_core::linalg::C64;
use ris_core::manifold::{ArraySpec, SpatialFreq};

fn main() -> ris_core::Result<()> {
    let geometry = SystemGeometry::single_user(8, ArraySpec::ura(4, 4, 0.5, 0.5)?, 2, 1.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = GeometricParams::random(&geometry, &PathCounts::uniform(2, 3, 1, 1), GainRule::InversePathCount, &mut rng)?;
    let channels = synth_geometric(&params, &geometry)?;
    let hc = composite_channel(&channels, true)?;
    println!("H {:?}, G {:?}, composite {:?}", channels.h.shape(), channels.g[0].shape(), hc.shape());

    // shift every RIS angle and rescale the gains: same composite channel
    let twin = params.with_ambiguity(SpatialFreq::new(0.7, -1.1), C64::new(0.3, 2.0));
    let hc2 = composite_channel(&synth_geometric(&twin, &geometry)?, true)?;
    println!("H changed by {:.3e}", (&channels.h - synth_geometric(&twin, &geometry)?.h).norm());
    println!("composite changed by {:.3e}", (&hc - &hc2).norm());
    println!("normalized: w_RH[0] = {:?}, gamma_H[0] = {}", params.w_rh[0], params.gamma_h[0]);
    Ok(())
}
