//! Array responses, angle-to-frequency mapping and the beamforming spectrum
//! of a two-path snapshot on a 16-element ULA.

use ris_core::geometric::{beamform_peaks, AoaProblem};
use ris_core::linalg::{CMat, C64};
use ris_core::manifold::{freq_from_angles, steering, steering_matrix, ArraySpec, FreqGrid, SpatialFreq};

fn main() -> ris_core::Result<()> {
    let ris = ArraySpec::ura(4, 3, 0.5, 0.5)?;
    let w = freq_from_angles(30.0, 45.0, &ris)?;
    println!("az 30°, el 45° on a 4×3 URA -> w = ({:.4}, {:.4})", w.w1, w.w2);
    let a = steering(w, &ris);
    println!("steering length {}, |a[5]| = {:.3}", a.len(), a[5].norm());

    let bs = ArraySpec::half_wave_ula(16);
    let truth = [SpatialFreq::linear(-0.9), SpatialFreq::linear(1.3)];
    let y = steering_matrix(&truth, &bs) * CMat::from_column_slice(2, 1, &[C64::new(1.0, 0.0), C64::new(0.6, 0.3)]);
    let grid = FreqGrid::uniform_1d(256)?;
    let peaks = beamform_peaks(&AoaProblem::new(y, bs, 2)?, &grid)?;
    for (t, p) in truth.iter().zip(&peaks) {
        println!("path at {:+.4}: grid peak {:+.4} (cell {:.4})", t.w1, p.w1, grid.cell(0));
    }
    Ok(())
}
