use rand::Rng;
use rand_distr::StandardNormal;

use crate::qsim::{Mat4, C64, ZERO};

/// Haar-random 4x4 unitary via Gram-Schmidt on a complex Gaussian matrix.
pub(crate) fn haar_unitary4<R: Rng>(rng: &mut R) -> Mat4 {
    let mut cols = [[ZERO; 4]; 4];
    for col in cols.iter_mut() {
        for v in col.iter_mut() {
            *v = C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        }
    }
    for j in 0..4 {
        for i in 0..j {
            let proj: C64 = (0..4).map(|r| cols[i][r].conj() * cols[j][r]).sum();
            for r in 0..4 {
                let sub = proj * cols[i][r];
                cols[j][r] -= sub;
            }
        }
        let norm = cols[j].iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        for v in cols[j].iter_mut() {
            *v /= norm;
        }
    }
    let mut m = [[ZERO; 4]; 4];
    for (r, row) in m.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = cols[c][r];
        }
    }
    m
}
