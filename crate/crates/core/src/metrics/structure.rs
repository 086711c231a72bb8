//! Rigid superposition and TM-score over Cα coordinates with identity
//! residue correspondence.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type CoordSet = Vec<[f64; 3]>;

/// Rigid transform taking the second structure onto the first:
/// `a_i ≈ rotation · b_i + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Superposition {
    pub rmsd: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Superposition {
    pub fn apply(&self, p: &[f64; 3]) -> Vector3<f64> {
        self.rotation * Vector3::from(*p) + self.translation
    }
}

fn check_pair(a: &[[f64; 3]], b: &[[f64; 3]], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "structures have {} and {} residues",
            a.len(),
            b.len()
        )));
    }
    if a.len() < min {
        return Err(Error::shape(format!("need at least {min} residues, got {}", a.len())));
    }
    if a.iter().chain(b).flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite coordinate"));
    }
    Ok(())
}

fn centroid(p: &[[f64; 3]], idx: &[usize]) -> Vector3<f64> {
    idx.iter().map(|&i| Vector3::from(p[i])).sum::<Vector3<f64>>() / idx.len() as f64
}

// Least-squares fit on the residues in `idx`; RMSD is reported over `idx`.
fn fit(a: &[[f64; 3]], b: &[[f64; 3]], idx: &[usize]) -> Superposition {
    let ca = centroid(a, idx);
    let cb = centroid(b, idx);
    let mut h = Matrix3::zeros();
    for &i in idx {
        h += (Vector3::from(b[i]) - cb) * (Vector3::from(a[i]) - ca).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let translation = ca - rotation * cb;
    let sup = Superposition {
        rmsd: 0.0,
        rotation,
        translation,
    };
    let ss: f64 = idx
        .iter()
        .map(|&i| (sup.apply(&b[i]) - Vector3::from(a[i])).norm_squared())
        .sum();
    Superposition {
        rmsd: (ss / idx.len() as f64).sqrt(),
        ..sup
    }
}

/// Minimal-RMSD superposition of `b` onto `a` (Kabsch, with reflection
/// correction).
pub fn kabsch(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<Superposition> {
    check_pair(a, b, 3)?;
    let all: Vec<usize> = (0..a.len()).collect();
    Ok(fit(a, b, &all))
}

pub fn kabsch_rmsd(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    Ok(kabsch(a, b)?.rmsd)
}

/// RMSD with no superposition at all.
pub fn raw_rmsd(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    check_pair(a, b, 1)?;
    let ss: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (Vector3::from(*p) - Vector3::from(*q)).norm_squared())
        .sum();
    Ok((ss / a.len() as f64).sqrt())
}

/// TM-score distance scale, clamped below at 0.5 Å.
pub fn tm_d0(len: usize) -> f64 {
    (1.24 * (len as f64 - 15.0).cbrt() - 1.8).max(0.5)
}

const TM_ROUNDS: usize = 3;
const TM_MIN_ITERATED: usize = 8;

fn tm_sum(a: &[[f64; 3]], b: &[[f64; 3]], sup: &Superposition, d0: f64) -> (f64, Vec<f64>) {
    let dists: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(p, q)| (sup.apply(q) - Vector3::from(*p)).norm())
        .collect();
    let s = dists.iter().map(|d| 1.0 / (1.0 + (d / d0).powi(2))).sum();
    (s, dists)
}

/// TM-score of `b` against `a` with residue `i` matched to residue `i`.
///
/// Starts from the all-residue Kabsch fit, then for structures of at least
/// 8 residues refits on the inliers (`d < 2·d0`) for three rounds, keeping
/// the best score seen.
pub fn tm_score(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    check_pair(a, b, 3)?;
    let n = a.len();
    let d0 = tm_d0(n);
    let all: Vec<usize> = (0..n).collect();
    let mut sup = fit(a, b, &all);
    let (mut best, mut dists) = tm_sum(a, b, &sup, d0);
    if n >= TM_MIN_ITERATED {
        for _ in 0..TM_ROUNDS {
            let inliers: Vec<usize> = (0..n).filter(|&i| dists[i] < 2.0 * d0).collect();
            if inliers.len() < 3 {
                break;
            }
            sup = fit(a, b, &inliers);
            let (s, d) = tm_sum(a, b, &sup, d0);
            dists = d;
            best = best.max(s);
        }
    }
    Ok(best / n as f64)
}
