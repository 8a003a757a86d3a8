//! Rigid-body superposition and RMSD.
//!
//! Alignment is least-squares optimal over proper rotations and translations
//! (Kabsch): centroid subtraction, cross-covariance SVD, and a determinant
//! correction that flips the weakest singular direction so reflections are
//! never returned. The transform is computed on a masked atom subset but
//! applied to every atom.

use crate::molgraph::Conformation;
use nalgebra::{Matrix3, Vector3};
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum AlignError {
    LengthMismatch { a: usize, b: usize },
    MaskLength { mask: usize, atoms: usize },
    EmptyMask,
}

impl fmt::Display for AlignError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlignError::LengthMismatch { a, b } => {
                write!(f, "conformations have {} vs {} atoms", a, b)
            }
            AlignError::MaskLength { mask, atoms } => {
                write!(f, "mask length {} vs {} atoms", mask, atoms)
            }
            AlignError::EmptyMask => write!(f, "atom mask selects no atoms"),
        }
    }
}

impl std::error::Error for AlignError {}

/// Proper rotation plus translation.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.rotation * Vector3::new(p[0], p[1], p[2]) + self.translation;
        [v.x, v.y, v.z]
    }

    /// Orthogonality and determinant check at the given tolerance.
    pub fn is_proper(&self, tol: f64) -> bool {
        let rtr = self.rotation.transpose() * self.rotation;
        let id = Matrix3::identity();
        let ortho = (rtr - id).iter().all(|x| x.abs() <= tol);
        ortho && (self.rotation.determinant() - 1.0).abs() <= tol
    }
}

/// Result of superposing a reference onto a target.
#[derive(Clone, Debug)]
pub struct Alignment {
    /// Reference conformation after applying the optimal transform to all atoms.
    pub aligned_reference: Conformation,
    pub transform: RigidTransform,
    /// RMSD over the masked atoms after alignment.
    pub rmsd: f64,
}

/// Plain index-matched RMSD over the masked atoms, without alignment.
pub fn rmsd(a: &Conformation, b: &Conformation, mask: &[bool]) -> Result<f64, AlignError> {
    if a.len() != b.len() {
        return Err(AlignError::LengthMismatch { a: a.len(), b: b.len() });
    }
    if mask.len() != a.len() {
        return Err(AlignError::MaskLength { mask: mask.len(), atoms: a.len() });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((pa, pb), &keep) in a.coords().iter().zip(b.coords()).zip(mask) {
        if keep {
            sum += (pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return Err(AlignError::EmptyMask);
    }
    Ok((sum / count as f64).sqrt())
}

/// Align `reference` onto `target`: returns the transformed reference, the
/// optimal proper rigid transform, and the post-alignment RMSD over the mask.
pub fn kabsch_align(
    reference: &Conformation,
    target: &Conformation,
    mask: &[bool],
) -> Result<Alignment, AlignError> {
    if reference.len() != target.len() {
        return Err(AlignError::LengthMismatch { a: reference.len(), b: target.len() });
    }
    if mask.len() != reference.len() {
        return Err(AlignError::MaskLength { mask: mask.len(), atoms: reference.len() });
    }
    let selected: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if selected.is_empty() {
        return Err(AlignError::EmptyMask);
    }

    let centroid = |conf: &Conformation| {
        let mut c = Vector3::zeros();
        for &i in &selected {
            let p = conf.get(i);
            c += Vector3::new(p[0], p[1], p[2]);
        }
        c / selected.len() as f64
    };
    let c_ref = centroid(reference);
    let c_tgt = centroid(target);

    // cross-covariance H = sum over masked atoms of (ref - c_ref)(tgt - c_tgt)^T
    let mut h = Matrix3::zeros();
    for &i in &selected {
        let p = reference.get(i);
        let q = target.get(i);
        let pc = Vector3::new(p[0], p[1], p[2]) - c_ref;
        let qc = Vector3::new(q[0], q[1], q[2]) - c_tgt;
        h += pc * qc.transpose();
    }

    let svd = h.svd(true, true);
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let v = v_t.transpose();

    // restrict to proper rotations: flip the singular direction with the
    // smallest singular value when the unconstrained optimum is a reflection
    let mut rotation = v * u.transpose();
    if rotation.determinant() < 0.0 {
        let sv = svd.singular_values;
        let mut min_idx = 0;
        for k in 1..3 {
            if sv[k] < sv[min_idx] {
                min_idx = k;
            }
        }
        let mut v_fixed = v;
        for r in 0..3 {
            v_fixed[(r, min_idx)] = -v_fixed[(r, min_idx)];
        }
        rotation = v_fixed * u.transpose();
    }
    let translation = c_tgt - rotation * c_ref;
    let transform = RigidTransform { rotation, translation };

    let aligned: Vec<[f64; 3]> = reference.coords().iter().map(|&p| transform.apply(p)).collect();
    let aligned_reference =
        Conformation::new(aligned).expect("rigid motion of finite coords is finite");
    let value = rmsd(&aligned_reference, target, mask)?;

    Ok(Alignment { aligned_reference, transform, rmsd: value })
}
