use nalgebra::DMatrix;
use ndarray::Array2;

use super::ActionError;

#[derive(Debug, Clone, PartialEq)]
pub struct KabschResult {
    /// `R (p − c_moving) + c_reference` for every moving point `p`.
    pub aligned: Array2<f64>,
    /// Proper rotation, row-major `d × d`.
    pub rotation: Array2<f64>,
    pub rmsd: f64,
    /// Set when the covariance was too degenerate to fix a rotation.
    pub translation_only: bool,
}

/// Optimal proper rotation plus centroid translation of `moving` onto
/// `reference` (rows are points).
pub fn kabsch_align(reference: &Array2<f64>, moving: &Array2<f64>) -> Result<KabschResult, ActionError> {
    if reference.dim() != moving.dim() || reference.nrows() == 0 || reference.ncols() == 0 {
        return Err(ActionError::Params(format!(
            "point sets must have equal nonempty shapes, got {:?} and {:?}",
            reference.dim(),
            moving.dim()
        )));
    }
    let (n, d) = reference.dim();
    let cr = reference.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let cm = moving.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let p = DMatrix::from_fn(n, d, |i, j| moving[(i, j)] - cm[j]);
    let q = DMatrix::from_fn(n, d, |i, j| reference[(i, j)] - cr[j]);
    let h = p.transpose() * &q;
    let svd = h.clone().svd(true, true);
    let scale = svd.singular_values.max().max(f64::MIN_POSITIVE);
    let rank = svd.singular_values.iter().filter(|s| **s > 1e-12 * scale && **s > 1e-300).count();
    let (rot, translation_only) = if rank + 1 < d || rank == 0 {
        (DMatrix::identity(d, d), true)
    } else {
        let u = svd.u.expect("u requested");
        let vt = svd.v_t.expect("v_t requested");
        let v = vt.transpose();
        let sign = (&v * u.transpose()).determinant().signum();
        let mut fix = DMatrix::identity(d, d);
        fix[(d - 1, d - 1)] = if sign < 0.0 { -1.0 } else { 1.0 };
        (v * fix * u.transpose(), false)
    };
    let moved = &p * rot.transpose();
    let mut aligned = Array2::zeros((n, d));
    let mut sq = 0.0;
    for i in 0..n {
        for j in 0..d {
            aligned[(i, j)] = moved[(i, j)] + cr[j];
            sq += (aligned[(i, j)] - reference[(i, j)]).powi(2);
        }
    }
    let rotation = Array2::from_shape_fn((d, d), |(i, j)| rot[(i, j)]);
    Ok(KabschResult { aligned, rotation, rmsd: (sq / n as f64).sqrt(), translation_only })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rotate(pts: &Array2<f64>, theta: f64) -> Array2<f64> {
        let (c, s) = (theta.cos(), theta.sin());
        let r = array![[c, -s], [s, c]];
        pts.dot(&r.t())
    }

    fn cloud() -> Array2<f64> {
        array![[0.0, 0.0], [1.0, 0.2], [0.3, 2.0], [-1.5, 0.7], [2.2, -1.1]]
    }

    #[test]
    fn identity_for_equal_sets() {
        let r = kabsch_align(&cloud(), &cloud()).unwrap();
        assert!(r.rmsd < 1e-12);
        assert!((&r.rotation - &Array2::<f64>::eye(2)).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn recovers_known_rotation() {
        let theta = 30f64.to_radians();
        let moving = rotate(&cloud(), theta) + &array![[3.0, -1.0]];
        let r = kabsch_align(&cloud(), &moving).unwrap();
        let expect = array![[theta.cos(), theta.sin()], [-theta.sin(), theta.cos()]];
        assert!((&r.rotation - &expect).iter().all(|v| v.abs() < 1e-10));
        assert!(r.rmsd < 1e-10);
    }

    #[test]
    fn mirror_gets_best_proper_rotation() {
        let refp = cloud();
        let mut mirrored = refp.clone();
        mirrored.column_mut(0).mapv_inplace(|v| -v);
        let r = kabsch_align(&refp, &mirrored).unwrap();
        let det = r.rotation[(0, 0)] * r.rotation[(1, 1)] - r.rotation[(0, 1)] * r.rotation[(1, 0)];
        assert!((det - 1.0).abs() < 1e-12);
        // brute-force scan over proper rotations of the centered mirror image
        let cm = mirrored.mean_axis(ndarray::Axis(0)).unwrap();
        let cr = refp.mean_axis(ndarray::Axis(0)).unwrap();
        let centered = &mirrored - &cm;
        let mut best = f64::INFINITY;
        for k in 0..200_000 {
            let th = k as f64 / 200_000.0 * std::f64::consts::TAU;
            let a = rotate(&centered, th) + &cr;
            let rmsd = ((&a - &refp).mapv(|v| v * v).sum() / refp.nrows() as f64).sqrt();
            best = best.min(rmsd);
        }
        assert!((r.rmsd - best).abs() < 1e-6, "{} vs {best}", r.rmsd);
    }

    #[test]
    fn degenerate_sets_translate_only() {
        let one = array![[1.0, 2.0]];
        let other = array![[4.0, -1.0]];
        let r = kabsch_align(&one, &other).unwrap();
        assert!(r.translation_only);
        assert_eq!(r.aligned, one);
        assert!(kabsch_align(&one, &cloud()).is_err());
    }
}
