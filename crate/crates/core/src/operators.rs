//! The factorized data model `J = A U`, `U = B(Σx) U - F`.
//!
//! With `T` the streaming operator inverted by the volume Green function
//! (free streaming for absorption, `v·∇ + σa` for scattering) and `z = T⁻¹ w`:
//!
//! * absorption: `B w = σs K z - (σa + σs) z`
//! * scattering: `B w = σs (K z - z)`
//!
//! where `(K z)_l = Σ_l' η_l' k_ll' z_l'`. Both are affine in the unknown,
//! `B w = M₀ z + Σx ⊙ D z`, with `D z = -z` (absorption) or `K z - z`
//! (scattering). This split is what the reconstruction objectives use.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{AngularGrid, Mesh};
use crate::medium::{Coefficient, OpticalField};
use crate::par;
use crate::transport::{
    apply_scatter, apply_scatter_transpose, assemble_green_boundary, boundary_source, GreenSet, GreenVariant,
    PhaseField, StreamingOperator,
};

/// `A = G_b (H⊗S)`, i.e. `A[d, l*n + m] = G_b[d, l*n + m] η_l ζ_m`.
pub fn assemble_a(green: &GreenSet, mesh: &Mesh, angular: &AngularGrid) -> Result<DMatrix<f64>> {
    let n = mesh.n_cells();
    let cols = n * angular.ns;
    if green.gb.ncols() != cols {
        return Err(Error::DimensionMismatch {
            context: "assemble_a columns",
            expected: cols,
            actual: green.gb.ncols(),
        });
    }
    let mut a = green.gb.clone();
    for (c, mut col) in a.column_iter_mut().enumerate() {
        let w = angular.weights[c / n] * mesh.cell_volumes[c % n];
        col *= w;
    }
    Ok(a)
}

/// `F_q`: minus the volumetric inflow term, nonzero only in boundary cells of
/// source `q` for directions entering the domain.
pub fn assemble_f(mesh: &Mesh, angular: &AngularGrid, q: usize) -> Result<PhaseField> {
    let mut f = boundary_source(mesh, angular, q)?;
    f.iter_mut().for_each(|x| *x = -*x);
    Ok(f)
}

/// The intermediate field `U` built from a forward solution `u` for source `q`:
/// `σs(Ku - u) - σa u - F` (absorption) or `σs(Ku - u) - F` (scattering).
pub fn intermediate_from_forward(
    u: &[f64],
    field: &OpticalField,
    mesh: &Mesh,
    angular: &AngularGrid,
    target: Coefficient,
    q: usize,
) -> Result<PhaseField> {
    let n = mesh.n_cells();
    let f = assemble_f(mesh, angular, q)?;
    let mut ku = vec![0.0; u.len()];
    apply_scatter(angular, u, n, &mut ku);
    let mut out = PhaseField::zeros(n, angular.ns);
    for l in 0..angular.ns {
        for m in 0..n {
            let i = l * n + m;
            let mut v = field.sigma_s[m] * (ku[i] - u[i]) - f[i];
            if target == Coefficient::Absorption {
                v -= field.sigma_a[m] * u[i];
            }
            out[i] = v;
        }
    }
    Ok(out)
}

/// Everything about the factorized model that does not depend on the unknown
/// coefficient: grids, the known coefficient, `A`, and the source vectors.
#[derive(Clone, Debug)]
pub struct Factorization {
    pub mesh: Mesh,
    pub angular: AngularGrid,
    pub target: Coefficient,
    /// σs when reconstructing absorption, σa when reconstructing scattering.
    pub known: Vec<f64>,
    pub a: DMatrix<f64>,
    pub sources: Vec<PhaseField>,
}

impl Factorization {
    /// Assembles `A` and all `F_q`. Only the known coefficient of `field` is
    /// read; the targeted one may hold anything.
    pub fn new(target: Coefficient, field: &OpticalField, mesh: &Mesh, angular: &AngularGrid) -> Result<Self> {
        if field.len() != mesh.n_cells() {
            return Err(Error::DimensionMismatch {
                context: "factorization medium",
                expected: mesh.n_cells(),
                actual: field.len(),
            });
        }
        let green = assemble_green_boundary(GreenVariant::for_target(target), field, mesh, angular);
        let a = assemble_a(&green, mesh, angular)?;
        let sources = par::try_map_indices(mesh.n_sources(), |q| assemble_f(mesh, angular, q))?;
        let known = match target {
            Coefficient::Absorption => field.sigma_s.clone(),
            Coefficient::Scattering => field.sigma_a.clone(),
        };
        Ok(Self {
            mesh: mesh.clone(),
            angular: angular.clone(),
            target,
            known,
            a,
            sources,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.mesh.n_cells()
    }

    /// Length of phase-space vectors, `NΩ·NS`.
    pub fn dim(&self) -> usize {
        self.mesh.n_cells() * self.angular.ns
    }

    pub fn streaming(&self) -> StreamingOperator<'_> {
        match self.target {
            Coefficient::Absorption => StreamingOperator::free(&self.mesh, &self.angular),
            Coefficient::Scattering => StreamingOperator::attenuated(&self.mesh, &self.angular, &self.known),
        }
    }

    /// Full medium for a given value of the unknown coefficient.
    pub fn medium(&self, sigma_x: &[f64]) -> OpticalField {
        match self.target {
            Coefficient::Absorption => OpticalField {
                sigma_a: sigma_x.to_vec(),
                sigma_s: self.known.clone(),
            },
            Coefficient::Scattering => OpticalField {
                sigma_a: self.known.clone(),
                sigma_s: sigma_x.to_vec(),
            },
        }
    }

    fn check_unknown(&self, sigma_x: &[f64]) {
        assert_eq!(sigma_x.len(), self.n_cells(), "unknown coefficient length");
    }

    /// `D z`: the derivative of `M(Σx) z` with respect to `Σx`, cell by cell.
    pub fn sensitivity(&self, z: &[f64]) -> Vec<f64> {
        match self.target {
            Coefficient::Absorption => z.iter().map(|x| -x).collect(),
            Coefficient::Scattering => {
                let mut kz = vec![0.0; z.len()];
                apply_scatter(&self.angular, z, self.n_cells(), &mut kz);
                kz.iter_mut().zip(z).for_each(|(k, x)| *k -= x);
                kz
            }
        }
    }

    /// `M₀ z`: the part of `M(Σx) z` that does not involve the unknown.
    pub fn base_part(&self, z: &[f64]) -> Vec<f64> {
        let n = self.n_cells();
        match self.target {
            Coefficient::Absorption => {
                let mut kz = vec![0.0; z.len()];
                apply_scatter(&self.angular, z, n, &mut kz);
                for (i, (k, x)) in kz.iter_mut().zip(z).enumerate() {
                    *k = self.known[i % n] * (*k - x);
                }
                kz
            }
            Coefficient::Scattering => vec![0.0; z.len()],
        }
    }

    /// `M(Σx) z = M₀ z + Σx ⊙ D z`.
    pub fn apply_m(&self, sigma_x: &[f64], z: &[f64]) -> Vec<f64> {
        self.check_unknown(sigma_x);
        let n = self.n_cells();
        let mut out = self.base_part(z);
        let dz = self.sensitivity(z);
        for (i, (o, d)) in out.iter_mut().zip(&dz).enumerate() {
            *o += sigma_x[i % n] * d;
        }
        out
    }

    /// `B(Σx) w`.
    pub fn apply_b(&self, sigma_x: &[f64], w: &[f64]) -> PhaseField {
        let z = self.streaming().solve(w);
        PhaseField {
            values: self.apply_m(sigma_x, &z),
            n_cells: self.n_cells(),
        }
    }

    /// `B(Σx)ᵗ w = T⁻ᵗ M(Σx)ᵗ w`.
    pub fn apply_b_transpose(&self, sigma_x: &[f64], w: &[f64]) -> PhaseField {
        self.check_unknown(sigma_x);
        let n = self.n_cells();
        let sigma_s: &[f64] = match self.target {
            Coefficient::Absorption => &self.known,
            Coefficient::Scattering => sigma_x,
        };
        let total_loss: Vec<f64> = match self.target {
            Coefficient::Absorption => sigma_x.iter().zip(&self.known).map(|(a, s)| a + s).collect(),
            Coefficient::Scattering => sigma_x.to_vec(),
        };
        let weighted: Vec<f64> = w.iter().enumerate().map(|(i, x)| sigma_s[i % n] * x).collect();
        let mut mt = vec![0.0; w.len()];
        apply_scatter_transpose(&self.angular, &weighted, n, &mut mt);
        for (i, (o, x)) in mt.iter_mut().zip(w).enumerate() {
            *o -= total_loss[i % n] * x;
        }
        self.streaming().solve_transpose(&mt)
    }

    /// `∂B/∂Σx_j · w`; nonzero only on the angular fiber of cell `j`.
    pub fn apply_db(&self, j: usize, w: &[f64]) -> Result<PhaseField> {
        let n = self.n_cells();
        if j >= n {
            return Err(Error::invalid(format!("cell index {j} out of range ({n} cells)")));
        }
        let z = self.streaming().solve(w);
        let dz = self.sensitivity(&z);
        let mut out = PhaseField::zeros(n, self.angular.ns);
        for l in 0..self.angular.ns {
            out[l * n + j] = dz[l * n + j];
        }
        Ok(out)
    }

    /// Dense `B(Σx)` for oracle checks; limited to `NΩ·NS ≤ 4096`.
    pub fn dense_b(&self, sigma_x: &[f64]) -> Result<DMatrix<f64>> {
        let dim = self.dim();
        if dim > 4096 {
            return Err(Error::invalid(format!("refusing to materialize B of size {dim}")));
        }
        let cols = par::map_indices(dim, |c| {
            let mut e = vec![0.0; dim];
            e[c] = 1.0;
            self.apply_b(sigma_x, &e).values
        });
        Ok(DMatrix::from_fn(dim, dim, |r, c| cols[c][r]))
    }

    /// Solves `(I - B) U = -F_q` directly (dense LU), for small grids.
    pub fn solve_state_direct(&self, sigma_x: &[f64], q: usize) -> Result<PhaseField> {
        let dim = self.dim();
        if dim > 4096 {
            return Err(Error::invalid(format!(
                "direct state solve limited to 4096 unknowns, got {dim}"
            )));
        }
        let f = self
            .sources
            .get(q)
            .ok_or_else(|| Error::invalid(format!("source index {q} out of range")))?;
        let b = self.dense_b(sigma_x)?;
        let system = DMatrix::identity(dim, dim) - b;
        let rhs = DVector::from_iterator(dim, f.iter().map(|x| -x));
        let sol = system
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("I - B is singular".into()))?;
        Ok(PhaseField {
            values: sol.as_slice().to_vec(),
            n_cells: self.n_cells(),
        })
    }

    /// `J = A U`.
    pub fn predict_data(&self, u: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(u);
        (&self.a * v).as_slice().to_vec()
    }
}

/// `B w` for absorption reconstruction with the medium `sigma`.
pub fn apply_b_absorption(sigma: &OpticalField, mesh: &Mesh, angular: &AngularGrid, w: &[f64]) -> Result<PhaseField> {
    let fact = state_only(Coefficient::Absorption, sigma, mesh, angular);
    Ok(fact.apply_b(&sigma.sigma_a, w))
}

/// `B w` for scattering reconstruction with the medium `sigma`.
pub fn apply_b_scattering(sigma: &OpticalField, mesh: &Mesh, angular: &AngularGrid, w: &[f64]) -> Result<PhaseField> {
    let fact = state_only(Coefficient::Scattering, sigma, mesh, angular);
    Ok(fact.apply_b(&sigma.sigma_s, w))
}

// A factorization without A, for operations that only touch the state equation.
fn state_only(target: Coefficient, field: &OpticalField, mesh: &Mesh, angular: &AngularGrid) -> Factorization {
    Factorization {
        mesh: mesh.clone(),
        angular: angular.clone(),
        target,
        known: match target {
            Coefficient::Absorption => field.sigma_s.clone(),
            Coefficient::Scattering => field.sigma_a.clone(),
        },
        a: DMatrix::zeros(0, 0),
        sources: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_angular, build_mesh, Rect};
    use crate::medium::{phantoms, rasterize_phantom};
    use crate::transport::{dot, measure_current, solve_forward, ForwardOptions};

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn a_columns_match_explicit_loop() {
        let mesh = build_mesh(3, 3, Rect::square(1.5), 6, 2).unwrap();
        let ang = build_angular(4, 0.3).unwrap();
        let field = OpticalField::uniform(9, 0.2, 1.0);
        let green = assemble_green_boundary(GreenVariant::Attenuated, &field, &mesh, &ang);
        let a = assemble_a(&green, &mesh, &ang).unwrap();
        assert_eq!((a.nrows(), a.ncols()), (6, 36));
        for l in 0..4 {
            for m in 0..9 {
                let i = l * 9 + m;
                for d in 0..6 {
                    let expect = ang.weights[l] * mesh.cell_volumes[m] * green.gb[(d, i)];
                    assert_eq!(a[(d, i)], expect);
                }
            }
        }
        assert!(a.rank(1e-12) <= 6);
    }

    #[test]
    fn assemble_a_rejects_mismatched_grids() {
        let mesh = build_mesh(3, 3, Rect::square(1.5), 6, 2).unwrap();
        let ang = build_angular(4, 0.0).unwrap();
        let other = build_angular(6, 0.0).unwrap();
        let field = OpticalField::uniform(9, 0.2, 1.0);
        let green = assemble_green_boundary(GreenVariant::Free, &field, &mesh, &ang);
        assert!(assemble_a(&green, &mesh, &other).is_err());
    }

    #[test]
    fn a_independent_of_unknowns() {
        let mesh = build_mesh(5, 5, Rect::square(2.0), 10, 2).unwrap();
        let ang = build_angular(8, 0.0).unwrap();
        let f1 = OpticalField::uniform(25, 0.1, 8.0);
        let mut f2 = f1.clone();
        f2.sigma_a[7] = 0.9;
        let a1 = Factorization::new(Coefficient::Absorption, &f1, &mesh, &ang).unwrap();
        let a2 = Factorization::new(Coefficient::Absorption, &f2, &mesh, &ang).unwrap();
        assert_eq!(a1.a, a2.a);
        let mut f3 = f1.clone();
        f3.sigma_s[3] = 2.0;
        let s1 = Factorization::new(Coefficient::Scattering, &f1, &mesh, &ang).unwrap();
        let s3 = Factorization::new(Coefficient::Scattering, &f3, &mesh, &ang).unwrap();
        assert_eq!(s1.a, s3.a);
    }

    #[test]
    fn f_vector_sign_and_support() {
        let mesh = build_mesh(2, 2, Rect::square(2.0), 4, 4).unwrap();
        let ang = build_angular(4, 0.0).unwrap();
        // source 3 covers the left edge of [0,2]² (arc [6, 8)).
        let f = assemble_f(&mesh, &ang, 3).unwrap();
        let n = mesh.n_cells();
        for (l, v) in ang.directions.iter().enumerate() {
            for m in 0..n {
                let (i, _) = mesh.cell_ij(m);
                let x = f[l * n + m];
                if i == 0 && v[0] > 0.0 {
                    // v·ñ f with ñ = (-1, 0), unit face on a unit cell
                    assert!((x - (-v[0])).abs() < 1e-15);
                } else {
                    assert_eq!(x, 0.0);
                }
            }
        }
        let mut zero = mesh.clone();
        zero.sources[3].intensity = 0.0;
        assert!(assemble_f(&zero, &ang, 3).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn f_entry_for_axis_direction() {
        // Unit cells, left-edge cell, direction forced to +x, so inflow
        // scaling is exactly one.
        let mesh = build_mesh(2, 2, Rect::square(2.0), 4, 4).unwrap();
        let mut ang = build_angular(4, 0.0).unwrap();
        ang.directions[0] = [1.0, 0.0];
        let f = assemble_f(&mesh, &ang, 3).unwrap();
        assert_eq!(f[0], -1.0);
    }

    #[test]
    fn b_vanishes_for_void_medium() {
        let mesh = build_mesh(4, 4, Rect::square(1.0), 8, 2).unwrap();
        let ang = build_angular(8, 0.0).unwrap();
        let void = OpticalField::uniform(16, 0.0, 0.0);
        let w: Vec<f64> = (0..128).map(|i| (i as f64).sin()).collect();
        assert!(apply_b_absorption(&void, &mesh, &ang, &w)
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        assert!(apply_b_scattering(&void, &mesh, &ang, &w)
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        let zero = apply_b_absorption(&OpticalField::uniform(16, 0.1, 1.0), &mesh, &ang, &vec![0.0; 128]).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn b_scattering_is_linear_in_sigma_s() {
        let mesh = build_mesh(4, 4, Rect::square(1.0), 8, 2).unwrap();
        let ang = build_angular(8, 0.5).unwrap();
        let f1 = OpticalField::uniform(16, 0.3, 1.7);
        let f2 = OpticalField::uniform(16, 0.3, 3.4);
        let w: Vec<f64> = (0..128).map(|i| (i as f64 * 0.7).cos()).collect();
        let b1 = apply_b_scattering(&f1, &mesh, &ang, &w).unwrap();
        let b2 = apply_b_scattering(&f2, &mesh, &ang, &w).unwrap();
        for (x, y) in b1.iter().zip(b2.iter()) {
            assert!((2.0 * x - y).abs() < 1e-14 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn fixed_point_identity_small() {
        let mesh = build_mesh(6, 6, Rect::square(2.0), 12, 4).unwrap();
        let ang = build_angular(8, 0.3).unwrap();
        let field = rasterize_phantom(&phantoms::scattering_disk(), &mesh);
        let opts = ForwardOptions::default();
        for target in [Coefficient::Absorption, Coefficient::Scattering] {
            let fact = Factorization::new(target, &field, &mesh, &ang).unwrap();
            let sigma_x = field.coefficient(target).to_vec();
            for q in 0..mesh.n_sources() {
                let sol = solve_forward(&field, &ang, &mesh, q, &opts).unwrap();
                let u = intermediate_from_forward(&sol.u, &field, &mesh, &ang, target, q).unwrap();
                let bu = fact.apply_b(&sigma_x, &u);
                let lhs: Vec<f64> = bu.iter().zip(fact.sources[q].iter()).map(|(b, f)| b - f).collect();
                assert!(rel(&lhs, &u) < 1e-10, "{target:?} q={q}");
                let j_direct = measure_current(&sol.u, &mesh, &ang);
                assert!(rel(&fact.predict_data(&u), &j_direct) < 1e-10);
            }
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        let mesh = build_mesh(5, 4, Rect::new(0.0, 0.0, 1.0, 0.8), 8, 2).unwrap();
        let ang = build_angular(8, 0.4).unwrap();
        let field = OpticalField::uniform(20, 0.2, 3.0);
        let mut seed = 7;
        let sigma_x: Vec<f64> = (0..20).map(|_| 1.0 + lcg(&mut seed).abs()).collect();
        for target in [Coefficient::Absorption, Coefficient::Scattering] {
            let fact = state_only(target, &field, &mesh, &ang);
            let w: Vec<f64> = (0..160).map(|_| lcg(&mut seed)).collect();
            let z: Vec<f64> = (0..160).map(|_| lcg(&mut seed)).collect();
            let lhs = dot(&fact.apply_b(&sigma_x, &w), &z);
            let rhs = dot(&w, &fact.apply_b_transpose(&sigma_x, &z));
            assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0), "{target:?}");
        }
    }

    #[test]
    fn db_support_and_sum() {
        let mesh = build_mesh(4, 4, Rect::square(1.0), 8, 2).unwrap();
        let ang = build_angular(8, 0.5).unwrap();
        let field = OpticalField::uniform(16, 0.3, 1.0);
        let fact = state_only(Coefficient::Scattering, &field, &mesh, &ang);
        let w: Vec<f64> = (0..128).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut total = vec![0.0; 128];
        for j in 0..16 {
            let d = fact.apply_db(j, &w).unwrap();
            for (i, x) in d.iter().enumerate() {
                if i % 16 != j {
                    assert_eq!(*x, 0.0);
                }
                total[i] += x;
            }
        }
        let ones = apply_b_scattering(&OpticalField::uniform(16, 0.3, 1.0), &mesh, &ang, &w).unwrap();
        assert!(rel(&total, &ones) < 1e-14);
        assert!(fact.apply_db(16, &w).is_err());
    }

    #[test]
    fn db_matches_finite_difference() {
        let mesh = build_mesh(4, 4, Rect::square(1.0), 8, 2).unwrap();
        let ang = build_angular(8, 0.2).unwrap();
        let field = OpticalField::uniform(16, 0.3, 2.0);
        let w: Vec<f64> = (0..128).map(|i| (i as f64 * 0.9).cos()).collect();
        for target in [Coefficient::Absorption, Coefficient::Scattering] {
            let fact = state_only(target, &field, &mesh, &ang);
            let base = field.coefficient(target).to_vec();
            for j in [0, 5, 15] {
                let eps = 1e-6;
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[j] += eps;
                minus[j] -= eps;
                let bp = fact.apply_b(&plus, &w);
                let bm = fact.apply_b(&minus, &w);
                let fd: Vec<f64> = bp.iter().zip(bm.iter()).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
                let an = fact.apply_db(j, &w).unwrap();
                let err = fd.iter().zip(an.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err < 1e-7, "{target:?} j={j} err={err}");
            }
        }
    }

    #[test]
    fn direct_state_solve_reproduces_forward_data() {
        let mesh = build_mesh(4, 4, Rect::square(2.0), 8, 4).unwrap();
        let ang = build_angular(8, 0.0).unwrap();
        let field = rasterize_phantom(&phantoms::absorbing_disk(), &mesh);
        let fact = Factorization::new(Coefficient::Absorption, &field, &mesh, &ang).unwrap();
        let sol = solve_forward(&field, &ang, &mesh, 2, &ForwardOptions::default()).unwrap();
        let u = fact.solve_state_direct(&field.sigma_a, 2).unwrap();
        let j = fact.predict_data(&u);
        assert!(rel(&j, &measure_current(&sol.u, &mesh, &ang)) < 1e-10);
    }
}
