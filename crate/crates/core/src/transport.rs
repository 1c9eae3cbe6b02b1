//! First-order upwind finite-volume discrete-ordinates transport.
//!
//! Phase-space vectors are flattened direction-major: entry `l * n_cells + m`
//! holds the value at cell `m` for direction `l`. For each direction the
//! streaming operator
//!
//! ```text
//! (T u)_m = (|vx|/hx)(u_m - u_up_x) + (|vy|/hy)(u_m - u_up_y) + a_m u_m
//! ```
//!
//! (with zero values outside the domain) is lower triangular in the sweep
//! ordering of that direction, so `T⁻¹` is a single sweep and `T⁻ᵗ` is a sweep
//! along the reversed direction. The boundary Green matrix and the volume
//! Green action are defined as exact adjoints/inverses of this discrete
//! operator, which makes the factorized data model reproduce the forward
//! solver to rounding error.

use std::ops::{Deref, DerefMut};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::{AngularGrid, Mesh};
use crate::medium::{Coefficient, OpticalField};
use crate::par;

/// Values over `(direction, cell)` pairs in direction-major layout.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseField {
    pub values: Vec<f64>,
    pub n_cells: usize,
}

impl PhaseField {
    pub fn zeros(n_cells: usize, n_dirs: usize) -> Self {
        Self {
            values: vec![0.0; n_cells * n_dirs],
            n_cells,
        }
    }

    pub fn from_vec(values: Vec<f64>, n_cells: usize) -> Result<Self> {
        if n_cells == 0 || !values.len().is_multiple_of(n_cells) {
            return Err(Error::invalid(format!(
                "phase field of length {} is not a multiple of {n_cells} cells",
                values.len()
            )));
        }
        Ok(Self { values, n_cells })
    }

    #[inline]
    pub fn index(&self, l: usize, m: usize) -> usize {
        l * self.n_cells + m
    }

    pub fn n_dirs(&self) -> usize {
        self.values.len() / self.n_cells
    }

    pub fn direction(&self, l: usize) -> &[f64] {
        &self.values[l * self.n_cells..(l + 1) * self.n_cells]
    }

    pub fn norm(&self) -> f64 {
        norm2(&self.values)
    }
}

impl Deref for PhaseField {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.values
    }
}

impl DerefMut for PhaseField {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Which streaming operator a Green function inverts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GreenVariant {
    /// `v·∇` alone; used when the absorption is unknown.
    Free,
    /// `v·∇ + σa`; used when the scattering is unknown and σa is known.
    Attenuated,
}

impl GreenVariant {
    pub fn for_target(target: Coefficient) -> Self {
        match target {
            Coefficient::Absorption => GreenVariant::Free,
            Coefficient::Scattering => GreenVariant::Attenuated,
        }
    }
}

/// Direction-blocked upwind streaming operator with a per-cell attenuation.
#[derive(Clone, Debug)]
pub struct StreamingOperator<'a> {
    mesh: &'a Mesh,
    angular: &'a AngularGrid,
    attenuation: Vec<f64>,
}

impl<'a> StreamingOperator<'a> {
    pub fn free(mesh: &'a Mesh, angular: &'a AngularGrid) -> Self {
        Self {
            mesh,
            angular,
            attenuation: vec![0.0; mesh.n_cells()],
        }
    }

    pub fn attenuated(mesh: &'a Mesh, angular: &'a AngularGrid, attenuation: &[f64]) -> Self {
        assert_eq!(attenuation.len(), mesh.n_cells(), "attenuation length");
        Self {
            mesh,
            angular,
            attenuation: attenuation.to_vec(),
        }
    }

    /// The operator a Green variant inverts, given the current medium.
    pub fn for_variant(variant: GreenVariant, mesh: &'a Mesh, angular: &'a AngularGrid, field: &OpticalField) -> Self {
        match variant {
            GreenVariant::Free => Self::free(mesh, angular),
            GreenVariant::Attenuated => Self::attenuated(mesh, angular, &field.sigma_a),
        }
    }

    pub fn mesh(&self) -> &Mesh {
        self.mesh
    }

    pub fn angular(&self) -> &AngularGrid {
        self.angular
    }

    pub fn len(&self) -> usize {
        self.mesh.n_cells() * self.angular.ns
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    fn coefficients(&self, l: usize) -> (f64, f64, bool, bool) {
        let v = self.angular.directions[l];
        (
            v[0].abs() / self.mesh.hx,
            v[1].abs() / self.mesh.hy,
            v[0] >= 0.0,
            v[1] >= 0.0,
        )
    }

    /// `out = T_l⁻¹ rhs` for one direction block.
    pub fn solve_direction(&self, l: usize, rhs: &[f64], out: &mut [f64]) {
        let (ax, ay, xp, yp) = self.coefficients(l);
        sweep(self.mesh.nx, self.mesh.ny, ax, ay, xp, yp, &self.attenuation, rhs, out);
    }

    /// `out = T_l⁻ᵗ rhs`: a sweep along `-v_l`.
    pub fn solve_direction_transpose(&self, l: usize, rhs: &[f64], out: &mut [f64]) {
        let (ax, ay, xp, yp) = self.coefficients(l);
        sweep(
            self.mesh.nx,
            self.mesh.ny,
            ax,
            ay,
            !xp,
            !yp,
            &self.attenuation,
            rhs,
            out,
        );
    }

    pub fn solve(&self, rhs: &[f64]) -> PhaseField {
        self.solve_impl(rhs, false)
    }

    pub fn solve_transpose(&self, rhs: &[f64]) -> PhaseField {
        self.solve_impl(rhs, true)
    }

    fn solve_impl(&self, rhs: &[f64], transpose: bool) -> PhaseField {
        let n = self.mesh.n_cells();
        assert_eq!(rhs.len(), self.len(), "phase field length");
        let mut out = PhaseField::zeros(n, self.angular.ns);
        par::for_each_chunk_mut(&mut out.values, n, |l, chunk| {
            let r = &rhs[l * n..(l + 1) * n];
            if transpose {
                self.solve_direction_transpose(l, r, chunk);
            } else {
                self.solve_direction(l, r, chunk);
            }
        });
        out
    }

    /// `T u` with zero inflow.
    pub fn apply(&self, u: &[f64]) -> PhaseField {
        let (nx, ny, n) = (self.mesh.nx, self.mesh.ny, self.mesh.n_cells());
        assert_eq!(u.len(), self.len(), "phase field length");
        let mut out = PhaseField::zeros(n, self.angular.ns);
        par::for_each_chunk_mut(&mut out.values, n, |l, chunk| {
            let (ax, ay, xp, yp) = self.coefficients(l);
            let ul = &u[l * n..(l + 1) * n];
            for j in 0..ny {
                for i in 0..nx {
                    let m = j * nx + i;
                    let mut s = (ax + ay + self.attenuation[m]) * ul[m];
                    let up_x = if xp {
                        (i > 0).then(|| m - 1)
                    } else {
                        (i + 1 < nx).then(|| m + 1)
                    };
                    let up_y = if yp {
                        (j > 0).then(|| m - nx)
                    } else {
                        (j + 1 < ny).then(|| m + nx)
                    };
                    if let Some(k) = up_x {
                        s -= ax * ul[k];
                    }
                    if let Some(k) = up_y {
                        s -= ay * ul[k];
                    }
                    chunk[m] = s;
                }
            }
        });
        out
    }

    /// Dense `T⁻¹`, column by column. Intended for oracle checks on tiny grids.
    pub fn materialize_inverse(&self) -> Result<DMatrix<f64>> {
        let n = self.len();
        if n > 4096 {
            return Err(Error::invalid(format!(
                "refusing to materialize a {n}x{n} Green matrix"
            )));
        }
        let mut dense = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for c in 0..n {
            e[c] = 1.0;
            let col = self.solve(&e);
            dense.column_mut(c).copy_from_slice(&col);
            e[c] = 0.0;
        }
        Ok(dense)
    }
}

#[allow(clippy::too_many_arguments)]
fn sweep(nx: usize, ny: usize, ax: f64, ay: f64, x_pos: bool, y_pos: bool, att: &[f64], rhs: &[f64], out: &mut [f64]) {
    for jj in 0..ny {
        let j = if y_pos { jj } else { ny - 1 - jj };
        let row = j * nx;
        for ii in 0..nx {
            let i = if x_pos { ii } else { nx - 1 - ii };
            let m = row + i;
            let mut s = rhs[m];
            if ii > 0 {
                s += ax * out[if x_pos { m - 1 } else { m + 1 }];
            }
            if jj > 0 {
                s += ay * out[if y_pos { m - nx } else { m + nx }];
            }
            out[m] = s / (ax + ay + att[m]);
        }
    }
}

/// `out = (η k ⊗ I) u`, i.e. `out_l(m) = Σ_l' η_l' k_ll' u_l'(m)`.
pub fn apply_scatter(angular: &AngularGrid, u: &[f64], n_cells: usize, out: &mut [f64]) {
    let ns = angular.ns;
    if angular.is_isotropic() {
        let mut mean = vec![0.0; n_cells];
        for (lp, &w) in angular.weights.iter().enumerate() {
            for (a, b) in mean.iter_mut().zip(&u[lp * n_cells..(lp + 1) * n_cells]) {
                *a += w * b;
            }
        }
        for l in 0..ns {
            out[l * n_cells..(l + 1) * n_cells].copy_from_slice(&mean);
        }
        return;
    }
    par::for_each_chunk_mut(out, n_cells, |l, chunk| {
        chunk.iter_mut().for_each(|x| *x = 0.0);
        for lp in 0..ns {
            let w = angular.scatter[l * ns + lp];
            for (a, b) in chunk.iter_mut().zip(&u[lp * n_cells..(lp + 1) * n_cells]) {
                *a += w * b;
            }
        }
    });
}

/// `out = (η k ⊗ I)ᵗ u`.
pub fn apply_scatter_transpose(angular: &AngularGrid, u: &[f64], n_cells: usize, out: &mut [f64]) {
    let ns = angular.ns;
    if angular.is_isotropic() {
        let mut sum = vec![0.0; n_cells];
        for lp in 0..ns {
            for (a, b) in sum.iter_mut().zip(&u[lp * n_cells..(lp + 1) * n_cells]) {
                *a += b;
            }
        }
        for l in 0..ns {
            let w = angular.weights[l];
            for (o, s) in out[l * n_cells..(l + 1) * n_cells].iter_mut().zip(&sum) {
                *o = w * s;
            }
        }
        return;
    }
    par::for_each_chunk_mut(out, n_cells, |l, chunk| {
        chunk.iter_mut().for_each(|x| *x = 0.0);
        for lp in 0..ns {
            let w = angular.scatter[lp * ns + l];
            for (a, b) in chunk.iter_mut().zip(&u[lp * n_cells..(lp + 1) * n_cells]) {
                *a += w * b;
            }
        }
    });
}

/// Volumetric equivalent `g` of the inflow boundary condition for source `q`:
/// `g_l(m) = Σ_faces (-v_l·n) |face| f / ζ_m` over inflow faces of cell `m`.
/// The forward problem reads `T u = σs K u + g` with zero inflow.
pub fn boundary_source(mesh: &Mesh, angular: &AngularGrid, q: usize) -> Result<PhaseField> {
    let src = mesh
        .sources
        .get(q)
        .ok_or_else(|| Error::invalid(format!("source index {q} out of range ({} sources)", mesh.n_sources())))?;
    let n = mesh.n_cells();
    let mut g = PhaseField::zeros(n, angular.ns);
    for &f in &src.faces {
        let face = &mesh.boundary_faces[f];
        for (l, v) in angular.directions.iter().enumerate() {
            let vn = v[0] * face.normal[0] + v[1] * face.normal[1];
            if vn < 0.0 {
                let idx = g.index(l, face.cell);
                g.values[idx] += -vn * face.length / mesh.cell_volumes[face.cell] * src.intensity;
            }
        }
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    /// Stop when `‖u_{k+1} - u_k‖ / ‖u_{k+1}‖` drops below this.
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_sweeps: 5000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardSolution {
    pub u: PhaseField,
    pub sweeps: usize,
    pub last_update: f64,
}

/// Solves `v·∇u + σ u = σs Σ η k u` with inflow `f_q` by source iteration.
pub fn solve_forward(
    field: &OpticalField,
    angular: &AngularGrid,
    mesh: &Mesh,
    source: usize,
    opts: &ForwardOptions,
) -> Result<ForwardSolution> {
    let g = boundary_source(mesh, angular, source)?;
    solve_with_volume_source(field, angular, mesh, &g, opts)
}

/// Source iteration for `(T_σ - σs K) u = rhs` with zero inflow.
pub fn solve_with_volume_source(
    field: &OpticalField,
    angular: &AngularGrid,
    mesh: &Mesh,
    rhs: &[f64],
    opts: &ForwardOptions,
) -> Result<ForwardSolution> {
    let n = mesh.n_cells();
    if field.len() != n {
        return Err(Error::DimensionMismatch {
            context: "forward solve",
            expected: n,
            actual: field.len(),
        });
    }
    let total = field.total();
    let op = StreamingOperator::attenuated(mesh, angular, &total);
    let mut u = op.solve(rhs);
    let mut scattered = vec![0.0; u.len()];
    let mut last = f64::INFINITY;
    if u.norm() == 0.0 {
        return Ok(ForwardSolution {
            u,
            sweeps: 1,
            last_update: 0.0,
        });
    }
    for sweeps in 2..=opts.max_sweeps.max(1) {
        apply_scatter(angular, &u, n, &mut scattered);
        for (l, chunk) in scattered.chunks_mut(n).enumerate() {
            for ((s, sig), r) in chunk.iter_mut().zip(&field.sigma_s).zip(&rhs[l * n..(l + 1) * n]) {
                *s = sig * *s + r;
            }
        }
        let next = op.solve(&scattered);
        let diff: f64 = next
            .iter()
            .zip(u.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale = next.norm();
        u = next;
        last = if scale > 0.0 { diff / scale } else { 0.0 };
        if last < opts.tolerance {
            log::debug!("source iteration converged in {sweeps} sweeps");
            return Ok(ForwardSolution {
                u,
                sweeps,
                last_update: last,
            });
        }
    }
    Err(Error::IterationLimit {
        sweeps: opts.max_sweeps,
        residual: last,
    })
}

/// Outgoing current `J_d = Σ_{v·n>0} η (v·n) u` at every detector, using the
/// value of the boundary cell owning the detector's face.
pub fn measure_current(u: &[f64], mesh: &Mesh, angular: &AngularGrid) -> Vec<f64> {
    let n = mesh.n_cells();
    mesh.detectors
        .iter()
        .map(|det| {
            let face = &mesh.boundary_faces[det.face];
            angular
                .directions
                .iter()
                .enumerate()
                .map(|(l, v)| {
                    let vn = v[0] * face.normal[0] + v[1] * face.normal[1];
                    if vn > 0.0 {
                        angular.weights[l] * vn * u[l * n + face.cell]
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect()
}

/// Boundary Green matrix for one variant. `gb[(d, l*n + m)]` is the adjoint
/// solution for detector `d` divided by the quadrature weights `η_l ζ_m`.
#[derive(Clone, Debug)]
pub struct GreenSet {
    pub variant: GreenVariant,
    pub gb: DMatrix<f64>,
}

/// Builds `G_b` with one adjoint sweep per (detector, outgoing direction).
///
/// For detector `d` on face `f` of cell `c`, the data functional is
/// `J_d = Σ_l η_l (v_l·n)⁺ u_l(c)`; its representer under the discrete adjoint
/// is `T⁻ᵗ` applied to that functional, which equals row `d` of `A`.
pub fn assemble_green_boundary(
    variant: GreenVariant,
    field: &OpticalField,
    mesh: &Mesh,
    angular: &AngularGrid,
) -> GreenSet {
    let op = StreamingOperator::for_variant(variant, mesh, angular, field);
    let n = mesh.n_cells();
    let ns = angular.ns;
    let rows: Vec<Vec<f64>> = par::map_indices(mesh.n_detectors(), |d| {
        let face = &mesh.boundary_faces[mesh.detectors[d].face];
        let mut row = vec![0.0; n * ns];
        let mut rhs = vec![0.0; n];
        for (l, v) in angular.directions.iter().enumerate() {
            let vn = v[0] * face.normal[0] + v[1] * face.normal[1];
            if vn <= 0.0 {
                continue;
            }
            rhs[face.cell] = angular.weights[l] * vn;
            let block = &mut row[l * n..(l + 1) * n];
            op.solve_direction_transpose(l, &rhs, block);
            let eta = angular.weights[l];
            for (x, zeta) in block.iter_mut().zip(&mesh.cell_volumes) {
                *x /= eta * zeta;
            }
        }
        row
    });
    let gb = DMatrix::from_fn(rows.len(), n * ns, |d, i| rows[d][i]);
    GreenSet { variant, gb }
}

/// `G_v(H⊗S) w = T⁻¹ w` (or `T⁻ᵗ w` when `transpose`), by one sweep per
/// direction; the dense matrix is never formed.
pub fn apply_green_volume(
    variant: GreenVariant,
    field: &OpticalField,
    mesh: &Mesh,
    angular: &AngularGrid,
    w: &[f64],
    transpose: bool,
) -> PhaseField {
    let op = StreamingOperator::for_variant(variant, mesh, angular, field);
    if transpose {
        op.solve_transpose(w)
    } else {
        op.solve(w)
    }
}
