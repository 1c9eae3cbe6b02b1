//! Phase-space discretization: a uniform rectangular finite-volume mesh with
//! boundary detectors and source segments, and an equispaced discrete-ordinates
//! direction set on the unit circle with a Henyey-Greenstein kernel.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Axis-aligned rectangle `[x_min, x_max] × [y_min, y_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// The square `[0, side]²`.
    pub fn square(side: f64) -> Self {
        Self::new(0.0, 0.0, side, side)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn perimeter(&self) -> f64 {
        2.0 * (self.width() + self.height())
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }

    /// Euclidean distance from `p` to the rectangle's boundary curve.
    pub fn distance_to_boundary(&self, p: Point) -> f64 {
        if self.contains(p) {
            let dx = (p[0] - self.x_min).min(self.x_max - p[0]);
            let dy = (p[1] - self.y_min).min(self.y_max - p[1]);
            dx.min(dy)
        } else {
            let cx = p[0].clamp(self.x_min, self.x_max);
            let cy = p[1].clamp(self.y_min, self.y_max);
            ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()
        }
    }

    /// Point at arc length `s` along the boundary, counter-clockwise from the
    /// lower-left corner. `s` is taken modulo the perimeter.
    pub fn point_at_arc(&self, s: f64) -> Point {
        let (w, h) = (self.width(), self.height());
        let s = s.rem_euclid(self.perimeter());
        if s < w {
            [self.x_min + s, self.y_min]
        } else if s < w + h {
            [self.x_max, self.y_min + (s - w)]
        } else if s < 2.0 * w + h {
            [self.x_max - (s - w - h), self.y_max]
        } else {
            [self.x_min, self.y_max - (s - 2.0 * w - h)]
        }
    }
}

/// One cell face lying on `∂Ω`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryFace {
    pub cell: usize,
    pub normal: Point,
    pub length: f64,
    /// Arc-length interval `[arc_start, arc_start + length)` covered on `∂Ω`.
    pub arc_start: f64,
    pub midpoint: Point,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub position: Point,
    pub arc: f64,
    /// Index into [`Mesh::boundary_faces`] of the face containing the detector.
    pub face: usize,
}

/// Boundary support of one illumination: a set of faces carrying a constant
/// isotropic intensity.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceSupport {
    pub faces: Vec<usize>,
    pub intensity: f64,
}

/// Uniform cell-centered finite-volume mesh on a rectangle.
///
/// Cells are numbered row-major, `m = j * nx + i`, with `i` along x.
/// Boundary faces are listed counter-clockwise starting at the lower-left corner.
#[derive(Clone, Debug)]
pub struct Mesh {
    pub nx: usize,
    pub ny: usize,
    pub domain: Rect,
    pub hx: f64,
    pub hy: f64,
    pub cell_centers: Vec<Point>,
    pub cell_volumes: Vec<f64>,
    pub boundary_faces: Vec<BoundaryFace>,
    pub detectors: Vec<Detector>,
    pub sources: Vec<SourceSupport>,
}

impl Mesh {
    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn n_detectors(&self) -> usize {
        self.detectors.len()
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    #[inline]
    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn cell_ij(&self, m: usize) -> (usize, usize) {
        (m % self.nx, m / self.nx)
    }

    /// Index of the boundary face containing arc position `s` (half-open intervals).
    pub fn face_at_arc(&self, s: f64) -> usize {
        let (w, h) = (self.domain.width(), self.domain.height());
        let s = s.rem_euclid(self.domain.perimeter());
        let (nx, ny) = (self.nx, self.ny);
        let pick = |offset: f64, step: f64, count: usize| -> usize {
            // Nudge so arcs sitting on a face boundary land in the later face.
            (((s - offset) / step + 1e-9).floor().max(0.0) as usize).min(count - 1)
        };
        if s < w {
            pick(0.0, self.hx, nx)
        } else if s < w + h {
            nx + pick(w, self.hy, ny)
        } else if s < 2.0 * w + h {
            nx + ny + pick(w + h, self.hx, nx)
        } else {
            2 * nx + ny + pick(2.0 * w + h, self.hy, ny)
        }
    }

    /// True when `fine` is an integer refinement of `self` on the same domain.
    pub fn refinement_factor(&self, fine: &Mesh) -> Option<usize> {
        if self.domain != fine.domain || !fine.nx.is_multiple_of(self.nx) || !fine.ny.is_multiple_of(self.ny) {
            return None;
        }
        let (fx, fy) = (fine.nx / self.nx, fine.ny / self.ny);
        (fx == fy).then_some(fx)
    }
}

/// Builds a uniform `nx × ny` mesh with `n_detectors` equispaced boundary
/// detectors and `n_sources` contiguous equal-arc unit-intensity sources.
///
/// Detectors sit at arc positions `(d + ½)·P/N_d` counter-clockwise from the
/// lower-left corner, so none falls on a corner. A face belongs to the source
/// segment containing its midpoint.
pub fn build_mesh(nx: usize, ny: usize, domain: Rect, n_detectors: usize, n_sources: usize) -> Result<Mesh> {
    if nx == 0 || ny == 0 {
        return Err(Error::invalid(format!("mesh needs nx, ny >= 1 (got {nx}x{ny})")));
    }
    if n_detectors == 0 || n_sources == 0 {
        return Err(Error::invalid("need at least one detector and one source"));
    }
    if !(domain.width() > 0.0 && domain.height() > 0.0) || !domain.width().is_finite() || !domain.height().is_finite() {
        return Err(Error::invalid(format!(
            "domain must have positive finite extent (got {domain:?})"
        )));
    }

    let hx = domain.width() / nx as f64;
    let hy = domain.height() / ny as f64;
    let mut cell_centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            cell_centers.push([
                domain.x_min + (i as f64 + 0.5) * hx,
                domain.y_min + (j as f64 + 0.5) * hy,
            ]);
        }
    }
    let cell_volumes = vec![hx * hy; nx * ny];

    let (w, h) = (domain.width(), domain.height());
    let mut faces = Vec::with_capacity(2 * (nx + ny));
    for i in 0..nx {
        faces.push(BoundaryFace {
            cell: i,
            normal: [0.0, -1.0],
            length: hx,
            arc_start: i as f64 * hx,
            midpoint: [domain.x_min + (i as f64 + 0.5) * hx, domain.y_min],
        });
    }
    for j in 0..ny {
        faces.push(BoundaryFace {
            cell: j * nx + nx - 1,
            normal: [1.0, 0.0],
            length: hy,
            arc_start: w + j as f64 * hy,
            midpoint: [domain.x_max, domain.y_min + (j as f64 + 0.5) * hy],
        });
    }
    for k in 0..nx {
        let i = nx - 1 - k;
        faces.push(BoundaryFace {
            cell: (ny - 1) * nx + i,
            normal: [0.0, 1.0],
            length: hx,
            arc_start: w + h + k as f64 * hx,
            midpoint: [domain.x_min + (i as f64 + 0.5) * hx, domain.y_max],
        });
    }
    for k in 0..ny {
        let j = ny - 1 - k;
        faces.push(BoundaryFace {
            cell: j * nx,
            normal: [-1.0, 0.0],
            length: hy,
            arc_start: 2.0 * w + h + k as f64 * hy,
            midpoint: [domain.x_min, domain.y_min + (j as f64 + 0.5) * hy],
        });
    }

    let mut mesh = Mesh {
        nx,
        ny,
        domain,
        hx,
        hy,
        cell_centers,
        cell_volumes,
        boundary_faces: faces,
        detectors: Vec::new(),
        sources: Vec::new(),
    };

    let perimeter = domain.perimeter();
    let spacing = perimeter / n_detectors as f64;
    mesh.detectors = (0..n_detectors)
        .map(|d| {
            let arc = (d as f64 + 0.5) * spacing;
            Detector {
                position: domain.point_at_arc(arc),
                arc,
                face: mesh.face_at_arc(arc),
            }
        })
        .collect();

    let segment = perimeter / n_sources as f64;
    let mut sources = vec![
        SourceSupport {
            faces: Vec::new(),
            intensity: 1.0,
        };
        n_sources
    ];
    for (f, face) in mesh.boundary_faces.iter().enumerate() {
        let mid = face.arc_start + 0.5 * face.length;
        let q = ((mid / segment).floor() as usize).min(n_sources - 1);
        sources[q].faces.push(f);
    }
    mesh.sources = sources;
    Ok(mesh)
}

/// Discrete-ordinates direction set with quadrature weights and the
/// row-normalized scattering kernel.
#[derive(Clone, Debug)]
pub struct AngularGrid {
    pub ns: usize,
    pub g: f64,
    pub directions: Vec<Point>,
    pub weights: Vec<f64>,
    /// Row-major `ns × ns` kernel values `k_{ℓℓ'}`.
    pub kernel: Vec<f64>,
    /// Row-major `ns × ns` quadrature-weighted kernel `η_{ℓ'} k_{ℓℓ'}`.
    pub scatter: Vec<f64>,
}

impl AngularGrid {
    #[inline]
    pub fn k(&self, l: usize, lp: usize) -> f64 {
        self.kernel[l * self.ns + lp]
    }

    /// True when every kernel entry is the same, i.e. `g == 0`.
    pub fn is_isotropic(&self) -> bool {
        self.g == 0.0
    }

    /// Angle `θ_ℓ` of direction `l` (zero-based).
    pub fn angle(&self, l: usize) -> f64 {
        2.0 * PI * (l as f64 + 0.5) / self.ns as f64
    }
}

/// Unnormalized Henyey-Greenstein value in two dimensions for `cos_angle = v·v'`.
pub fn henyey_greenstein_2d(g: f64, cos_angle: f64) -> f64 {
    (1.0 - g * g) / (1.0 + g * g - 2.0 * g * cos_angle)
}

/// Builds `ns` midpoint-rule directions `θ_ℓ = 2π(ℓ+½)/ns` with uniform weights.
pub fn build_angular(ns: usize, g: f64) -> Result<AngularGrid> {
    if ns < 4 || !ns.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "direction count must be even and >= 4 (got {ns})"
        )));
    }
    if g.is_nan() || g.abs() >= 1.0 {
        return Err(Error::invalid(format!(
            "anisotropy factor must satisfy |g| < 1 (got {g})"
        )));
    }

    let directions: Vec<Point> = (0..ns)
        .map(|l| {
            let theta = 2.0 * PI * (l as f64 + 0.5) / ns as f64;
            let snap = |c: f64| if c.abs() < 1e-15 { 0.0 } else { c };
            [snap(theta.cos()), snap(theta.sin())]
        })
        .collect();

    // Last weight absorbs rounding so the stored weights sum to exactly one.
    let mut weights = vec![1.0 / ns as f64; ns];
    let head: f64 = weights[..ns - 1].iter().sum();
    weights[ns - 1] = 1.0 - head;

    let mut kernel = vec![0.0; ns * ns];
    for l in 0..ns {
        let row = &mut kernel[l * ns..(l + 1) * ns];
        for (lp, k) in row.iter_mut().enumerate() {
            let c = directions[l][0] * directions[lp][0] + directions[l][1] * directions[lp][1];
            *k = if g == 0.0 { 1.0 } else { henyey_greenstein_2d(g, c) };
        }
        let norm: f64 = row.iter().zip(&weights).map(|(k, w)| k * w).sum();
        row.iter_mut().for_each(|k| *k /= norm);
    }
    let scatter = (0..ns * ns).map(|idx| weights[idx % ns] * kernel[idx]).collect();

    Ok(AngularGrid {
        ns,
        g,
        directions,
        weights,
        kernel,
        scatter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_cells() {
        let mesh = build_mesh(2, 2, Rect::square(2.0), 4, 1).unwrap();
        assert_eq!(mesh.cell_volumes, vec![1.0; 4]);
        assert_eq!(mesh.cell_centers, vec![[0.5, 0.5], [1.5, 0.5], [0.5, 1.5], [1.5, 1.5]]);
    }

    #[test]
    fn detector_spacing_on_fine_mesh() {
        let mesh = build_mesh(40, 40, Rect::square(2.0), 80, 8).unwrap();
        assert_eq!(mesh.detectors.len(), 80);
        for pair in mesh.detectors.windows(2) {
            assert!((pair[1].arc - pair[0].arc - 0.1).abs() < 1e-12);
        }
        for d in &mesh.detectors {
            assert!(mesh.domain.distance_to_boundary(d.position) < 1e-12);
            let face = &mesh.boundary_faces[d.face];
            assert!(d.arc >= face.arc_start - 1e-12 && d.arc < face.arc_start + face.length);
        }
    }

    #[test]
    fn eight_sources_partition_the_boundary() {
        let mesh = build_mesh(40, 40, Rect::square(2.0), 80, 8).unwrap();
        let mut owner = vec![usize::MAX; mesh.boundary_faces.len()];
        for (q, src) in mesh.sources.iter().enumerate() {
            let arc: f64 = src.faces.iter().map(|&f| mesh.boundary_faces[f].length).sum();
            assert!((arc - 1.0).abs() < 1e-12, "source {q} spans {arc}");
            for &f in &src.faces {
                assert_eq!(owner[f], usize::MAX, "face {f} claimed twice");
                owner[f] = q;
            }
        }
        assert!(owner.iter().all(|&o| o != usize::MAX));
    }

    #[test]
    fn face_normals_are_unit_and_volumes_sum() {
        let mesh = build_mesh(7, 5, Rect::new(-1.0, 0.5, 2.0, 3.0), 13, 3).unwrap();
        for f in &mesh.boundary_faces {
            let n = (f.normal[0].powi(2) + f.normal[1].powi(2)).sqrt();
            assert_eq!(n, 1.0);
        }
        let total: f64 = mesh.cell_volumes.iter().sum();
        assert!((total - mesh.domain.area()).abs() <= 1e-12 * mesh.domain.area());
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(build_mesh(0, 4, Rect::square(1.0), 4, 1).is_err());
        assert!(build_mesh(4, 4, Rect::square(1.0), 0, 1).is_err());
        assert!(build_mesh(4, 4, Rect::new(0.0, 0.0, 0.0, 1.0), 4, 1).is_err());
        assert!(build_angular(6, 1.0).is_err());
        assert!(build_angular(5, 0.0).is_err());
        assert!(build_angular(2, 0.0).is_err());
    }

    #[test]
    fn isotropic_kernel_is_one() {
        let ang = build_angular(8, 0.0).unwrap();
        assert!(ang.kernel.iter().all(|&k| k == 1.0));
    }

    #[test]
    fn weights_sum_to_one_exactly() {
        for ns in (4..=128).step_by(2) {
            let ang = build_angular(ns, 0.3).unwrap();
            let s: f64 = ang.weights.iter().sum();
            assert_eq!(s, 1.0, "ns = {ns}");
        }
    }

    #[test]
    fn anisotropic_rows_normalized() {
        let ang = build_angular(16, 0.9).unwrap();
        for l in 0..16 {
            let s: f64 = (0..16).map(|lp| ang.weights[lp] * ang.k(l, lp)).sum();
            assert!((s - 1.0).abs() < 1e-14);
            assert!((0..16).all(|lp| ang.k(l, lp) > 0.0));
        }
    }

    #[test]
    fn forward_backward_ratio_matches_hg() {
        let (ns, g) = (64, 0.5);
        let ang = build_angular(ns, g).unwrap();
        let (l, back) = (0, ns / 2);
        let cos_fwd = 1.0;
        let cos_back = (ang.angle(l) - ang.angle(back)).cos();
        let expected = henyey_greenstein_2d(g, cos_fwd) / henyey_greenstein_2d(g, cos_back);
        let got = ang.k(l, l) / ang.k(l, back);
        assert!((got - expected).abs() < 1e-10 * expected);
        assert!((expected - 9.0).abs() < 1e-10);
    }

    #[test]
    fn kernel_symmetric_and_rotation_invariant() {
        let ns = 24;
        let ang = build_angular(ns, -0.6).unwrap();
        for l in 0..ns {
            for lp in 0..ns {
                assert!((ang.k(l, lp) - ang.k(lp, l)).abs() < 1e-14);
                let shifted = ang.k((l + 5) % ns, (lp + 5) % ns);
                assert!((ang.k(l, lp) - shifted).abs() < 1e-13);
            }
        }
    }
}
