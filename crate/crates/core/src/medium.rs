//! Optical coefficient fields and piecewise-constant phantoms.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Mesh, Point, Rect};

/// Per-cell absorption and scattering coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpticalField {
    pub sigma_a: Vec<f64>,
    pub sigma_s: Vec<f64>,
}

/// Which of the two coefficients a reconstruction targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coefficient {
    Absorption,
    Scattering,
}

impl OpticalField {
    /// Validated constructor: equal lengths and strictly positive entries.
    pub fn new(sigma_a: Vec<f64>, sigma_s: Vec<f64>) -> Result<Self> {
        if sigma_a.len() != sigma_s.len() {
            return Err(Error::DimensionMismatch {
                context: "optical field",
                expected: sigma_a.len(),
                actual: sigma_s.len(),
            });
        }
        if let Some(bad) = sigma_a.iter().chain(&sigma_s).find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::invalid(format!(
                "optical coefficients must be positive and finite (found {bad})"
            )));
        }
        Ok(Self { sigma_a, sigma_s })
    }

    /// Constant field without the positivity check, for degenerate test media.
    pub fn uniform(n: usize, sigma_a: f64, sigma_s: f64) -> Self {
        Self {
            sigma_a: vec![sigma_a; n],
            sigma_s: vec![sigma_s; n],
        }
    }

    pub fn len(&self) -> usize {
        self.sigma_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma_a.is_empty()
    }

    pub fn total(&self) -> Vec<f64> {
        self.sigma_a.iter().zip(&self.sigma_s).map(|(a, s)| a + s).collect()
    }

    pub fn coefficient(&self, which: Coefficient) -> &[f64] {
        match which {
            Coefficient::Absorption => &self.sigma_a,
            Coefficient::Scattering => &self.sigma_s,
        }
    }

    /// Copy of `self` with the targeted coefficient replaced by `values`.
    pub fn with_coefficient(&self, which: Coefficient, values: Vec<f64>) -> Self {
        let mut out = self.clone();
        match which {
            Coefficient::Absorption => out.sigma_a = values,
            Coefficient::Scattering => out.sigma_s = values,
        }
        out
    }
}

/// Row-major CSV rendering of a per-cell field: one line per mesh row,
/// bottom row first, 17 significant digits.
pub fn field_to_csv(values: &[f64], nx: usize) -> String {
    let mut out = String::with_capacity(values.len() * 24);
    for row in values.chunks(nx) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v:.16e}");
        }
        out.push('\n');
    }
    out
}

/// Parses the output of [`field_to_csv`] back into a flat vector and its row width.
pub fn field_from_csv(text: &str) -> Result<(Vec<f64>, usize)> {
    let mut values = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("line {}: {e}", lineno + 1)))?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::invalid(format!(
                    "line {}: expected {w} columns, found {}",
                    lineno + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        values.extend(row);
    }
    Ok((values, width.unwrap_or(0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Disk {
        center: Point,
        radius: f64,
    },
    Rectangle {
        min: Point,
        max: Point,
    },
    /// Simple polygon; vertices in either orientation.
    Polygon {
        vertices: Vec<Point>,
    },
}

impl Shape {
    pub fn contains(&self, p: Point) -> bool {
        match self {
            Shape::Disk { center, radius } => {
                (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) <= radius * radius
            }
            Shape::Rectangle { min, max } => p[0] >= min[0] && p[0] <= max[0] && p[1] >= min[1] && p[1] <= max[1],
            Shape::Polygon { vertices } => point_in_polygon(p, vertices),
        }
    }

    fn bounding_box(&self) -> Rect {
        match self {
            Shape::Disk { center, radius } => Rect::new(
                center[0] - radius,
                center[1] - radius,
                center[0] + radius,
                center[1] + radius,
            ),
            Shape::Rectangle { min, max } => Rect::new(min[0], min[1], max[0], max[1]),
            Shape::Polygon { vertices } => {
                let mut r = Rect::new(f64::INFINITY, f64::INFINITY, -f64::INFINITY, -f64::INFINITY);
                for v in vertices {
                    r.x_min = r.x_min.min(v[0]);
                    r.y_min = r.y_min.min(v[1]);
                    r.x_max = r.x_max.max(v[0]);
                    r.y_max = r.y_max.max(v[1]);
                }
                r
            }
        }
    }
}

// Crossing-number test.
fn point_in_polygon(p: Point, vertices: &[Point]) -> bool {
    let n = vertices.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (vertices[i], vertices[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0];
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// An inclusion overrides one or both coefficients inside its shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inclusion {
    pub shape: Shape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub background_a: f64,
    pub background_s: f64,
    #[serde(default)]
    pub inclusions: Vec<Inclusion>,
}

impl PhantomSpec {
    pub fn constant(sigma_a: f64, sigma_s: f64) -> Self {
        Self {
            background_a: sigma_a,
            background_s: sigma_s,
            inclusions: Vec::new(),
        }
    }

    pub fn with(mut self, inclusion: Inclusion) -> Self {
        self.inclusions.push(inclusion);
        self
    }

    /// Checks positivity of all values and that every shape fits in `domain`.
    pub fn validate(&self, domain: &Rect) -> Result<()> {
        let values = [self.background_a, self.background_s].into_iter().chain(
            self.inclusions
                .iter()
                .flat_map(|i| i.sigma_a.into_iter().chain(i.sigma_s)),
        );
        for v in values {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!(
                    "phantom coefficient values must be positive (found {v})"
                )));
            }
        }
        let tol = 1e-12 * domain.width().max(domain.height());
        for (k, inc) in self.inclusions.iter().enumerate() {
            let bb = inc.shape.bounding_box();
            if bb.x_min < domain.x_min - tol
                || bb.y_min < domain.y_min - tol
                || bb.x_max > domain.x_max + tol
                || bb.y_max > domain.y_max + tol
            {
                return Err(Error::invalid(format!(
                    "inclusion {k} extends outside the domain {domain:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Cell-center sampling of a phantom; later inclusions override earlier ones.
pub fn rasterize_phantom(spec: &PhantomSpec, mesh: &Mesh) -> OpticalField {
    let n = mesh.n_cells();
    let mut field = OpticalField::uniform(n, spec.background_a, spec.background_s);
    for inc in &spec.inclusions {
        for (m, &c) in mesh.cell_centers.iter().enumerate() {
            if inc.shape.contains(c) {
                if let Some(a) = inc.sigma_a {
                    field.sigma_a[m] = a;
                }
                if let Some(s) = inc.sigma_s {
                    field.sigma_s[m] = s;
                }
            }
        }
    }
    field
}

/// Reference phantoms on `[0, 2]²` used by the canonical experiments.
pub mod phantoms {
    use super::*;

    const BACKGROUND_A: f64 = 0.1;
    const INCLUSION_A: f64 = 0.2;
    const BACKGROUND_S: f64 = 8.0;

    /// Absorbing disk of radius 0.3 at the domain center.
    pub fn absorbing_disk() -> PhantomSpec {
        PhantomSpec::constant(BACKGROUND_A, BACKGROUND_S).with(Inclusion {
            shape: Shape::Disk {
                center: [1.0, 1.0],
                radius: 0.3,
            },
            sigma_a: Some(INCLUSION_A),
            sigma_s: None,
        })
    }

    /// Elongated absorbing bar `[0.5, 1.5] × [0.8, 1.2]`.
    pub fn absorbing_bar() -> PhantomSpec {
        PhantomSpec::constant(BACKGROUND_A, BACKGROUND_S).with(Inclusion {
            shape: Shape::Rectangle {
                min: [0.5, 0.8],
                max: [1.5, 1.2],
            },
            sigma_a: Some(INCLUSION_A),
            sigma_s: None,
        })
    }

    /// L-shaped absorber built from two overlapping bars.
    pub fn absorbing_l_shape() -> PhantomSpec {
        let bar = |min: Point, max: Point| Inclusion {
            shape: Shape::Rectangle { min, max },
            sigma_a: Some(INCLUSION_A),
            sigma_s: None,
        };
        PhantomSpec::constant(BACKGROUND_A, BACKGROUND_S)
            .with(bar([0.5, 0.5], [0.9, 1.5]))
            .with(bar([0.5, 0.5], [1.5, 0.9]))
    }

    /// Absorption disk of radius 0.3 at (1.3, 1.4) with value 0.2 over 0.1.
    pub fn known_absorption_disk() -> PhantomSpec {
        PhantomSpec::constant(BACKGROUND_A, BACKGROUND_S).with(Inclusion {
            shape: Shape::Disk {
                center: [1.3, 1.4],
                radius: 0.3,
            },
            sigma_a: Some(INCLUSION_A),
            sigma_s: None,
        })
    }

    /// [`known_absorption_disk`] plus a scattering disk (σs 16 over 8) of
    /// radius 0.3 at (0.7, 0.6).
    pub fn scattering_disk() -> PhantomSpec {
        known_absorption_disk().with(Inclusion {
            shape: Shape::Disk {
                center: [0.7, 0.6],
                radius: 0.3,
            },
            sigma_a: None,
            sigma_s: Some(2.0 * BACKGROUND_S),
        })
    }
}
