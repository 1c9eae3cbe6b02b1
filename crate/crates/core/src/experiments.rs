//! Synthetic-data experiments: forward data on a refined mesh, multiplicative
//! noise, restriction to the inversion mesh and error metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{build_angular, build_mesh, AngularGrid, Mesh, Rect};
use crate::medium::{phantoms, rasterize_phantom, Coefficient, OpticalField, PhantomSpec};
use crate::operators::Factorization;
use crate::par;
use crate::recon::{reconstruct, ReconConfig, ReconResult};
use crate::spectral::{compute_svd, meta_hash, SvdCache};
use crate::transport::{measure_current, solve_forward, ForwardOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub phantom: PhantomSpec,
    pub domain: Rect,
    /// Inversion mesh cells per side.
    pub nx: usize,
    pub ny: usize,
    /// Inversion directions.
    pub ns: usize,
    /// Forward cells per inversion cell along each axis.
    pub forward_mesh_factor: usize,
    pub forward_ns: usize,
    pub anisotropy: f64,
    pub n_sources: usize,
    pub n_detectors: usize,
    /// Noise levels γ in percent.
    pub noise_levels: Vec<f64>,
    pub seed: u64,
    pub mode: Coefficient,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "disk".into(),
            phantom: phantoms::absorbing_disk(),
            domain: Rect::square(2.0),
            nx: 40,
            ny: 40,
            ns: 16,
            forward_mesh_factor: 2,
            forward_ns: 32,
            anisotropy: 0.0,
            n_sources: 8,
            n_detectors: 80,
            noise_levels: vec![0.0],
            seed: 2024,
            mode: Coefficient::Absorption,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.forward_mesh_factor < 2 {
            return Err(Error::invalid("forward_mesh_factor must be at least 2"));
        }
        if self.noise_levels.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(Error::invalid("noise levels must be finite and nonnegative"));
        }
        if self.n_detectors > self.nx * self.ny * self.ns {
            return Err(Error::invalid("more detectors than phase-space unknowns"));
        }
        self.phantom.validate(&self.domain)
    }

    pub fn inversion_mesh(&self) -> Result<Mesh> {
        build_mesh(self.nx, self.ny, self.domain, self.n_detectors, self.n_sources)
    }

    pub fn forward_mesh(&self) -> Result<Mesh> {
        let k = self.forward_mesh_factor;
        build_mesh(self.nx * k, self.ny * k, self.domain, self.n_detectors, self.n_sources)
    }

    pub fn inversion_angular(&self) -> Result<AngularGrid> {
        build_angular(self.ns, self.anisotropy)
    }

    pub fn forward_angular(&self) -> Result<AngularGrid> {
        build_angular(self.forward_ns, self.anisotropy)
    }

    /// The phantom averaged onto the inversion mesh.
    pub fn truth(&self) -> Result<OpticalField> {
        let fine = self.forward_mesh()?;
        let coarse = self.inversion_mesh()?;
        let field = rasterize_phantom(&self.phantom, &fine);
        Ok(OpticalField {
            sigma_a: restrict_field(&field.sigma_a, &fine, &coarse)?,
            sigma_s: restrict_field(&field.sigma_s, &fine, &coarse)?,
        })
    }
}

/// Data for all sources at one noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSet {
    pub noise_percent: f64,
    pub data: Vec<Vec<f64>>,
}

/// Noiseless currents `J_q` from forward solves on the refined mesh.
pub fn forward_data(spec: &ExperimentSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mesh = spec.forward_mesh()?;
    let ang = spec.forward_angular()?;
    let field = rasterize_phantom(&spec.phantom, &mesh);
    let opts = ForwardOptions::default();
    // Each source solve already parallelizes over directions.
    (0..spec.n_sources)
        .map(|q| {
            let sol = solve_forward(&field, &ang, &mesh, q, &opts)?;
            log::debug!("source {q}: {} sweeps", sol.sweeps);
            Ok(measure_current(&sol.u, &mesh, &ang))
        })
        .collect()
}

/// Forward data at every configured noise level.
pub fn generate_synthetic_data(spec: &ExperimentSpec) -> Result<Vec<DataSet>> {
    let clean = forward_data(spec)?;
    Ok(spec
        .noise_levels
        .iter()
        .map(|&gamma| DataSet {
            noise_percent: gamma,
            data: clean
                .iter()
                .enumerate()
                .map(|(q, j)| add_noise(j, gamma, noise_seed(spec.seed, gamma, q)))
                .collect(),
        })
        .collect())
}

/// Stream seed for one (seed, noise level, source) triple (SplitMix64 mixing).
pub fn noise_seed(seed: u64, gamma: f64, source: usize) -> u64 {
    let mut z = seed ^ gamma.to_bits().rotate_left(17) ^ (source as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Multiplies each entry by `1 + γ·10⁻²·r` with `r ~ U[-1, 1]` drawn from a
/// ChaCha8 stream seeded with `seed`.
pub fn add_noise(j: &[f64], gamma_percent: f64, seed: u64) -> Vec<f64> {
    if gamma_percent == 0.0 {
        return j.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = gamma_percent * 1e-2;
    j.iter()
        .map(|&x| x * (1.0 + scale * rng.random_range(-1.0..=1.0)))
        .collect()
}

/// Volume-weighted average of a fine-mesh field over each coarse cell.
pub fn restrict_field(values: &[f64], fine: &Mesh, coarse: &Mesh) -> Result<Vec<f64>> {
    let k = coarse
        .refinement_factor(fine)
        .ok_or_else(|| Error::invalid("fine mesh is not an integer refinement of the coarse mesh"))?;
    if values.len() != fine.n_cells() {
        return Err(Error::DimensionMismatch {
            context: "restricted field",
            expected: fine.n_cells(),
            actual: values.len(),
        });
    }
    let mut out = vec![0.0; coarse.n_cells()];
    let mut vol = vec![0.0; coarse.n_cells()];
    for (m, &v) in values.iter().enumerate() {
        let (i, j) = fine.cell_ij(m);
        let c = coarse.cell_index(i / k, j / k);
        out[c] += fine.cell_volumes[m] * v;
        vol[c] += fine.cell_volumes[m];
    }
    out.iter_mut().zip(&vol).for_each(|(o, v)| *o /= v);
    Ok(out)
}

/// Detector data carry over unchanged when both meshes place detectors at the
/// same boundary positions.
pub fn restrict_data(data: &[f64], fine: &Mesh, coarse: &Mesh) -> Result<Vec<f64>> {
    coarse
        .refinement_factor(fine)
        .ok_or_else(|| Error::invalid("fine mesh is not an integer refinement of the coarse mesh"))?;
    let same = fine.detectors.len() == coarse.detectors.len()
        && fine
            .detectors
            .iter()
            .zip(&coarse.detectors)
            .all(|(a, b)| (a.arc - b.arc).abs() < 1e-12);
    if !same || data.len() != coarse.n_detectors() {
        return Err(Error::invalid("detector layouts of the two meshes differ"));
    }
    Ok(data.to_vec())
}

/// `‖est - truth‖ / ‖truth‖` in the volume-weighted L² norm.
pub fn relative_l2_error(estimate: &[f64], truth: &[f64], mesh: &Mesh) -> Result<f64> {
    if estimate.len() != truth.len() || truth.len() != mesh.n_cells() {
        return Err(Error::DimensionMismatch {
            context: "relative error",
            expected: mesh.n_cells(),
            actual: estimate.len(),
        });
    }
    let (mut num, mut den) = (0.0, 0.0);
    for ((e, t), v) in estimate.iter().zip(truth).zip(&mesh.cell_volumes) {
        num += v * (e - t) * (e - t);
        den += v * t * t;
    }
    if den == 0.0 {
        return Err(Error::invalid("truth has zero norm"));
    }
    Ok((num / den).sqrt())
}

/// Factorization and SVD for the inversion grid of `spec`.
pub fn prepare_inversion(spec: &ExperimentSpec) -> Result<(Factorization, SvdCache)> {
    let mesh = spec.inversion_mesh()?;
    let ang = spec.inversion_angular()?;
    let truth = spec.truth()?;
    let fact = Factorization::new(spec.mode, &truth, &mesh, &ang)?;
    let hash = meta_hash(&mesh, &ang, spec.mode, &fact.known);
    let cache = compute_svd(&fact.a, hash)?;
    Ok((fact, cache))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelOutcome {
    pub noise_percent: f64,
    pub relative_l2_error: f64,
    pub seconds: f64,
    pub result: ReconResult,
}

/// Reconstructs every noise level of `datasets`.
pub fn run_levels(
    spec: &ExperimentSpec,
    fact: &Factorization,
    cache: &SvdCache,
    datasets: &[DataSet],
    config: &ReconConfig,
) -> Result<Vec<LevelOutcome>> {
    let truth = spec.truth()?;
    let target = truth.coefficient(spec.mode).to_vec();
    let coarse = &fact.mesh;
    let fine = spec.forward_mesh()?;
    par::try_map_indices(datasets.len(), |k| {
        let set = &datasets[k];
        let data = set
            .data
            .iter()
            .map(|j| restrict_data(j, &fine, coarse))
            .collect::<Result<Vec<_>>>()?;
        let start = std::time::Instant::now();
        let mut result = reconstruct(fact, cache, &data, config)?;
        let err = relative_l2_error(result.sigma.coefficient(spec.mode), &target, coarse)?;
        result.error_vs_truth = Some(err);
        Ok(LevelOutcome {
            noise_percent: set.noise_percent,
            relative_l2_error: err,
            seconds: start.elapsed().as_secs_f64(),
            result,
        })
    })
}

/// Full pipeline: data, SVD, reconstruction at every noise level.
pub fn run_experiment(spec: &ExperimentSpec, config: &ReconConfig) -> Result<Vec<LevelOutcome>> {
    let datasets = generate_synthetic_data(spec)?;
    let (fact, cache) = prepare_inversion(spec)?;
    run_levels(spec, &fact, &cache, &datasets, config)
}

/// The four canonical experiments at the default desk-scale resolution.
pub mod canonical {
    use super::*;

    fn absorption(name: &str, phantom: PhantomSpec) -> ExperimentSpec {
        ExperimentSpec {
            name: name.into(),
            phantom,
            noise_levels: vec![0.0, 3.0, 10.0],
            ..Default::default()
        }
    }

    pub fn disk() -> ExperimentSpec {
        absorption("disk", phantoms::absorbing_disk())
    }

    pub fn bar() -> ExperimentSpec {
        absorption("bar", phantoms::absorbing_bar())
    }

    pub fn l_shape() -> ExperimentSpec {
        absorption("l_shape", phantoms::absorbing_l_shape())
    }

    pub fn scattering() -> ExperimentSpec {
        ExperimentSpec {
            name: "scattering".into(),
            phantom: phantoms::scattering_disk(),
            noise_levels: vec![0.0, 3.0, 10.0],
            mode: Coefficient::Scattering,
            ..Default::default()
        }
    }

    pub fn all() -> Vec<ExperimentSpec> {
        vec![disk(), bar(), l_shape(), scattering()]
    }

    pub fn by_name(name: &str) -> Option<ExperimentSpec> {
        all().into_iter().find(|s| s.name == name)
    }
}

/// Binary PGM (P5), 8-bit, min-max scaled, top image row = top mesh row.
pub fn field_to_pgm(values: &[f64], nx: usize, ny: usize) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let mut out = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    for j in (0..ny).rev() {
        for i in 0..nx {
            let v = values[j * nx + i];
            let g = if span > 0.0 {
                ((v - lo) / span * 255.0).round()
            } else {
                0.0
            };
            out.push(g.clamp(0.0, 255.0) as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ExperimentSpec {
        ExperimentSpec {
            nx: 6,
            ny: 6,
            ns: 8,
            forward_ns: 8,
            n_sources: 4,
            n_detectors: 16,
            noise_levels: vec![0.0, 5.0],
            ..Default::default()
        }
    }

    #[test]
    fn noise_bounds_and_determinism() {
        let j: Vec<f64> = (1..=50).map(|i| i as f64).collect();
        assert_eq!(add_noise(&j, 0.0, 1), j);
        let a = add_noise(&j, 10.0, 7);
        assert_eq!(a, add_noise(&j, 10.0, 7));
        assert_ne!(a, add_noise(&j, 10.0, 8));
        for (x, y) in a.iter().zip(&j) {
            assert!((x / y - 1.0).abs() <= 0.1 + 1e-15);
        }
    }

    #[test]
    fn restriction_averages_blocks() {
        let coarse = build_mesh(2, 2, Rect::square(2.0), 4, 1).unwrap();
        let fine = build_mesh(4, 4, Rect::square(2.0), 4, 1).unwrap();
        let checker: Vec<f64> = (0..16).map(|m| ((m % 4 + m / 4) % 2) as f64).collect();
        assert_eq!(restrict_field(&checker, &fine, &coarse).unwrap(), vec![0.5; 4]);
        assert_eq!(restrict_field(&[3.0; 16], &fine, &coarse).unwrap(), vec![3.0; 4]);
        let odd = build_mesh(5, 5, Rect::square(2.0), 4, 1).unwrap();
        assert!(restrict_field(&[0.0; 25], &odd, &coarse).is_err());
        assert_eq!(
            restrict_data(&[1.0, 2.0, 3.0, 4.0], &fine, &coarse).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
    }

    #[test]
    fn restriction_preserves_mass() {
        let coarse = build_mesh(20, 20, Rect::square(2.0), 4, 1).unwrap();
        let fine = build_mesh(40, 40, Rect::square(2.0), 4, 1).unwrap();
        let f = rasterize_phantom(&phantoms::absorbing_disk(), &fine);
        let c = restrict_field(&f.sigma_a, &fine, &coarse).unwrap();
        let mf: f64 = f.sigma_a.iter().zip(&fine.cell_volumes).map(|(a, v)| a * v).sum();
        let mc: f64 = c.iter().zip(&coarse.cell_volumes).map(|(a, v)| a * v).sum();
        assert!((mf - mc).abs() < 1e-12 * mf);
    }

    #[test]
    fn error_metric() {
        let mesh = build_mesh(3, 3, Rect::square(1.0), 4, 1).unwrap();
        let t: Vec<f64> = (1..=9).map(|i| i as f64).collect();
        assert_eq!(relative_l2_error(&t, &t, &mesh).unwrap(), 0.0);
        let scaled: Vec<f64> = t.iter().map(|x| 1.1 * x).collect();
        assert!((relative_l2_error(&scaled, &t, &mesh).unwrap() - 0.1).abs() < 1e-14);
        assert!(relative_l2_error(&t, &[0.0; 9], &mesh).is_err());
    }

    #[test]
    fn data_are_linear_and_symmetric() {
        let spec = ExperimentSpec {
            phantom: PhantomSpec::constant(0.1, 4.0),
            n_sources: 4,
            ..small_spec()
        };
        let data = forward_data(&spec).unwrap();
        // Source 0 covers the bottom edge, source 2 the top edge; with the
        // half-arc detector offset the reflection y -> 2 - y maps detector d on
        // the bottom/top to a reversed index on the opposite edge.
        let mesh = spec.forward_mesh().unwrap();
        let reflect = |p: [f64; 2]| [p[0], 2.0 - p[1]];
        for (d, det) in mesh.detectors.iter().enumerate() {
            let target = reflect(det.position);
            let e = mesh
                .detectors
                .iter()
                .position(|o| (o.position[0] - target[0]).abs() < 1e-9 && (o.position[1] - target[1]).abs() < 1e-9)
                .expect("mirror detector");
            assert!((data[0][d] - data[2][e]).abs() < 1e-9 * data[0][d].abs().max(1e-12));
        }
    }

    #[test]
    fn refined_and_coarse_data_differ() {
        let spec = small_spec();
        let fine = forward_data(&spec).unwrap();
        let mesh = spec.inversion_mesh().unwrap();
        let ang = spec.inversion_angular().unwrap();
        let field = rasterize_phantom(&spec.phantom, &mesh);
        let coarse = measure_current(
            &solve_forward(&field, &ang, &mesh, 0, &ForwardOptions::default())
                .unwrap()
                .u,
            &mesh,
            &ang,
        );
        let diff: f64 = fine[0].iter().zip(&coarse).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn end_to_end_is_deterministic() {
        let spec = small_spec();
        let config = ReconConfig {
            truncation: crate::spectral::LPolicy::Fixed { value: 10 },
            ..Default::default()
        };
        let a = run_experiment(&spec, &config).unwrap();
        let b = run_experiment(&spec, &config).unwrap();
        let ja = serde_json::to_string(&a.iter().map(|o| &o.result).collect::<Vec<_>>()).unwrap();
        let jb = serde_json::to_string(&b.iter().map(|o| &o.result).collect::<Vec<_>>()).unwrap();
        assert_eq!(ja, jb);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn pgm_header_and_scaling() {
        let img = field_to_pgm(&[0.0, 1.0, 2.0, 3.0], 2, 2);
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(&img[header.len()..], &[170, 255, 0, 85]);
    }

    #[test]
    fn bad_specs_rejected() {
        let spec = ExperimentSpec {
            forward_mesh_factor: 1,
            ..small_spec()
        };
        assert!(spec.validate().is_err());
        let spec = ExperimentSpec {
            noise_levels: vec![-1.0],
            ..small_spec()
        };
        assert!(spec.validate().is_err());
    }
}
