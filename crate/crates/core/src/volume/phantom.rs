//! Synthetic head-like phantoms: a soft-edged outer ellipsoid with a bright
//! shell, a few inner ellipsoids of distinct intensity and a linear axial
//! intensity gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Volume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub seed: u64,
    /// `[Z, Y, X]` in voxels.
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// In-plane outer radius as a fraction of the half extent.
    pub outer_radius: [f64; 2],
    /// Axial outer radius as a fraction of the half extent.
    pub outer_radius_z: [f64; 2],
    /// Maximum centre offset as a fraction of the half extent.
    pub center_jitter: f64,
    pub tissue_intensity: [f64; 2],
    /// Shell thickness in voxels; zero disables the shell.
    pub shell_thickness: f64,
    pub shell_intensity: [f64; 2],
    /// Inclusive range for the number of inner ellipsoids.
    pub inner_count: [usize; 2],
    /// Inner radii as a fraction of the core radii.
    pub inner_radius: [f64; 2],
    pub inner_intensity: [f64; 2],
    /// Intensity change from the first to the last axial slice.
    pub z_gradient: [f64; 2],
    /// Width of the boundary ramp in voxels.
    pub edge_softness: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            shape: [32, 32, 32],
            spacing_mm: [1.0, 1.0, 1.0],
            outer_radius: [0.70, 0.88],
            outer_radius_z: [1.0, 1.25],
            center_jitter: 0.06,
            tissue_intensity: [0.30, 0.45],
            shell_thickness: 1.5,
            shell_intensity: [0.80, 0.95],
            inner_count: [2, 4],
            inner_radius: [0.22, 0.45],
            inner_intensity: [0.55, 1.0],
            z_gradient: [0.05, 0.2],
            edge_softness: 1.0,
        }
    }
}

const MAX_INNER: usize = 8;

fn check_range(name: &str, r: [f64; 2], positive: bool) -> Result<()> {
    let ok = r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && (!positive || r[0] > 0.0);
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("degenerate {name} range {r:?}")))
    }
}

impl PhantomSpec {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::InvalidArgument(format!("empty shape {:?}", self.shape)));
        }
        check_range("outer_radius", self.outer_radius, true)?;
        check_range("outer_radius_z", self.outer_radius_z, true)?;
        check_range("inner_radius", self.inner_radius, true)?;
        check_range("tissue_intensity", self.tissue_intensity, false)?;
        check_range("shell_intensity", self.shell_intensity, false)?;
        check_range("inner_intensity", self.inner_intensity, false)?;
        check_range("z_gradient", self.z_gradient, false)?;
        if self.inner_radius[1] >= 1.0 {
            return Err(Error::InvalidArgument(
                "inner radii must be smaller than the core".into(),
            ));
        }
        if self.inner_count[0] > self.inner_count[1] || self.inner_count[1] > MAX_INNER {
            return Err(Error::InvalidArgument(format!(
                "inner_count {:?} (max {MAX_INNER})",
                self.inner_count
            )));
        }
        if self.edge_softness.is_nan()
            || self.edge_softness <= 0.0
            || self.shell_thickness.is_nan()
            || self.shell_thickness < 0.0
        {
            return Err(Error::InvalidArgument(
                "edge_softness must be > 0 and shell_thickness >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.center_jitter) {
            return Err(Error::InvalidArgument("center_jitter must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Soft membership: 1 well inside, 0 at and beyond the surface.
    fn membership(&self, p: [f64; 3], softness: f64) -> f64 {
        let r2: f64 = (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum();
        let r = r2.sqrt();
        if r >= 1.0 {
            return 0.0;
        }
        let rmin = self.radii.iter().copied().fold(f64::INFINITY, f64::min);
        ((1.0 - r) * rmin / softness).min(1.0)
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Deterministic phantom volume; a pure function of `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [nz, ny, nx] = spec.shape;
    let half = [nz as f64 / 2.0, ny as f64 / 2.0, nx as f64 / 2.0];
    let mid = [
        (nz as f64 - 1.0) / 2.0,
        (ny as f64 - 1.0) / 2.0,
        (nx as f64 - 1.0) / 2.0,
    ];

    let mut center = [0.0; 3];
    for a in 0..3 {
        let j = spec.center_jitter * half[a];
        center[a] = mid[a] + if j > 0.0 { rng.random_range(-j..j) } else { 0.0 };
    }
    let outer = Ellipsoid {
        center,
        radii: [
            uniform(&mut rng, spec.outer_radius_z) * half[0],
            uniform(&mut rng, spec.outer_radius) * half[1],
            uniform(&mut rng, spec.outer_radius) * half[2],
        ],
    };
    let core = Ellipsoid {
        center,
        radii: outer.radii.map(|r| (r - spec.shell_thickness).max(r * 0.5)),
    };
    let tissue = uniform(&mut rng, spec.tissue_intensity);
    let shell = uniform(&mut rng, spec.shell_intensity);
    let gradient = uniform(&mut rng, spec.z_gradient);

    let n_inner = if spec.inner_count[0] == spec.inner_count[1] {
        spec.inner_count[0]
    } else {
        rng.random_range(spec.inner_count[0]..=spec.inner_count[1])
    };
    let mut inner: Vec<(Ellipsoid, f64)> = Vec::with_capacity(n_inner);
    let mut used = vec![tissue];
    for _ in 0..n_inner {
        let fr = [0; 3].map(|_| uniform(&mut rng, spec.inner_radius));
        let radii = [0, 1, 2].map(|a| fr[a] * core.radii[a]);
        // Uniform point in the unit ball, scaled so the structure stays in the core.
        let q = loop {
            let q = [0; 3].map(|_| rng.random_range(-1.0..1.0f64));
            if q.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                break q;
            }
        };
        let c = [0, 1, 2].map(|a| center[a] + q[a] * (core.radii[a] - radii[a]) * 0.9);
        // Distinct intensities: keep a minimum separation when the range allows it.
        let mut value = uniform(&mut rng, spec.inner_intensity);
        for _ in 0..64 {
            if used.iter().all(|u| (u - value).abs() >= 0.08) {
                break;
            }
            value = uniform(&mut rng, spec.inner_intensity);
        }
        used.push(value);
        inner.push((Ellipsoid { center: c, radii }, value));
    }

    let soft = spec.edge_softness;
    let mut data = Vec::with_capacity(nz * ny * nx);
    for z in 0..nz {
        let zt = if nz > 1 {
            z as f64 / (nz as f64 - 1.0) - 0.5
        } else {
            0.0
        };
        for y in 0..ny {
            for x in 0..nx {
                let p = [z as f64, y as f64, x as f64];
                let m_outer = outer.membership(p, soft);
                if m_outer == 0.0 {
                    data.push(0.0f32);
                    continue;
                }
                let m_core = if spec.shell_thickness > 0.0 {
                    core.membership(p, soft)
                } else {
                    1.0
                };
                let mut v = tissue;
                for (e, value) in &inner {
                    let m = e.membership(p, soft);
                    v = v * (1.0 - m) + value * m;
                }
                let v = shell * (1.0 - m_core) + v * m_core + gradient * zt;
                data.push((m_outer * v).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Volume::new(spec.shape, spec.spacing_mm, data, format!("phantom-{}", spec.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = PhantomSpec::default().with_seed(11);
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a.data(), b.data());
        let c = generate_phantom(&spec.clone().with_seed(12)).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn clamped_with_zero_background() {
        for seed in 0..5 {
            let v = generate_phantom(&PhantomSpec::default().with_seed(seed)).unwrap();
            let min = v.data().iter().copied().fold(f32::INFINITY, f32::min);
            let max = v.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
            assert!(min >= 0.0 && max <= 1.0);
            // In-plane corners lie outside every outer ellipsoid.
            for z in 0..32 {
                assert_eq!(v.at(z, 0, 0), 0.0);
                assert_eq!(v.at(z, 31, 31), 0.0);
            }
        }
    }

    #[test]
    fn uniform_phantom_differs_only_by_gradient() {
        let spec = PhantomSpec {
            outer_radius_z: [1e6, 1e6],
            inner_count: [0, 0],
            shell_thickness: 0.0,
            tissue_intensity: [0.4, 0.4],
            z_gradient: [0.2, 0.2],
            center_jitter: 0.0,
            ..PhantomSpec::default()
        };
        let v = generate_phantom(&spec).unwrap();
        let base = v.axial(0);
        for z in 1..32 {
            let s = v.axial(z);
            let shift = 0.2 * z as f32 / 31.0;
            for (i, (&a, &b)) in s.data().iter().zip(base.data()).enumerate() {
                if b == 0.0 {
                    assert_eq!(a, 0.0, "background at {i}");
                } else {
                    // b = m * (0.4 - 0.1), a = m * (0.4 - 0.1 + shift)
                    let m = b / 0.3;
                    assert!((a - b - m * shift).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn degenerate_radii_rejected() {
        let spec = PhantomSpec {
            outer_radius: [0.0, 0.5],
            ..PhantomSpec::default()
        };
        assert!(generate_phantom(&spec).is_err());
        let spec = PhantomSpec {
            inner_radius: [0.5, 0.2],
            ..PhantomSpec::default()
        };
        assert!(generate_phantom(&spec).is_err());
    }
}
