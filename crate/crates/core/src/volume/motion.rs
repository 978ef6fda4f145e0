//! Motion-corrupted orthogonal stacks and their Gaussian-averaged template.

use rand::Rng;

use crate::error::{Error, Result};

use super::Volume;

#[derive(Clone, Debug)]
pub struct MotionCorruption {
    /// One volume per stack, in the original geometry.
    pub stacks: Vec<Volume>,
    /// Mean of all stacks blurred with a small Gaussian kernel.
    pub average: Volume,
}

/// Standard deviation, in voxels, of the blur used for the stack average.
pub const AVERAGE_SIGMA: f64 = 1.0;

/// Re-slices `vol` along the three orthogonal axes in turn (stack `i` uses
/// axis `i % 3`) and shifts every slice by an integer in-plane translation
/// drawn uniformly from `[-max, max]` per axis, filling with zeros.
pub fn motion_corrupt_stacks<R: Rng + ?Sized>(
    vol: &Volume,
    n_stacks: usize,
    max_translation: usize,
    rng: &mut R,
) -> Result<MotionCorruption> {
    if n_stacks == 0 {
        return Err(Error::InvalidArgument("need at least one stack".into()));
    }
    let shape = vol.shape();
    if shape.iter().any(|&s| max_translation >= s) {
        return Err(Error::InvalidArgument(format!(
            "translation {max_translation} exceeds image extent {shape:?}"
        )));
    }
    let m = max_translation as i64;
    let mut stacks = Vec::with_capacity(n_stacks);
    for s in 0..n_stacks {
        let axis = s % 3;
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let mut data = vec![0.0f32; vol.data().len()];
        for i in 0..shape[axis] {
            let da = rng.random_range(-m..=m);
            let db = rng.random_range(-m..=m);
            for u in 0..shape[a] {
                let su = u as i64 - da;
                if su < 0 || su >= shape[a] as i64 {
                    continue;
                }
                for v in 0..shape[b] {
                    let sv = v as i64 - db;
                    if sv < 0 || sv >= shape[b] as i64 {
                        continue;
                    }
                    let mut dst = [0usize; 3];
                    let mut src = [0usize; 3];
                    dst[axis] = i;
                    src[axis] = i;
                    dst[a] = u;
                    src[a] = su as usize;
                    dst[b] = v;
                    src[b] = sv as usize;
                    data[(dst[0] * shape[1] + dst[1]) * shape[2] + dst[2]] = vol.at(src[0], src[1], src[2]);
                }
            }
        }
        stacks.push(Volume::new(
            shape,
            vol.spacing_mm(),
            data,
            format!("{}-stack{s}", vol.subject()),
        )?);
    }
    let n = stacks.len() as f32;
    let mean: Vec<f32> = (0..vol.data().len())
        .map(|i| stacks.iter().map(|s| s.data()[i]).sum::<f32>() / n)
        .collect();
    let mean = Volume::new(shape, vol.spacing_mm(), mean, vol.subject())?;
    let average = gaussian_smooth(&mean, AVERAGE_SIGMA)?;
    Ok(MotionCorruption { stacks, average })
}

fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Separable 3D Gaussian blur with half-sample symmetric boundaries.
pub fn gaussian_smooth(vol: &Volume, sigma: f64) -> Result<Volume> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be positive")));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut weights: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);

    let shape = vol.shape();
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut cur: Vec<f64> = vol.data().iter().map(|&v| v as f64).collect();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for (idx, out) in next.iter_mut().enumerate() {
            let pos = (idx / strides[axis]) % shape[axis];
            let base = idx - pos * strides[axis];
            let mut acc = 0.0;
            for (w, d) in weights.iter().zip(-radius..=radius) {
                let j = reflect(pos as i64 + d, shape[axis]);
                acc += w * cur[base + j * strides[axis]];
            }
            *out = acc;
        }
        cur = next;
    }
    Volume::new(
        shape,
        vol.spacing_mm(),
        cur.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
        vol.subject(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{generate_phantom, PhantomSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn phantom() -> Volume {
        generate_phantom(&PhantomSpec {
            shape: [16, 16, 16],
            ..PhantomSpec::default().with_seed(4)
        })
        .unwrap()
    }

    #[test]
    fn no_motion_gives_smoothed_original() {
        let v = phantom();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = motion_corrupt_stacks(&v, 3, 0, &mut rng).unwrap();
        for s in &out.stacks {
            assert_eq!(s.data(), v.data());
        }
        let smooth = gaussian_smooth(&v, AVERAGE_SIGMA).unwrap();
        for (a, b) in out.average.data().iter().zip(smooth.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn reproducible_for_fixed_seed() {
        let v = phantom();
        let a = motion_corrupt_stacks(&v, 3, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = motion_corrupt_stacks(&v, 3, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.average.data(), b.average.data());
        assert_ne!(a.stacks[0].data(), v.data());
    }

    #[test]
    fn translation_beyond_extent_rejected() {
        let v = phantom();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(motion_corrupt_stacks(&v, 3, 16, &mut rng).is_err());
        assert!(motion_corrupt_stacks(&v, 0, 1, &mut rng).is_err());
    }

    #[test]
    fn smoothing_preserves_constants() {
        let v = Volume::new([5, 6, 7], [1.0; 3], vec![0.25; 210], "c").unwrap();
        let s = gaussian_smooth(&v, 1.3).unwrap();
        assert!(s.data().iter().all(|&x| (x - 0.25).abs() < 1e-6));
    }
}
