//! Conditioning on context slices, dense pose sweeps and scoring.

mod metrics;
mod pgm;
mod report;

pub use metrics::{cross_correlation, ssim, ssim_volume};
pub use pgm::{write_pgm, write_volume_pgms};
pub use report::{
    evaluate_dataset, model_stack, motion_experiment, write_motion_csv, EvalOptions, MetricRow, MetricsReport,
    MotionOptions, MotionRow,
};

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::process::{Predictive, ProcessParams, ProcessState};
use crate::volume::{Image, SlicePose, Volume};

/// How a query pose is turned into an image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenerationMode {
    /// One draw from the predictive.
    Sample,
    /// Pixel-wise mean of several draws.
    #[default]
    Average,
    /// The predictive location pushed through the inverse flow; a cheap
    /// stand-in for the limit of infinitely many averaged draws.
    MeanLatent,
}

impl FromStr for GenerationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(Self::Sample),
            "average" => Ok(Self::Average),
            "mean-latent" => Ok(Self::MeanLatent),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode {other:?} (expected sample, average or mean-latent)"
            ))),
        }
    }
}

/// Stable 64-bit FNV-1a, used to derive per-query seeds.
pub(crate) fn mix_seed(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A model whose latent process has absorbed a fixed set of context slices.
/// Queries never change the state.
#[derive(Clone, Debug)]
pub struct ConditionedModel<'a> {
    model: &'a Model<f32>,
    params: ProcessParams,
    state: ProcessState,
    contexts: Vec<usize>,
}

/// Maps every context through the flow and folds its latent into the
/// process state. No contexts leaves the prior in place.
pub fn condition<'a>(model: &'a Model<f32>, contexts: &[SlicePose]) -> Result<ConditionedModel<'a>> {
    let params = model.process().constrained()?;
    let mut state = ProcessState::new(&params);
    let mut indices = Vec::with_capacity(contexts.len());
    for c in contexts {
        if c.num_poses() != model.config().num_poses() {
            return Err(Error::InvalidArgument(format!(
                "context has {} poses, model expects {}",
                c.num_poses(),
                model.config().num_poses()
            )));
        }
        if indices.contains(&c.index()) {
            log::warn!("context slice {} supplied more than once", c.index());
        }
        indices.push(c.index());
        let (z, _) = model.flow().forward(c.image.data(), c.index())?;
        let z: Vec<f64> = z.iter().map(|&v| v as f64).collect();
        state.update(&params, &z)?;
    }
    Ok(ConditionedModel {
        model,
        params,
        state,
        contexts: indices,
    })
}

impl ConditionedModel<'_> {
    pub fn contexts(&self) -> &[usize] {
        &self.contexts
    }

    pub fn state(&self) -> &ProcessState {
        &self.state
    }

    pub fn predictive(&self) -> Result<Predictive> {
        self.state.predictive(self.model.config().process, &self.params)
    }

    fn decode(&self, z: &[f64], k: usize) -> Result<Image> {
        let cfg = &self.model.config().flow;
        let z: Vec<f32> = z.iter().map(|&v| v as f32).collect();
        let x = self.model.flow().inverse(&z, k)?;
        Image::new(cfg.height, cfg.width, x)
    }

    /// `n` independent draws at pose `k`.
    pub fn sample_slices(&self, k: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Image>> {
        let kind = self.model.config().process;
        (0..n)
            .map(|_| {
                let z = self.state.sample(kind, &self.params, rng)?;
                self.decode(&z, k)
            })
            .collect()
    }

    pub fn generate_slice(
        &self,
        k: usize,
        n_samples: usize,
        mode: GenerationMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Image> {
        if k >= self.model.config().num_poses() {
            return Err(Error::InvalidArgument(format!(
                "pose {k} outside [0, {})",
                self.model.config().num_poses()
            )));
        }
        match mode {
            GenerationMode::Sample => Ok(self.sample_slices(k, 1, rng)?.remove(0)),
            GenerationMode::MeanLatent => self.decode(&self.predictive()?.loc, k),
            GenerationMode::Average => {
                if n_samples == 0 {
                    return Err(Error::InvalidArgument("average of zero samples".into()));
                }
                let draws = self.sample_slices(k, n_samples, rng)?;
                let mut acc = vec![0.0f64; draws[0].data().len()];
                for d in &draws {
                    for (a, &v) in acc.iter_mut().zip(d.data()) {
                        *a += v as f64;
                    }
                }
                let cfg = &self.model.config().flow;
                let n = n_samples as f64;
                Image::new(cfg.height, cfg.width, acc.iter().map(|a| (a / n) as f32).collect())
            }
        }
    }

    /// Generates every pose `0..K` into a volume. Pose `k` draws from its own
    /// generator seeded by `(seed, k)`, so the result does not depend on the
    /// order poses are visited in.
    pub fn dense_sweep(&self, n_samples: usize, mode: GenerationMode, seed: u64) -> Result<Vec<Image>> {
        (0..self.model.config().num_poses())
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[&(k as u64).to_le_bytes()]));
                self.generate_slice(k, n_samples, mode, &mut rng)
            })
            .collect()
    }

    pub fn dense_volume(
        &self,
        n_samples: usize,
        mode: GenerationMode,
        seed: u64,
        spacing_mm: [f64; 3],
        subject: &str,
    ) -> Result<Volume> {
        Volume::from_slices(&self.dense_sweep(n_samples, mode, seed)?, spacing_mm, subject)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use crate::model::ModelConfig;
    use rand::Rng;

    pub(crate) fn small_model() -> Model<f32> {
        let cfg = ModelConfig {
            flow: FlowConfig {
                height: 4,
                width: 4,
                num_poses: 6,
                coupling_layers: 2,
                hidden_channels: 4,
                pose_embedding: 2,
                alpha: 0.05,
            },
            sequence_length: 3,
            ..ModelConfig::default()
        };
        let mut m = Model::<f32>::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in m.flow_mut().params_mut().tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        // Strong correlation so contexts visibly move the predictive.
        for v in m.process_mut().params_mut().get_mut(2).data_mut() {
            *v = 2.0;
        }
        m
    }

    fn contexts(n: usize, seed: u64) -> Vec<SlicePose> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let img = Image::new(4, 4, (0..16).map(|_| rng.random_range(0.1..0.9)).collect()).unwrap();
                SlicePose::new(img, i % 6, 6).unwrap()
            })
            .collect()
    }

    #[test]
    fn no_contexts_gives_the_prior() {
        let m = small_model();
        let cm = condition(&m, &[]).unwrap();
        let p = m.process().constrained().unwrap();
        let pred = cm.predictive().unwrap();
        assert_eq!(pred.loc, p.loc);
        for (a, b) in pred.scale_sq.iter().zip(&p.var) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn context_order_does_not_matter() {
        let m = small_model();
        let mut ctx = contexts(5, 1);
        let a = condition(&m, &ctx).unwrap().predictive().unwrap();
        ctx.reverse();
        ctx.swap(0, 2);
        let b = condition(&m, &ctx).unwrap().predictive().unwrap();
        for i in 0..16 {
            assert!((a.loc[i] - b.loc[i]).abs() < 1e-6);
            assert!((a.scale_sq[i] - b.scale_sq[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn context_count_may_differ_from_training() {
        let m = small_model();
        assert!(condition(&m, &contexts(1, 2)).is_ok());
        assert!(condition(&m, &contexts(9, 3)).is_ok());
    }

    #[test]
    fn generation_is_seeded_and_stateless() {
        let m = small_model();
        let cm = condition(&m, &contexts(2, 4)).unwrap();
        let before = cm.state().clone();
        let a = cm
            .generate_slice(3, 1, GenerationMode::Sample, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let b = cm
            .generate_slice(3, 1, GenerationMode::Sample, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(cm.state(), &before);
        assert!(cm
            .generate_slice(6, 1, GenerationMode::Sample, &mut ChaCha8Rng::seed_from_u64(9))
            .is_err());
    }

    #[test]
    fn averaging_shrinks_variance() {
        let m = small_model();
        let cm = condition(&m, &contexts(1, 5)).unwrap();
        let spread = |n: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let reps: Vec<Image> = (0..40)
                .map(|_| cm.generate_slice(2, n, GenerationMode::Average, &mut rng).unwrap())
                .collect();
            let mut total = 0.0;
            for p in 0..16 {
                let vals: Vec<f64> = reps.iter().map(|r| r.data()[p] as f64).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                total += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            }
            total
        };
        let (v1, v16) = (spread(1), spread(16));
        // 1/n scaling with generous slack for the finite replicate count.
        assert!(v16 < v1 / 8.0, "{v1} vs {v16}");
    }

    #[test]
    fn sweep_shape_and_modes() {
        let m = small_model();
        let cm = condition(&m, &contexts(2, 6)).unwrap();
        for mode in [
            GenerationMode::Sample,
            GenerationMode::Average,
            GenerationMode::MeanLatent,
        ] {
            let v = cm.dense_volume(4, mode, 1, [1.0; 3], "s").unwrap();
            assert_eq!(v.shape(), [6, 4, 4]);
        }
        let a = cm.dense_sweep(3, GenerationMode::Average, 7).unwrap();
        let b = cm.dense_sweep(3, GenerationMode::Average, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(
            "mean-latent".parse::<GenerationMode>().unwrap(),
            GenerationMode::MeanLatent
        );
        assert!("mean".parse::<GenerationMode>().is_err());
    }
}
