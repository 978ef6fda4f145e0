use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::volume::{motion_corrupt_stacks, select_context_schedule, Image, SliceStack, Volume};

use super::{condition, cross_correlation, mix_seed, ssim, ssim_volume, GenerationMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub context_counts: Vec<usize>,
    pub n_samples: usize,
    pub mode: GenerationMode,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            context_counts: vec![0, 1, 2, 4],
            n_samples: 32,
            mode: GenerationMode::Average,
            seed: 0,
        }
    }
}

/// Per-slice score, or the per-volume mean when `k` is `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub subject: String,
    pub n_contexts: usize,
    pub k: Option<usize>,
    pub ssim: f64,
    /// NaN where either slice is constant.
    pub cc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    rows: Vec<MetricRow>,
    num_poses: usize,
    context_counts: Vec<usize>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    subject: &'a str,
    n_contexts: usize,
    k: String,
    ssim: f64,
    cc: f64,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn write_rows<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn finite_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn correlation_or_nan(a: &Image, b: &Image) -> Result<f64> {
    match cross_correlation(a.data(), b.data()) {
        Ok(c) => Ok(c),
        Err(Error::UndefinedCorrelation) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

impl MetricsReport {
    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn context_counts(&self) -> &[usize] {
        &self.context_counts
    }

    /// Context indices used for `n` contexts.
    pub fn schedule(&self, n: usize) -> Vec<usize> {
        select_context_schedule(n, self.num_poses)
    }

    /// Per-volume mean rows for `n` contexts.
    pub fn volume_rows(&self, n: usize) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(move |r| r.n_contexts == n && r.k.is_none())
    }

    /// `(ssim, cc)` averaged over subjects.
    pub fn dataset_mean(&self, n: usize) -> (f64, f64) {
        (
            finite_mean(self.volume_rows(n).map(|r| r.ssim)),
            finite_mean(self.volume_rows(n).map(|r| r.cc)),
        )
    }

    /// Per-slice `(ssim, cc)` averaged over subjects.
    pub fn slice_curve(&self, n: usize) -> Vec<(f64, f64)> {
        (0..self.num_poses)
            .map(|k| {
                let rows = || self.rows.iter().filter(move |r| r.n_contexts == n && r.k == Some(k));
                (finite_mean(rows().map(|r| r.ssim)), finite_mean(rows().map(|r| r.cc)))
            })
            .collect()
    }

    /// `subject,n_contexts,k,ssim,cc`; volume means carry `k = mean`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(
            path.as_ref(),
            self.rows.iter().map(|r| CsvRow {
                subject: &r.subject,
                n_contexts: r.n_contexts,
                k: r.k.map_or_else(|| "mean".to_string(), |k| k.to_string()),
                ssim: r.ssim,
                cc: r.cc,
            }),
        )
    }

    /// One row per context count: `n_contexts,contexts,ssim,cc`.
    pub fn write_summary(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            n_contexts: usize,
            contexts: String,
            ssim: f64,
            cc: f64,
        }
        write_rows(
            path.as_ref(),
            self.context_counts.iter().map(|&n| {
                let (ssim, cc) = self.dataset_mean(n);
                let contexts = self
                    .schedule(n)
                    .iter()
                    .map(|k| k.to_string())
                    .collect::<Vec<_>>()
                    .join(" ");
                Row {
                    n_contexts: n,
                    contexts,
                    ssim,
                    cc,
                }
            }),
        )
    }

    /// `curve_{n}.csv` per context count with `k,ssim,cc,context`.
    pub fn write_curves(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        #[derive(Serialize)]
        struct Row {
            k: usize,
            ssim: f64,
            cc: f64,
            context: u8,
        }
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.context_counts
            .iter()
            .map(|&n| {
                let path = dir.join(format!("curve_{n}.csv"));
                let sched = self.schedule(n);
                write_rows(
                    &path,
                    self.slice_curve(n).into_iter().enumerate().map(|(k, (ssim, cc))| Row {
                        k,
                        ssim,
                        cc,
                        context: sched.contains(&k) as u8,
                    }),
                )?;
                Ok(path)
            })
            .collect()
    }
}

fn check_stack(model: &Model<f32>, stack: &SliceStack) -> Result<()> {
    let cfg = &model.config().flow;
    let ok = stack.num_poses() == cfg.num_poses
        && stack
            .slices
            .iter()
            .all(|s| s.image.height() == cfg.height && s.image.width() == cfg.width);
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "subject {} does not match the model's {} slices of {}x{}",
            stack.subject, cfg.num_poses, cfg.height, cfg.width
        )))
    }
}

fn sweep(model: &Model<f32>, stack: &SliceStack, n: usize, opts: &EvalOptions) -> Result<Vec<Image>> {
    let contexts: Vec<_> = select_context_schedule(n, stack.num_poses())
        .into_iter()
        .map(|k| stack.slices[k].clone())
        .collect();
    let cm = condition(model, &contexts)?;
    let seed = mix_seed(opts.seed, &[stack.subject.as_bytes(), &(n as u64).to_le_bytes()]);
    cm.dense_sweep(opts.n_samples, opts.mode, seed)
}

/// Scores dense sweeps against every subject for every context count.
/// Subjects and counts are processed in parallel; rows come back in
/// subject-major, count-minor order regardless of scheduling.
pub fn evaluate_dataset(model: &Model<f32>, stacks: &[SliceStack], opts: &EvalOptions) -> Result<MetricsReport> {
    for s in stacks {
        check_stack(model, s)?;
    }
    let tasks: Vec<(usize, usize)> = (0..stacks.len())
        .flat_map(|i| opts.context_counts.iter().map(move |&n| (i, n)))
        .collect();
    let groups = tasks
        .par_iter()
        .map(|&(i, n)| -> Result<Vec<MetricRow>> {
            let stack = &stacks[i];
            let generated = sweep(model, stack, n, opts)?;
            let mut rows = Vec::with_capacity(generated.len() + 1);
            for (k, (g, t)) in generated.iter().zip(&stack.slices).enumerate() {
                rows.push(MetricRow {
                    subject: stack.subject.clone(),
                    n_contexts: n,
                    k: Some(k),
                    ssim: ssim(g, &t.image)?,
                    cc: correlation_or_nan(g, &t.image)?,
                });
            }
            let summary = MetricRow {
                subject: stack.subject.clone(),
                n_contexts: n,
                k: None,
                ssim: finite_mean(rows.iter().map(|r| r.ssim)),
                cc: finite_mean(rows.iter().map(|r| r.cc)),
            };
            rows.push(summary);
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        rows: groups.into_iter().flatten().collect(),
        num_poses: model.config().num_poses(),
        context_counts: opts.context_counts.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionOptions {
    /// Largest in-plane shift per slice, in voxels.
    pub max_translation: usize,
    pub n_stacks: usize,
    pub n_contexts: usize,
    pub n_samples: usize,
    pub mode: GenerationMode,
    pub slab_fraction: f64,
    pub seed: u64,
}

impl Default for MotionOptions {
    fn default() -> Self {
        Self {
            max_translation: 10,
            n_stacks: 3,
            n_contexts: 4,
            n_samples: 32,
            mode: GenerationMode::Average,
            slab_fraction: 0.75,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MotionRow {
    pub subject: String,
    pub ssim_generated: f64,
    pub ssim_corrupted_average: f64,
    pub cc_generated: f64,
    pub cc_corrupted_average: f64,
}

/// The pose-indexed slab of `vol`, resampled in-plane to the model's image size.
pub fn model_stack(model: &Model<f32>, vol: &Volume, fraction: f64) -> Result<SliceStack> {
    let cfg = &model.config().flow;
    let stack = SliceStack::from_volume(vol, fraction, cfg.num_poses)?;
    if vol.shape()[1] == cfg.height && vol.shape()[2] == cfg.width {
        Ok(stack)
    } else {
        stack.downsampled(cfg.height, cfg.width)
    }
}

/// Dense sweep from a few motion-free slices versus the blurred average of
/// motion-corrupted orthogonal stacks, both scored against the clean slab.
pub fn motion_experiment(model: &Model<f32>, vol: &Volume, opts: &MotionOptions) -> Result<MotionRow> {
    let clean = model_stack(model, vol, opts.slab_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, &[vol.subject().as_bytes(), b"motion"]));
    let corrupted = motion_corrupt_stacks(vol, opts.n_stacks, opts.max_translation, &mut rng)?;
    let corrupted = model_stack(model, &corrupted.average, opts.slab_fraction)?;

    let eval = EvalOptions {
        context_counts: vec![opts.n_contexts],
        n_samples: opts.n_samples,
        mode: opts.mode,
        seed: opts.seed,
    };
    let generated = sweep(model, &clean, opts.n_contexts, &eval)?;
    let spacing = [1.0; 3];
    let truth = clean.to_volume(spacing)?;
    let generated = Volume::from_slices(&generated, spacing, vol.subject())?;
    let corrupted = corrupted.to_volume(spacing)?;
    Ok(MotionRow {
        subject: vol.subject().to_string(),
        ssim_generated: ssim_volume(&generated, &truth)?,
        ssim_corrupted_average: ssim_volume(&corrupted, &truth)?,
        cc_generated: cross_correlation(generated.data(), truth.data())?,
        cc_corrupted_average: cross_correlation(corrupted.data(), truth.data())?,
    })
}

pub fn write_motion_csv(rows: &[MotionRow], path: impl AsRef<Path>) -> Result<()> {
    write_rows(path.as_ref(), rows)
}
