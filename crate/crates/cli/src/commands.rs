use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use slicemap::eval::{
    condition, evaluate_dataset, model_stack, motion_experiment, write_motion_csv, write_volume_pgms, MotionOptions,
};
use slicemap::model::{
    load_checkpoint, load_checkpoint_matching, save_checkpoint, train as train_model, validation_sequences, Model,
    TrainData,
};
use slicemap::volume::{generate_phantom, load_volume, save_volume, SliceStack, Volume};
use slicemap::Error;

use crate::config::RunConfig;
use crate::{EvalArgs, GenerateArgs, PhantomArgs, TrainArgs, UsageError};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const CONFIG_FILE: &str = "config.json";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Every `.vol` in `dir`, in file-name order.
fn load_dir(dir: &Path) -> Result<Vec<Volume>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading data directory {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .with_context(|| format!("listing {}", dir.display()))?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "vol"));
    paths.sort();
    if paths.is_empty() {
        bail!("no .vol files in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| load_volume(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn stacks(model: &Model<f32>, vols: &[Volume], fraction: f64) -> Result<Vec<SliceStack>> {
    Ok(vols
        .iter()
        .map(|v| model_stack(model, v, fraction))
        .collect::<slicemap::Result<_>>()?)
}

pub fn phantom(config: RunConfig, args: PhantomArgs) -> Result<()> {
    let mut spec = config.phantom;
    if let Some(shape) = args.shape {
        spec.shape = shape;
    }
    let base = args.seed.unwrap_or(spec.seed);
    spec.validate()?;
    create_dir(&args.out)?;
    (0..args.count).into_par_iter().try_for_each(|i| -> Result<()> {
        let vol = generate_phantom(&spec.clone().with_seed(base + i as u64))?;
        save_volume(&vol, args.out.join(format!("phantom_{i:04}.vol")))?;
        Ok(())
    })?;
    log::info!("wrote {} phantoms to {}", args.count, args.out.display());
    Ok(())
}

fn write_loss_csv(model: &Model<f32>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in model.history() {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn save_run(model: &Model<f32>, config: &RunConfig, out: &Path) -> Result<()> {
    save_checkpoint(model, out.join(CHECKPOINT_FILE))?;
    write_loss_csv(model, &out.join(LOSS_FILE))?;
    fs::write(out.join(CONFIG_FILE), config.to_json()).context("writing config")?;
    Ok(())
}

pub fn train(mut config: RunConfig, from_file: bool, args: TrainArgs) -> Result<()> {
    let resumed = match &args.resume {
        Some(path) => {
            let model = if from_file {
                load_checkpoint_matching(path, &config.model)?
            } else {
                let model = load_checkpoint(path)?;
                config.model = model.config().clone();
                model
            };
            Some(model)
        }
        None => None,
    };
    let m = &mut config.model;
    if let Some(e) = args.epochs {
        m.epochs = e;
    }
    if let Some(lr) = args.lr {
        m.optimizer.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        m.batch_size = b;
    }
    if let Some(s) = args.seed {
        m.seed = s;
    }
    if let Some(d) = args.data {
        config.data.train = Some(d);
    }
    let Some(dir) = config.data.train.clone() else {
        return Err(usage("no training data (use --data or data.train in the config)"));
    };
    if !(0.0..1.0).contains(&config.data.validation_fraction) {
        return Err(usage("data.validation_fraction must be in [0, 1)"));
    }

    let mut model = match resumed {
        Some(mut model) => {
            model.set_training(&config.model)?;
            model
        }
        None => Model::new(config.model.clone())?,
    };
    let vols = load_dir(&dir)?;
    let all = stacks(&model, &vols, config.data.slab_fraction)?;
    let n_val = (all.len() as f64 * config.data.validation_fraction).round() as usize;
    let (train_stacks, val_stacks) = all.split_at(all.len() - n_val);
    let data = TrainData {
        train: train_stacks.to_vec(),
        validation: validation_sequences(val_stacks, config.model.sequence_length, config.data.validation_seed)?,
    };
    log::info!(
        "training on {} volumes ({} held out) from epoch {} to {}",
        data.train.len(),
        n_val,
        model.epochs_trained(),
        config.model.epochs
    );

    create_dir(&args.out)?;
    let result = train_model(&mut model, &data, |r| match r.val_nll {
        Some(v) => log::info!("epoch {} train {:.4} validation {:.4}", r.epoch, r.train_nll, v),
        None => log::info!("epoch {} train {:.4}", r.epoch, r.train_nll),
    });
    // On divergence the model holds the last completed epoch; keep it.
    save_run(&model, &config, &args.out)?;
    if let Err(e @ Error::Divergence { .. }) = &result {
        log::error!(
            "saved the checkpoint from epoch {} to {}",
            model.epochs_trained(),
            args.out.join(CHECKPOINT_FILE).display()
        );
        bail!("{e}");
    }
    result?;
    log::info!("wrote {}", args.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

pub fn generate(config: RunConfig, args: GenerateArgs) -> Result<()> {
    let model = load_checkpoint(&args.model)?;
    let k = model.config().num_poses();
    let contexts = &args.contexts.0;
    if let Some(&bad) = contexts.iter().find(|&&c| c >= k) {
        return Err(usage(format!("context index {bad} outside [0, {k})")));
    }
    let subject = match &args.subject {
        Some(p) => Some(load_volume(p).with_context(|| format!("loading {}", p.display()))?),
        None if contexts.is_empty() => None,
        None => return Err(usage("--contexts needs --subject to take slices from")),
    };
    let ctx = match &subject {
        Some(vol) => {
            let stack = model_stack(&model, vol, config.data.slab_fraction)?;
            contexts.iter().map(|&c| stack.slices[c].clone()).collect()
        }
        None => Vec::new(),
    };
    let cm = condition(&model, &ctx)?;
    let (spacing, name) = match &subject {
        Some(v) => (v.spacing_mm(), format!("{}-generated", v.subject())),
        None => ([1.0; 3], "prior".to_string()),
    };
    let vol = cm.dense_volume(
        args.samples.unwrap_or(config.eval.n_samples),
        args.mode.unwrap_or(config.eval.mode),
        args.seed.unwrap_or(config.eval.seed),
        spacing,
        &name,
    )?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_volume(&vol, &args.out)?;
    if let Some(dir) = &args.pgm {
        write_volume_pgms(&vol, dir, "slice")?;
    }
    log::info!("wrote {}", args.out.display());
    Ok(())
}

pub fn eval(mut config: RunConfig, args: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&args.model)?;
    let opts = &mut config.eval;
    if let Some(c) = args.context_counts {
        opts.context_counts = c.0;
    }
    if let Some(n) = args.samples {
        opts.n_samples = n;
    }
    if let Some(m) = args.mode {
        opts.mode = m;
    }
    if let Some(s) = args.seed {
        opts.seed = s;
    }
    let k = model.config().num_poses();
    if let Some(&bad) = opts.context_counts.iter().find(|&&c| c > k) {
        return Err(usage(format!("context count {bad} exceeds the {k} poses")));
    }
    if let Some(d) = args.data {
        config.data.test = Some(d);
    }
    let Some(dir) = config.data.test.clone() else {
        return Err(usage("no test data (use --data or data.test in the config)"));
    };
    let vols = load_dir(&dir)?;
    let test = stacks(&model, &vols, config.data.slab_fraction)?;

    let report = evaluate_dataset(&model, &test, &config.eval)?;
    create_dir(&args.report)?;
    report.write_csv(args.report.join("metrics.csv"))?;
    report.write_summary(args.report.join("summary.csv"))?;
    report.write_curves(args.report.join("curves"))?;
    for &n in report.context_counts() {
        let (s, c) = report.dataset_mean(n);
        println!("contexts {n}: ssim {s:.4} cc {c:.4}");
    }

    if let Some(t) = args.motion {
        let mopts = MotionOptions {
            max_translation: t,
            n_samples: config.eval.n_samples,
            mode: config.eval.mode,
            seed: config.eval.seed,
            slab_fraction: config.data.slab_fraction,
            ..config.motion.clone()
        };
        let rows = vols
            .par_iter()
            .map(|v| motion_experiment(&model, v, &mopts))
            .collect::<slicemap::Result<Vec<_>>>()?;
        write_motion_csv(&rows, args.report.join("motion.csv"))?;
        let wins = rows
            .iter()
            .filter(|r| r.ssim_generated > r.ssim_corrupted_average)
            .count();
        println!(
            "motion {t}: generated beats corrupted average on {wins}/{} subjects",
            rows.len()
        );
    }
    log::info!("wrote reports to {}", args.report.display());
    Ok(())
}
