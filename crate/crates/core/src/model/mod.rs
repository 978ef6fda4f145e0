//! Flow plus latent process trained jointly on exchangeable slice sequences.

mod checkpoint;
mod train;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_matching, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use train::{train, validation_sequences, EpochRecord, TrainData};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Flow, FlowConfig, FlowVars};
use crate::numerics::{AdamConfig, Scalar, Tape, Tensor, Var};
use crate::process::{LatentProcess, ProcessKind, ProcessVars};
use crate::volume::SlicePose;

/// Which predictive terms of a sequence enter the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Every position, each conditioned on the ones before it.
    #[default]
    Full,
    /// Only the final position, conditioned on the rest.
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub flow: FlowConfig,
    pub process: ProcessKind,
    /// Slices per training sequence.
    pub sequence_length: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    /// Learning rate for the latent process parameters; `None` uses the
    /// flow's. The process has a handful of parameters per pixel and moves
    /// far more slowly than the flow at the same rate.
    pub process_learning_rate: Option<f64>,
    pub loss: LossMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            flow: FlowConfig::default(),
            process: ProcessKind::default(),
            sequence_length: 5,
            batch_size: 16,
            epochs: 50,
            optimizer: AdamConfig::default(),
            process_learning_rate: None,
            loss: LossMode::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn num_poses(&self) -> usize {
        self.flow.num_poses
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        let (m, k) = (self.sequence_length, self.num_poses());
        if m < 2 || k < m {
            return Err(Error::InvalidArgument(format!(
                "need 2 <= sequence_length <= num_poses (got M={m}, K={k})"
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        for lr in [Some(self.optimizer.learning_rate), self.process_learning_rate]
            .into_iter()
            .flatten()
        {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidArgument(format!("learning rate {lr}")));
            }
        }
        Ok(())
    }

    /// Optimizer settings for the latent process parameters.
    pub fn process_optimizer(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.process_learning_rate.unwrap_or(self.optimizer.learning_rate),
            ..self.optimizer
        }
    }

    /// True when both configs describe the same parameter layout.
    pub fn same_architecture(&self, other: &Self) -> bool {
        self.flow == other.flow && self.process == other.process
    }
}

/// Flow, process and the training history that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    flow: Flow<T>,
    process: LatentProcess<T>,
    history: Vec<EpochRecord>,
}

/// Model parameters recorded on one tape.
pub struct ModelVars {
    pub flow: FlowVars,
    pub process: ProcessVars,
}

impl ModelVars {
    /// Flow leaves followed by process leaves, the order gradients come back in.
    pub fn leaves(&self) -> Vec<Var> {
        let mut v = self.flow.vars().to_vec();
        v.extend_from_slice(self.process.raw());
        v
    }
}

impl<T: Scalar> Model<T> {
    /// Fresh model seeded from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let flow = Flow::new(config.flow.clone(), &mut rng)?;
        let process = LatentProcess::new(config.flow.pixels(), config.process);
        Ok(Self {
            config,
            flow,
            process,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Training knobs that do not touch the parameter layout.
    pub fn set_training(&mut self, config: &ModelConfig) -> Result<()> {
        if !self.config.same_architecture(config) {
            return Err(Error::ConfigMismatch(
                "flow or process settings differ from the model's".into(),
            ));
        }
        config.validate()?;
        self.config = config.clone();
        Ok(())
    }

    pub fn flow(&self) -> &Flow<T> {
        &self.flow
    }

    pub fn flow_mut(&mut self) -> &mut Flow<T> {
        &mut self.flow
    }

    pub fn process(&self) -> &LatentProcess<T> {
        &self.process
    }

    pub fn process_mut(&mut self) -> &mut LatentProcess<T> {
        &mut self.process
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn epochs_trained(&self) -> usize {
        self.history.len()
    }

    /// `(name, tensor)` for every parameter, flow first.
    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.flow.params().iter().chain(self.process.params().iter())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            flow: self.flow.cast(),
            process: self.process.cast(),
            history: self.history.clone(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<ModelVars> {
        Ok(ModelVars {
            flow: self.flow.bind(tape, trainable),
            process: self.process.bind(tape, trainable)?,
        })
    }

    /// Negative sequence log-likelihood recorded on `tape`.
    pub fn sequence_nll_on(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        seq: &[SlicePose],
        mode: LossMode,
    ) -> Result<Var> {
        if seq.is_empty() {
            return Err(Error::InvalidArgument("empty sequence".into()));
        }
        let d = self.config.flow.pixels();
        let mut state = vars.process.init_state(tape);
        let mut total: Option<Var> = None;
        for (m, s) in seq.iter().enumerate() {
            if s.num_poses() != self.config.num_poses() {
                return Err(Error::InvalidArgument(format!(
                    "slice has {} poses, model expects {}",
                    s.num_poses(),
                    self.config.num_poses()
                )));
            }
            let pixels: Vec<T> = s.image.data().iter().map(|&v| T::lit(v as f64)).collect();
            let x = tape.constant(Tensor::new([d], pixels)?);
            let (z, logdet) = self.flow.forward_on(tape, &vars.flow, x, s.index())?;
            if mode == LossMode::Full || m + 1 == seq.len() {
                let lp = vars.process.logpdf(tape, &state, z)?;
                let term = tape.add(lp, logdet)?;
                total = Some(match total {
                    None => term,
                    Some(t) => tape.add(t, term)?,
                });
            }
            vars.process.update(tape, &mut state, z)?;
        }
        tape.neg(total.expect("non-empty sequence"))
    }

    /// Loss of one sequence without gradients.
    ///
    /// Each slice goes through the flow in `T`, independently of its position.
    /// The process recurrence and the running total are then evaluated in
    /// `f64` and rounded once, so reordering the sequence cannot change an
    /// `f32` result by more than the final rounding.
    pub fn sequence_nll(&self, seq: &[SlicePose], mode: LossMode) -> Result<T> {
        if seq.is_empty() {
            return Err(Error::InvalidArgument("empty sequence".into()));
        }
        let d = self.config.flow.pixels();
        let mut tape = Tape::<T>::new();
        let flow_vars = self.flow.bind(&mut tape, false);
        let mut latents = Vec::with_capacity(seq.len());
        for s in seq {
            if s.num_poses() != self.config.num_poses() {
                return Err(Error::InvalidArgument(format!(
                    "slice has {} poses, model expects {}",
                    s.num_poses(),
                    self.config.num_poses()
                )));
            }
            let pixels: Vec<T> = s.image.data().iter().map(|&v| T::lit(v as f64)).collect();
            let x = tape.constant(Tensor::new([d], pixels)?);
            let (z, logdet) = self.flow.forward_on(&mut tape, &flow_vars, x, s.index())?;
            let z = tape.value(z).cast::<f64>();
            let logdet = tape.value(logdet).item().as_f64();
            latents.push((z, logdet));
        }

        let mut wide = Tape::<f64>::new();
        let process = self.process.cast::<f64>().bind(&mut wide, false)?;
        let mut state = process.init_state(&mut wide);
        let mut total = 0.0;
        for (m, (z, logdet)) in latents.into_iter().enumerate() {
            let z = wide.constant(z);
            if mode == LossMode::Full || m + 1 == seq.len() {
                let lp = process.logpdf(&mut wide, &state, z)?;
                total += wide.value(lp).item() + logdet;
            }
            process.update(&mut wide, &mut state, z)?;
        }
        Ok(T::lit(-total))
    }

    /// Loss of one sequence and its gradient, flow parameters first.
    pub fn sequence_nll_grad(&self, seq: &[SlicePose], mode: LossMode) -> Result<(T, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, true)?;
        let loss = self.sequence_nll_on(&mut tape, &vars, seq, mode)?;
        let value = tape.value(loss).item();
        let grads = tape.grad(loss, &vars.leaves())?;
        Ok((value, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;
    use crate::volume::Image;
    use rand::Rng;

    pub(crate) fn tiny_config(h: usize, w: usize, k: usize) -> ModelConfig {
        ModelConfig {
            flow: FlowConfig {
                height: h,
                width: w,
                num_poses: k,
                coupling_layers: 2,
                hidden_channels: 4,
                pose_embedding: 2,
                alpha: 0.05,
            },
            sequence_length: 3,
            batch_size: 2,
            ..ModelConfig::default()
        }
    }

    fn random_sequence(rng: &mut ChaCha8Rng, cfg: &ModelConfig, m: usize) -> Vec<SlicePose> {
        let (h, w, k) = (cfg.flow.height, cfg.flow.width, cfg.num_poses());
        (0..m)
            .map(|_| {
                let img = Image::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
                SlicePose::new(img, rng.random_range(0..k), k).unwrap()
            })
            .collect()
    }

    /// Moves every parameter off its initial value so no term is trivially zero.
    pub(crate) fn scramble<T: Scalar>(model: &mut Model<T>, rng: &mut ChaCha8Rng) {
        for t in model.flow_mut().params_mut().tensors_mut() {
            for v in t.data_mut() {
                *v = *v + T::lit(rng.random_range(-0.3..0.3));
            }
        }
        let names = model.process().params().names().to_vec();
        for (t, name) in model.process_mut().params_mut().tensors_mut().iter_mut().zip(names) {
            for v in t.data_mut() {
                // Near the initial ~1000 degrees of freedom their gradient
                // is too small for finite differences to resolve.
                *v = if name.ends_with("dof_raw") {
                    T::lit(rng.random_range(0.0..5.0))
                } else {
                    *v + T::lit(rng.random_range(-0.5..0.5))
                };
            }
        }
    }

    #[test]
    fn single_entry_is_prior_plus_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = tiny_config(2, 4, 3);
        let mut model = Model::<f64>::new(cfg.clone()).unwrap();
        scramble(&mut model, &mut rng);
        let seq = random_sequence(&mut rng, &cfg, 1);
        let x: Vec<f64> = seq[0].image.data().iter().map(|&v| v as f64).collect();
        let (z, logdet) = model.flow().forward(&x, seq[0].index()).unwrap();
        let params = model.process().constrained().unwrap();
        let prior = crate::process::ProcessState::new(&params)
            .logpdf(cfg.process, &params, &z)
            .unwrap();
        let nll = model.sequence_nll(&seq, LossMode::Full).unwrap();
        assert!((nll + prior + logdet).abs() < 1e-9);
    }

    #[test]
    fn full_loss_equals_flow_plus_telescoped_process_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = tiny_config(2, 4, 3);
        let mut model = Model::<f64>::new(cfg.clone()).unwrap();
        scramble(&mut model, &mut rng);
        let seq = random_sequence(&mut rng, &cfg, 4);
        let params = model.process().constrained().unwrap();
        let mut latents = Vec::new();
        let mut logdets = 0.0;
        for s in &seq {
            let x: Vec<f64> = s.image.data().iter().map(|&v| v as f64).collect();
            let (z, ld) = model.flow().forward(&x, s.index()).unwrap();
            latents.push(z);
            logdets += ld;
        }
        let joint = crate::process::joint_logpdf_oracle(cfg.process, &params, &latents).unwrap();
        let nll = model.sequence_nll(&seq, LossMode::Full).unwrap();
        assert!((nll + joint + logdets).abs() < 1e-8);
    }

    #[test]
    fn last_mode_keeps_only_the_query_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny_config(2, 4, 3);
        let mut model = Model::<f64>::new(cfg.clone()).unwrap();
        scramble(&mut model, &mut rng);
        let seq = random_sequence(&mut rng, &cfg, 3);
        let full = model.sequence_nll(&seq, LossMode::Full).unwrap();
        let head = model.sequence_nll(&seq[..2], LossMode::Full).unwrap();
        let last = model.sequence_nll(&seq, LossMode::Last).unwrap();
        assert!((full - head - last).abs() < 1e-9);
    }

    #[test]
    fn permutation_invariant_in_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = tiny_config(4, 4, 5);
        let mut model = Model::<f64>::new(cfg.clone()).unwrap();
        scramble(&mut model, &mut rng);
        let mut seq = random_sequence(&mut rng, &cfg, 5);
        let a = model.sequence_nll(&seq, LossMode::Full).unwrap();
        seq.reverse();
        seq.swap(1, 3);
        let b = model.sequence_nll(&seq, LossMode::Full).unwrap();
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = tiny_config(2, 4, 3);
        let mut model = Model::<f64>::new(cfg.clone()).unwrap();
        scramble(&mut model, &mut rng);
        let seq = random_sequence(&mut rng, &cfg, 3);
        let mut params: Vec<Tensor<f64>> = model.flow().params().tensors().to_vec();
        params.extend_from_slice(model.process().params().tensors());
        let n_flow = model.flow().params().len();
        let err = finite_difference_check(
            |tape, leaves| {
                let vars = ModelVars {
                    flow: model.flow().vars_from(&leaves[..n_flow])?,
                    process: model.process().from_raw(tape, leaves[n_flow..].to_vec())?,
                };
                model.sequence_nll_on(tape, &vars, &seq, LossMode::Full)
            },
            &params,
            1e-6,
            None,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = tiny_config(2, 4, 3);
        cfg.sequence_length = 1;
        assert!(Model::<f32>::new(cfg.clone()).is_err());
        cfg.sequence_length = 4;
        assert!(Model::<f32>::new(cfg).is_err());
        let mut cfg = tiny_config(2, 4, 3);
        cfg.process_learning_rate = Some(-1.0);
        assert!(Model::<f32>::new(cfg.clone()).is_err());
        cfg.process_learning_rate = Some(0.01);
        assert_eq!(cfg.process_optimizer().learning_rate, 0.01);
        assert_eq!(cfg.process_optimizer().beta2, cfg.optimizer.beta2);
    }
}
