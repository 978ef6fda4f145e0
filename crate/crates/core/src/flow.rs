//! Pose-conditioned affine-coupling flow between slice images and latents.
//!
//! The map is a logit pre-transform followed by a stack of checkerboard
//! affine coupling layers. Each coupling network sees the unchanged half of
//! the image plus a spatially broadcast embedding of the one-hot pose, and
//! emits a scale `s` and shift `t` for the other half. Forward and inverse
//! share the same weights.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub height: usize,
    pub width: usize,
    /// Length `K` of the one-hot pose vector.
    pub num_poses: usize,
    pub coupling_layers: usize,
    pub hidden_channels: usize,
    pub pose_embedding: usize,
    /// Pre-transform margin keeping logits bounded.
    pub alpha: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            num_poses: 24,
            coupling_layers: 6,
            hidden_channels: 32,
            pose_embedding: 8,
            alpha: 0.05,
        }
    }
}

impl FlowConfig {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.pixels();
        if d < 2 || !d.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "image must have an even, non-trivial pixel count (got {}x{})",
                self.height, self.width
            )));
        }
        if self.coupling_layers < 2 {
            return Err(Error::InvalidArgument("need at least two coupling layers".into()));
        }
        if self.num_poses == 0 || self.hidden_channels == 0 || self.pose_embedding == 0 {
            return Err(Error::InvalidArgument(
                "num_poses, hidden_channels and pose_embedding must be positive".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(Error::InvalidArgument(format!("alpha {} not in (0, 0.5)", self.alpha)));
        }
        Ok(())
    }

    /// Checkerboard mask of layer `layer`: 1 for pixels passed through
    /// unchanged, 0 for pixels transformed. Parity alternates per layer.
    pub fn passive_mask(&self, layer: usize) -> Vec<bool> {
        (0..self.pixels())
            .map(|i| (i / self.width + i % self.width + layer).is_multiple_of(2))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct CouplingSlots {
    conv: [(usize, usize); 3],
    gain: usize,
}

/// Parameters of the flow; see the module docs for the architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Flow<T> {
    config: FlowConfig,
    params: ParamSet<T>,
    embed: (usize, usize),
    layers: Vec<CouplingSlots>,
}

/// Flow parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct FlowVars {
    vars: Vec<Var>,
}

impl FlowVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Shared per-call constants and the pose embedding map.
struct Conditioning {
    ones: Var,
    embedding: Var,
    passive: Vec<Var>,
    active: Vec<Var>,
}

impl<T: Scalar> Flow<T> {
    /// Fresh flow: hidden convolutions drawn with variance `1/fan_in`, output
    /// convolutions zero so the coupling stack starts as the identity.
    pub fn new<R: Rng + ?Sized>(config: FlowConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let normal = |shape: Vec<usize>, std: f64, rng: &mut R| {
            Tensor::from_fn(shape, |_| {
                let e: f64 = StandardNormal.sample(rng);
                T::lit(e * std)
            })
        };
        let (k, e, h) = (config.num_poses, config.pose_embedding, config.hidden_channels);
        let embed = (
            params.push("flow.embed.weight", normal(vec![e, k], 1.0, rng)),
            params.push("flow.embed.bias", Tensor::zeros([e, 1])),
        );
        let mut layers = Vec::with_capacity(config.coupling_layers);
        for l in 0..config.coupling_layers {
            let fan1 = (1 + e) * 9;
            let fan2 = h * 9;
            let w1 = params.push(
                format!("flow.coupling.{l}.conv1.weight"),
                normal(vec![h, 1 + e, 3, 3], (1.0 / fan1 as f64).sqrt(), rng),
            );
            let b1 = params.push(format!("flow.coupling.{l}.conv1.bias"), Tensor::zeros([h, 1]));
            let w2 = params.push(
                format!("flow.coupling.{l}.conv2.weight"),
                normal(vec![h, h, 3, 3], (1.0 / fan2 as f64).sqrt(), rng),
            );
            let b2 = params.push(format!("flow.coupling.{l}.conv2.bias"), Tensor::zeros([h, 1]));
            let w3 = params.push(format!("flow.coupling.{l}.conv3.weight"), Tensor::zeros([2, h, 3, 3]));
            let b3 = params.push(format!("flow.coupling.{l}.conv3.bias"), Tensor::zeros([2, 1]));
            let gain = params.push(format!("flow.coupling.{l}.gain"), Tensor::ones([1]));
            layers.push(CouplingSlots {
                conv: [(w1, b1), (w2, b2), (w3, b3)],
                gain,
            });
        }
        Ok(Self {
            config,
            params,
            embed,
            layers,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Flow<U> {
        Flow {
            config: self.config.clone(),
            params: self.params.cast(),
            embed: self.embed,
            layers: self.layers.clone(),
        }
    }

    /// Records parameters on `tape`, as differentiable leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> FlowVars {
        FlowVars {
            vars: if trainable {
                self.params.bind(tape)
            } else {
                self.params.bind_constant(tape)
            },
        }
    }

    /// Wraps parameter leaves already on a tape, in `params()` order.
    pub fn vars_from(&self, vars: &[Var]) -> Result<FlowVars> {
        if vars.len() != self.params.len() {
            return Err(Error::shape(
                "flow bind",
                format!("{} vars for {} parameters", vars.len(), self.params.len()),
            ));
        }
        Ok(FlowVars { vars: vars.to_vec() })
    }

    fn check_pose(&self, k: usize) -> Result<()> {
        if k >= self.config.num_poses {
            return Err(Error::InvalidArgument(format!(
                "pose {k} outside [0, {})",
                self.config.num_poses
            )));
        }
        Ok(())
    }

    fn conditioning(&self, tape: &mut Tape<T>, p: &FlowVars, k: usize) -> Result<Conditioning> {
        self.check_pose(k)?;
        let c = &self.config;
        let d = c.pixels();
        let mut onehot = Tensor::zeros([c.num_poses, 1]);
        onehot.data_mut()[k] = T::one();
        let onehot = tape.constant(onehot);
        let ones = tape.constant(Tensor::ones([1, d]));
        let proj = tape.matmul(p.vars[self.embed.0], onehot)?;
        let proj = tape.add(proj, p.vars[self.embed.1])?;
        let map = tape.matmul(proj, ones)?;
        let embedding = tape.reshape(map, [c.pose_embedding, c.height, c.width])?;
        let mut passive = Vec::with_capacity(self.layers.len());
        let mut active = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let mask = c.passive_mask(l);
            passive.push(tape.constant(Tensor::from_fn([d], |i| if mask[i] { T::one() } else { T::zero() })));
            active.push(tape.constant(Tensor::from_fn([d], |i| if mask[i] { T::zero() } else { T::one() })));
        }
        Ok(Conditioning {
            ones,
            embedding,
            passive,
            active,
        })
    }

    /// Coupling network of layer `l` on the passive half `xa`; returns the
    /// masked `(s, t)` pair, each of length `D`.
    fn coupling(&self, tape: &mut Tape<T>, p: &FlowVars, cond: &Conditioning, l: usize, xa: Var) -> Result<(Var, Var)> {
        let c = &self.config;
        let d = c.pixels();
        let slots = &self.layers[l];
        let img = tape.reshape(xa, [1, c.height, c.width])?;
        let mut h = tape.concat(&[img, cond.embedding])?;
        for (i, &(w, b)) in slots.conv.iter().enumerate() {
            let conv = tape.conv2d(h, p.vars[w], 1, 1)?;
            let filters = tape.shape(conv)[0];
            let bias = tape.matmul(p.vars[b], cond.ones)?;
            let bias = tape.reshape(bias, [filters, c.height, c.width])?;
            h = tape.add(conv, bias)?;
            if i < 2 {
                h = tape.tanh(h);
            }
        }
        let s_raw = tape.slice(h, 0, 1)?;
        let s_raw = tape.reshape(s_raw, [d])?;
        let t = tape.slice(h, 1, 2)?;
        let t = tape.reshape(t, [d])?;
        let s = tape.tanh(s_raw);
        let s = tape.mul(s, p.vars[slots.gain])?;
        let s = tape.mul(s, cond.active[l])?;
        let t = tape.mul(t, cond.active[l])?;
        Ok((s, t))
    }

    /// `y = logit(alpha + (1 - 2 alpha) x)` and its log-determinant.
    pub fn pre_transform_on(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
        let a = T::lit(self.config.alpha);
        let scaled = tape.scale(x, T::one() - a - a)?;
        let u = tape.add_scalar(scaled, a)?;
        let neg_u = tape.neg(u)?;
        let one_minus_u = tape.add_scalar(neg_u, T::one())?;
        let log_u = tape.log(u);
        let log_1mu = tape.log(one_minus_u);
        let y = tape.sub(log_u, log_1mu)?;
        let both = tape.add(log_u, log_1mu)?;
        let per_pixel = tape.neg(both)?;
        let total = tape.sum(per_pixel);
        let n = T::lit(self.config.pixels() as f64);
        let constant = T::lit((1.0 - 2.0 * self.config.alpha).ln()) * n;
        let logdet = tape.add_scalar(total, constant)?;
        Ok((y, logdet))
    }

    /// `z = f(x; v)` with its exact log-determinant, recorded on `tape`.
    pub fn forward_on(&self, tape: &mut Tape<T>, p: &FlowVars, x: Var, k: usize) -> Result<(Var, Var)> {
        if tape.value(x).numel() != self.config.pixels() {
            return Err(Error::shape(
                "flow forward",
                format!("{:?} for {} pixels", tape.shape(x), self.config.pixels()),
            ));
        }
        let x = tape.reshape(x, [self.config.pixels()])?;
        let cond = self.conditioning(tape, p, k)?;
        let (mut y, mut logdet) = self.pre_transform_on(tape, x)?;
        for l in 0..self.layers.len() {
            let xa = tape.mul(y, cond.passive[l])?;
            let (s, t) = self.coupling(tape, p, &cond, l, xa)?;
            let es = tape.exp(s);
            let scaled = tape.mul(y, es)?;
            y = tape.add(scaled, t)?;
            let ls = tape.sum(s);
            logdet = tape.add(logdet, ls)?;
        }
        Ok((y, logdet))
    }

    /// `x = f^{-1}(z; v)` before the final clamp to `[0, 1]`.
    pub fn inverse_on(&self, tape: &mut Tape<T>, p: &FlowVars, z: Var, k: usize) -> Result<Var> {
        if tape.value(z).numel() != self.config.pixels() {
            return Err(Error::shape(
                "flow inverse",
                format!("{:?} for {} pixels", tape.shape(z), self.config.pixels()),
            ));
        }
        let cond = self.conditioning(tape, p, k)?;
        let mut y = tape.reshape(z, [self.config.pixels()])?;
        for l in (0..self.layers.len()).rev() {
            let ya = tape.mul(y, cond.passive[l])?;
            let (s, t) = self.coupling(tape, p, &cond, l, ya)?;
            let shifted = tape.sub(y, t)?;
            let ns = tape.neg(s)?;
            let ens = tape.exp(ns);
            y = tape.mul(shifted, ens)?;
        }
        let a = T::lit(self.config.alpha);
        let u = tape.sigmoid(y);
        let u = tape.add_scalar(u, -a)?;
        tape.scale(u, T::one() / (T::one() - a - a))
    }

    /// Forward map of one image; returns the latent and the log-determinant.
    pub fn forward(&self, x: &[T], k: usize) -> Result<(Vec<T>, T)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(Tensor::new([x.len()], x.to_vec())?);
        let (z, logdet) = self.forward_on(&mut tape, &p, xv, k)?;
        Ok((tape.value(z).data().to_vec(), tape.value(logdet).item()))
    }

    /// Inverse map of one latent, clamped to `[0, 1]`.
    pub fn inverse(&self, z: &[T], k: usize) -> Result<Vec<T>> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow inverse input"));
        }
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let zv = tape.constant(Tensor::new([z.len()], z.to_vec())?);
        let x = self.inverse_on(&mut tape, &p, zv, k)?;
        let x = tape.value(x).data();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow("flow inverse"));
        }
        Ok(x.iter().map(|v| v.max(T::zero()).min(T::one())).collect())
    }

    /// Pre-transform alone, outside a tape.
    pub fn pre_transform(&self, x: &[T]) -> Result<(Vec<T>, T)> {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new([x.len()], x.to_vec())?);
        let (y, logdet) = self.pre_transform_on(&mut tape, xv)?;
        Ok((tape.value(y).data().to_vec(), tape.value(logdet).item()))
    }
}
