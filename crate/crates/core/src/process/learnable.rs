//! Trainable process parameters and the differentiable predictive density.

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Scalar, Tape, Tensor, Var};

use super::{ProcessKind, ProcessParams};

const VAR_FLOOR: f64 = 1e-6;
const INIT_VAR: f64 = 1.0;
const INIT_COV_FRACTION: f64 = 0.1;
const INIT_DOF: f64 = 1000.0;

const LOC: usize = 0;
const VAR_RAW: usize = 1;
const COV_RAW: usize = 2;
const DOF_RAW: usize = 3;

/// Unconstrained per-dimension parameters: `var = softplus(a) + 1e-6`,
/// `cov = var * sigmoid(b)`, `dof = 2 + softplus(c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentProcess<T> {
    kind: ProcessKind,
    params: ParamSet<T>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softplus_inv(y: f64) -> f64 {
    // log(exp(y) - 1), written to stay finite for large y.
    y + (-(-y).exp_m1()).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<T: Scalar> LatentProcess<T> {
    /// Starts at mean 0, variance 1, covariance 0.1 and about 1000 degrees
    /// of freedom, close to a standard normal prior.
    pub fn new(dim: usize, kind: ProcessKind) -> Self {
        let mut params = ParamSet::default();
        let fill = |v: f64| Tensor::full([dim], T::lit(v));
        params.push("process.loc", fill(0.0));
        params.push("process.var_raw", fill(softplus_inv(INIT_VAR - VAR_FLOOR)));
        params.push(
            "process.cov_raw",
            fill((INIT_COV_FRACTION / (1.0 - INIT_COV_FRACTION)).ln()),
        );
        params.push("process.dof_raw", fill(softplus_inv(INIT_DOF - 2.0)));
        Self { kind, params }
    }

    pub fn kind(&self) -> ProcessKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.params.get(LOC).numel()
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> LatentProcess<U> {
        LatentProcess {
            kind: self.kind,
            params: self.params.cast(),
        }
    }

    /// Constrained values in 64-bit.
    pub fn constrained(&self) -> Result<ProcessParams> {
        let get = |slot: usize| -> Vec<f64> { self.params.get(slot).data().iter().map(|v| v.as_f64()).collect() };
        let loc = get(LOC);
        let var: Vec<f64> = get(VAR_RAW).iter().map(|&a| softplus(a) + VAR_FLOOR).collect();
        let b = get(COV_RAW);
        let cov = var.iter().zip(&b).map(|(v, &b)| v * sigmoid(b)).collect();
        let gap = var.iter().zip(&b).map(|(v, &b)| v * sigmoid(-b)).collect();
        let dof = get(DOF_RAW).iter().map(|&c| 2.0 + softplus(c)).collect();
        let p = ProcessParams {
            loc,
            var,
            cov,
            gap,
            dof,
        };
        p.validate()?;
        Ok(p)
    }

    /// Records the constrained parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<ProcessVars> {
        let raw = if trainable {
            self.params.bind(tape)
        } else {
            self.params.bind_constant(tape)
        };
        self.from_raw(tape, raw)
    }

    /// Constrained values computed from raw leaves already on `tape`.
    pub fn from_raw(&self, tape: &mut Tape<T>, raw: Vec<Var>) -> Result<ProcessVars> {
        if raw.len() != self.params.len() {
            return Err(Error::shape("process bind", "expected four raw parameters"));
        }
        let sp = tape.softplus(raw[VAR_RAW]);
        let var = tape.add_scalar(sp, T::lit(VAR_FLOOR))?;
        let sb = tape.sigmoid(raw[COV_RAW]);
        let cov = tape.mul(var, sb)?;
        let nb = tape.neg(raw[COV_RAW])?;
        let snb = tape.sigmoid(nb);
        let gap = tape.mul(var, snb)?;
        let spc = tape.softplus(raw[DOF_RAW]);
        let dof = tape.add_scalar(spc, T::lit(2.0))?;
        Ok(ProcessVars {
            kind: self.kind,
            dim: self.dim(),
            loc: raw[LOC],
            raw,
            cov,
            gap,
            dof,
        })
    }
}

/// Constrained process parameters on a tape.
#[derive(Clone, Debug)]
pub struct ProcessVars {
    kind: ProcessKind,
    dim: usize,
    raw: Vec<Var>,
    loc: Var,
    cov: Var,
    gap: Var,
    dof: Var,
}

/// Sufficient statistics recorded on a tape.
#[derive(Clone, Debug)]
pub struct TapeState {
    count: usize,
    sum: Var,
    sum_sq: Var,
}

impl TapeState {
    pub fn count(&self) -> usize {
        self.count
    }
}

/// `lgamma(y + 1/2) - lgamma(y)` for `y > 0`: shift up by eight, then the
/// asymptotic series.
pub(crate) fn log_gamma_half_ratio<T: Scalar>(tape: &mut Tape<T>, y: Var) -> Result<Var> {
    const SHIFT: usize = 8;
    let mut correction: Option<Var> = None;
    for j in 0..SHIFT {
        // log(y + j + 1/2) - log(y + j), without the cancellation.
        let b = tape.add_scalar(y, T::lit(j as f64))?;
        let r = tape.recip(b)?;
        let r = tape.scale(r, T::lit(0.5))?;
        let d = tape.log1p(r);
        correction = Some(match correction {
            None => d,
            Some(c) => tape.add(c, d)?,
        });
    }
    let w = tape.add_scalar(y, T::lit(SHIFT as f64))?;
    let lw = tape.log(w);
    let mut series = tape.scale(lw, T::lit(0.5))?;
    for (power, coef) in [
        (1.0, -1.0 / 8.0),
        (3.0, 1.0 / 192.0),
        (5.0, -1.0 / 640.0),
        (7.0, 17.0 / 14336.0),
    ] {
        let e = tape.scale(lw, T::lit(-power))?;
        let inv = tape.exp(e);
        let term = tape.scale(inv, T::lit(coef))?;
        series = tape.add(series, term)?;
    }
    match correction {
        Some(c) => tape.sub(series, c),
        None => Ok(series),
    }
}

impl ProcessVars {
    pub fn raw(&self) -> &[Var] {
        &self.raw
    }

    pub fn kind(&self) -> ProcessKind {
        self.kind
    }

    pub fn init_state<T: Scalar>(&self, tape: &mut Tape<T>) -> TapeState {
        TapeState {
            count: 0,
            sum: tape.constant(Tensor::zeros([self.dim])),
            sum_sq: tape.constant(Tensor::zeros([self.dim])),
        }
    }

    fn check<T: Scalar>(&self, tape: &Tape<T>, z: Var) -> Result<()> {
        if tape.shape(z) != [self.dim] {
            return Err(Error::shape(
                "process",
                format!("latent {:?} for {} dims", tape.shape(z), self.dim),
            ));
        }
        Ok(())
    }

    pub fn update<T: Scalar>(&self, tape: &mut Tape<T>, state: &mut TapeState, z: Var) -> Result<()> {
        self.check(tape, z)?;
        let e = tape.sub(z, self.loc)?;
        state.sum = tape.add(state.sum, e)?;
        let e2 = tape.square(e)?;
        state.sum_sq = tape.add(state.sum_sq, e2)?;
        state.count += 1;
        Ok(())
    }

    /// Predictive log density of `z`, summed over dimensions.
    pub fn logpdf<T: Scalar>(&self, tape: &mut Tape<T>, state: &TapeState, z: Var) -> Result<Var> {
        self.check(tape, z)?;
        let n = state.count as f64;
        let pi = std::f64::consts::PI;

        let n_cov = tape.scale(self.cov, T::lit(n))?;
        let denom = tape.add(self.gap, n_cov)?;
        let weight = tape.div(self.cov, denom)?;
        let shift = tape.mul(weight, state.sum)?;
        let loc = tape.add(self.loc, shift)?;
        let n1_cov = tape.scale(self.cov, T::lit(n + 1.0))?;
        let numer = tape.add(self.gap, n1_cov)?;
        let ratio = tape.div(numer, denom)?;
        let gauss = tape.mul(self.gap, ratio)?;
        let resid = tape.sub(z, loc)?;
        let r2 = tape.square(resid)?;

        let per_dim = match self.kind {
            ProcessKind::Gaussian => {
                let lg = tape.log(gauss);
                let lg = tape.add_scalar(lg, T::lit((2.0 * pi).ln()))?;
                let quad = tape.div(r2, gauss)?;
                let both = tape.add(lg, quad)?;
                tape.scale(both, T::lit(-0.5))?
            }
            ProcessKind::StudentT => {
                let s2 = tape.square(state.sum)?;
                let ws2 = tape.mul(weight, s2)?;
                let qs = tape.sub(state.sum_sq, ws2)?;
                let q = tape.div(qs, self.gap)?;
                let dof_n = tape.add_scalar(self.dof, T::lit(n))?;
                let dof_q = tape.add(self.dof, q)?;
                let infl = tape.div(dof_q, dof_n)?;
                let scale_sq = tape.mul(infl, gauss)?;

                let half = tape.scale(dof_n, T::lit(0.5))?;
                let lgr = log_gamma_half_ratio(tape, half)?;
                let ns = tape.mul(dof_n, scale_sq)?;
                let lns = tape.log(ns);
                let norm = tape.add_scalar(lns, T::lit(pi.ln()))?;
                let norm = tape.scale(norm, T::lit(0.5))?;
                let x = tape.div(r2, ns)?;
                let lx = tape.log1p(x);
                let expo = tape.add_scalar(half, T::lit(0.5))?;
                let tail = tape.mul(expo, lx)?;
                let head = tape.sub(lgr, norm)?;
                tape.sub(head, tail)?
            }
        };
        Ok(tape.sum(per_dim))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;
    use crate::process::ProcessState;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::function::gamma::ln_gamma;

    #[test]
    fn initial_values() {
        let p = LatentProcess::<f64>::new(3, ProcessKind::StudentT)
            .constrained()
            .unwrap();
        for i in 0..3 {
            assert_eq!(p.loc[i], 0.0);
            assert!((p.var[i] - 1.0).abs() < 1e-12);
            assert!((p.cov[i] - 0.1).abs() < 1e-12);
            assert!((p.dof[i] - 1000.0).abs() < 1e-9);
        }
    }

    #[test]
    fn half_ratio_matches_lgamma() {
        for y in [1.0, 1.5, 3.7, 12.0, 500.0] {
            let mut tape = Tape::<f64>::new();
            let v = tape.constant(Tensor::scalar(y));
            let r = log_gamma_half_ratio(&mut tape, v).unwrap();
            let expect = ln_gamma(y + 0.5) - ln_gamma(y);
            assert!((tape.value(r).item() - expect).abs() < 1e-10, "y={y}");
        }
        // lgamma itself loses digits here; compare with the leading terms.
        let y = 5e5;
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::scalar(y));
        let r = log_gamma_half_ratio(&mut tape, v).unwrap();
        assert!((tape.value(r).item() - (0.5 * y.ln() - 0.125 / y)).abs() < 1e-14);
    }

    fn perturbed(kind: ProcessKind, dim: usize, rng: &mut ChaCha8Rng) -> LatentProcess<f64> {
        let mut p = LatentProcess::<f64>::new(dim, kind);
        for t in p.params_mut().tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-1.0..1.0);
            }
        }
        // Keep the degrees of freedom moderate so the t shape matters.
        for v in p.params_mut().get_mut(DOF_RAW).data_mut() {
            *v = rng.random_range(0.0..8.0);
        }
        p
    }

    #[test]
    fn tape_density_matches_plain_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [ProcessKind::Gaussian, ProcessKind::StudentT] {
            let lp = perturbed(kind, 4, &mut rng);
            let plain = lp.constrained().unwrap();
            let obs: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let mut tape = Tape::new();
            let vars = lp.bind(&mut tape, false).unwrap();
            let mut ts = vars.init_state(&mut tape);
            let mut ps = ProcessState::new(&plain);
            for z in &obs {
                let zv = tape.constant(Tensor::new([4], z.clone()).unwrap());
                let a = vars.logpdf(&mut tape, &ts, zv).unwrap();
                let b = ps.logpdf(kind, &plain, z).unwrap();
                assert!((tape.value(a).item() - b).abs() < 1e-9, "{kind:?}");
                vars.update(&mut tape, &mut ts, zv).unwrap();
                ps.update(&plain, z).unwrap();
            }
        }
    }

    #[test]
    fn density_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in [ProcessKind::Gaussian, ProcessKind::StudentT] {
            let lp = perturbed(kind, 3, &mut rng);
            let obs: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let err = finite_difference_check(
                |tape, params| {
                    let vars = lp.from_raw(tape, params.to_vec())?;
                    let mut st = vars.init_state(tape);
                    let mut total: Option<Var> = None;
                    for z in &obs {
                        let zv = tape.constant(Tensor::new([3], z.clone())?);
                        let l = vars.logpdf(tape, &st, zv)?;
                        total = Some(match total {
                            None => l,
                            Some(t) => tape.add(t, l)?,
                        });
                        vars.update(tape, &mut st, zv)?;
                    }
                    Ok(total.unwrap())
                },
                lp.params().tensors(),
                1e-6,
                None,
            )
            .unwrap();
            assert!(err < 1e-6, "{kind:?}: {err}");
        }
    }

    proptest! {
        #[test]
        fn constraints_hold_for_any_raw_values(
            a in -30.0f64..30.0, b in -30.0f64..30.0, c in -30.0f64..30.0, m in -10.0f64..10.0
        ) {
            let mut lp = LatentProcess::<f64>::new(1, ProcessKind::StudentT);
            for (slot, v) in [(LOC, m), (VAR_RAW, a), (COV_RAW, b), (DOF_RAW, c)] {
                lp.params_mut().get_mut(slot).data_mut()[0] = v;
            }
            let p = lp.constrained().unwrap();
            prop_assert!(p.cov[0] >= 0.0 && p.cov[0] < p.var[0]);
            prop_assert!(p.gap[0] > 0.0);
            prop_assert!(p.dof[0] > 2.0);
        }
    }
}
