//! Exchangeable latent process, independent per latent dimension.
//!
//! Every dimension carries a compound-symmetric covariance: variance `v` on
//! the diagonal and covariance `rho` everywhere else. Conditioning on `n`
//! observations only needs the count, the sum and the sum of squares of the
//! centred observations, so updates and predictions are O(1) per dimension.

mod learnable;
mod oracle;

pub use learnable::{LatentProcess, ProcessVars, TapeState};
pub use oracle::{joint_logpdf_oracle, oracle_conditioning};

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProcessKind {
    Gaussian,
    #[default]
    StudentT,
}

/// Constrained per-dimension parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessParams {
    pub loc: Vec<f64>,
    pub var: Vec<f64>,
    pub cov: Vec<f64>,
    /// `var - cov`, kept separately so it stays exact when `cov` is close to `var`.
    pub gap: Vec<f64>,
    pub dof: Vec<f64>,
}

impl ProcessParams {
    pub fn new(loc: Vec<f64>, var: Vec<f64>, cov: Vec<f64>, dof: Vec<f64>) -> Result<Self> {
        let gap = var.iter().zip(&cov).map(|(v, c)| v - c).collect();
        let p = Self {
            loc,
            var,
            cov,
            gap,
            dof,
        };
        p.validate()?;
        Ok(p)
    }

    /// Same values in every dimension.
    pub fn uniform(dim: usize, loc: f64, var: f64, cov: f64, dof: f64) -> Result<Self> {
        Self::new(vec![loc; dim], vec![var; dim], vec![cov; dim], vec![dof; dim])
    }

    pub fn dim(&self) -> usize {
        self.loc.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if [self.var.len(), self.cov.len(), self.gap.len(), self.dof.len()]
            .iter()
            .any(|&n| n != d)
        {
            return Err(Error::shape("process params", "per-dimension lengths differ"));
        }
        for i in 0..d {
            let (v, c) = (self.var[i], self.cov[i]);
            if !(v > 0.0 && c >= 0.0 && self.gap[i] > 0.0 && c < v && self.loc[i].is_finite()) {
                return Err(Error::InvalidProcessParams { dim: i, var: v, cov: c });
            }
            if self.dof[i].is_nan() || self.dof[i] <= 2.0 {
                return Err(Error::InvalidArgument(format!(
                    "dof {} in dimension {i} must exceed 2",
                    self.dof[i]
                )));
            }
        }
        Ok(())
    }
}

/// Sufficient statistics of the observations seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessState {
    count: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

/// Per-dimension predictive location, squared scale and degrees of freedom
/// (infinite in Gaussian mode).
#[derive(Clone, Debug, PartialEq)]
pub struct Predictive {
    pub loc: Vec<f64>,
    pub scale_sq: Vec<f64>,
    pub dof: Vec<f64>,
}

impl ProcessState {
    pub fn new(params: &ProcessParams) -> Self {
        let d = params.dim();
        Self {
            count: 0,
            sum: vec![0.0; d],
            sum_sq: vec![0.0; d],
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn sum(&self) -> &[f64] {
        &self.sum
    }

    pub fn sum_sq(&self) -> &[f64] {
        &self.sum_sq
    }

    pub fn update(&mut self, params: &ProcessParams, z: &[f64]) -> Result<()> {
        if z.len() != self.sum.len() {
            return Err(Error::shape(
                "process update",
                format!("latent of length {} for {} dims", z.len(), self.sum.len()),
            ));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("process update"));
        }
        for (i, &zi) in z.iter().enumerate() {
            let e = zi - params.loc[i];
            self.sum[i] += e;
            self.sum_sq[i] += e * e;
        }
        self.count += 1;
        Ok(())
    }

    pub fn predictive(&self, kind: ProcessKind, params: &ProcessParams) -> Result<Predictive> {
        params.validate()?;
        let d = params.dim();
        if self.sum.len() != d {
            return Err(Error::shape("process predictive", "state and params differ in size"));
        }
        let n = self.count as f64;
        let mut out = Predictive {
            loc: Vec::with_capacity(d),
            scale_sq: Vec::with_capacity(d),
            dof: Vec::with_capacity(d),
        };
        for i in 0..d {
            let (rho, gap) = (params.cov[i], params.gap[i]);
            let denom = gap + n * rho;
            let c = rho / denom;
            let s = self.sum[i];
            out.loc.push(params.loc[i] + c * s);
            let gauss = gap * (gap + (n + 1.0) * rho) / denom;
            match kind {
                ProcessKind::Gaussian => {
                    out.scale_sq.push(gauss);
                    out.dof.push(f64::INFINITY);
                }
                ProcessKind::StudentT => {
                    let nu = params.dof[i];
                    let q = ((self.sum_sq[i] - c * s * s) / gap).max(0.0);
                    out.scale_sq.push((nu + q) / (nu + n) * gauss);
                    out.dof.push(nu + n);
                }
            }
        }
        Ok(out)
    }

    /// Log density of `z` under the current predictive, summed over dimensions.
    pub fn logpdf(&self, kind: ProcessKind, params: &ProcessParams, z: &[f64]) -> Result<f64> {
        let pred = self.predictive(kind, params)?;
        if z.len() != pred.loc.len() {
            return Err(Error::shape("process logpdf", "latent length"));
        }
        let total: f64 = (0..z.len())
            .map(|i| univariate_logpdf(z[i], pred.loc[i], pred.scale_sq[i], pred.dof[i]))
            .sum();
        if !total.is_finite() {
            return Err(Error::NonFinite("process logpdf"));
        }
        Ok(total)
    }

    /// One draw from the predictive; never modifies the state.
    pub fn sample<R: Rng + ?Sized>(&self, kind: ProcessKind, params: &ProcessParams, rng: &mut R) -> Result<Vec<f64>> {
        let pred = self.predictive(kind, params)?;
        let mut z = Vec::with_capacity(pred.loc.len());
        for i in 0..pred.loc.len() {
            let eps: f64 = StandardNormal.sample(rng);
            let draw = if pred.dof[i].is_finite() {
                let chi = ChiSquared::new(pred.dof[i])
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?
                    .sample(rng);
                eps / (chi / pred.dof[i]).sqrt()
            } else {
                eps
            };
            z.push(pred.loc[i] + pred.scale_sq[i].sqrt() * draw);
        }
        Ok(z)
    }
}

/// Gaussian (`dof` infinite) or location-scale Student-t log density.
pub(crate) fn univariate_logpdf(z: f64, loc: f64, scale_sq: f64, dof: f64) -> f64 {
    let r2 = (z - loc) * (z - loc);
    if dof.is_infinite() {
        -0.5 * (2.0 * std::f64::consts::PI * scale_sq).ln() - 0.5 * r2 / scale_sq
    } else {
        ln_gamma(0.5 * (dof + 1.0))
            - ln_gamma(0.5 * dof)
            - 0.5 * (dof * std::f64::consts::PI * scale_sq).ln()
            - 0.5 * (dof + 1.0) * (r2 / (dof * scale_sq)).ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, d: usize) -> ProcessParams {
        let loc = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..3.0)).collect();
        let cov = var.iter().map(|v| v * rng.random_range(0.0..0.95)).collect();
        let dof = (0..d).map(|_| rng.random_range(2.5..30.0)).collect();
        ProcessParams::new(loc, var, cov, dof).unwrap()
    }

    fn observations(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect()
    }

    fn state_after(p: &ProcessParams, obs: &[Vec<f64>]) -> ProcessState {
        let mut s = ProcessState::new(p);
        for z in obs {
            s.update(p, z).unwrap();
        }
        s
    }

    #[test]
    fn two_by_two_by_hand() {
        let p = ProcessParams::uniform(1, 0.0, 1.0, 0.5, 5.0).unwrap();
        let s = state_after(&p, &[vec![1.0]]);
        let g = s.predictive(ProcessKind::Gaussian, &p).unwrap();
        assert!((g.loc[0] - 0.5).abs() < 1e-15);
        assert!((g.scale_sq[0] - 0.75).abs() < 1e-15);
        let o = oracle_conditioning(ProcessKind::Gaussian, &p, &[vec![1.0]]).unwrap();
        assert!((o.loc[0] - 0.5).abs() < 1e-12 && (o.scale_sq[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn prior_and_independence() {
        let p = ProcessParams::uniform(3, 0.2, 1.5, 0.0, 7.0).unwrap();
        let init = ProcessState::new(&p);
        let t = init.predictive(ProcessKind::StudentT, &p).unwrap();
        assert_eq!(t.loc, p.loc);
        assert_eq!(t.scale_sq, p.var);
        assert_eq!(t.dof, p.dof);
        let s = state_after(&p, &[vec![1.0, -2.0, 0.3], vec![0.0, 4.0, 1.0]]);
        let g = s.predictive(ProcessKind::Gaussian, &p).unwrap();
        assert_eq!(g.loc, p.loc);
        for (a, b) in g.scale_sq.iter().zip(&p.var) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn observing_the_mean_leaves_sums_unchanged() {
        let p = ProcessParams::uniform(2, 0.0, 1.0, 0.3, 5.0).unwrap();
        let s = state_after(&p, &[vec![0.0, 0.0]]);
        assert_eq!(s.sum(), &[0.0, 0.0]);
        assert_eq!(s.sum_sq(), &[0.0, 0.0]);
        assert_eq!(s.count(), 1);
    }

    #[test]
    fn standard_normal_at_zero() {
        let p = ProcessParams::uniform(1, 0.0, 1.0, 0.0, 5.0).unwrap();
        let lp = ProcessState::new(&p).logpdf(ProcessKind::Gaussian, &p, &[0.0]).unwrap();
        assert!((lp + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn large_dof_approaches_gaussian() {
        let p = ProcessParams::uniform(2, 0.1, 1.3, 0.4, 1e6).unwrap();
        let s = state_after(&p, &[vec![0.5, -1.0], vec![1.5, 0.2]]);
        let z = [0.7, -0.4];
        let g = s.logpdf(ProcessKind::Gaussian, &p, &z).unwrap();
        let t = s.logpdf(ProcessKind::StudentT, &p, &z).unwrap();
        assert!((g - t).abs() < 1e-3, "{g} vs {t}");
    }

    #[test]
    fn recurrence_matches_matrix_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for kind in [ProcessKind::Gaussian, ProcessKind::StudentT] {
            for n in 1..=20 {
                let p = random_params(&mut rng, 3);
                let obs = observations(&mut rng, n, 3);
                let fast = state_after(&p, &obs).predictive(kind, &p).unwrap();
                let slow = oracle_conditioning(kind, &p, &obs).unwrap();
                for i in 0..3 {
                    assert!((fast.loc[i] - slow.loc[i]).abs() < 1e-8, "{kind:?} n={n}");
                    assert!((fast.scale_sq[i] - slow.scale_sq[i]).abs() < 1e-8, "{kind:?} n={n}");
                    assert_eq!(fast.dof[i], slow.dof[i]);
                }
            }
        }
    }

    #[test]
    fn predictive_terms_telescope_to_the_joint() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for kind in [ProcessKind::Gaussian, ProcessKind::StudentT] {
            let p = random_params(&mut rng, 4);
            let obs = observations(&mut rng, 9, 4);
            let mut s = ProcessState::new(&p);
            let mut total = 0.0;
            for (m, z) in obs.iter().enumerate() {
                let step = s.logpdf(kind, &p, z).unwrap();
                let ratio = joint_logpdf_oracle(kind, &p, &obs[..=m]).unwrap()
                    - if m == 0 {
                        0.0
                    } else {
                        joint_logpdf_oracle(kind, &p, &obs[..m]).unwrap()
                    };
                assert!((step - ratio).abs() < 1e-6, "{kind:?} m={m}");
                total += step;
                s.update(&p, z).unwrap();
            }
            let joint = joint_logpdf_oracle(kind, &p, &obs).unwrap();
            assert!((total - joint).abs() < 1e-6);
        }
    }

    #[test]
    fn single_observation_at_mean() {
        let p = ProcessParams::uniform(2, 0.3, 2.0, 0.5, 4.0).unwrap();
        let lp = joint_logpdf_oracle(ProcessKind::Gaussian, &p, &[vec![0.3, 0.3]]).unwrap();
        let expect = -(2.0 * std::f64::consts::PI * 2.0).ln();
        assert!((lp - expect).abs() < 1e-12);
    }

    #[test]
    fn variance_contracts_towards_the_gap() {
        let p = ProcessParams::uniform(1, 0.0, 1.0, 0.4, 5.0).unwrap();
        let mut s = ProcessState::new(&p);
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let v = s.predictive(ProcessKind::Gaussian, &p).unwrap().scale_sq[0];
            assert!(v < prev && v > 0.6);
            prev = v;
            s.update(&p, &[i as f64 * 0.1]).unwrap();
        }
        assert!(prev - 0.6 < 0.02);
    }

    #[test]
    fn sampling() {
        let p = ProcessParams::uniform(1, 0.0, 1.0, 0.5, 5.0).unwrap();
        let s = state_after(&p, &[vec![1.0]]);
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            s.sample(ProcessKind::StudentT, &p, &mut a).unwrap(),
            s.sample(ProcessKind::StudentT, &p, &mut b).unwrap()
        );

        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| s.sample(ProcessKind::Gaussian, &p, &mut a).unwrap()[0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 4.0 * 0.75f64.sqrt() / (n as f64).sqrt());

        // Near-degenerate predictive collapses onto the mean.
        let tight = ProcessParams::uniform(1, 0.0, 1.0, 1.0 - 1e-14, 5.0).unwrap();
        let st = state_after(&tight, &[vec![0.8]]);
        let z = st.sample(ProcessKind::Gaussian, &tight, &mut a).unwrap()[0];
        assert!((z - 0.8).abs() < 1e-5);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(matches!(
            ProcessParams::uniform(1, 0.0, 1.0, 1.0, 5.0),
            Err(Error::InvalidProcessParams { .. })
        ));
        assert!(ProcessParams::uniform(1, 0.0, 1.0, 0.2, 2.0).is_err());
        let p = ProcessParams::uniform(1, 0.0, 1.0, 0.2, 3.0).unwrap();
        let mut s = ProcessState::new(&p);
        assert!(matches!(s.update(&p, &[f64::NAN]), Err(Error::NonFinite(_))));
    }

    proptest! {
        #[test]
        fn state_is_order_free(seed in 0u64..1000, n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(&mut rng, 2);
            let mut obs = observations(&mut rng, n, 2);
            let a = state_after(&p, &obs).predictive(ProcessKind::StudentT, &p).unwrap();
            obs.reverse();
            obs.rotate_left(n / 2);
            let b = state_after(&p, &obs).predictive(ProcessKind::StudentT, &p).unwrap();
            for i in 0..2 {
                prop_assert!((a.loc[i] - b.loc[i]).abs() < 1e-10);
                prop_assert!((a.scale_sq[i] - b.scale_sq[i]).abs() < 1e-10);
            }
        }

        #[test]
        fn joint_is_permutation_invariant(seed in 0u64..1000, n in 2usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(&mut rng, 2);
            let mut obs = observations(&mut rng, n, 2);
            for kind in [ProcessKind::Gaussian, ProcessKind::StudentT] {
                let a = joint_logpdf_oracle(kind, &p, &obs).unwrap();
                let mut s = ProcessState::new(&p);
                let mut seq = 0.0;
                obs.swap(0, n - 1);
                for z in &obs {
                    seq += s.logpdf(kind, &p, z).unwrap();
                    s.update(&p, z).unwrap();
                }
                let b = joint_logpdf_oracle(kind, &p, &obs).unwrap();
                prop_assert!((a - b).abs() < 1e-6);
                prop_assert!((a - seq).abs() < 1e-6);
            }
        }
    }
}
