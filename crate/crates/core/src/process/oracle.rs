//! Brute-force conditioning with explicit covariance matrices. Cubic in the
//! number of observations; used to check the recurrence.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

use super::{Predictive, ProcessKind, ProcessParams};

fn compound_matrix(n: usize, var: f64, cov: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if i == j { var } else { cov })
}

fn check(params: &ProcessParams, obs: &[Vec<f64>]) -> Result<()> {
    params.validate()?;
    if obs.iter().any(|z| z.len() != params.dim()) {
        return Err(Error::shape("process oracle", "observation length"));
    }
    Ok(())
}

/// Column of observation values for dimension `d`, centred on the mean.
fn centred(params: &ProcessParams, obs: &[Vec<f64>], d: usize) -> DVector<f64> {
    DVector::from_iterator(obs.len(), obs.iter().map(|z| z[d] - params.loc[d]))
}

/// Predictive of the next element given `obs`, by explicit matrix solves.
pub fn oracle_conditioning(kind: ProcessKind, params: &ProcessParams, obs: &[Vec<f64>]) -> Result<Predictive> {
    check(params, obs)?;
    let n = obs.len();
    let d = params.dim();
    let mut out = Predictive {
        loc: Vec::with_capacity(d),
        scale_sq: Vec::with_capacity(d),
        dof: Vec::with_capacity(d),
    };
    for i in 0..d {
        let (v, rho) = (params.var[i], params.cov[i]);
        if n == 0 {
            out.loc.push(params.loc[i]);
            out.scale_sq.push(v);
            out.dof.push(if kind == ProcessKind::Gaussian {
                f64::INFINITY
            } else {
                params.dof[i]
            });
            continue;
        }
        let chol = compound_matrix(n, v, rho)
            .cholesky()
            .ok_or(Error::SingularMatrix("oracle conditioning"))?;
        let e = centred(params, obs, i);
        let k = DVector::from_element(n, rho);
        let w = chol.solve(&k);
        let loc = params.loc[i] + w.dot(&e);
        let gauss = v - w.dot(&k);
        out.loc.push(loc);
        match kind {
            ProcessKind::Gaussian => {
                out.scale_sq.push(gauss);
                out.dof.push(f64::INFINITY);
            }
            ProcessKind::StudentT => {
                let nu = params.dof[i];
                let q = e.dot(&chol.solve(&e));
                out.scale_sq.push((nu + q) / (nu + n as f64) * gauss);
                out.dof.push(nu + n as f64);
            }
        }
    }
    Ok(out)
}

/// Exact joint log density of `obs` under the compound-symmetric
/// multivariate Gaussian or multivariate t, summed over dimensions.
pub fn joint_logpdf_oracle(kind: ProcessKind, params: &ProcessParams, obs: &[Vec<f64>]) -> Result<f64> {
    check(params, obs)?;
    let n = obs.len();
    if n == 0 {
        return Ok(0.0);
    }
    let nf = n as f64;
    let mut total = 0.0;
    for i in 0..params.dim() {
        let chol = compound_matrix(n, params.var[i], params.cov[i])
            .cholesky()
            .ok_or(Error::SingularMatrix("oracle joint density"))?;
        let logdet = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let e = centred(params, obs, i);
        let q = e.dot(&chol.solve(&e));
        total += match kind {
            ProcessKind::Gaussian => -0.5 * (nf * (2.0 * std::f64::consts::PI).ln() + logdet + q),
            ProcessKind::StudentT => {
                let nu = params.dof[i];
                ln_gamma(0.5 * (nu + nf))
                    - ln_gamma(0.5 * nu)
                    - 0.5 * nf * (nu * std::f64::consts::PI).ln()
                    - 0.5 * logdet
                    - 0.5 * (nu + nf) * (q / nu).ln_1p()
            }
        };
    }
    Ok(total)
}
