//! Sampling from a trained interval-velocity field.
//!
//! Because the network predicts the average velocity over `[r, t]`, a single
//! evaluation jumps the whole way: `z0 = z1 - u(z1, 0, 1 | c)`. The few-step
//! variant walks a uniform time grid with `z_{t-h} = z_t - h u(z_t, t-h, t)`,
//! and with one step it reduces bitwise to the one-step sampler.

use thiserror::Error;

use crate::autodiff::{AdError, Tensor};
use crate::network::{NetError, VelocityModel};
use crate::rng::{StreamRng, STREAM_NOISE};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampling request: {0}")]
    InvalidArg(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Draws the `[n, d]` standard-normal starting points used by both samplers.
/// Same seed, same noise — which is why one-step and few-step runs from one
/// seed are directly comparable.
pub fn initial_noise(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = StreamRng::new(seed, STREAM_NOISE);
    Tensor::from_raw(vec![n, d], rng.normal_vec(n * d))
}

fn check_request<M: VelocityModel>(
    model: &M,
    cond: Option<&Tensor>,
    n: usize,
) -> Result<(), SamplerError> {
    if n == 0 {
        return Err(SamplerError::InvalidArg("sample count must be positive".into()));
    }
    match (model.cond_dim(), cond) {
        (0, None) => Ok(()),
        (0, Some(_)) => Err(SamplerError::InvalidArg(
            "model is unconditional but conditioning was given".into(),
        )),
        (d, None) => Err(SamplerError::InvalidArg(format!(
            "model expects {d}-dimensional conditioning"
        ))),
        (d, Some(c)) => {
            let (rows, cols) = c.dims2("sample")?;
            if cols != d {
                return Err(SamplerError::InvalidArg(format!(
                    "conditioning has {cols} columns, model expects {d}"
                )));
            }
            if rows != n {
                return Err(SamplerError::InvalidArg(format!(
                    "conditioning has {rows} rows but {n} samples were requested"
                )));
            }
            Ok(())
        }
    }
}

/// One network evaluation per sample: `z0 = z1 - u(z1, 0, 1 | c)`.
pub fn sample_one_step<M: VelocityModel>(
    model: &M,
    cond: Option<&Tensor>,
    n: usize,
    seed: u64,
) -> Result<Tensor, SamplerError> {
    check_request(model, cond, n)?;
    let d = model.action_dim();
    let z1 = initial_noise(n, d, seed);
    let r = Tensor::zeros(vec![n]);
    let t = Tensor::ones(vec![n]);
    let u = model.eval(&z1, &r, &t, cond)?.u;
    Ok(z1.sub(&u)?)
}

/// Walks a uniform grid from `t = 1` to `t = 0` in `nfe` hops, each using the
/// averaged velocity over the hop interval. Time values come from integer
/// ratios, so the grid lands on 0 exactly and `nfe = 1` reproduces
/// [`sample_one_step`] bit for bit.
pub fn sample_multi_step<M: VelocityModel>(
    model: &M,
    cond: Option<&Tensor>,
    n: usize,
    nfe: usize,
    seed: u64,
) -> Result<Tensor, SamplerError> {
    if nfe == 0 {
        return Err(SamplerError::InvalidArg(
            "number of function evaluations must be positive".into(),
        ));
    }
    check_request(model, cond, n)?;
    let d = model.action_dim();
    let mut z = initial_noise(n, d, seed);
    for k in 0..nfe {
        let t_cur = (nfe - k) as f64 / nfe as f64;
        let t_next = (nfe - k - 1) as f64 / nfe as f64;
        let h = t_cur - t_next;
        let r = Tensor::full(vec![n], t_next);
        let t = Tensor::full(vec![n], t_cur);
        let u = model.eval(&z, &r, &t, cond)?.u;
        z = z.sub(&u.scale(h))?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Value;
    use crate::network::{NetOutput, VelocityModel};

    /// Exact averaged-velocity field of the straight-line flow that collapses
    /// all noise onto a single point `a`: `u(z, r, t) = (z - a) / t`. Every
    /// consistent sampler schedule recovers `a` exactly.
    struct PointFlow {
        target: Tensor,
    }

    impl VelocityModel for PointFlow {
        fn action_dim(&self) -> usize {
            self.target.numel()
        }

        fn cond_dim(&self) -> usize {
            0
        }

        fn eval<V: Value>(
            &self,
            z: &V,
            _r: &V,
            t: &V,
            _c: Option<&V>,
        ) -> Result<NetOutput<V>, NetError> {
            let b = z.shape()[0];
            let d = self.target.numel();
            let a = z.lift(&self.target)?.reshape(vec![1, d])?;
            let mut rows: Vec<V> = Vec::new();
            for _ in 0..b {
                rows.push(a.clone());
            }
            let refs: Vec<&V> = rows.iter().collect();
            // Stack the target into [b, d] by concatenation then reshape.
            let a_rows = V::concat_cols(&refs)?.reshape(vec![b, d])?;
            let u = z.sub(&a_rows)?.div(&t.broadcast_col(d)?)?;
            Ok(NetOutput {
                features: u.clone(),
                u,
            })
        }
    }

    #[test]
    fn one_step_lands_on_the_point() {
        let flow = PointFlow {
            target: Tensor::from_raw(vec![2], vec![0.4, -1.1]),
        };
        let out = sample_one_step(&flow, None, 16, 0).unwrap();
        for i in 0..16 {
            assert!((out.at2(i, 0) - 0.4).abs() < 1e-12);
            assert!((out.at2(i, 1) + 1.1).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_step_telescopes_to_the_point() {
        let flow = PointFlow {
            target: Tensor::from_raw(vec![2], vec![-0.3, 0.8]),
        };
        for nfe in [2, 3, 5, 8] {
            let out = sample_multi_step(&flow, None, 8, nfe, 1).unwrap();
            for i in 0..8 {
                assert!((out.at2(i, 0) + 0.3).abs() < 1e-10, "nfe {nfe}");
                assert!((out.at2(i, 1) - 0.8).abs() < 1e-10, "nfe {nfe}");
            }
        }
    }

    #[test]
    fn single_hop_multi_step_equals_one_step_bitwise() {
        let flow = PointFlow {
            target: Tensor::from_raw(vec![3], vec![0.2, 0.0, -0.7]),
        };
        let a = sample_one_step(&flow, None, 32, 42).unwrap();
        let b = sample_multi_step(&flow, None, 32, 1, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_reproduces_noise_and_samples() {
        let a = initial_noise(8, 2, 7);
        assert_eq!(a, initial_noise(8, 2, 7));
        assert_ne!(a, initial_noise(8, 2, 8));
        let flow = PointFlow {
            target: Tensor::from_raw(vec![2], vec![0.1, 0.2]),
        };
        let s1 = sample_one_step(&flow, None, 8, 7).unwrap();
        let s2 = sample_one_step(&flow, None, 8, 7).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn request_validation() {
        let flow = PointFlow {
            target: Tensor::from_raw(vec![2], vec![0.0, 0.0]),
        };
        assert!(sample_one_step(&flow, None, 0, 0).is_err());
        assert!(sample_multi_step(&flow, None, 4, 0, 0).is_err());
        let cond = Tensor::zeros(vec![4, 1]);
        assert!(sample_one_step(&flow, Some(&cond), 4, 0).is_err());
    }
}
