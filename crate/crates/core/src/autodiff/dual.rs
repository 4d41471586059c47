//! Forward-mode autodiff via dual numbers.
//!
//! A [`Dual`] pairs a primal value with an optional tangent; `None` is a
//! symbolic zero, so constants cost nothing and tangent work is only done
//! where a derivative actually flows. `Dual` is generic over [`Value`], which
//! allows forward-over-reverse: instantiating `Dual<Var>` records both the
//! primal and the tangent computation on the tape, which is exactly how the
//! exact-JVP training target is built (and why it is the memory-hungry mode).

use super::tensor::{Tensor, GELU_COEF, GELU_SQRT_2_OVER_PI};
use super::value::Value;
use super::AdError;

/// Primal/tangent pair. The tangent, when present, always has the primal's
/// shape.
#[derive(Debug, Clone)]
pub struct Dual<V: Value> {
    primal: V,
    tangent: Option<V>,
}

/// Materialised result of a forward-mode evaluation.
#[derive(Debug, Clone)]
pub struct DualTensor {
    pub primal: Tensor,
    pub tangent: Tensor,
}

impl<V: Value> Dual<V> {
    /// A value whose derivative is identically zero.
    pub fn constant(primal: V) -> Self {
        Self {
            primal,
            tangent: None,
        }
    }

    /// A value moving with the given tangent (shapes must match).
    pub fn with_tangent(primal: V, tangent: V) -> Result<Self, AdError> {
        if primal.shape() != tangent.shape() {
            return Err(AdError::ShapeMismatch {
                op: "dual",
                lhs: primal.shape(),
                rhs: tangent.shape(),
            });
        }
        Ok(Self {
            primal,
            tangent: Some(tangent),
        })
    }

    pub fn primal(&self) -> &V {
        &self.primal
    }

    pub fn tangent(&self) -> Option<&V> {
        self.tangent.as_ref()
    }

    /// The tangent as a tensor, materialising the symbolic zero.
    pub fn tangent_tensor(&self) -> Tensor {
        match &self.tangent {
            Some(t) => t.to_tensor(),
            None => Tensor::zeros(self.primal.shape()),
        }
    }

    pub fn into_dual_tensor(self) -> DualTensor {
        let tangent = self.tangent_tensor();
        DualTensor {
            primal: self.primal.to_tensor(),
            tangent,
        }
    }

    fn wrap(primal: V, tangent: Option<V>) -> Self {
        Self { primal, tangent }
    }
}

/// Sum of two optional tangents (None = symbolic zero).
fn t_add<V: Value>(a: &Option<V>, b: &Option<V>) -> Result<Option<V>, AdError> {
    Ok(match (a, b) {
        (Some(x), Some(y)) => Some(x.add(y)?),
        (Some(x), None) => Some(x.clone()),
        (None, Some(y)) => Some(y.clone()),
        (None, None) => None,
    })
}

fn t_sub<V: Value>(a: &Option<V>, b: &Option<V>) -> Result<Option<V>, AdError> {
    Ok(match (a, b) {
        (Some(x), Some(y)) => Some(x.sub(y)?),
        (Some(x), None) => Some(x.clone()),
        (None, Some(y)) => Some(y.neg()?),
        (None, None) => None,
    })
}

/// Maps a tangent through a linear function, keeping symbolic zeros.
fn t_map<V: Value>(
    t: &Option<V>,
    f: impl FnOnce(&V) -> Result<V, AdError>,
) -> Result<Option<V>, AdError> {
    Ok(match t {
        Some(x) => Some(f(x)?),
        None => None,
    })
}

/// Composed derivative of gelu, written with `Value` ops so it can be taped.
pub(crate) fn gelu_value_derivative<V: Value>(x: &V) -> Result<V, AdError> {
    let x2 = x.square()?;
    let inner = x.add(&x2.mul(x)?.scale(GELU_COEF)?)?.scale(GELU_SQRT_2_OVER_PI)?;
    let th = inner.tanh()?;
    let half_one_plus = th.add_scalar(1.0)?.scale(0.5)?;
    let sech2 = th.square()?.neg()?.add_scalar(1.0)?;
    let dinner = x2.scale(3.0 * GELU_COEF)?.add_scalar(1.0)?.scale(GELU_SQRT_2_OVER_PI)?;
    let second = x.scale(0.5)?.mul(&sech2)?.mul(&dinner)?;
    half_one_plus.add(&second)
}

impl<V: Value> Value for Dual<V> {
    fn shape(&self) -> Vec<usize> {
        self.primal.shape()
    }

    fn to_tensor(&self) -> Tensor {
        self.primal.to_tensor()
    }

    fn lift(&self, t: &Tensor) -> Result<Self, AdError> {
        Ok(Self::constant(self.primal.lift(t)?))
    }

    fn detach(&self) -> Result<Self, AdError> {
        // Detaching also severs the tangent: the result is a constant.
        Ok(Self::constant(self.primal.detach()?))
    }

    fn add(&self, other: &Self) -> Result<Self, AdError> {
        Ok(Self::wrap(
            self.primal.add(&other.primal)?,
            t_add(&self.tangent, &other.tangent)?,
        ))
    }

    fn sub(&self, other: &Self) -> Result<Self, AdError> {
        Ok(Self::wrap(
            self.primal.sub(&other.primal)?,
            t_sub(&self.tangent, &other.tangent)?,
        ))
    }

    fn mul(&self, other: &Self) -> Result<Self, AdError> {
        let p = self.primal.mul(&other.primal)?;
        let left = t_map(&self.tangent, |t| t.mul(&other.primal))?;
        let right = t_map(&other.tangent, |t| self.primal.mul(t))?;
        Ok(Self::wrap(p, t_add(&left, &right)?))
    }

    fn div(&self, other: &Self) -> Result<Self, AdError> {
        let p = self.primal.div(&other.primal)?;
        let left = t_map(&self.tangent, |t| t.div(&other.primal))?;
        let right = t_map(&other.tangent, |t| {
            p.mul(t)?.div(&other.primal)?.neg()
        })?;
        Ok(Self::wrap(p, t_add(&left, &right)?))
    }

    fn scale(&self, k: f64) -> Result<Self, AdError> {
        Ok(Self::wrap(
            self.primal.scale(k)?,
            t_map(&self.tangent, |t| t.scale(k))?,
        ))
    }

    fn add_scalar(&self, k: f64) -> Result<Self, AdError> {
        Ok(Self::wrap(self.primal.add_scalar(k)?, self.tangent.clone()))
    }

    fn clamp_min(&self, lo: f64) -> Result<Self, AdError> {
        let p = self.primal.clamp_min(lo)?;
        let t = t_map(&self.tangent, |t| {
            let mask = self.primal.add_scalar(-lo)?.step_pos()?;
            t.mul(&mask)
        })?;
        Ok(Self::wrap(p, t))
    }

    fn clamp(&self, lo: f64, hi: f64) -> Result<Self, AdError> {
        let p = self.primal.clamp(lo, hi)?;
        let t = t_map(&self.tangent, |t| {
            let above = self.primal.add_scalar(-lo)?.step_pos()?;
            let below = self.primal.neg()?.add_scalar(hi)?.step_pos()?;
            t.mul(&above)?.mul(&below)
        })?;
        Ok(Self::wrap(p, t))
    }

    fn square(&self) -> Result<Self, AdError> {
        let p = self.primal.square()?;
        let t = t_map(&self.tangent, |t| t.mul(&self.primal.scale(2.0)?))?;
        Ok(Self::wrap(p, t))
    }

    fn sqrt(&self) -> Result<Self, AdError> {
        let p = self.primal.sqrt()?;
        let t = t_map(&self.tangent, |t| t.div(&p)?.scale(0.5))?;
        Ok(Self::wrap(p, t))
    }

    fn exp(&self) -> Result<Self, AdError> {
        let p = self.primal.exp()?;
        let t = t_map(&self.tangent, |t| t.mul(&p))?;
        Ok(Self::wrap(p, t))
    }

    fn log(&self) -> Result<Self, AdError> {
        let p = self.primal.log()?;
        let t = t_map(&self.tangent, |t| t.div(&self.primal))?;
        Ok(Self::wrap(p, t))
    }

    fn sin(&self) -> Result<Self, AdError> {
        let p = self.primal.sin()?;
        let t = t_map(&self.tangent, |t| t.mul(&self.primal.cos()?))?;
        Ok(Self::wrap(p, t))
    }

    fn cos(&self) -> Result<Self, AdError> {
        let p = self.primal.cos()?;
        let t = t_map(&self.tangent, |t| t.mul(&self.primal.sin()?)?.neg())?;
        Ok(Self::wrap(p, t))
    }

    fn tanh(&self) -> Result<Self, AdError> {
        let p = self.primal.tanh()?;
        let t = t_map(&self.tangent, |t| {
            t.mul(&p.square()?.neg()?.add_scalar(1.0)?)
        })?;
        Ok(Self::wrap(p, t))
    }

    fn relu(&self) -> Result<Self, AdError> {
        let p = self.primal.relu()?;
        let t = t_map(&self.tangent, |t| t.mul(&self.primal.step_pos()?))?;
        Ok(Self::wrap(p, t))
    }

    fn step_pos(&self) -> Result<Self, AdError> {
        // Piecewise constant: tangent is a symbolic zero.
        Ok(Self::constant(self.primal.step_pos()?))
    }

    fn gelu(&self) -> Result<Self, AdError> {
        let p = self.primal.gelu()?;
        let t = t_map(&self.tangent, |t| {
            t.mul(&gelu_value_derivative(&self.primal)?)
        })?;
        Ok(Self::wrap(p, t))
    }

    fn matmul(&self, other: &Self) -> Result<Self, AdError> {
        let p = self.primal.matmul(&other.primal)?;
        let left = t_map(&self.tangent, |t| t.matmul(&other.primal))?;
        let right = t_map(&other.tangent, |t| self.primal.matmul(t))?;
        Ok(Self::wrap(p, t_add(&left, &right)?))
    }

    fn transpose(&self) -> Result<Self, AdError> {
        Ok(Self::wrap(
            self.primal.transpose()?,
            t_map(&self.tangent, |t| t.transpose())?,
        ))
    }

    fn sum(&self) -> Result<Self, AdError> {
        Ok(Self::wrap(
            self.primal.sum()?,
            t_map(&self.tangent, |t| t.sum())?,
        ))
    }

    fn mean(&self) -> Result<Self, AdError> {
        Ok(Self::wrap(
            self.primal.mean()?,
            t_map(&self.tangent, |t| t.mean())?,
        ))
    }

    fn row_l2norm(&self) -> Result<Self, AdError> {
        let p = self.primal.row_l2norm()?;
        // d||x_i|| = <x_i, dx_i> / ||x_i||; rows must be nonzero.
        let t = t_map(&self.tangent, |t| self.primal.row_dot(t)?.div(&p))?;
        Ok(Self::wrap(p, t))
    }

    fn row_dot(&self, other: &Self) -> Result<Self, AdError> {
        let p = self.primal.row_dot(&other.primal)?;
        let left = t_map(&self.tangent, |t| t.row_dot(&other.primal))?;
        let right = t_map(&other.tangent, |t| self.primal.row_dot(t))?;
        Ok(Self::wrap(p, t_add(&left, &right)?))
    }

    fn concat_cols(parts: &[&Self]) -> Result<Self, AdError> {
        let primals: Vec<&V> = parts.iter().map(|p| &p.primal).collect();
        let primal = V::concat_cols(&primals)?;
        if parts.iter().all(|p| p.tangent.is_none()) {
            return Ok(Self::constant(primal));
        }
        // Mixed case: materialise symbolic zeros so widths line up.
        let mut tangents: Vec<V> = Vec::with_capacity(parts.len());
        for p in parts {
            match &p.tangent {
                Some(t) => tangents.push(t.clone()),
                None => tangents.push(p.primal.lift(&Tensor::zeros(p.primal.shape()))?),
            }
        }
        let refs: Vec<&V> = tangents.iter().collect();
        Ok(Self::wrap(primal, Some(V::concat_cols(&refs)?)))
    }

    fn slice_cols(&self, start: usize, end: usize) -> Result<Self, AdError> {
        Ok(Self::wrap(
            self.primal.slice_cols(start, end)?,
            t_map(&self.tangent, |t| t.slice_cols(start, end))?,
        ))
    }

    fn broadcast_row(&self, rows: usize) -> Result<Self, AdError> {
        Ok(Self::wrap(
            self.primal.broadcast_row(rows)?,
            t_map(&self.tangent, |t| t.broadcast_row(rows))?,
        ))
    }

    fn broadcast_col(&self, cols: usize) -> Result<Self, AdError> {
        Ok(Self::wrap(
            self.primal.broadcast_col(cols)?,
            t_map(&self.tangent, |t| t.broadcast_col(cols))?,
        ))
    }

    fn reshape(&self, shape: Vec<usize>) -> Result<Self, AdError> {
        Ok(Self::wrap(
            self.primal.reshape(shape.clone())?,
            t_map(&self.tangent, |t| t.reshape(shape.clone()))?,
        ))
    }
}

/// Jacobian-vector product of `f` at `primals` along `tangents`, evaluated in
/// one tape-free forward pass.
pub fn jvp<F>(f: F, primals: &[Tensor], tangents: &[Tensor]) -> Result<DualTensor, AdError>
where
    F: FnOnce(&[Dual<Tensor>]) -> Result<Dual<Tensor>, AdError>,
{
    if primals.len() != tangents.len() {
        return Err(AdError::InvalidArg {
            op: "jvp",
            msg: format!(
                "{} primals but {} tangents",
                primals.len(),
                tangents.len()
            ),
        });
    }
    let inputs: Vec<Dual<Tensor>> = primals
        .iter()
        .zip(tangents)
        .map(|(p, t)| Dual::with_tangent(p.clone(), t.clone()))
        .collect::<Result<_, _>>()?;
    Ok(f(&inputs)?.into_dual_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let out = jvp(
            |xs| xs[0].square(),
            &[Tensor::scalar(3.0)],
            &[Tensor::scalar(1.0)],
        )
        .unwrap();
        assert_eq!(out.primal.scalar_value().unwrap(), 9.0);
        assert_eq!(out.tangent.scalar_value().unwrap(), 6.0);
    }

    #[test]
    fn sin_at_zero() {
        let out = jvp(
            |xs| xs[0].sin(),
            &[Tensor::scalar(0.0)],
            &[Tensor::scalar(1.0)],
        )
        .unwrap();
        assert_eq!(out.primal.scalar_value().unwrap(), 0.0);
        assert_eq!(out.tangent.scalar_value().unwrap(), 1.0);
    }

    #[test]
    fn product_and_chain_rules() {
        // f(x, y) = exp(x) * tanh(y) along (dx, dy) = (0.3, -0.2) at (0.5, 0.7).
        let (x, y) = (0.5_f64, 0.7_f64);
        let (dx, dy) = (0.3_f64, -0.2_f64);
        let out = jvp(
            |v| v[0].exp()?.mul(&v[1].tanh()?),
            &[Tensor::scalar(x), Tensor::scalar(y)],
            &[Tensor::scalar(dx), Tensor::scalar(dy)],
        )
        .unwrap();
        let expect = x.exp() * y.tanh() * dx + x.exp() * (1.0 - y.tanh() * y.tanh()) * dy;
        assert!((out.tangent.scalar_value().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn symbolic_zero_survives_linear_ops() {
        let c = Dual::constant(Tensor::scalar(2.0));
        let s = c.scale(3.0).unwrap().add_scalar(1.0).unwrap();
        assert!(s.tangent().is_none());
        assert_eq!(s.to_tensor().scalar_value().unwrap(), 7.0);
        assert_eq!(s.tangent_tensor().scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn step_has_zero_tangent_and_relu_masks() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.5, 2.0]).unwrap();
        let t = Tensor::ones(vec![3]);
        let out = jvp(|v| v[0].relu(), &[x.clone()], &[t.clone()]).unwrap();
        assert_eq!(out.tangent.data(), &[0.0, 1.0, 1.0]);
        let step = jvp(|v| v[0].step_pos(), &[x], &[t]).unwrap();
        assert_eq!(step.tangent.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gelu_tangent_matches_pointwise_derivative() {
        let x = Tensor::new(vec![4], vec![-2.0, -0.3, 0.4, 1.9]).unwrap();
        let t = Tensor::ones(vec![4]);
        let out = jvp(|v| v[0].gelu(), &[x.clone()], &[t]).unwrap();
        let expect = x.gelu_prime();
        for (a, b) in out.tangent.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn mismatched_inputs_error() {
        let err = jvp(|v| v[0].square(), &[Tensor::scalar(1.0)], &[]).unwrap_err();
        assert!(matches!(err, AdError::InvalidArg { .. }));
        let err = Dual::with_tangent(Tensor::scalar(1.0), Tensor::ones(vec![2])).unwrap_err();
        assert!(matches!(err, AdError::ShapeMismatch { .. }));
    }

    #[test]
    fn matmul_product_rule() {
        // d(AB) = (dA)B + A(dB).
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let da = Tensor::new(vec![2, 2], vec![0.1, 0.0, 0.0, 0.2]).unwrap();
        let db = Tensor::new(vec![2, 2], vec![0.0, 0.3, -0.1, 0.0]).unwrap();
        let out = jvp(
            |v| v[0].matmul(&v[1]),
            &[a.clone(), b.clone()],
            &[da.clone(), db.clone()],
        )
        .unwrap();
        let expect = da.matmul(&b).unwrap().add(&a.matmul(&db).unwrap()).unwrap();
        assert_eq!(out.tangent, expect);
    }
}
