//! Central finite differences, used throughout as the derivative oracle that
//! shares no code with either autodiff mode.

use super::tensor::Tensor;
use super::AdError;

/// Gradient of a scalar-valued function by central differences: element `j`
/// of input `i` is perturbed by `±h` with everything else held fixed.
pub fn grad_central<F>(mut f: F, inputs: &[Tensor], h: f64) -> Result<Vec<Tensor>, AdError>
where
    F: FnMut(&[Tensor]) -> Result<f64, AdError>,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let fp = f(&perturbed(inputs, i, j, h))?;
            let fm = f(&perturbed(inputs, i, j, -h))?;
            g.push((fp - fm) / (2.0 * h));
        }
        grads.push(Tensor::from_raw(inputs[i].shape().to_vec(), g));
    }
    Ok(grads)
}

/// Directional derivative of a tensor-valued function along `tangents` by
/// central differences: `(f(x + h t) - f(x - h t)) / 2h`.
pub fn jvp_central<F>(
    mut f: F,
    primals: &[Tensor],
    tangents: &[Tensor],
    h: f64,
) -> Result<Tensor, AdError>
where
    F: FnMut(&[Tensor]) -> Result<Tensor, AdError>,
{
    if primals.len() != tangents.len() {
        return Err(AdError::InvalidArg {
            op: "jvp_central",
            msg: format!("{} primals but {} tangents", primals.len(), tangents.len()),
        });
    }
    let shift = |s: f64| -> Result<Vec<Tensor>, AdError> {
        primals
            .iter()
            .zip(tangents)
            .map(|(p, t)| p.add(&t.scale(h * s)))
            .collect()
    };
    let fp = f(&shift(1.0)?)?;
    let fm = f(&shift(-1.0)?)?;
    Ok(fp.sub(&fm)?.scale(1.0 / (2.0 * h)))
}

fn perturbed(inputs: &[Tensor], i: usize, j: usize, h: f64) -> Vec<Tensor> {
    let mut out: Vec<Tensor> = inputs.to_vec();
    let mut data = out[i].data().to_vec();
    data[j] += h;
    out[i] = Tensor::from_raw(out[i].shape().to_vec(), data);
    out
}

/// Relative error with a unit floor: `|a - b| / max(1, |a|, |b|)`. Behaves as
/// relative error for O(1)-or-larger quantities and as absolute error below
/// the floor, which is the right comparison for finite-difference noise.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Largest [`rel_err`] over two equally shaped tensors.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> Result<f64, AdError> {
    if a.shape() != b.shape() {
        return Err(AdError::ShapeMismatch {
            op: "max_rel_err",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_quadratic() {
        // f(x) = sum(x^2) -> grad 2x.
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = grad_central(
            |v| v[0].square().sum().scalar_value(),
            std::slice::from_ref(&x),
            1e-5,
        )
        .unwrap();
        let expect = x.scale(2.0);
        assert!(max_rel_err(&g[0], &expect).unwrap() < 1e-9);
    }

    #[test]
    fn directional_derivative_of_sin() {
        let x = Tensor::new(vec![2], vec![0.3, 1.1]).unwrap();
        let t = Tensor::new(vec![2], vec![1.0, -0.5]).unwrap();
        let d = jvp_central(|v| Ok(v[0].sin()), &[x.clone()], &[t.clone()], 1e-5).unwrap();
        let expect = x.cos().mul(&t).unwrap();
        assert!(max_rel_err(&d, &expect).unwrap() < 1e-9);
    }

    #[test]
    fn rel_err_floors_small_values() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!(rel_err(1e-9, 2e-9) < 1e-8);
        assert!((rel_err(200.0, 202.0) - 2.0 / 202.0).abs() < 1e-15);
    }
}
