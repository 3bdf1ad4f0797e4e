use super::Tensor;
use crate::error::{Error, Result};

/// `y = x^T W (+ b)` with `x: [N]`, `W: [N, M]`, `b: [M]`.
pub fn linear_apply(x: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, m) = check(x, weights, bias)?;
    let mut y = match bias {
        Some(b) => b.clone(),
        None => Tensor::zeros(&[m]),
    };
    let w = weights.data();
    let out = y.data_mut();
    for (i, &xi) in x.data().iter().enumerate().take(n) {
        if xi == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w[i * m..(i + 1) * m]) {
            *o += xi * wv;
        }
    }
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(x: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<LinearGrads> {
    let (n, m) = check(x, weights, None)?;
    grad_out.expect_dims(&[m], "linear grad_out")?;
    let w = weights.data();
    let g = grad_out.data();
    let mut gx = Tensor::zeros(&[n]);
    let mut gw = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let row = &w[i * m..(i + 1) * m];
        gx.data_mut()[i] = row.iter().zip(g).map(|(a, b)| a * b).sum();
        let xi = x.data()[i];
        for (d, gv) in gw.data_mut()[i * m..(i + 1) * m].iter_mut().zip(g) {
            *d = xi * gv;
        }
    }
    Ok(LinearGrads {
        input: gx,
        weights: gw,
        bias: grad_out.clone(),
    })
}

fn check(x: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize)> {
    x.expect_rank(1, "linear input")?;
    weights.expect_rank(2, "linear weights")?;
    let (n, m) = (weights.dims()[0], weights.dims()[1]);
    if x.len() != n {
        return Err(Error::shape(format!(
            "linear: input length {} does not match weight rows {n}",
            x.len()
        )));
    }
    if let Some(b) = bias {
        b.expect_dims(&[m], "linear bias")?;
    }
    Ok((n, m))
}
