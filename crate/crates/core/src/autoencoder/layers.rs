//! Batched layer primitives over `[B, C, L]` tensors with hand-written
//! backward passes.

use rand::{Rng, RngCore};

use super::Tensor;
use crate::error::{shape_err, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn tap_offset(k: usize, kernel: usize, dilation: usize) -> isize {
    (k as isize - (kernel as isize - 1) / 2) * dilation as isize
}

/// Output positions `t` for which `t + off` lies inside `[0, len)`.
fn valid_range(off: isize, len: usize) -> std::ops::Range<usize> {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    lo.min(hi)..hi
}

fn conv_dims(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    dilation: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (batch, c_in, len) = x.bcl()?;
    let [c_out, w_in, kernel] = *w.shape() else {
        return Err(shape_err!(
            "conv kernel must be [C_out, C_in, K], got {:?}",
            w.shape()
        ));
    };
    if w_in != c_in {
        return Err(shape_err!(
            "kernel expects {w_in} input channels, input has {c_in}"
        ));
    }
    if b.shape() != [c_out] {
        return Err(shape_err!(
            "conv bias must be [{c_out}], got {:?}",
            b.shape()
        ));
    }
    if kernel % 2 == 0 {
        return Err(shape_err!(
            "kernel size {kernel} must be odd for same padding"
        ));
    }
    if dilation == 0 {
        return Err(shape_err!("dilation must be >= 1"));
    }
    Ok((batch, c_in, len, c_out, kernel))
}

/// Dilated 1D cross-correlation with zero same-padding of
/// `(K - 1) / 2 * dilation` per side, so the output keeps length `L`.
/// Accepts `[C_in, L]` or `[B, C_in, L]` input.
pub fn conv1d(x: &Tensor, w: &Tensor, b: &Tensor, dilation: usize) -> Result<Tensor> {
    let (batch, c_in, len, c_out, kernel) = conv_dims(x, w, b, dilation)?;
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0; batch * c_out * len];
    for bi in 0..batch {
        for o in 0..c_out {
            let row = &mut out[(bi * c_out + o) * len..][..len];
            row.fill(bd[o]);
            for i in 0..c_in {
                let xin = &xd[(bi * c_in + i) * len..][..len];
                for k in 0..kernel {
                    let wk = wd[(o * c_in + i) * kernel + k];
                    if wk == 0.0 {
                        continue;
                    }
                    let off = tap_offset(k, kernel, dilation);
                    for t in valid_range(off, len) {
                        row[t] += wk * xin[(t as isize + off) as usize];
                    }
                }
            }
        }
    }
    let shape = if x.shape().len() == 2 {
        vec![c_out, len]
    } else {
        vec![batch, c_out, len]
    };
    Tensor::new(shape, out)
}

/// Gradients of [`conv1d`] w.r.t. input, kernel and bias.
pub fn conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    dilation: usize,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (batch, c_in, len, c_out, kernel) = conv_dims(x, w, b, dilation)?;
    if dy.len() != batch * c_out * len {
        return Err(shape_err!(
            "upstream gradient has {} values, expected {}",
            dy.len(),
            batch * c_out * len
        ));
    }
    let (xd, wd, gd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; c_out];
    for bi in 0..batch {
        for o in 0..c_out {
            let g = &gd[(bi * c_out + o) * len..][..len];
            db[o] += g.iter().sum::<f64>();
            for i in 0..c_in {
                let base = (bi * c_in + i) * len;
                for k in 0..kernel {
                    let off = tap_offset(k, kernel, dilation);
                    let wk = wd[(o * c_in + i) * kernel + k];
                    let mut acc = 0.0;
                    for t in valid_range(off, len) {
                        let src = base + (t as isize + off) as usize;
                        acc += g[t] * xd[src];
                        dx[src] += wk * g[t];
                    }
                    dw[(o * c_in + i) * kernel + k] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![c_out], db)?,
    ))
}

/// Fully connected map across channels applied at every time step.
pub fn resample(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (batch, c_in, len) = x.bcl()?;
    let [c_out, w_in] = *w.shape() else {
        return Err(shape_err!(
            "resample weight must be [C_out, C_in], got {:?}",
            w.shape()
        ));
    };
    if w_in != c_in {
        return Err(shape_err!(
            "resample expects {w_in} channels, input has {c_in}"
        ));
    }
    let mut out = vec![0.0; batch * c_out * len];
    for bi in 0..batch {
        for o in 0..c_out {
            let row = &mut out[(bi * c_out + o) * len..][..len];
            for i in 0..c_in {
                let wk = w.data()[o * c_in + i];
                let xin = &x.data()[(bi * c_in + i) * len..][..len];
                row.iter_mut().zip(xin).for_each(|(r, v)| *r += wk * v);
            }
        }
    }
    Tensor::new(vec![batch, c_out, len], out)
}

pub fn resample_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    let (batch, c_in, len) = x.bcl()?;
    let c_out = w.shape()[0];
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for bi in 0..batch {
        for o in 0..c_out {
            let g = &dy.data()[(bi * c_out + o) * len..][..len];
            for i in 0..c_in {
                let base = (bi * c_in + i) * len;
                let wk = w.data()[o * c_in + i];
                let mut acc = 0.0;
                for t in 0..len {
                    acc += g[t] * x.data()[base + t];
                    dx[base + t] += wk * g[t];
                }
                dw[o * c_in + i] += acc;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
    ))
}

/// Values cached by a training-mode batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance, used for the running estimate.
    pub batch_var_unbiased: Vec<f64>,
}

/// Training-mode batch normalization over the batch and time axes.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
) -> Result<(Tensor, BatchNormCache)> {
    let (batch, ch, len) = x.bcl()?;
    if gamma.len() != ch || beta.len() != ch {
        return Err(shape_err!(
            "batch norm has {} channels, input has {ch}",
            gamma.len()
        ));
    }
    let n = (batch * len) as f64;
    let xd = x.data();
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; ch];
    let mut means = vec![0.0; ch];
    let mut vars = vec![0.0; ch];
    for c in 0..ch {
        let rows = (0..batch).map(|b| (b * ch + c) * len);
        let mean = rows
            .clone()
            .map(|s| xd[s..s + len].iter().sum::<f64>())
            .sum::<f64>()
            / n;
        let var = rows
            .clone()
            .map(|s| {
                xd[s..s + len]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n;
        let is = 1.0 / (var + BN_EPS).sqrt();
        for s in rows {
            for t in s..s + len {
                xhat[t] = (xd[t] - mean) * is;
                y[t] = gamma[c] * xhat[t] + beta[c];
            }
        }
        inv_std[c] = is;
        means[c] = mean;
        vars[c] = if n > 1.0 { var * n / (n - 1.0) } else { var };
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        BatchNormCache {
            normalized: Tensor::new(shape, xhat)?,
            inv_std,
            batch_mean: means,
            batch_var_unbiased: vars,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward(
    cache: &BatchNormCache,
    gamma: &[f64],
    dy: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (batch, ch, len) = dy.bcl()?;
    let n = (batch * len) as f64;
    let (xh, g) = (cache.normalized.data(), dy.data());
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; ch];
    let mut dbeta = vec![0.0; ch];
    for c in 0..ch {
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for b in 0..batch {
            let s = (b * ch + c) * len;
            for t in s..s + len {
                sum_g += g[t];
                sum_gx += g[t] * xh[t];
            }
        }
        dgamma[c] = sum_gx;
        dbeta[c] = sum_g;
        let k = gamma[c] * cache.inv_std[c] / n;
        for b in 0..batch {
            let s = (b * ch + c) * len;
            for t in s..s + len {
                dx[t] = k * (n * g[t] - sum_g - xh[t] * sum_gx);
            }
        }
    }
    Ok((Tensor::new(dy.shape().to_vec(), dx)?, dgamma, dbeta))
}

/// Inference-mode batch normalization using running statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
) -> Result<Tensor> {
    let (batch, ch, len) = x.bcl()?;
    if gamma.len() != ch {
        return Err(shape_err!(
            "batch norm has {} channels, input has {ch}",
            gamma.len()
        ));
    }
    let mut y = x.data().to_vec();
    for b in 0..batch {
        for c in 0..ch {
            let is = 1.0 / (var[c] + BN_EPS).sqrt();
            let s = (b * ch + c) * len;
            for v in &mut y[s..s + len] {
                *v = gamma[c] * (*v - mean[c]) * is + beta[c];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Passes `dy` where the forward input was positive.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    dx.data_mut().iter_mut().zip(x.data()).for_each(|(g, v)| {
        if *v <= 0.0 {
            *g = 0.0
        }
    });
    dx
}

/// Inverted-dropout multipliers: 0 with probability `p`, else `1 / (1 - p)`.
pub fn dropout_mask(len: usize, p: f64, rng: &mut dyn RngCore) -> Vec<f64> {
    if p <= 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

pub fn apply_mask(x: &Tensor, mask: &[f64]) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_difference_kernel() {
        let x = t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 3], &[1.0, 0.0, -1.0]);
        let y = conv1d(&x, &w, &Tensor::zeros(&[1]), 1).unwrap();
        assert_eq!(y.data(), &[-2.0, -2.0, -2.0, 3.0]);
        assert_eq!(y.shape(), &[1, 4]);
    }

    #[test]
    fn conv_dilated_difference_kernel() {
        let x = t(&[1, 5], &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let w = t(&[1, 1, 3], &[1.0, 0.0, -1.0]);
        let y = conv1d(&x, &w, &Tensor::zeros(&[1]), 2).unwrap();
        assert_eq!(y.data(), &[-3.0, -4.0, -4.0, 2.0, 3.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 6], &[0.5, -1.0, 2.0, 7.0, 3.0, 1.0]);
        let w = t(&[1, 1, 3], &[0.0, 1.0, 0.0]);
        let y = conv1d(&x, &w, &Tensor::zeros(&[1]), 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_shape_errors() {
        let x = t(&[2, 4], &[0.0; 8]);
        let w = Tensor::zeros(&[1, 3, 3]);
        assert!(conv1d(&x, &w, &Tensor::zeros(&[1]), 1).is_err());
        let w = Tensor::zeros(&[1, 2, 2]);
        assert!(conv1d(&x, &w, &Tensor::zeros(&[1]), 1).is_err());
        let w = Tensor::zeros(&[1, 2, 3]);
        assert!(conv1d(&x, &w, &Tensor::zeros(&[2]), 1).is_err());
    }

    #[test]
    fn batch_norm_of_zeros_is_beta() {
        let x = Tensor::zeros(&[2, 3, 5]);
        let (y, _) = batch_norm_train(&x, &[1.0; 3], &[0.0; 3]).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dropout_mask_is_inverted() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = dropout_mask(1000, 0.2, &mut rng);
        assert!(m.iter().all(|v| *v == 0.0 || (*v - 1.25).abs() < 1e-15));
        let zeros = m.iter().filter(|v| **v == 0.0).count();
        assert!((150..250).contains(&zeros));
    }
}
