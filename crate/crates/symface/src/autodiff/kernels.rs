//! Raw array math behind the graph ops: convolution via im2col, row-wise
//! softmax/layer-norm, cyclic rolls. Also used directly (without gradients)
//! by the metric feature extractors.

use ndarray::{Array2, Array4, ArrayD, Axis, Ix2, Ix4};

use super::Real;
use crate::error::{Error, Result};

/// Output spatial size of a convolution along one axis (floor semantics).
pub fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::Shape(format!(
            "input extent {input} (+2*{pad} pad) smaller than kernel {k}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Unfold `x` [N,C,H,W] into rows of receptive fields: [N*Ho*Wo, C*k*k].
pub fn im2col<F: Real>(
    x: &Array4<F>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Array2<F>, usize, usize)> {
    let (n, c, h, w) = x.dim();
    let ho = conv_out_len(h, k, stride, pad)?;
    let wo = conv_out_len(w, k, stride, pad)?;
    let mut cols = Array2::<F>::zeros((n * ho * wo, c * k * k));
    for ni in 0..n {
        for oy in 0..ho {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..wo {
                let ix0 = (ox * stride) as isize - pad as isize;
                let row = (ni * ho + oy) * wo + ox;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[row, (ci * k + ky) * k + kx]] =
                                x[[ni, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    Ok((cols, ho, wo))
}

/// Scatter-add of column gradients back onto the input layout.
pub fn col2im<F: Real>(
    dcols: &Array2<F>,
    input_dim: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Array4<F>> {
    let (n, c, h, w) = input_dim;
    let ho = conv_out_len(h, k, stride, pad)?;
    let wo = conv_out_len(w, k, stride, pad)?;
    let mut dx = Array4::<F>::zeros((n, c, h, w));
    for ni in 0..n {
        for oy in 0..ho {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..wo {
                let ix0 = (ox * stride) as isize - pad as isize;
                let row = (ni * ho + oy) * wo + ox;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[[ni, ci, iy as usize, ix as usize]] +=
                                dcols[[row, (ci * k + ky) * k + kx]];
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Forward convolution, NCHW input, [Cout,Cin,k,k] square kernel, zero padding.
pub fn conv2d_raw<F: Real>(
    x: &Array4<F>,
    weight: &Array4<F>,
    stride: usize,
    pad: usize,
) -> Result<Array4<F>> {
    let (n, c, _, _) = x.dim();
    let (cout, cin, kh, kw) = weight.dim();
    if cin != c || kh != kw {
        return Err(Error::Shape(format!(
            "conv2d weight [{cout},{cin},{kh},{kw}] incompatible with input channels {c}"
        )));
    }
    let k = kh;
    let (cols, ho, wo) = im2col(x, k, stride, pad)?;
    let wmat = weight
        .view()
        .into_shape_with_order((cout, cin * k * k))
        .expect("conv weight reshape");
    // [N*Ho*Wo, Ckk] x [Ckk, Cout]
    let out2 = cols.dot(&wmat.t());
    let out = out2
        .into_shape_with_order((n, ho, wo, cout))
        .expect("conv out reshape")
        .permuted_axes([0, 3, 1, 2]);
    Ok(out.as_standard_layout().to_owned())
}

/// Gradients of `conv2d_raw` w.r.t. input and weight.
pub fn conv2d_backward<F: Real>(
    x: &Array4<F>,
    weight: &Array4<F>,
    stride: usize,
    pad: usize,
    dout: &Array4<F>,
) -> Result<(Array4<F>, Array4<F>)> {
    let (n, _, _, _) = x.dim();
    let (cout, cin, k, _) = weight.dim();
    let (cols, ho, wo) = im2col(x, k, stride, pad)?;
    let dmat = dout
        .view()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((n * ho * wo, cout))
        .expect("dout reshape");
    // dW = (cols^T dmat)^T
    let dw2 = cols.t().dot(&dmat); // [Ckk, Cout]
    let dw = dw2
        .t()
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((cout, cin, k, k))
        .expect("dw reshape");
    let wmat = weight
        .view()
        .into_shape_with_order((cout, cin * k * k))
        .expect("conv weight reshape");
    let dcols = dmat.dot(&wmat); // [N*Ho*Wo, Ckk]
    let dx = col2im(&dcols, x.dim(), k, stride, pad)?;
    Ok((dx, dw))
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last<F: Real>(x: &ArrayD<F>) -> ArrayD<F> {
    let mut y = x.clone();
    let last = Axis(y.ndim() - 1);
    for mut row in y.lanes_mut(last) {
        let mut mx = F::neg_infinity();
        for v in row.iter() {
            if *v > mx {
                mx = *v;
            }
        }
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    y
}

/// VJP of `softmax_last` given the forward output `y`.
pub fn softmax_last_backward<F: Real>(y: &ArrayD<F>, dy: &ArrayD<F>) -> ArrayD<F> {
    let mut dx = dy.clone();
    let last = Axis(y.ndim() - 1);
    for (mut drow, yrow) in dx.lanes_mut(last).into_iter().zip(y.lanes(last)) {
        let mut dot = F::zero();
        for (d, yv) in drow.iter().zip(yrow.iter()) {
            dot += *d * *yv;
        }
        for (d, yv) in drow.iter_mut().zip(yrow.iter()) {
            *d = *yv * (*d - dot);
        }
    }
    dx
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer norm over the last axis: gamma * (x - mean)/sqrt(var + eps) + beta.
pub fn layer_norm_forward<F: Real>(x: &ArrayD<F>, gamma: &ArrayD<F>, beta: &ArrayD<F>) -> ArrayD<F> {
    let eps = F::of_f64(LAYER_NORM_EPS);
    let d = *x.shape().last().expect("layer_norm input rank >= 1");
    let dn = F::of_f64(d as f64);
    let mut y = x.clone();
    let last = Axis(x.ndim() - 1);
    let g = gamma.view().into_shape_with_order(d).expect("gamma shape");
    let b = beta.view().into_shape_with_order(d).expect("beta shape");
    for mut row in y.lanes_mut(last) {
        let mut mean = F::zero();
        for v in row.iter() {
            mean += *v;
        }
        mean = mean / dn;
        let mut var = F::zero();
        for v in row.iter() {
            let c = *v - mean;
            var += c * c;
        }
        var = var / dn;
        let inv = (var + eps).sqrt().recip();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * g[i] + b[i];
        }
    }
    y
}

/// VJP of layer norm; returns (dx, dgamma, dbeta).
pub fn layer_norm_backward<F: Real>(
    x: &ArrayD<F>,
    gamma: &ArrayD<F>,
    dy: &ArrayD<F>,
) -> (ArrayD<F>, ArrayD<F>, ArrayD<F>) {
    let eps = F::of_f64(LAYER_NORM_EPS);
    let d = *x.shape().last().expect("layer_norm input rank >= 1");
    let dn = F::of_f64(d as f64);
    let g = gamma.view().into_shape_with_order(d).expect("gamma shape");
    let mut dx = x.clone();
    let mut dgamma = ndarray::Array1::<F>::zeros(d);
    let mut dbeta = ndarray::Array1::<F>::zeros(d);
    let last = Axis(x.ndim() - 1);
    for (mut dxrow, (xrow, dyrow)) in dx
        .lanes_mut(last)
        .into_iter()
        .zip(x.lanes(last).into_iter().zip(dy.lanes(last)))
    {
        let mut mean = F::zero();
        for v in xrow.iter() {
            mean += *v;
        }
        mean = mean / dn;
        let mut var = F::zero();
        for v in xrow.iter() {
            let c = *v - mean;
            var += c * c;
        }
        var = var / dn;
        let inv = (var + eps).sqrt().recip();
        // xhat and the two row means needed by the dx formula
        let mut mean_h = F::zero();
        let mut mean_hx = F::zero();
        let mut xhat = Vec::with_capacity(d);
        for (i, v) in xrow.iter().enumerate() {
            let xh = (*v - mean) * inv;
            let h = dyrow[i] * g[i];
            mean_h += h;
            mean_hx += h * xh;
            xhat.push(xh);
        }
        mean_h = mean_h / dn;
        mean_hx = mean_hx / dn;
        for (i, dv) in dxrow.iter_mut().enumerate() {
            let h = dyrow[i] * g[i];
            *dv = inv * (h - mean_h - xhat[i] * mean_hx);
            dgamma[i] += dyrow[i] * xhat[i];
            dbeta[i] += dyrow[i];
        }
    }
    (dx, dgamma.into_dyn(), dbeta.into_dyn())
}

/// Cyclic roll along two axes. Positive shift moves content toward higher indices.
pub fn roll2<F: Real>(x: &ArrayD<F>, shift: [isize; 2], axes: [usize; 2]) -> ArrayD<F> {
    let mut out = x.clone();
    for (s, ax) in shift.iter().zip(axes.iter()) {
        let len = out.shape()[*ax] as isize;
        if len == 0 {
            continue;
        }
        let s = s.rem_euclid(len);
        if s == 0 {
            continue;
        }
        let src = out;
        let mut dst = src.clone();
        let axis = Axis(*ax);
        for i in 0..len {
            let j = (i + s).rem_euclid(len);
            dst.index_axis_mut(axis, j as usize)
                .assign(&src.index_axis(axis, i as usize));
        }
        out = dst;
    }
    out
}

/// Batched matmul: a [..,N,K] x b [..,K,M] with identical leading dims.
pub fn batch_matmul<F: Real>(a: &ArrayD<F>, b: &ArrayD<F>) -> Result<ArrayD<F>> {
    let ra = a.ndim();
    let rb = b.ndim();
    if ra != rb || ra < 2 {
        return Err(Error::Shape(format!(
            "batch_matmul rank mismatch: {ra} vs {rb}"
        )));
    }
    let (lead_a, tail_a) = a.shape().split_at(ra - 2);
    let (lead_b, tail_b) = b.shape().split_at(rb - 2);
    if lead_a != lead_b || tail_a[1] != tail_b[0] {
        return Err(Error::Shape(format!(
            "batch_matmul shapes {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let l: usize = lead_a.iter().product();
    let (n, k) = (tail_a[0], tail_a[1]);
    let m = tail_b[1];
    let a3 = a
        .view()
        .into_shape_with_order((l, n, k))
        .expect("batch_matmul lhs reshape");
    let b3 = b
        .view()
        .into_shape_with_order((l, k, m))
        .expect("batch_matmul rhs reshape");
    let mut out = ndarray::Array3::<F>::zeros((l, n, m));
    for li in 0..l {
        let prod = a3.index_axis(Axis(0), li).dot(&b3.index_axis(Axis(0), li));
        out.index_axis_mut(Axis(0), li).assign(&prod);
    }
    let mut shape: Vec<usize> = lead_a.to_vec();
    shape.push(n);
    shape.push(m);
    Ok(out
        .into_dyn()
        .into_shape_with_order(shape.as_slice())
        .expect("batch_matmul out reshape"))
}

/// View a dynamic array as 4-D, checking rank.
pub fn as4<F: Real>(x: &ArrayD<F>, what: &str) -> Result<Array4<F>> {
    x.view()
        .into_dimensionality::<Ix4>()
        .map(|v| v.to_owned())
        .map_err(|_| Error::Shape(format!("{what}: expected 4-D, got {:?}", x.shape())))
}

/// View a dynamic array as 2-D, checking rank.
pub fn as2<F: Real>(x: &ArrayD<F>, what: &str) -> Result<Array2<F>> {
    x.view()
        .into_dimensionality::<Ix2>()
        .map(|v| v.to_owned())
        .map_err(|_| Error::Shape(format!("{what}: expected 2-D, got {:?}", x.shape())))
}
