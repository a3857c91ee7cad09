//! Raw numeric kernels: im2col convolution, 2x2 max pooling and batch
//! normalization, each with its backward pass. Everything is NCHW, stride 1
//! for convolutions, and generic over the element type.

use ndarray::{Array1, Array2, Array4, ArrayView4, Axis};

use crate::elem::{c, Elem};
use crate::error::{Error, Result};

/// Lay out one sample's receptive fields as a (Cg*k*k, Ho*Wo) matrix.
fn im2col<T: Elem>(
    x: &ArrayView4<'_, T>,
    n: usize,
    c_start: usize,
    c_len: usize,
    k: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Array2<T> {
    let (_, _, h, w) = x.dim();
    let mut col = Array2::<T>::zeros((c_len * k * k, out_h * out_w));
    for ci in 0..c_len {
        let plane = x.index_axis(Axis(0), n);
        let plane = plane.index_axis(Axis(0), c_start + ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut col_row = col.row_mut(row);
                let col_row = col_row.as_slice_mut().expect("contiguous row");
                for oy in 0..out_h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = plane.index_axis(Axis(0), iy as usize);
                    let src = src.as_slice().expect("contiguous plane row");
                    let base = oy * out_w;
                    for ox in 0..out_w {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col_row[base + ox] = src[ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the column-matrix gradient back into an input-shaped buffer.
fn col2im_add<T: Elem>(
    gx: &mut Array4<T>,
    col: &Array2<T>,
    n: usize,
    c_start: usize,
    c_len: usize,
    k: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) {
    let (_, _, h, w) = gx.dim();
    for ci in 0..c_len {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let col_row = col.row(row);
                let col_row = col_row.as_slice().expect("contiguous row");
                for oy in 0..out_h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = oy * out_w;
                    for ox in 0..out_w {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[[n, c_start + ci, iy as usize, ix as usize]] =
                            gx[[n, c_start + ci, iy as usize, ix as usize]] + col_row[base + ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_out_shape(
    x: (usize, usize, usize, usize),
    w: (usize, usize, usize, usize),
    pad: usize,
    groups: usize,
) -> Result<(usize, usize, usize, usize)> {
    let (n, cin, h, width) = x;
    let (cout, cin_g, kh, kw) = w;
    if kh != kw {
        return Err(Error::Shape(format!("kernel must be square, got {kh}x{kw}")));
    }
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(Error::Config(format!(
            "groups {groups} must divide in/out channels {cin}/{cout}"
        )));
    }
    if cin_g != cin / groups {
        return Err(Error::Shape(format!(
            "weight expects {cin_g} input channels per group, input has {}",
            cin / groups
        )));
    }
    let k = kh;
    if h + 2 * pad < k || width + 2 * pad < k {
        return Err(Error::Shape(format!(
            "spatial dims {h}x{width} (pad {pad}) smaller than kernel {k}"
        )));
    }
    Ok((n, cout, h + 2 * pad - k + 1, width + 2 * pad - k + 1))
}

/// Stride-1 2D convolution. `pad` is symmetric zero padding; `(k-1)/2`
/// preserves the spatial size for odd kernels, 0 gives a valid convolution.
pub fn conv2d_forward<T: Elem>(
    x: &Array4<T>,
    w: &Array4<T>,
    b: Option<&Array4<T>>,
    pad: usize,
    groups: usize,
) -> Result<Array4<T>> {
    let (n, cin, _, _) = x.dim();
    let (cout, _, k, _) = w.dim();
    let (_, _, out_h, out_w) = conv2d_out_shape(x.dim(), w.dim(), pad, groups)?;
    if let Some(b) = b {
        if b.dim() != (1, cout, 1, 1) {
            return Err(Error::Shape(format!(
                "bias shape {:?}, expected (1,{cout},1,1)",
                b.dim()
            )));
        }
    }
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let mut out = Array4::<T>::zeros((n, cout, out_h, out_w));
    let xv = x.view();
    for i in 0..n {
        for g in 0..groups {
            let col = im2col(&xv, i, g * cin_g, cin_g, k, pad, out_h, out_w);
            let wmat = w
                .slice(ndarray::s![g * cout_g..(g + 1) * cout_g, .., .., ..])
                .into_shape_with_order((cout_g, cin_g * k * k))
                .expect("weight reshape");
            let res = wmat.dot(&col);
            let mut dst = out.slice_mut(ndarray::s![i, g * cout_g..(g + 1) * cout_g, .., ..]);
            dst.assign(
                &res.into_shape_with_order((cout_g, out_h, out_w))
                    .expect("output reshape"),
            );
        }
    }
    if let Some(b) = b {
        for ch in 0..cout {
            let bias = b[[0, ch, 0, 0]];
            out.slice_mut(ndarray::s![.., ch, .., ..])
                .mapv_inplace(|v| v + bias);
        }
    }
    Ok(out)
}

pub struct ConvGrads<T: Elem> {
    pub gx: Option<Array4<T>>,
    pub gw: Option<Array4<T>>,
    pub gb: Option<Array4<T>>,
}

/// Backward pass of [`conv2d_forward`]. Each gradient is computed only when
/// the corresponding `need_*` flag is set.
pub fn conv2d_backward<T: Elem>(
    x: &Array4<T>,
    w: &Array4<T>,
    gout: &Array4<T>,
    pad: usize,
    groups: usize,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> ConvGrads<T> {
    let (n, cin, _, _) = x.dim();
    let (cout, _, k, _) = w.dim();
    let (_, _, out_h, out_w) = gout.dim();
    let cin_g = cin / groups;
    let cout_g = cout / groups;

    let mut gx = need_x.then(|| Array4::<T>::zeros(x.dim()));
    let mut gw = need_w.then(|| Array4::<T>::zeros(w.dim()));
    let gb = need_b.then(|| {
        let mut gb = Array4::<T>::zeros((1, cout, 1, 1));
        for ch in 0..cout {
            gb[[0, ch, 0, 0]] = gout.slice(ndarray::s![.., ch, .., ..]).iter().copied().sum();
        }
        gb
    });

    let xv = x.view();
    for i in 0..n {
        for g in 0..groups {
            let gout_mat = gout
                .slice(ndarray::s![i, g * cout_g..(g + 1) * cout_g, .., ..])
                .into_shape_with_order((cout_g, out_h * out_w))
                .expect("gout reshape")
                .to_owned();
            if let Some(gw) = gw.as_mut() {
                let col = im2col(&xv, i, g * cin_g, cin_g, k, pad, out_h, out_w);
                let gw_part = gout_mat.dot(&col.t());
                let mut dst = gw.slice_mut(ndarray::s![g * cout_g..(g + 1) * cout_g, .., .., ..]);
                let gw_part = gw_part
                    .into_shape_with_order((cout_g, cin_g, k, k))
                    .expect("gw reshape");
                dst.zip_mut_with(&gw_part, |d, &s| *d = *d + s);
            }
            if let Some(gx) = gx.as_mut() {
                let wmat = w
                    .slice(ndarray::s![g * cout_g..(g + 1) * cout_g, .., .., ..])
                    .into_shape_with_order((cout_g, cin_g * k * k))
                    .expect("weight reshape");
                let col_grad = wmat.t().dot(&gout_mat);
                col2im_add(gx, &col_grad, i, g * cin_g, cin_g, k, pad, out_h, out_w);
            }
        }
    }
    ConvGrads { gx, gw, gb }
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
/// Returns the pooled tensor and the flat argmax index of each output cell.
pub fn maxpool2_forward<T: Elem>(x: &Array4<T>) -> (Array4<T>, Vec<u32>) {
    let (n, cdim, h, w) = x.dim();
    let oh = h / 2;
    let ow = w / 2;
    let mut out = Array4::<T>::zeros((n, cdim, oh, ow));
    let mut arg = vec![0u32; n * cdim * oh * ow];
    let mut a = 0;
    for i in 0..n {
        for ch in 0..cdim {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = x[[i, ch, 2 * oy, 2 * ox]];
                    let mut best_idx = (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let v = x[[i, ch, 2 * oy + dy, 2 * ox + dx]];
                        if v > best {
                            best = v;
                            best_idx = (2 * oy + dy) * w + (2 * ox + dx);
                        }
                    }
                    out[[i, ch, oy, ox]] = best;
                    arg[a] = best_idx as u32;
                    a += 1;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Elem>(
    x_dim: (usize, usize, usize, usize),
    arg: &[u32],
    gout: &Array4<T>,
) -> Array4<T> {
    let (n, cdim, h, w) = x_dim;
    let (_, _, oh, ow) = gout.dim();
    let mut gx = Array4::<T>::zeros((n, cdim, h, w));
    let mut a = 0;
    for i in 0..n {
        for ch in 0..cdim {
            for oy in 0..oh {
                for ox in 0..ow {
                    let idx = arg[a] as usize;
                    a += 1;
                    let (iy, ix) = (idx / w, idx % w);
                    gx[[i, ch, iy, ix]] = gx[[i, ch, iy, ix]] + gout[[i, ch, oy, ox]];
                }
            }
        }
    }
    gx
}

/// Cached values from a batch-norm forward needed by its backward pass.
pub struct BnCache<T: Elem> {
    pub x_hat: Array4<T>,
    pub inv_std: Array1<T>,
    pub training: bool,
}

pub struct BnForward<T: Elem> {
    pub y: Array4<T>,
    pub cache: BnCache<T>,
    /// Updated running statistics, present only in training mode.
    pub new_running: Option<(Array1<T>, Array1<T>)>,
}

/// Per-channel batch normalization over (N, H, W).
///
/// Training mode normalizes with biased batch statistics and folds them into
/// the running estimates with `new = (1 - momentum) * old + momentum * batch`
/// (unbiased variance for the running update). Eval mode normalizes with the
/// running statistics.
pub fn batch_norm_forward<T: Elem>(
    x: &Array4<T>,
    gamma: &Array4<T>,
    beta: &Array4<T>,
    running_mean: &Array1<T>,
    running_var: &Array1<T>,
    eps: T,
    momentum: T,
    training: bool,
) -> Result<BnForward<T>> {
    let (n, cdim, h, w) = x.dim();
    if gamma.dim() != (1, cdim, 1, 1) || beta.dim() != (1, cdim, 1, 1) {
        return Err(Error::Shape(format!(
            "batch norm affine params must be (1,{cdim},1,1)"
        )));
    }
    if running_mean.len() != cdim || running_var.len() != cdim {
        return Err(Error::Shape(format!(
            "running stats must have {cdim} channels"
        )));
    }
    let count = n * h * w;
    if training && count < 2 {
        return Err(Error::Shape(
            "batch norm training needs at least 2 values per channel".into(),
        ));
    }

    let mut x_hat = Array4::<T>::zeros(x.dim());
    let mut inv_std = Array1::<T>::zeros(cdim);
    let mut y = Array4::<T>::zeros(x.dim());
    let mut new_mean = running_mean.clone();
    let mut new_var = running_var.clone();

    for ch in 0..cdim {
        let (mean, var) = if training {
            let mut sum = T::zero();
            let mut sum_sq = T::zero();
            for v in x.slice(ndarray::s![.., ch, .., ..]).iter() {
                sum = sum + *v;
                sum_sq = sum_sq + *v * *v;
            }
            let cnt = c::<T>(count as f64);
            let mean = sum / cnt;
            let var = (sum_sq / cnt - mean * mean).max(T::zero());
            let unbiased = var * cnt / c::<T>((count - 1) as f64);
            new_mean[ch] = (T::one() - momentum) * running_mean[ch] + momentum * mean;
            new_var[ch] = (T::one() - momentum) * running_var[ch] + momentum * unbiased;
            (mean, var)
        } else {
            (running_mean[ch], running_var[ch])
        };
        let istd = T::one() / (var + eps).sqrt();
        inv_std[ch] = istd;
        let g = gamma[[0, ch, 0, 0]];
        let b = beta[[0, ch, 0, 0]];
        let src = x.slice(ndarray::s![.., ch, .., ..]);
        let mut xh = x_hat.slice_mut(ndarray::s![.., ch, .., ..]);
        let mut dst = y.slice_mut(ndarray::s![.., ch, .., ..]);
        ndarray::Zip::from(&mut xh)
            .and(&mut dst)
            .and(&src)
            .for_each(|xh, dst, &v| {
                let norm = (v - mean) * istd;
                *xh = norm;
                *dst = g * norm + b;
            });
    }

    Ok(BnForward {
        y,
        cache: BnCache {
            x_hat,
            inv_std,
            training,
        },
        new_running: training.then_some((new_mean, new_var)),
    })
}

pub struct BnGrads<T: Elem> {
    pub gx: Option<Array4<T>>,
    pub ggamma: Option<Array4<T>>,
    pub gbeta: Option<Array4<T>>,
}

pub fn batch_norm_backward<T: Elem>(
    cache: &BnCache<T>,
    gamma: &Array4<T>,
    gout: &Array4<T>,
    need_x: bool,
    need_affine: bool,
) -> BnGrads<T> {
    let (n, cdim, h, w) = gout.dim();
    let count = c::<T>((n * h * w) as f64);

    let mut gx = need_x.then(|| Array4::<T>::zeros(gout.dim()));
    let mut ggamma = need_affine.then(|| Array4::<T>::zeros((1, cdim, 1, 1)));
    let mut gbeta = need_affine.then(|| Array4::<T>::zeros((1, cdim, 1, 1)));

    for ch in 0..cdim {
        let g_slice = gout.slice(ndarray::s![.., ch, .., ..]);
        let xh_slice = cache.x_hat.slice(ndarray::s![.., ch, .., ..]);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for (g, xh) in g_slice.iter().zip(xh_slice.iter()) {
            sum_g = sum_g + *g;
            sum_gx = sum_gx + *g * *xh;
        }
        if let Some(gg) = ggamma.as_mut() {
            gg[[0, ch, 0, 0]] = sum_gx;
        }
        if let Some(gb) = gbeta.as_mut() {
            gb[[0, ch, 0, 0]] = sum_g;
        }
        if let Some(gx) = gx.as_mut() {
            let scale = gamma[[0, ch, 0, 0]] * cache.inv_std[ch];
            let mut dst = gx.slice_mut(ndarray::s![.., ch, .., ..]);
            if cache.training {
                let mean_g = sum_g / count;
                let mean_gx = sum_gx / count;
                ndarray::Zip::from(&mut dst)
                    .and(&g_slice)
                    .and(&xh_slice)
                    .for_each(|d, &g, &xh| {
                        *d = scale * (g - mean_g - xh * mean_gx);
                    });
            } else {
                ndarray::Zip::from(&mut dst).and(&g_slice).for_each(|d, &g| {
                    *d = scale * g;
                });
            }
        }
    }
    BnGrads { gx, ggamma, gbeta }
}
