//! Forward/backward kernels operating on plain tensors.
//!
//! The autodiff graph calls into these, and inference paths use them
//! directly without recording anything.

use rand::Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvMeta {
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: usize,
}

impl ConvMeta {
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < self.kernel || wp < self.kernel || self.stride == 0 {
            return Err(Error::dim("conv2d", &[h, w], &[self.kernel, self.kernel]));
        }
        Ok((
            (hp - self.kernel) / self.stride + 1,
            (wp - self.kernel) / self.stride + 1,
        ))
    }
}

/// Weights of one trainable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub kind: LayerKind,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub conv: Option<ConvMeta>,
}

impl<T: Scalar> LayerParams<T> {
    /// He-normal conv layer with zero bias and "same" padding at stride 1.
    pub fn conv_he<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Self {
            kind: LayerKind::Conv,
            weight: Tensor::randn(&[cout, cin, k, k], std, rng),
            bias: Some(Tensor::zeros(&[cout])),
            conv: Some(ConvMeta {
                kernel: k,
                stride: 1,
                in_channels: cin,
                out_channels: cout,
                padding: (k - 1) / 2,
            }),
        }
    }

    /// He-normal dense layer with zero bias.
    pub fn dense_he<R: Rng + ?Sized>(fin: usize, fout: usize, rng: &mut R) -> Self {
        Self::dense_scaled(fin, fout, (2.0 / fin as f64).sqrt(), rng)
    }

    pub fn dense_scaled<R: Rng + ?Sized>(fin: usize, fout: usize, std: f64, rng: &mut R) -> Self {
        Self {
            kind: LayerKind::Dense,
            weight: Tensor::randn(&[fout, fin], std, rng),
            bias: Some(Tensor::zeros(&[fout])),
            conv: None,
        }
    }

    pub fn conv_from(
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(Error::dim("conv weight", s, &[0, 0, 0, 0]));
        }
        if let Some(b) = &bias {
            if b.shape() != [s[0]] {
                return Err(Error::dim("conv bias", b.shape(), &[s[0]]));
            }
        }
        let conv = ConvMeta {
            kernel: s[2],
            stride,
            in_channels: s[1],
            out_channels: s[0],
            padding,
        };
        Ok(Self {
            kind: LayerKind::Conv,
            weight,
            bias,
            conv: Some(conv),
        })
    }

    pub fn dense_from(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 2 {
            return Err(Error::dim("dense weight", s, &[0, 0]));
        }
        if let Some(b) = &bias {
            if b.shape() != [s[0]] {
                return Err(Error::dim("dense bias", b.shape(), &[s[0]]));
            }
        }
        Ok(Self {
            kind: LayerKind::Dense,
            weight,
            bias,
            conv: None,
        })
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        std::iter::once(&self.weight).chain(self.bias.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.iter_mut())
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    m: &ConvMeta,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let k = m.kernel;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ci * k + ki) * k + kj) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * m.stride + ki) as isize - m.padding as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * m.stride + kj) as isize - m.padding as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    m: &ConvMeta,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let k = m.kernel;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ci * k + ki) * k + kj) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * m.stride + ki) as isize - m.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * m.stride + kj) as isize - m.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_check<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<()> {
    let (is, ws) = (input.shape(), weight.shape());
    if is.len() != 4 || ws.len() != 4 || is[1] != ws[1] || ws[2] != ws[3] {
        return Err(Error::dim("conv2d", is, ws));
    }
    Ok(())
}

/// Zero-padded 2-D cross-correlation of an `(N, Cin, H, W)` batch.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, params: &LayerParams<T>) -> Result<Tensor<T>> {
    let meta = match (params.kind, params.conv) {
        (LayerKind::Conv, Some(m)) => m,
        _ => return Err(Error::contract("conv2d_forward needs conv layer params")),
    };
    conv2d(
        input,
        &params.weight,
        params.bias.as_ref(),
        meta.stride,
        meta.padding,
    )
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    conv_check(input, weight)?;
    let (n, c, h, w) = dims4(input);
    let ws = weight.shape();
    let meta = ConvMeta {
        kernel: ws[2],
        stride,
        in_channels: c,
        out_channels: ws[0],
        padding,
    };
    let (oh, ow) = meta.out_hw(h, w)?;
    let ckk = c * meta.kernel * meta.kernel;
    let p = oh * ow;
    let cout = meta.out_channels;
    let mut out = vec![T::zero(); n * cout * p];
    let mut cols = vec![T::zero(); ckk * p];
    let x = input.data();
    for ni in 0..n {
        im2col(
            &x[ni * c * h * w..(ni + 1) * c * h * w],
            c,
            h,
            w,
            &meta,
            oh,
            ow,
            &mut cols,
        );
        let dst = &mut out[ni * cout * p..(ni + 1) * cout * p];
        if let Some(b) = bias {
            for (co, row) in dst.chunks_mut(p).enumerate() {
                row.fill(b.data()[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            cout,
            ckk,
            p,
            T::one(),
            weight.data(),
            (ckk as isize, 1),
            &cols,
            (p as isize, 1),
            beta,
            dst,
            (p as isize, 1),
        );
    }
    Tensor::new(&[n, cout, oh, ow], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Gradients of [`conv2d`] given the upstream gradient `dout`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &[T],
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    conv_check(input, weight)?;
    let (n, c, h, w) = dims4(input);
    let ws = weight.shape();
    let meta = ConvMeta {
        kernel: ws[2],
        stride,
        in_channels: c,
        out_channels: ws[0],
        padding,
    };
    let (oh, ow) = meta.out_hw(h, w)?;
    let ckk = c * meta.kernel * meta.kernel;
    let p = oh * ow;
    let cout = meta.out_channels;
    if dout.len() != n * cout * p {
        return Err(Error::dim(
            "conv2d_backward",
            &[n, cout, oh, ow],
            &[dout.len()],
        ));
    }
    let mut dw = vec![T::zero(); cout * ckk];
    let mut db = vec![T::zero(); cout];
    let mut dx = need_input.then(|| vec![T::zero(); n * c * h * w]);
    let mut cols = vec![T::zero(); ckk * p];
    let mut dcols = vec![T::zero(); ckk * p];
    let x = input.data();
    for ni in 0..n {
        let go = &dout[ni * cout * p..(ni + 1) * cout * p];
        for (co, row) in go.chunks(p).enumerate() {
            db[co] += row.iter().copied().sum::<T>();
        }
        im2col(
            &x[ni * c * h * w..(ni + 1) * c * h * w],
            c,
            h,
            w,
            &meta,
            oh,
            ow,
            &mut cols,
        );
        // dW += dY * cols^T
        T::gemm(
            cout,
            p,
            ckk,
            T::one(),
            go,
            (p as isize, 1),
            &cols,
            (1, p as isize),
            T::one(),
            &mut dw,
            (ckk as isize, 1),
        );
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T * dY
            T::gemm(
                ckk,
                cout,
                p,
                T::one(),
                weight.data(),
                (1, ckk as isize),
                go,
                (p as isize, 1),
                T::zero(),
                &mut dcols,
                (p as isize, 1),
            );
            col2im(
                &dcols,
                c,
                h,
                w,
                &meta,
                oh,
                ow,
                &mut dx[ni * c * h * w..(ni + 1) * c * h * w],
            );
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

/// `input · Wᵀ + bias` for an `(N, F)` batch.
pub fn dense_forward<T: Scalar>(input: &Tensor<T>, params: &LayerParams<T>) -> Result<Tensor<T>> {
    if params.kind != LayerKind::Dense {
        return Err(Error::contract("dense_forward needs dense layer params"));
    }
    dense(input, &params.weight, params.bias.as_ref())
}

pub fn dense<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (is, ws) = (input.shape(), weight.shape());
    if is.len() != 2 || ws.len() != 2 || is[1] != ws[1] {
        return Err(Error::dim("dense", is, ws));
    }
    let (n, f, g) = (is[0], is[1], ws[0]);
    let mut out = vec![T::zero(); n * g];
    if let Some(b) = bias {
        for row in out.chunks_mut(g) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(
        n,
        f,
        g,
        T::one(),
        input.data(),
        (f as isize, 1),
        weight.data(),
        (1, f as isize),
        beta,
        &mut out,
        (g as isize, 1),
    );
    Tensor::new(&[n, g], out)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &[T],
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (n, f) = (input.shape()[0], input.shape()[1]);
    let g = weight.shape()[0];
    let mut dw = vec![T::zero(); g * f];
    // dW = dY^T * X
    T::gemm(
        g,
        n,
        f,
        T::one(),
        dout,
        (1, g as isize),
        input.data(),
        (f as isize, 1),
        T::zero(),
        &mut dw,
        (f as isize, 1),
    );
    let mut db = vec![T::zero(); g];
    for row in dout.chunks(g) {
        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
    let dx = need_input.then(|| {
        let mut dx = vec![T::zero(); n * f];
        T::gemm(
            n,
            g,
            f,
            T::one(),
            dout,
            (g as isize, 1),
            weight.data(),
            (f as isize, 1),
            T::zero(),
            &mut dx,
            (f as isize, 1),
        );
        dx
    });
    (dx, dw, db)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

fn rows<T: Scalar>(input: &Tensor<T>) -> Result<(usize, usize)> {
    let s = input.shape();
    let last = *s
        .last()
        .ok_or_else(|| Error::contract("softmax of a 0-d tensor"))?;
    if last == 0 {
        return Err(Error::dim("softmax", s, &[1]));
    }
    Ok((input.numel() / last, last))
}

/// Softmax over the last axis with max subtraction.
pub fn softmax<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = rows(input)?;
    let mut out = input.data().to_vec();
    for row in out.chunks_mut(k) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(input.shape(), out)
}

/// `log(softmax(x))` over the last axis, computed as `x - max - log Σ exp(x - max)`.
pub fn log_softmax<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = rows(input)?;
    let mut out = input.data().to_vec();
    for row in out.chunks_mut(k) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Tensor::new(input.shape(), out)
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, per
/// output element, the flat input index of the selected maximum.
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    if input.shape().len() != 4 {
        return Err(Error::dim("maxpool2", input.shape(), &[0, 0, 0, 0]));
    }
    let (n, c, h, w) = dims4(input);
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::dim("maxpool2", input.shape(), &[2, 2]));
    }
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, arg))
}

pub(crate) fn dims4<T: Scalar>(t: &Tensor<T>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}
