//! The layer vocabulary: dense, conv2d, relu, global average pool, sigmoid
//! and sinusoidal time embedding, each with an exact backward pass.
//!
//! Layers operate on single samples. Convolutions take `C×H×W` input and use
//! the cross-correlation convention with zero padding; they are lowered to a
//! matrix product over an im2col buffer.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::array::{Array, Scalar};
use super::rng::Rng;
use crate::error::{Error, Result};

#[repr(u8)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Dense = 0,
    Conv2d = 1,
    Relu = 2,
    GlobalAvgPool = 3,
    Sigmoid = 4,
    TimeEmbed = 5,
}

impl LayerKind {
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => LayerKind::Dense,
            1 => LayerKind::Conv2d,
            2 => LayerKind::Relu,
            3 => LayerKind::GlobalAvgPool,
            4 => LayerKind::Sigmoid,
            5 => LayerKind::TimeEmbed,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::GlobalAvgPool => "global-avg-pool",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::TimeEmbed => "time-embed",
        }
    }
}

/// Layer kind plus its size parameters.
///
/// `dims` layout per kind:
/// * dense: `[n_in, n_out]`
/// * conv2d: `[in_channels, out_channels, kernel, stride, padding]`
/// * time-embed: `[dim]`
/// * relu, global-avg-pool, sigmoid: `[]`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub dims: Vec<u32>,
}

impl LayerSpec {
    pub fn dense(n_in: usize, n_out: usize) -> Self {
        Self {
            kind: LayerKind::Dense,
            dims: vec![n_in as u32, n_out as u32],
        }
    }

    pub fn conv2d(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kind: LayerKind::Conv2d,
            dims: vec![
                in_ch as u32,
                out_ch as u32,
                kernel as u32,
                stride as u32,
                pad as u32,
            ],
        }
    }

    pub fn relu() -> Self {
        Self {
            kind: LayerKind::Relu,
            dims: vec![],
        }
    }

    pub fn global_avg_pool() -> Self {
        Self {
            kind: LayerKind::GlobalAvgPool,
            dims: vec![],
        }
    }

    pub fn sigmoid() -> Self {
        Self {
            kind: LayerKind::Sigmoid,
            dims: vec![],
        }
    }

    pub fn time_embed(dim: usize) -> Self {
        Self {
            kind: LayerKind::TimeEmbed,
            dims: vec![dim as u32],
        }
    }

    fn dim(&self, i: usize) -> usize {
        self.dims[i] as usize
    }

    /// Checks `dims` arity and values for the kind.
    pub fn validate(&self) -> Result<()> {
        let arity = match self.kind {
            LayerKind::Dense => 2,
            LayerKind::Conv2d => 5,
            LayerKind::TimeEmbed => 1,
            _ => 0,
        };
        if self.dims.len() != arity {
            return Err(Error::invalid(format!(
                "{} expects {arity} dims, got {:?}",
                self.kind.name(),
                self.dims
            )));
        }
        let ok = match self.kind {
            LayerKind::Dense => self.dims.iter().all(|&d| d > 0),
            LayerKind::Conv2d => {
                self.dims[..4].iter().all(|&d| d > 0) && self.dims[2] % 2 == 1
            }
            LayerKind::TimeEmbed => self.dims[0] > 0 && self.dims[0] % 2 == 0,
            _ => true,
        };
        if !ok {
            return Err(Error::invalid(format!(
                "bad dims {:?} for {}",
                self.dims,
                self.kind.name()
            )));
        }
        Ok(())
    }

    /// Output shape for a given input shape; the shape type-checker.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let mismatch = || {
            Error::shape(format!(
                "{} {:?} cannot take input {input:?}",
                self.kind.name(),
                self.dims
            ))
        };
        match self.kind {
            LayerKind::Dense => match input {
                [n] if *n == self.dim(0) => Ok(vec![self.dim(1)]),
                _ => Err(mismatch()),
            },
            LayerKind::Conv2d => match input {
                [c, h, w] if *c == self.dim(0) => {
                    let (k, s, p) = (self.dim(2), self.dim(3), self.dim(4));
                    let ho = conv_out_dim(*h, k, s, p).ok_or_else(mismatch)?;
                    let wo = conv_out_dim(*w, k, s, p).ok_or_else(mismatch)?;
                    Ok(vec![self.dim(1), ho, wo])
                }
                _ => Err(mismatch()),
            },
            LayerKind::Relu | LayerKind::Sigmoid => Ok(input.to_vec()),
            LayerKind::GlobalAvgPool => match input {
                [c, _, _] => Ok(vec![*c]),
                _ => Err(mismatch()),
            },
            LayerKind::TimeEmbed => match input {
                [1] => Ok(vec![self.dim(0)]),
                _ => Err(mismatch()),
            },
        }
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self.kind {
            LayerKind::Dense => vec![vec![self.dim(1), self.dim(0)], vec![self.dim(1)]],
            LayerKind::Conv2d => vec![
                vec![self.dim(1), self.dim(0), self.dim(2), self.dim(2)],
                vec![self.dim(1)],
            ],
            _ => vec![],
        }
    }
}

/// Standard convolution arithmetic; `None` when the output would be empty.
pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || n + 2 * pad < k {
        return None;
    }
    Some((n + 2 * pad - k) / stride + 1)
}

/// Parameterized layer. Weights are `[out, in]` for dense and `[K, C, k, k]`
/// for conv2d; every parametric layer carries a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T: Scalar = f32> {
    spec: LayerSpec,
    params: Vec<Array<T>>,
}

/// Values a layer keeps from its forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerCache<T: Scalar> {
    input: Array<T>,
    output: Array<T>,
    cols: Option<Vec<T>>,
}

impl<T: Scalar> Layer<T> {
    /// He-normal weights, zero biases.
    pub fn init(spec: LayerSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        let mut params = Vec::with_capacity(shapes.len());
        if let [w, b] = &shapes[..] {
            let fan_in: usize = w[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            params.push(rng.normal_array::<T>(w).scale(T::lit(std)));
            params.push(Array::zeros(b));
        }
        Ok(Self { spec, params })
    }

    pub fn zeroed(spec: LayerSpec) -> Result<Self> {
        spec.validate()?;
        let params = spec.param_shapes().iter().map(|s| Array::zeros(s)).collect();
        Ok(Self { spec, params })
    }

    /// Builds a layer from explicit parameters, checking their shapes.
    pub fn with_params(spec: LayerSpec, params: Vec<Array<T>>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len()
            || shapes.iter().zip(&params).any(|(s, p)| s[..] != *p.shape())
        {
            return Err(Error::shape(format!(
                "parameters {:?} do not fit {} {:?}",
                params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>(),
                spec.kind.name(),
                spec.dims
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Array<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array<T>] {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        Layer {
            spec: self.spec.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    pub fn forward(&self, x: &Array<T>) -> Result<Array<T>> {
        Ok(self.run(x, false)?.0)
    }

    pub fn forward_train(&self, x: &Array<T>) -> Result<(Array<T>, LayerCache<T>)> {
        let (y, cols) = self.run(x, true)?;
        Ok((
            y.clone(),
            LayerCache {
                input: x.clone(),
                output: y,
                cols,
            },
        ))
    }

    fn run(&self, x: &Array<T>, keep_cols: bool) -> Result<(Array<T>, Option<Vec<T>>)> {
        let out_shape = self.spec.output_shape(x.shape())?;
        match self.spec.kind {
            LayerKind::Dense => Ok((dense(x, &self.params[0], &self.params[1])?, None)),
            LayerKind::Conv2d => {
                let (k, s, p) = (self.spec.dim(2), self.spec.dim(3), self.spec.dim(4));
                let (y, cols) = conv_forward(x, &self.params[0], Some(&self.params[1]), k, s, p)?;
                debug_assert_eq!(y.shape(), &out_shape[..]);
                Ok((y, keep_cols.then_some(cols)))
            }
            LayerKind::Relu => Ok((x.map(|v| v.max(T::zero())), None)),
            LayerKind::Sigmoid => Ok((x.map(sigmoid), None)),
            LayerKind::GlobalAvgPool => {
                let (c, h, w) = x.chw()?;
                let plane = h * w;
                let inv = T::one() / T::from_usize(plane).unwrap();
                let data = (0..c)
                    .map(|ch| {
                        x.data()[ch * plane..(ch + 1) * plane]
                            .iter()
                            .fold(T::zero(), |a, &v| a + v)
                            * inv
                    })
                    .collect();
                Ok((Array::new(&[c], data)?, None))
            }
            LayerKind::TimeEmbed => Ok((
                sinusoidal_embedding(x.data()[0], self.spec.dim(0)),
                None,
            )),
        }
    }

    /// Returns `(d_input, d_params)`; `d_params` follows [`Layer::params`].
    pub fn backward(
        &self,
        cache: &LayerCache<T>,
        dy: &Array<T>,
    ) -> Result<(Array<T>, Vec<Array<T>>)> {
        dy.expect_same_shape(&cache.output, "backward gradient")?;
        let x = &cache.input;
        match self.spec.kind {
            LayerKind::Dense => {
                let w = &self.params[0];
                let (n_out, n_in) = (w.shape()[0], w.shape()[1]);
                let mut dw = vec![T::zero(); n_out * n_in];
                let mut dx = vec![T::zero(); n_in];
                for j in 0..n_out {
                    let g = dy.data()[j];
                    let row = &w.data()[j * n_in..(j + 1) * n_in];
                    let drow = &mut dw[j * n_in..(j + 1) * n_in];
                    for i in 0..n_in {
                        drow[i] = g * x.data()[i];
                        dx[i] = dx[i] + g * row[i];
                    }
                }
                Ok((
                    Array::new(&[n_in], dx)?,
                    vec![Array::new(&[n_out, n_in], dw)?, dy.clone()],
                ))
            }
            LayerKind::Conv2d => {
                let (k, s, p) = (self.spec.dim(2), self.spec.dim(3), self.spec.dim(4));
                let cols = match &cache.cols {
                    Some(c) => std::borrow::Cow::Borrowed(c),
                    None => {
                        let (c, h, w) = x.chw()?;
                        let (ho, wo) = (dy.shape()[1], dy.shape()[2]);
                        std::borrow::Cow::Owned(im2col(x.data(), c, h, w, k, s, p, ho, wo))
                    }
                };
                let (dx, dw, db) = conv_backward(x, &self.params[0], &cols, dy, k, s, p)?;
                Ok((dx, vec![dw, db]))
            }
            LayerKind::Relu => Ok((
                x.zip_map(dy, |xi, g| if xi > T::zero() { g } else { T::zero() })?,
                vec![],
            )),
            LayerKind::Sigmoid => Ok((
                cache
                    .output
                    .zip_map(dy, |s, g| g * s * (T::one() - s))?,
                vec![],
            )),
            LayerKind::GlobalAvgPool => {
                let (c, h, w) = x.chw()?;
                let plane = h * w;
                let inv = T::one() / T::from_usize(plane).unwrap();
                let mut dx = Vec::with_capacity(c * plane);
                for ch in 0..c {
                    dx.extend(std::iter::repeat(dy.data()[ch] * inv).take(plane));
                }
                Ok((Array::new(&[c, h, w], dx)?, vec![]))
            }
            // the timestep is not a differentiable input
            LayerKind::TimeEmbed => Ok((Array::zeros(x.shape()), vec![])),
        }
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `[sin(t·f_0) … sin(t·f_{d/2-1}), cos(t·f_0) … cos(t·f_{d/2-1})]` with
/// `f_i = 10000^(-i/(d/2))`. Defined for every `t ≥ 0`, including `t = 0`.
pub fn sinusoidal_embedding<T: Scalar>(t: T, dim: usize) -> Array<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t * T::lit(freq);
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Array::from_vec(out)
}

/// `out[j] = Σ_i w[j,i]·x[i] + b[j]`
pub fn dense<T: Scalar>(x: &Array<T>, w: &Array<T>, b: &Array<T>) -> Result<Array<T>> {
    let (n_out, n_in) = match w.shape() {
        [o, i] => (*o, *i),
        s => return Err(Error::shape(format!("dense weights must be 2-D, got {s:?}"))),
    };
    if x.shape() != [n_in] || b.shape() != [n_out] {
        return Err(Error::shape(format!(
            "dense: input {:?}, weights {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let out = (0..n_out)
        .map(|j| {
            w.data()[j * n_in..(j + 1) * n_in]
                .iter()
                .zip(x.data())
                .fold(b.data()[j], |acc, (&wi, &xi)| acc + wi * xi)
        })
        .collect();
    Ok(Array::from_vec(out))
}

/// Bias-free 2-D cross-correlation of a `C×H×W` input with `K×C×k×k` kernels.
pub fn conv2d<T: Scalar>(
    x: &Array<T>,
    kernels: &Array<T>,
    stride: usize,
    padding: usize,
) -> Result<Array<T>> {
    let k = match kernels.shape() {
        [_, _, kh, kw] if kh == kw => *kh,
        s => return Err(Error::shape(format!("kernels must be K×C×k×k, got {s:?}"))),
    };
    if k % 2 == 0 {
        return Err(Error::invalid(format!("kernel size {k} must be odd")));
    }
    Ok(conv_forward(x, kernels, None, k, stride, padding)?.0)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let cols_per_row = ho * wo;
    let mut cols = vec![T::zero(); c * k * k * cols_per_row];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * cols_per_row..(row + 1) * cols_per_row];
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let cols_per_row = ho * wo;
    let mut x = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * cols_per_row..(row + 1) * cols_per_row];
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_forward<T: Scalar>(
    x: &Array<T>,
    kernels: &Array<T>,
    bias: Option<&Array<T>>,
    k: usize,
    s: usize,
    p: usize,
) -> Result<(Array<T>, Vec<T>)> {
    let (c, h, w) = x.chw()?;
    let kc = kernels.shape()[0];
    if kernels.shape() != [kc, c, k, k] {
        return Err(Error::shape(format!(
            "conv2d: input {:?} vs kernels {:?}",
            x.shape(),
            kernels.shape()
        )));
    }
    let (ho, wo) = match (conv_out_dim(h, k, s, p), conv_out_dim(w, k, s, p)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::shape(format!(
                "conv2d: non-positive output for input {h}×{w}, kernel {k}, stride {s}, padding {p}"
            )))
        }
    };
    let cols = im2col(x.data(), c, h, w, k, s, p, ho, wo);
    let ckk = c * k * k;
    let npix = ho * wo;
    let mut out = vec![T::zero(); kc * npix];
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_mut(npix).zip(b.data()) {
            row.iter_mut().for_each(|v| *v = bv);
        }
    }
    {
        let wv = ArrayView2::from_shape((kc, ckk), kernels.data()).unwrap();
        let cv = ArrayView2::from_shape((ckk, npix), &cols).unwrap();
        let mut ov = ArrayViewMut2::from_shape((kc, npix), &mut out).unwrap();
        general_mat_mul(T::one(), &wv, &cv, T::one(), &mut ov);
    }
    Ok((Array::new(&[kc, ho, wo], out)?, cols))
}

fn conv_backward<T: Scalar>(
    x: &Array<T>,
    kernels: &Array<T>,
    cols: &[T],
    dy: &Array<T>,
    k: usize,
    s: usize,
    p: usize,
) -> Result<(Array<T>, Array<T>, Array<T>)> {
    let (c, h, w) = x.chw()?;
    let (kc, ho, wo) = dy.chw()?;
    let ckk = c * k * k;
    let npix = ho * wo;
    let dyv = ArrayView2::from_shape((kc, npix), dy.data()).unwrap();
    let cv = ArrayView2::from_shape((ckk, npix), cols).unwrap();
    let wv = ArrayView2::from_shape((kc, ckk), kernels.data()).unwrap();

    let mut dw = vec![T::zero(); kc * ckk];
    general_mat_mul(
        T::one(),
        &dyv,
        &cv.t(),
        T::zero(),
        &mut ArrayViewMut2::from_shape((kc, ckk), &mut dw).unwrap(),
    );
    let mut dcols = vec![T::zero(); ckk * npix];
    general_mat_mul(
        T::one(),
        &wv.t(),
        &dyv,
        T::zero(),
        &mut ArrayViewMut2::from_shape((ckk, npix), &mut dcols).unwrap(),
    );
    let db = dy
        .data()
        .chunks(npix)
        .map(|row| row.iter().fold(T::zero(), |a, &v| a + v))
        .collect();
    let dx = col2im(&dcols, c, h, w, k, s, p, ho, wo);
    Ok((
        Array::new(&[c, h, w], dx)?,
        Array::new(kernels.shape(), dw)?,
        Array::from_vec(db),
    ))
}
