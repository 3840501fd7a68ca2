//! Small layer library on top of candle tensors.
//!
//! Everything here is composed from differentiable primitives so that the
//! autograd path is available for every dtype, including f64 for gradient
//! checks.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor, WithDType, D};

use num_traits::Float;

use crate::error::Result;
use crate::params::{Init, ParamBuilder};

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        Self::with_std(pb, in_dim, out_dim, bias, 0.02)
    }

    pub fn with_std(
        pb: &ParamBuilder,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
    ) -> Result<Self> {
        let weight = pb.get("weight", &[out_dim, in_dim], Init::Normal(std))?;
        let bias = if bias {
            Some(pb.get("bias", &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Applies the projection to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let rows = x.elem_count() / self.in_dim;
        let flat = x.reshape((rows, self.in_dim))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = (y + expand_rows(b, rows)?)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-scalar input") = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get("weight", &[dim], Init::Ones)?,
            bias: pb.get("bias", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let dims = xn.dims().to_vec();
        let c = self.weight.elem_count();
        let rows = xn.elem_count() / c;
        let xn = xn.reshape((rows, c))?;
        let y = ((xn * expand_rows(&self.weight, rows)?)? + expand_rows(&self.bias, rows)?)?;
        Ok(y.reshape(dims)?)
    }
}

/// 2-D convolution over NCHW input with square kernel and symmetric padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        Self::with_std(pb, in_ch, out_ch, kernel, stride, padding, fan_in.sqrt().recip())
    }

    pub fn with_std(
        pb: &ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        std: f64,
    ) -> Result<Self> {
        Ok(Self {
            weight: pb.get("weight", &[out_ch, in_ch, kernel, kernel], Init::Normal(std))?,
            bias: pb.get("bias", &[out_ch], Init::Zeros)?,
            stride,
            padding,
        })
    }

    /// Stride-1 convolutions run as im2col + one matmul, whose backward pass
    /// is far cheaper on CPU than the transposed convolution candle would use.
    /// Columns are laid out `(C·k·k, B·H·W)` so the bias is broadcast along
    /// the trailing axis and its gradient is a contiguous row sum.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (out_ch, in_ch, k, _) = self.weight.dims4()?;
        if self.stride != 1 {
            let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
            return Ok(y.broadcast_add(&self.bias.reshape((1, out_ch, 1, 1))?)?);
        }
        let (b, _, h, w) = x.dims4()?;
        let (ho, wo) = (h + 2 * self.padding + 1 - k, w + 2 * self.padding + 1 - k);
        let cols = x.contiguous()?.apply_op1(Im2Col {
            kernel: k,
            padding: self.padding,
        })?;
        let wmat = self.weight.reshape((out_ch, in_ch * k * k))?;
        let y = wmat.matmul(&cols)?.broadcast_add(&self.bias.reshape((out_ch, 1))?)?;
        Ok(y.reshape((out_ch, b, ho, wo))?.transpose(0, 1)?.contiguous()?)
    }
}

/// Two-layer feed-forward block with a tanh-approximated GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &ParamBuilder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&pb.pp("fc1"), dim, hidden, true)?,
            fc2: Linear::new(&pb.pp("fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }
}

/// Unfolds `(B, C, H, W)` into stride-1 convolution columns
/// `(C·k·k, B·Ho·Wo)`; zero padding is implicit.
#[derive(Clone, Copy)]
struct Im2Col {
    kernel: usize,
    padding: usize,
}

impl Im2Col {
    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let span = 2 * self.padding + 1;
        (h + span - self.kernel, w + span - self.kernel)
    }

    /// Visits every (column element, source element) pair that is inside the
    /// image, as flat indices.
    fn for_each_tap(&self, (b, c, h, w): (usize, usize, usize, usize), mut f: impl FnMut(usize, usize)) {
        let (k, p) = (self.kernel, self.padding);
        let (ho, wo) = self.out_hw(h, w);
        let row_len = b * ho * wo;
        for ci in 0..c {
            for dy in 0..k {
                for dx in 0..k {
                    let row = ((ci * k + dy) * k + dx) * row_len;
                    for bi in 0..b {
                        let plane = (bi * c + ci) * h * w;
                        for y in 0..ho {
                            let Some(sy) = (y + dy).checked_sub(p).filter(|&sy| sy < h) else {
                                continue;
                            };
                            let out = row + (bi * ho + y) * wo;
                            for x in 0..wo {
                                if let Some(sx) = (x + dx).checked_sub(p).filter(|&sx| sx < w) {
                                    f(out + x, plane + sy * w + sx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn unfold<T: WithDType>(&self, src: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
        let (b, c, h, w) = dims;
        let (ho, wo) = self.out_hw(h, w);
        let mut cols = vec![T::zero(); c * self.kernel * self.kernel * b * ho * wo];
        self.for_each_tap(dims, |dst, s| cols[dst] = src[s]);
        cols
    }

    fn fold<T: WithDType>(&self, cols: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
        let (b, c, h, w) = dims;
        let mut img = vec![T::zero(); b * c * h * w];
        self.for_each_tap(dims, |col, d| img[d] += cols[col]);
        img
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (b, c, h, w) = dims;
        let (ho, wo) = self.out_hw(h, w);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.unfold(contiguous_slice(v, layout)?, dims)),
            CpuStorage::F64(v) => CpuStorage::F64(self.unfold(contiguous_slice(v, layout)?, dims)),
            _ => return Err(candle_core::Error::Msg("im2col supports f32 and f64 only".into())),
        };
        Ok((out, Shape::from((c * self.kernel * self.kernel, b * ho * wo))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let fold = Col2Im {
            unfold: *self,
            dims: arg.dims4()?,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&fold)?))
    }
}

/// Adjoint of [`Im2Col`]: scatters columns back onto the image, summing
/// overlapping taps.
struct Col2Im {
    unfold: Im2Col,
    dims: (usize, usize, usize, usize),
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.unfold.fold(contiguous_slice(v, layout)?, self.dims)),
            CpuStorage::F64(v) => CpuStorage::F64(self.unfold.fold(contiguous_slice(v, layout)?, self.dims)),
            _ => return Err(candle_core::Error::Msg("col2im supports f32 and f64 only".into())),
        };
        Ok((out, Shape::from(self.dims)))
    }
}

/// `(rows, n)` copies of a length-`n` vector, built as a rank-1 product so
/// the backward pass is a matmul rather than a strided leading-axis sum.
fn expand_rows(v: &Tensor, rows: usize) -> Result<Tensor> {
    let n = v.elem_count();
    let ones = Tensor::ones((rows, 1), v.dtype(), v.device())?;
    Ok(ones.matmul(&v.reshape((1, n))?)?)
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

fn gelu_value<T: Float>(x: T) -> T {
    let (a, b, half) = (T::from(GELU_A).unwrap(), T::from(GELU_B).unwrap(), T::from(0.5).unwrap());
    half * x * (T::one() + (a * (x + b * x * x * x)).tanh())
}

fn gelu_slope<T: Float>(x: T) -> T {
    let (a, b, half) = (T::from(GELU_A).unwrap(), T::from(GELU_B).unwrap(), T::from(0.5).unwrap());
    let three = T::from(3.0).unwrap();
    let t = (a * (x + b * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * a * (T::one() + three * b * x * x)
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::RequiresContiguous { op: "nn custom op" }),
    }
}

/// Tanh-approximated GELU with a fused elementwise backward pass.
struct Gelu;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-tanh"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => {
                CpuStorage::F32(contiguous_slice(v, layout)?.iter().map(|&x| gelu_value(x)).collect())
            }
            CpuStorage::F64(v) => CpuStorage::F64(contiguous_slice(v, layout)?.iter().map(|&x| gelu_value(x)).collect()),
            _ => return Err(candle_core::Error::Msg("gelu supports f32 and f64 only".into())),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad_res.contiguous()?, &GeluGrad)?))
    }
}

/// `grad · gelu'(x)` in one pass.
struct GeluGrad;

impl CustomOp2 for GeluGrad {
    fn name(&self) -> &'static str {
        "gelu-tanh-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => CpuStorage::F32(
                contiguous_slice(x, l1)?
                    .iter()
                    .zip(contiguous_slice(g, l2)?)
                    .map(|(&x, &g)| g * gelu_slope(x))
                    .collect(),
            ),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => CpuStorage::F64(
                contiguous_slice(x, l1)?
                    .iter()
                    .zip(contiguous_slice(g, l2)?)
                    .map(|(&x, &g)| g * gelu_slope(x))
                    .collect(),
            ),
            _ => return Err(candle_core::Error::Msg("gelu supports f32 and f64 only".into())),
        };
        Ok((out, l1.shape().clone()))
    }
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    debug_assert!(matches!(x.dtype(), DType::F32 | DType::F64));
    Ok(x.contiguous()?.apply_op1(Gelu)?)
}

/// Softmax over the last dimension. The max shift is detached; it cancels
/// analytically so gradients are unaffected.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&m)?;
    let lse = s.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(s.broadcast_sub(&lse)?)
}

/// Scaled dot-product attention on `(batch, heads, tokens, head_dim)` inputs.
/// `bias` is broadcast-added to the logits before the softmax.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let head_dim = q.dim(D::Minus1)?;
    let scale = (head_dim as f64).powf(-0.5);
    let k_t = k.transpose(D::Minus2, D::Minus1)?.contiguous()?;
    let mut logits = (q.contiguous()?.matmul(&k_t)? * scale)?;
    if let Some(b) = bias {
        logits = logits.broadcast_add(b)?;
    }
    let probs = softmax_last(&logits)?;
    Ok(probs.matmul(&v.contiguous()?)?)
}

/// Splits `(batch, tokens, heads * head_dim)` into `(batch, heads, tokens, head_dim)`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, t, c) = x.dims3()?;
    Ok(x.reshape((b, t, heads, c / heads))?.transpose(1, 2)?.contiguous()?)
}

pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, t, d) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, t, h * d))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn layer_norm_normalizes() {
        let pb = ParamBuilder::new(0, DType::F64, &Device::Cpu);
        let ln = LayerNorm::new(&pb, 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y: Vec<f64> = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1000.0f64, 0.0, -5.0], [0.1, 0.2, 0.3]], &Device::Cpu).unwrap();
        let p = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for s in p {
            assert!((s - 1.0).abs() < 1e-12);
        }
        let lp = log_softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        assert!(lp[0][0].abs() < 1e-12);
    }

    #[test]
    fn linear_handles_higher_rank() {
        let pb = ParamBuilder::new(0, DType::F32, &Device::Cpu);
        let lin = Linear::new(&pb, 3, 5, true).unwrap();
        let x = Tensor::zeros((2, 4, 6, 3), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(lin.forward(&x).unwrap().dims(), &[2, 4, 6, 5]);
    }

    #[test]
    fn gelu_matches_formula_and_finite_differences() {
        let xs = [-3.0f64, -0.7, 0.0, 0.4, 2.5];
        let x = candle_core::Var::new(&xs, &Device::Cpu).unwrap();
        let y = gelu(x.as_tensor()).unwrap();
        let grads = y.sum_all().unwrap().backward().unwrap();
        let g: Vec<f64> = grads.get(x.as_tensor()).unwrap().to_vec1().unwrap();
        let vals: Vec<f64> = y.to_vec1().unwrap();
        let reference: Vec<f64> = Tensor::new(&xs, &Device::Cpu).unwrap().gelu().unwrap().to_vec1().unwrap();
        for i in 0..xs.len() {
            assert!((vals[i] - reference[i]).abs() < 1e-12);
            let h = 1e-6;
            let fd = (gelu_value(xs[i] + h) - gelu_value(xs[i] - h)) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-8, "x={}: {} vs {fd}", xs[i], g[i]);
        }
    }

    #[test]
    fn im2col_conv_matches_direct_convolution() {
        let pb = ParamBuilder::new(4, DType::F64, &Device::Cpu);
        let x = pb.get("x", &[2, 3, 5, 6], Init::Normal(1.0)).unwrap();
        for (k, pad) in [(3, 1), (1, 0), (3, 0), (3, 2)] {
            let conv = Conv2d::with_std(&pb.pp(format!("c{k}{pad}")), 3, 4, k, 1, pad, 0.5).unwrap();
            let ours = conv.forward(&x).unwrap();
            let direct = x
                .conv2d(&conv.weight, pad, 1, 1, 1)
                .unwrap()
                .broadcast_add(&conv.bias.reshape((1, 4, 1, 1)).unwrap())
                .unwrap();
            assert_eq!(ours.dims(), direct.dims());
            let max_diff = |a: &Tensor, b: &Tensor| -> f64 {
                (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap()
            };
            assert!(max_diff(&ours, &direct) < 1e-12, "k={k} pad={pad}");

            // same gradients as candle's own convolution under a random readout
            let probe = pb.get(&format!("probe{k}{pad}"), ours.dims(), Init::Normal(1.0)).unwrap().detach();
            let ga = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let gb = (direct * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for t in [&x, &conv.weight, &conv.bias] {
                let d = max_diff(ga.get(t).unwrap(), gb.get(t).unwrap());
                assert!(d < 1e-10, "k={k} pad={pad}: grad diff {d}");
            }
        }
    }
}
