//! CPU kernels with hand-written backward passes for the hot spots of the
//! denoiser. Generic tensor compositions spend most of their time in
//! broadcasting reductions during backprop; these fused forms avoid that.
//!
//! * [`conv2d`]: convolution plus bias as a patch-matrix product.
//! * [`group_norm_silu`]: group normalization, a per-sample per-channel
//!   affine map (which carries both the norm's own affine parameters and the
//!   feature-wise modulation) and SiLU in one pass.
//! * [`silu`] and [`upsample2x`]: elementwise activation and nearest
//!   neighbour upsampling.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Device, Layout, Shape, Tensor, WithDType};

type CResult<T> = candle_core::Result<T>;

trait Element: WithDType + Default + std::ops::AddAssign {
    fn f(self) -> f64;
    fn of(v: f64) -> Self;
}

impl Element for f32 {
    fn f(self) -> f64 {
        self as f64
    }
    fn of(v: f64) -> Self {
        v as f32
    }
}

impl Element for f64 {
    fn f(self) -> f64 {
        self
    }
    fn of(v: f64) -> Self {
        v
    }
}

/// Run `$body` with `$T` bound to the element type of `$dtype`.
macro_rules! by_dtype {
    ($dtype:expr, $T:ident => $body:expr) => {
        match $dtype {
            DType::F32 => {
                type $T = f32;
                $body
            }
            DType::F64 => {
                type $T = f64;
                $body
            }
            other => return Err(unsupported(other)),
        }
    };
}

fn unsupported(dtype: DType) -> candle_core::Error {
    candle_core::Error::Msg(format!("fused kernels support f32 and f64, got {dtype:?}"))
}

fn values<T: Element>(t: &Tensor) -> CResult<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

fn storage_tensor(storage: &CpuStorage, layout: &Layout) -> CResult<Tensor> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or(candle_core::Error::RequiresContiguous { op: "fused kernel" })?;
    let shape = layout.shape().clone();
    match storage {
        CpuStorage::F32(v) => Tensor::from_slice(&v[start..end], shape, &Device::Cpu),
        CpuStorage::F64(v) => Tensor::from_slice(&v[start..end], shape, &Device::Cpu),
        _ => Err(candle_core::Error::Msg("fused kernels support f32 and f64".into())),
    }
}

fn tensor_storage(t: &Tensor) -> CResult<(CpuStorage, Shape)> {
    let storage = by_dtype!(t.dtype(), T => T::to_cpu_storage_owned(values::<T>(t)?));
    Ok((storage, t.shape().clone()))
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

// ---------------------------------------------------------------------------
// Convolution

/// Geometry shared by the unfold and fold kernels.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Shape of the patch matrix: one row per kernel tap `(ci, ky, kx)`,
    /// one column per output position `(b, oy, ox)`.
    fn cols_shape(&self) -> (usize, usize) {
        let (ho, wo) = self.out_hw();
        (self.c * self.k * self.k, self.b * ho * wo)
    }

    /// Output columns `ox` whose input column for kernel column `kx` lies
    /// inside the image.
    fn ox_range(&self, kx: usize, wo: usize) -> std::ops::Range<usize> {
        let lo = if self.pad > kx { (self.pad - kx).div_ceil(self.stride) } else { 0 };
        let hi = if self.w + self.pad > kx {
            (self.w - 1 + self.pad - kx) / self.stride + 1
        } else {
            0
        };
        let lo = lo.min(wo);
        lo..hi.min(wo).max(lo)
    }

    /// Visit every in-image run of the patch matrix as (patch offset, input
    /// offset, run length); consecutive patch entries step the input by
    /// `stride`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_hw();
        let k = self.k;
        for ci in 0..self.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let xs = self.ox_range(kx, wo);
                    if xs.is_empty() {
                        continue;
                    }
                    for b in 0..self.b {
                        let plane = (b * self.c + ci) * self.h * self.w;
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let dst = (row * self.b + b) * ho * wo + oy * wo + xs.start;
                            let src = plane + iy as usize * self.w + xs.start * self.stride + kx - self.pad;
                            f(dst, src, xs.len());
                        }
                    }
                }
            }
        }
    }

    fn unfold<T: Element>(&self, input: &[T]) -> Vec<T> {
        let (rows, cols) = self.cols_shape();
        let mut out = vec![T::default(); rows * cols];
        let s = self.stride;
        self.for_each_run(|dst, src, n| {
            if s == 1 {
                out[dst..dst + n].copy_from_slice(&input[src..src + n]);
            } else {
                for (i, o) in out[dst..dst + n].iter_mut().enumerate() {
                    *o = input[src + i * s];
                }
            }
        });
        out
    }

    fn fold<T: Element>(&self, cols: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.b * self.c * self.h * self.w];
        let s = self.stride;
        self.for_each_run(|dst, src, n| {
            if s == 1 {
                for (o, c) in out[src..src + n].iter_mut().zip(&cols[dst..dst + n]) {
                    *o += *c;
                }
            } else {
                for (i, c) in cols[dst..dst + n].iter().enumerate() {
                    out[src + i * s] += *c;
                }
            }
        });
        out
    }

    fn unfold_tensor(&self, x: &Tensor) -> CResult<Tensor> {
        let shape = self.cols_shape();
        by_dtype!(x.dtype(), T => Tensor::from_vec(self.unfold(&values::<T>(x)?), shape, x.device()))
    }

    fn fold_tensor(&self, cols: &Tensor) -> CResult<Tensor> {
        let shape = (self.b, self.c, self.h, self.w);
        by_dtype!(cols.dtype(), T => Tensor::from_vec(self.fold(&values::<T>(cols)?), shape, cols.device()))
    }
}

/// Convolution plus bias as a patch-matrix product; all internal tensors
/// are untracked.
struct Conv2dOp {
    stride: usize,
    pad: usize,
}

impl Conv2dOp {
    fn geometry(&self, x: &Shape, w: &Shape) -> CResult<Geometry> {
        let (b, c, h, wd) = x.dims4()?;
        let (_, c_in, k, k2) = w.dims4()?;
        if c_in != c || k != k2 || self.stride == 0 || h + 2 * self.pad < k || wd + 2 * self.pad < k {
            return Err(candle_core::Error::Msg(format!(
                "conv2d: input {x:?} incompatible with kernel {w:?}"
            )));
        }
        Ok(Geometry {
            b,
            c,
            h,
            w: wd,
            k,
            stride: self.stride,
            pad: self.pad,
        })
    }

    fn forward(&self, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> CResult<Tensor> {
        let g = self.geometry(x.shape(), w.shape())?;
        let (ho, wo) = g.out_hw();
        let c_out = w.dim(0)?;
        let mut out = w.reshape((c_out, g.c * g.k * g.k))?.matmul(&g.unfold_tensor(x)?)?;
        if let Some(bias) = bias {
            out = out.broadcast_add(&bias.reshape((c_out, 1))?)?;
        }
        out.reshape((c_out, g.b, ho * wo))?
            .transpose(0, 1)?
            .contiguous()?
            .reshape((g.b, c_out, ho, wo))
    }
}

impl CustomOp3 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let x = storage_tensor(s1, l1)?;
        let w = storage_tensor(s2, l2)?;
        let b = storage_tensor(s3, l3)?;
        tensor_storage(&self.forward(&x, &w, Some(&b))?)
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (x, w, grad) = (x.detach(), w.detach(), grad.detach());
        let g = self.geometry(x.shape(), w.shape())?;
        let (c_out, _, k, _) = w.dims4()?;
        let (ho, wo) = g.out_hw();
        // (C_out, positions) view of the incoming gradient.
        let grad_cn = grad.transpose(0, 1)?.contiguous()?.reshape((c_out, g.b * ho * wo))?;
        let grad_b = grad_cn.sum(1)?;
        let grad_w = grad_cn.matmul(&g.unfold_tensor(&x)?.t()?)?.reshape(w.shape())?;
        let grad_x = if self.stride == 1 && k % 2 == 1 && self.pad == k / 2 {
            // A "same" convolution's input gradient is the convolution of
            // the output gradient with the flipped, transposed kernel.
            Conv2dOp { stride: 1, pad: self.pad }.forward(&grad.contiguous()?, &flip_kernel(&w)?, None)?
        } else {
            let w_t = w.reshape((c_out, g.c * k * k))?.t()?.contiguous()?;
            g.fold_tensor(&w_t.matmul(&grad_cn)?)?
        };
        Ok((Some(grad_x), Some(grad_w), Some(grad_b)))
    }
}

/// `(C_out, C_in, k, k)` → `(C_in, C_out, k, k)` with both spatial axes
/// reversed.
fn flip_kernel(w: &Tensor) -> CResult<Tensor> {
    let k = w.dim(2)?;
    let rev: Vec<u32> = (0..k as u32).rev().collect();
    let rev = Tensor::new(rev.as_slice(), w.device())?;
    w.transpose(0, 1)?
        .contiguous()?
        .index_select(&rev, 2)?
        .index_select(&rev, 3)?
        .contiguous()
}

/// 2D convolution of `(B, C, H, W)` with a `(C_out, C, k, k)` kernel,
/// `(C_out)` bias and symmetric zero padding.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> CResult<Tensor> {
    x.contiguous()?
        .apply_op3(&weight.contiguous()?, &bias.contiguous()?, Conv2dOp { stride, pad })
}

// ---------------------------------------------------------------------------
// Group normalization + modulation + SiLU

struct GroupNormSilu {
    groups: usize,
    eps: f64,
}

/// Per-group views of a `(B, C, P)` buffer.
#[derive(Clone, Copy)]
struct GroupLayout {
    b: usize,
    c: usize,
    plane: usize,
    per_group: usize,
}

impl GroupNormSilu {
    fn layout(&self, x: &Shape, scale: &Shape) -> CResult<GroupLayout> {
        let dims = x.dims();
        if dims.len() < 2 || self.groups == 0 || dims[1] % self.groups != 0 {
            return Err(candle_core::Error::Msg(format!(
                "group norm: {} groups do not divide shape {dims:?}",
                self.groups
            )));
        }
        let (b, c) = (dims[0], dims[1]);
        if scale.dims() != [b, c] {
            return Err(candle_core::Error::Msg(format!("group norm: scale {scale:?} for input {x:?}")));
        }
        Ok(GroupLayout {
            b,
            c,
            plane: dims[2..].iter().product(),
            per_group: c / self.groups,
        })
    }

    /// Mean and inverse standard deviation of channels `c0..c0+per_group`
    /// of sample `b`.
    fn stats<T: Element>(&self, x: &[T], l: GroupLayout, b: usize, c0: usize) -> (f64, f64) {
        let start = (b * l.c + c0) * l.plane;
        let chunk = &x[start..start + l.per_group * l.plane];
        let n = chunk.len() as f64;
        let mean = chunk.iter().map(|v| v.f()).sum::<f64>() / n;
        let var = chunk.iter().map(|v| (v.f() - mean).powi(2)).sum::<f64>() / n;
        (mean, 1.0 / (var + self.eps).sqrt())
    }

    fn forward<T: Element>(&self, x: &[T], scale: &[T], shift: &[T], l: GroupLayout) -> Vec<T> {
        let mut out = vec![T::default(); x.len()];
        for b in 0..l.b {
            for c0 in (0..l.c).step_by(l.per_group) {
                let (mean, inv) = self.stats(x, l, b, c0);
                for c in c0..c0 + l.per_group {
                    let (a, s) = (scale[b * l.c + c].f(), shift[b * l.c + c].f());
                    let r = (b * l.c + c) * l.plane..(b * l.c + c + 1) * l.plane;
                    for (o, v) in out[r.clone()].iter_mut().zip(&x[r]) {
                        let z = (v.f() - mean) * inv * a + s;
                        *o = T::of(z * sigmoid(z));
                    }
                }
            }
        }
        out
    }

    fn backward<T: Element>(
        &self,
        x: &[T],
        scale: &[T],
        shift: &[T],
        grad: &[T],
        l: GroupLayout,
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let mut dx = vec![T::default(); x.len()];
        let mut dscale = vec![T::default(); scale.len()];
        let mut dshift = vec![T::default(); shift.len()];
        let group_len = l.per_group * l.plane;
        let mut xhat = vec![0.0; group_len];
        let mut dxhat = vec![0.0; group_len];
        for b in 0..l.b {
            for c0 in (0..l.c).step_by(l.per_group) {
                let (mean, inv) = self.stats(x, l, b, c0);
                for (j, c) in (c0..c0 + l.per_group).enumerate() {
                    let (a, s) = (scale[b * l.c + c].f(), shift[b * l.c + c].f());
                    let base = (b * l.c + c) * l.plane;
                    let (mut da, mut ds) = (0.0, 0.0);
                    for p in 0..l.plane {
                        let xh = (x[base + p].f() - mean) * inv;
                        let z = xh * a + s;
                        let sg = sigmoid(z);
                        let dz = grad[base + p].f() * sg * (1.0 + z * (1.0 - sg));
                        da += dz * xh;
                        ds += dz;
                        xhat[j * l.plane + p] = xh;
                        dxhat[j * l.plane + p] = dz * a;
                    }
                    dscale[b * l.c + c] = T::of(da);
                    dshift[b * l.c + c] = T::of(ds);
                }
                let n = group_len as f64;
                let mean_d = dxhat.iter().sum::<f64>() / n;
                let mean_dx = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / n;
                let start = (b * l.c + c0) * l.plane;
                for (i, o) in dx[start..start + group_len].iter_mut().enumerate() {
                    *o = T::of(inv * (dxhat[i] - mean_d - xhat[i] * mean_dx));
                }
            }
        }
        (dx, dscale, dshift)
    }
}

impl CustomOp3 for GroupNormSilu {
    fn name(&self) -> &'static str {
        "group-norm-silu"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let x = storage_tensor(s1, l1)?;
        let scale = storage_tensor(s2, l2)?;
        let shift = storage_tensor(s3, l3)?;
        let l = self.layout(x.shape(), scale.shape())?;
        let storage = by_dtype!(x.dtype(), T => T::to_cpu_storage_owned(self.forward(
            &values::<T>(&x)?,
            &values::<T>(&scale)?,
            &values::<T>(&shift)?,
            l,
        )));
        Ok((storage, x.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        shift: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let l = self.layout(x.shape(), scale.shape())?;
        let dev = x.device();
        by_dtype!(x.dtype(), T => {
            let (dx, da, ds) = self.backward(
                &values::<T>(x)?,
                &values::<T>(scale)?,
                &values::<T>(shift)?,
                &values::<T>(grad)?,
                l,
            );
            Ok((
                Some(Tensor::from_vec(dx, x.shape(), dev)?),
                Some(Tensor::from_vec(da, scale.shape(), dev)?),
                Some(Tensor::from_vec(ds, shift.shape(), dev)?),
            ))
        })
    }
}

/// `silu(x̂ · scale + shift)` where `x̂` is `x` `(B, C, ...)` normalized over
/// groups of channels and `scale`, `shift` are `(B, C)`.
pub fn group_norm_silu(x: &Tensor, groups: usize, eps: f64, scale: &Tensor, shift: &Tensor) -> CResult<Tensor> {
    x.contiguous()?
        .apply_op3(&scale.contiguous()?, &shift.contiguous()?, GroupNormSilu { groups, eps })
}

// ---------------------------------------------------------------------------
// Elementwise and resampling

struct Silu;

impl CustomOp1 for Silu {
    fn name(&self) -> &'static str {
        "silu"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> CResult<(CpuStorage, Shape)> {
        let x = storage_tensor(storage, layout)?;
        let storage = by_dtype!(x.dtype(), T => T::to_cpu_storage_owned(
            values::<T>(&x)?.into_iter().map(|v| { let z = v.f(); T::of(z * sigmoid(z)) }).collect()
        ));
        Ok((storage, x.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        by_dtype!(x.dtype(), T => {
            let dx: Vec<T> = values::<T>(x)?
                .into_iter()
                .zip(values::<T>(grad)?)
                .map(|(v, g)| {
                    let (z, sg) = (v.f(), sigmoid(v.f()));
                    T::of(g.f() * sg * (1.0 + z * (1.0 - sg)))
                })
                .collect();
            Ok(Some(Tensor::from_vec(dx, x.shape(), x.device())?))
        })
    }
}

pub fn silu(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Silu)
}

/// Nearest-neighbour upsampling by 2 along both spatial axes.
struct Upsample2x;

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> CResult<(CpuStorage, Shape)> {
        let x = storage_tensor(storage, layout)?;
        let (b, c, h, w) = x.dims4()?;
        let storage = by_dtype!(x.dtype(), T => {
            let v = values::<T>(&x)?;
            let mut out = Vec::with_capacity(4 * v.len());
            for row in v.chunks(w) {
                for _ in 0..2 {
                    for &p in row {
                        out.push(p);
                        out.push(p);
                    }
                }
            }
            T::to_cpu_storage_owned(out)
        });
        Ok((storage, Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let w = x.dim(3)?;
        by_dtype!(x.dtype(), T => {
            let g = values::<T>(grad)?;
            let mut dx = vec![T::default(); g.len() / 4];
            for (r, src) in g.chunks(2 * w).enumerate() {
                let dst = &mut dx[(r / 2) * w..(r / 2 + 1) * w];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d += src[2 * j];
                    *d += src[2 * j + 1];
                }
            }
            Ok(Some(Tensor::from_vec(dx, x.shape(), x.device())?))
        })
    }
}

pub fn upsample2x(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Upsample2x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Module, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = crate::seed::rng(seed, &[]);
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar().unwrap()
    }

    fn assert_grads_match(vars: &[&Var], ours: &Tensor, reference: &Tensor, tol: f64) {
        let up = rand(ours.dims(), 99);
        let g1 = (ours * &up).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &up).unwrap().sum_all().unwrap().backward().unwrap();
        for v in vars {
            let d = max_abs_diff(g1.get(v.as_tensor()).unwrap(), g2.get(v.as_tensor()).unwrap());
            assert!(d < tol, "gradient differs by {d}");
        }
    }

    #[test]
    fn conv_matches_reference() {
        for (stride, pad, k, h) in [(1, 1, 3, 7), (2, 1, 3, 8), (1, 0, 1, 5), (2, 0, 2, 6), (2, 1, 3, 7)] {
            let x = Var::from_tensor(&rand(&[2, 3, h, h + 1], 1)).unwrap();
            let w = Var::from_tensor(&rand(&[4, 3, k, k], 2)).unwrap();
            let b = Var::from_tensor(&rand(&[4], 3)).unwrap();
            let ours = conv2d(&x, &w, &b, stride, pad).unwrap();
            let reference = x
                .conv2d(&w, pad, stride, 1, 1)
                .unwrap()
                .broadcast_add(&b.reshape((1, 4, 1, 1)).unwrap())
                .unwrap();
            assert_eq!(ours.dims(), reference.dims());
            let d = max_abs_diff(&ours, &reference);
            assert!(d < 1e-12, "stride {stride} pad {pad} k {k}: {d}");
            if stride == 1 {
                assert_grads_match(&[&x, &w, &b], &ours, &reference, 1e-12);
            }
        }
    }

    #[test]
    fn strided_conv_gradients_match_finite_differences() {
        // The generic reference backward mishandles odd sizes with stride 2,
        // so compare against central differences instead.
        let x = rand(&[1, 2, 5, 7], 4);
        let w = rand(&[3, 2, 3, 3], 5);
        let b = rand(&[3], 6);
        let up = rand(&[1, 3, 3, 4], 7);
        let loss = |x: &Tensor, w: &Tensor| -> f64 {
            (conv2d(x, w, &b, 2, 1).unwrap() * &up).unwrap().sum_all().unwrap().to_scalar().unwrap()
        };
        let xv = Var::from_tensor(&x).unwrap();
        let wv = Var::from_tensor(&w).unwrap();
        let grads = (conv2d(&xv, &wv, &b, 2, 1).unwrap() * &up).unwrap().sum_all().unwrap().backward().unwrap();
        for (var, base) in [(&xv, &x), (&wv, &w)] {
            let analytic: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let flat: Vec<f64> = base.flatten_all().unwrap().to_vec1().unwrap();
            for i in 0..flat.len() {
                let perturbed = |delta: f64| {
                    let mut v = flat.clone();
                    v[i] += delta;
                    Tensor::from_vec(v, base.shape(), &Device::Cpu).unwrap()
                };
                let (fp, fm) = if std::ptr::eq(base, &x) {
                    (loss(&perturbed(1e-6), &w), loss(&perturbed(-1e-6), &w))
                } else {
                    (loss(&x, &perturbed(1e-6)), loss(&x, &perturbed(-1e-6)))
                };
                assert!(((fp - fm) / 2e-6 - analytic[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn group_norm_silu_matches_reference() {
        let x = Var::from_tensor(&rand(&[3, 8, 4, 5], 6)).unwrap();
        let gamma = Var::from_tensor(&rand(&[8], 7)).unwrap();
        let beta = Var::from_tensor(&rand(&[8], 8)).unwrap();
        let film = Var::from_tensor(&rand(&[3, 16], 9)).unwrap();
        let g = (film.narrow(1, 0, 8).unwrap() + 1.0).unwrap();
        let s = film.narrow(1, 8, 8).unwrap();
        let scale = g.broadcast_mul(&gamma.reshape((1, 8)).unwrap()).unwrap();
        let shift = (g.broadcast_mul(&beta.reshape((1, 8)).unwrap()).unwrap() + s).unwrap();
        let ours = group_norm_silu(&x, 4, 1e-5, &scale, &shift).unwrap();
        let gn = candle_nn::GroupNorm::new(gamma.as_tensor().clone(), beta.as_tensor().clone(), 8, 4, 1e-5).unwrap();
        let modulated = crate::model::film::film_apply(&gn.forward(&x).unwrap(), &film).unwrap();
        let reference = candle_nn::ops::silu(&modulated).unwrap();
        assert!(max_abs_diff(&ours, &reference) < 1e-12);
        assert_grads_match(&[&x, &gamma, &beta, &film], &ours, &reference, 1e-10);
    }

    #[test]
    fn silu_and_upsample_match_reference() {
        let x = Var::from_tensor(&rand(&[2, 3, 4, 5], 10)).unwrap();
        let ours = silu(&x).unwrap();
        let reference = candle_nn::ops::silu(&x).unwrap();
        assert!(max_abs_diff(&ours, &reference) < 1e-12);
        assert_grads_match(&[&x], &ours, &reference, 1e-12);
        let ours = upsample2x(&x).unwrap();
        let reference = x.upsample_nearest2d(8, 10).unwrap();
        assert!(max_abs_diff(&ours, &reference) < 1e-15);
        assert_grads_match(&[&x], &ours, &reference, 1e-12);
    }
}
