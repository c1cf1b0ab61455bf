//! Minimal layer toolkit on top of `candle-core`: a named parameter store
//! with seeded initialization, convolution, batch norm and linear layers.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed::SeedStream;

/// Owns every trainable parameter and non-trainable buffer by canonical name.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    seed: SeedStream,
    params: BTreeMap<String, Var>,
    buffers: Mutex<BTreeMap<String, Tensor>>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: SeedStream) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            seed,
            params: BTreeMap::new(),
            buffers: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn tensor_from(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Registers a parameter drawn from N(0, std^2) on the stream named after it.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let mut rng = self.seed.named(name).rng();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Argument(e.to_string()))?;
        let values: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        self.insert(name, self.tensor_from(values, shape)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name, self.tensor_from(vec![value; n], shape)?)
    }

    fn insert(&mut self, name: &str, t: Tensor) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::Argument(format!("parameter {name} registered twice")));
        }
        let var = Var::from_tensor(&t)?;
        self.params.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn buffer_init(&self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        let t = self.tensor_from(vec![value; n], shape)?;
        self.buffers.lock().unwrap().insert(name.to_string(), t);
        Ok(())
    }

    pub fn buffer(&self, name: &str) -> Tensor {
        self.buffers.lock().unwrap()[name].clone()
    }

    pub fn set_buffer(&self, name: &str, value: Tensor) {
        self.buffers.lock().unwrap().insert(name.to_string(), value);
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> BTreeMap<String, Tensor> {
        self.buffers.lock().unwrap().clone()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites parameters and buffers from named tensors; shapes must match.
    pub fn load(&self, params: &BTreeMap<String, Tensor>, buffers: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.params {
            let t = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} vs expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        let mut own = self.buffers.lock().unwrap();
        for (name, slot) in own.iter_mut() {
            let t = buffers
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer {name}")))?;
            if t.dims() != slot.dims() {
                return Err(Error::Checkpoint(format!("buffer {name}: shape mismatch")));
            }
            *slot = t.to_dtype(self.dtype)?;
        }
        Ok(())
    }
}

/// How a layer treats its parameters during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    Live,
    /// Parameters are detached: gradients flow to the input only.
    Frozen,
}

fn use_param(v: &Var, mode: ParamMode) -> Tensor {
    match mode {
        ParamMode::Live => v.as_tensor().clone(),
        ParamMode::Frozen => v.as_tensor().detach(),
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let weight = store.normal(
            &format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            (2.0 / fan_in).sqrt(),
        )?;
        let bias = if bias {
            Some(store.constant(&format!("{name}.bias"), &[out_ch], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: ParamMode) -> Result<Tensor> {
        let w = use_param(&self.weight, mode);
        let (out_ch, in_ch, k, _) = w.dims4()?;
        let (b, _, h, wd) = x.dims4()?;
        let op = Im2Col {
            kernel: k,
            stride: self.stride,
            padding: self.padding,
            height: h,
            width: wd,
        };
        let (ho, wo) = op.out_dims();
        let cols = x.contiguous()?.apply_op1(op)?;
        let y = cols
            .reshape((b * ho * wo, in_ch * k * k))?
            .matmul(&w.reshape((out_ch, in_ch * k * k))?.t()?)?
            .reshape((b, ho, wo, out_ch))?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&use_param(b, mode).reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Unfolds `(B, C, H, W)` into `(B, H'W', C k k)` patches so a convolution
/// becomes one matmul. Backward folds the patches back with summation.
#[derive(Clone, Copy, Debug)]
struct Im2Col {
    kernel: usize,
    stride: usize,
    padding: usize,
    height: usize,
    width: usize,
}

impl Im2Col {
    fn out_dims(&self) -> (usize, usize) {
        let ho = (self.height + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (self.width + 2 * self.padding - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    /// Calls `f(column_index, image_index)` for every in-bounds tap of one sample.
    fn for_each_tap(&self, channels: usize, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = self.out_dims();
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let ckk = channels * k * k;
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (oy * wo + ox) * ckk;
                for c in 0..channels {
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let col = row + (c * k + ky) * k + kx;
                            f(col, (c * self.height + iy as usize) * self.width + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn unfold<T: Copy + Default>(&self, x: &[T], batch: usize, channels: usize) -> Vec<T> {
        let (ho, wo) = self.out_dims();
        let per_out = ho * wo * channels * self.kernel * self.kernel;
        let per_in = channels * self.height * self.width;
        let mut out = vec![T::default(); batch * per_out];
        for b in 0..batch {
            let src = &x[b * per_in..(b + 1) * per_in];
            let dst = &mut out[b * per_out..(b + 1) * per_out];
            self.for_each_tap(channels, |col, idx| dst[col] = src[idx]);
        }
        out
    }

    fn fold<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T], batch: usize, channels: usize) -> Vec<T> {
        let (ho, wo) = self.out_dims();
        let per_out = ho * wo * channels * self.kernel * self.kernel;
        let per_in = channels * self.height * self.width;
        let mut out = vec![T::default(); batch * per_in];
        for b in 0..batch {
            let src = &cols[b * per_out..(b + 1) * per_out];
            let dst = &mut out[b * per_in..(b + 1) * per_in];
            self.for_each_tap(channels, |col, idx| dst[idx] += src[col]);
        }
        out
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => Err(candle_core::Error::Msg("im2col expects a contiguous input".into())),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, _, _) = layout.shape().dims4()?;
        let (ho, wo) = self.out_dims();
        let shape = Shape::from((b, ho * wo, c * self.kernel * self.kernel));
        let out = match storage {
            CpuStorage::F32(x) => CpuStorage::F32(self.unfold(contiguous_slice(x, layout)?, b, c)),
            CpuStorage::F64(x) => CpuStorage::F64(self.unfold(contiguous_slice(x, layout)?, b, c)),
            _ => candle_core::bail!("im2col: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, channels, _, _) = arg.dims4()?;
        let fold = Col2Im { op: *self, channels };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&fold)?))
    }
}

struct Col2Im {
    op: Im2Col,
    channels: usize,
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let b = layout.shape().dims()[0];
        let c = self.channels;
        let shape = Shape::from((b, c, self.op.height, self.op.width));
        let out = match storage {
            CpuStorage::F32(x) => CpuStorage::F32(self.op.fold(contiguous_slice(x, layout)?, b, c)),
            CpuStorage::F64(x) => CpuStorage::F64(self.op.fold(contiguous_slice(x, layout)?, b, c)),
            _ => candle_core::bail!("col2im: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }
}

/// Batch norm over dim 1 of `(B, C)` or `(B, C, H, W)` inputs.
pub struct BatchNorm {
    name: String,
    gamma: Var,
    beta: Option<Var>,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, with_shift: bool) -> Result<Self> {
        let gamma = store.constant(&format!("{name}.weight"), &[channels], 1.0)?;
        let beta = if with_shift {
            Some(store.constant(&format!("{name}.bias"), &[channels], 0.0)?)
        } else {
            None
        };
        store.buffer_init(&format!("{name}.running_mean"), &[channels], 0.0)?;
        store.buffer_init(&format!("{name}.running_var"), &[channels], 1.0)?;
        Ok(Self {
            name: name.to_string(),
            gamma,
            beta,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// Batch mean and biased variance per channel, both `(C,)`.
    fn batch_stats(x: &Tensor) -> Result<(Tensor, Tensor)> {
        // Move channels first and flatten everything else.
        let flat = if x.rank() == 4 {
            x.transpose(0, 1)?.flatten_from(1)?
        } else {
            x.t()?
        };
        let mean = flat.mean_keepdim(D::Minus1)?;
        let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(D::Minus1)?;
        Ok((mean.flatten_all()?, var.flatten_all()?))
    }

    /// Folds the batch statistics of `x` into the running averages.
    pub fn track(&self, store: &ParamStore, x: &Tensor) -> Result<()> {
        let x = x.detach();
        let (mean, var) = Self::batch_stats(&x)?;
        let n = (x.elem_count() / x.dim(1)?) as f64;
        let unbiased = if n > 1.0 { var.affine(n / (n - 1.0), 0.0)? } else { var };
        let m = self.momentum;
        let rm = store.buffer(&format!("{}.running_mean", self.name));
        let rv = store.buffer(&format!("{}.running_var", self.name));
        store.set_buffer(
            &format!("{}.running_mean", self.name),
            ((rm * (1.0 - m))? + (mean * m)?)?,
        );
        store.set_buffer(
            &format!("{}.running_var", self.name),
            ((rv * (1.0 - m))? + (unbiased * m)?)?,
        );
        Ok(())
    }

    /// `train` uses batch statistics; `update_stats` additionally folds them into the running averages.
    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        train: bool,
        update_stats: bool,
        mode: ParamMode,
    ) -> Result<Tensor> {
        let rank = x.rank();
        let c = x.dim(1)?;
        let bshape: Vec<usize> = (0..rank).map(|i| if i == 1 { c } else { 1 }).collect();
        let (mean, var) = if train {
            if update_stats {
                self.track(store, x)?;
            }
            Self::batch_stats(x)?
        } else {
            (
                store.buffer(&format!("{}.running_mean", self.name)),
                store.buffer(&format!("{}.running_var", self.name)),
            )
        };
        let inv_std = (var + self.eps)?.sqrt()?.recip()?;
        let scale = (use_param(&self.gamma, mode) * inv_std)?;
        let y = x
            .broadcast_sub(&mean.reshape(bshape.as_slice())?)?
            .broadcast_mul(&scale.reshape(bshape.as_slice())?)?;
        match &self.beta {
            Some(b) => Ok(y.broadcast_add(&use_param(b, mode).reshape(bshape.as_slice())?)?),
            None => Ok(y),
        }
    }
}

/// Bias-free linear layer, `y = x W^T`.
pub struct Linear {
    weight: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), &[out_dim, in_dim], 0.01)?;
        Ok(Self { weight })
    }

    pub fn forward(&self, x: &Tensor, mode: ParamMode) -> Result<Tensor> {
        Ok(x.matmul(&use_param(&self.weight, mode).t()?)?)
    }
}
