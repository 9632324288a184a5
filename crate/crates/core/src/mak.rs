//! Multi-head adaptive kernels.
//!
//! A small pointwise network maps geometric edge features to a private
//! `(C_out, C_in)` filter per point, neighbour and head. Filters of all heads
//! are applied to the content features and summed, then merged with a
//! residual path.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::instrument;
use crate::nn::{BatchNorm, Linear, Module, DEFAULT_LEAKY_SLOPE};
use crate::tensor::{add, leaky_relu, permute, reshape, BatchNormStats, Element, Mode, Parameter, Tensor};

/// Default hidden width of the kernel generator.
pub const DEFAULT_MID_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MakConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub gen_in_channels: usize,
    pub num_heads: usize,
    pub mid_channels: usize,
    pub residual: bool,
}

impl MakConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("gen_in_channels", self.gen_in_channels),
            ("num_heads", self.num_heads),
            ("mid_channels", self.mid_channels),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Channels emitted by the generator's last stage: `C_out * C_in * H`.
    pub fn kernel_channels(&self) -> usize {
        self.out_channels * self.in_channels * self.num_heads
    }

    fn has_projection(&self) -> bool {
        self.residual && self.in_channels != self.out_channels
    }

    /// Exact number of trainable scalars in one layer.
    pub fn parameter_count(&self) -> usize {
        let (g, m, kc) = (self.gen_in_channels, self.mid_channels, self.kernel_channels());
        let (ci, co) = (self.in_channels, self.out_channels);
        let generator = (g * m + m) + 2 * m + (m * m + m) + 2 * m + (m * kc + kc);
        let projection = if self.has_projection() { co * ci + co + 2 * co } else { 0 };
        generator + projection + 2 * co
    }

    /// Multiply-accumulates of one forward pass over `positions = N * k`
    /// grid cells of a single sample.
    pub fn mac_count(&self, positions: usize) -> usize {
        let (g, m, kc) = (self.gen_in_channels, self.mid_channels, self.kernel_channels());
        let per_position = g * m + m * m + m * kc + kc
            + if self.has_projection() { self.in_channels * self.out_channels } else { 0 };
        positions * per_position
    }
}

/// Per-point, per-neighbour, per-head filters laid out `(B, N, k, C_out, C_in, H)`.
#[derive(Debug, Clone)]
pub struct DynamicKernelBank<T: Element> {
    weights: Tensor<T>,
}

impl<T: Element> DynamicKernelBank<T> {
    /// Reinterprets a `(B, C_out * C_in * H, N, k)` generator output, channel
    /// `(o * C_in + i) * H + h`, as a kernel bank.
    pub fn from_generator_output(raw: &Tensor<T>, out_channels: usize, in_channels: usize, heads: usize) -> Result<Self> {
        let &[b, c, n, k] = raw.shape() else {
            return Err(Error::invalid(format!("generator output must be rank 4, got {:?}", raw.shape())));
        };
        if heads == 0 {
            return Err(Error::config("num_heads", "must be at least 1"));
        }
        if c != out_channels * in_channels * heads {
            return Err(Error::Shape {
                op: "kernel_bank",
                lhs: raw.shape().to_vec(),
                rhs: vec![out_channels, in_channels, heads],
            });
        }
        let moved = permute(raw, &[0, 2, 3, 1])?;
        Self::new(reshape(&moved, &[b, n, k, out_channels, in_channels, heads])?)
    }

    pub fn new(weights: Tensor<T>) -> Result<Self> {
        if weights.rank() != 6 {
            return Err(Error::invalid(format!("kernel bank must be rank 6, got {:?}", weights.shape())));
        }
        Ok(DynamicKernelBank { weights })
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn num_heads(&self) -> usize {
        self.weights.shape()[5]
    }
}

/// Applies every head's filter to `x` `(B, C_in, N, k)` and sums over heads,
/// giving `(B, C_out, N, k)`. Differentiable in both the bank and `x`.
pub fn apply_heads<T: Element>(bank: &DynamicKernelBank<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let w = bank.weights();
    let &[b, n, k, co, ci, h] = w.shape() else { unreachable!() };
    if h == 0 {
        return Err(Error::config("num_heads", "must be at least 1"));
    }
    if x.shape() != [b, ci, n, k] {
        return Err(Error::Shape {
            op: "apply_heads",
            lhs: w.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let plane = n * k;
    let (wd, xd) = (w.data(), x.data());
    let mut out = vec![T::zero(); b * co * plane];
    for bi in 0..b {
        for p in 0..plane {
            let kern = &wd[(bi * plane + p) * co * ci * h..][..co * ci * h];
            for o in 0..co {
                let mut acc = T::zero();
                for i in 0..ci {
                    let xv = xd[(bi * ci + i) * plane + p];
                    let row = &kern[(o * ci + i) * h..][..h];
                    acc = acc + row.iter().copied().sum::<T>() * xv;
                }
                out[(bi * co + o) * plane + p] = acc;
            }
        }
    }
    instrument::add_macs(b * plane * co * ci * h);
    Ok(Tensor::from_op(
        out,
        vec![b, co, n, k],
        "apply_heads",
        vec![w.clone(), x.clone()],
        move |g, inputs| {
            let (wd, xd) = (inputs[0].data(), inputs[1].data());
            let mut gw = inputs[0].requires_grad().then(|| vec![T::zero(); wd.len()]);
            let mut gx = inputs[1].requires_grad().then(|| vec![T::zero(); xd.len()]);
            for bi in 0..b {
                for p in 0..plane {
                    let base = (bi * plane + p) * co * ci * h;
                    for o in 0..co {
                        let go = g[(bi * co + o) * plane + p];
                        for i in 0..ci {
                            let xi = (bi * ci + i) * plane + p;
                            let off = base + (o * ci + i) * h;
                            if let Some(gw) = gw.as_mut() {
                                for v in &mut gw[off..off + h] {
                                    *v = go * xd[xi];
                                }
                            }
                            if let Some(gx) = gx.as_mut() {
                                let s: T = wd[off..off + h].iter().copied().sum();
                                gx[xi] = gx[xi] + s * go;
                            }
                        }
                    }
                }
            }
            vec![gw, gx]
        },
    ))
}

/// Fused equivalent of `apply_heads(bank)` where the bank is the affine image
/// `weight · hidden + bias` of a hidden map `(B, M, N, k)`.
///
/// The head sum is folded into the weights before anything is expanded, so
/// the bank is never materialized: per sample this is one GEMM of the
/// head-summed `(C_out, C_in * (M + 1))` matrix with the outer product of `x`
/// and `[hidden; 1]`.
fn fused_dynamic_filter<T: Element>(
    hidden: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    x: &Tensor<T>,
    co: usize,
    heads: usize,
) -> Result<Tensor<T>> {
    let &[b, m, n, k] = hidden.shape() else {
        return Err(Error::invalid(format!("hidden map must be rank 4, got {:?}", hidden.shape())));
    };
    let ci = x.shape().get(1).copied().unwrap_or(0);
    let kc = co * ci * heads;
    if x.shape() != [b, ci, n, k] || weight.shape() != [kc, m] || bias.shape() != [kc] {
        return Err(Error::Shape {
            op: "dynamic_filter",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let plane = n * k;
    let ma = m + 1;
    let cols = ci * ma;

    let mut summed = vec![T::zero(); co * cols];
    for o in 0..co {
        for i in 0..ci {
            for hd in 0..heads {
                let c = (o * ci + i) * heads + hd;
                let dst = &mut summed[o * cols + i * ma..][..ma];
                for (d, &wv) in dst[..m].iter_mut().zip(&weight.data()[c * m..(c + 1) * m]) {
                    *d = *d + wv;
                }
                dst[m] = dst[m] + bias.data()[c];
            }
        }
    }

    // Z[(i, m'), p] = x[i, p] * [hidden; 1][m', p]
    let outer = move |xb: &[T], hb: &[T], z: &mut [T]| {
        for i in 0..ci {
            let xi = &xb[i * plane..(i + 1) * plane];
            for mm in 0..m {
                let hm = &hb[mm * plane..(mm + 1) * plane];
                let zr = &mut z[(i * ma + mm) * plane..][..plane];
                for p in 0..plane {
                    zr[p] = xi[p] * hm[p];
                }
            }
            z[(i * ma + m) * plane..][..plane].copy_from_slice(xi);
        }
    };

    let mut out = vec![T::zero(); b * co * plane];
    let mut z = vec![T::zero(); cols * plane];
    for bi in 0..b {
        outer(&x.data()[bi * ci * plane..][..ci * plane], &hidden.data()[bi * m * plane..][..m * plane], &mut z);
        T::gemm(co, cols, plane, T::one(), &summed, (cols, 1), &z, (plane, 1), T::zero(), &mut out[bi * co * plane..][..co * plane], (plane, 1));
    }
    instrument::add_macs(b * plane * kc * ma);

    Ok(Tensor::from_op(
        out,
        vec![b, co, n, k],
        "dynamic_filter",
        vec![hidden.clone(), weight.clone(), bias.clone(), x.clone()],
        move |g, inputs| {
            let (hd, xd) = (inputs[0].data(), inputs[3].data());
            let need_params = inputs[1].requires_grad() || inputs[2].requires_grad();
            let mut g_summed = vec![T::zero(); co * cols];
            let mut g_hidden = inputs[0].requires_grad().then(|| vec![T::zero(); hd.len()]);
            let mut g_x = inputs[3].requires_grad().then(|| vec![T::zero(); xd.len()]);
            let mut z = vec![T::zero(); cols * plane];
            let mut gz = vec![T::zero(); cols * plane];
            for bi in 0..b {
                let xb = &xd[bi * ci * plane..][..ci * plane];
                let hb = &hd[bi * m * plane..][..m * plane];
                let gb = &g[bi * co * plane..][..co * plane];
                if need_params {
                    outer(xb, hb, &mut z);
                    T::gemm(co, plane, cols, T::one(), gb, (plane, 1), &z, (1, plane), T::one(), &mut g_summed, (cols, 1));
                }
                if g_hidden.is_none() && g_x.is_none() {
                    continue;
                }
                T::gemm(cols, co, plane, T::one(), &summed, (1, cols), gb, (plane, 1), T::zero(), &mut gz, (plane, 1));
                for i in 0..ci {
                    let xi = &xb[i * plane..(i + 1) * plane];
                    if let Some(gx) = g_x.as_mut() {
                        let dst = &mut gx[(bi * ci + i) * plane..][..plane];
                        dst.copy_from_slice(&gz[(i * ma + m) * plane..][..plane]);
                        for mm in 0..m {
                            let hm = &hb[mm * plane..(mm + 1) * plane];
                            let gzr = &gz[(i * ma + mm) * plane..][..plane];
                            for p in 0..plane {
                                dst[p] = dst[p] + gzr[p] * hm[p];
                            }
                        }
                    }
                    if let Some(gh) = g_hidden.as_mut() {
                        for mm in 0..m {
                            let dst = &mut gh[(bi * m + mm) * plane..][..plane];
                            let gzr = &gz[(i * ma + mm) * plane..][..plane];
                            for p in 0..plane {
                                dst[p] = dst[p] + gzr[p] * xi[p];
                            }
                        }
                    }
                }
            }
            let (gw, gbias) = if need_params {
                let mut gw = vec![T::zero(); kc * m];
                let mut gbias = vec![T::zero(); kc];
                for o in 0..co {
                    for i in 0..ci {
                        let src = &g_summed[o * cols + i * ma..][..ma];
                        for hd in 0..heads {
                            let c = (o * ci + i) * heads + hd;
                            gw[c * m..(c + 1) * m].copy_from_slice(&src[..m]);
                            gbias[c] = src[m];
                        }
                    }
                }
                (inputs[1].requires_grad().then_some(gw), inputs[2].requires_grad().then_some(gbias))
            } else {
                (None, None)
            };
            vec![g_hidden, gw, gbias, g_x]
        },
    ))
}

/// Pointwise network producing kernels from geometric features.
#[derive(Debug)]
pub struct KernelGenerator<T: Element> {
    pub conv0: Linear<T>,
    pub bn0: BatchNorm<T>,
    pub conv_mid: Linear<T>,
    pub bn_mid: BatchNorm<T>,
    pub conv1: Linear<T>,
    pub slope: f64,
}

impl<T: Element> KernelGenerator<T> {
    fn new(prefix: &str, cfg: &MakConfig, slope: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let m = cfg.mid_channels;
        Ok(KernelGenerator {
            conv0: Linear::new(&format!("{prefix}.conv0"), cfg.gen_in_channels, m, rng)?,
            bn0: BatchNorm::new(&format!("{prefix}.bn0"), m)?,
            conv_mid: Linear::new(&format!("{prefix}.conv_mid"), m, m, rng)?,
            bn_mid: BatchNorm::new(&format!("{prefix}.bn_mid"), m)?,
            conv1: Linear::new(&format!("{prefix}.conv1"), m, cfg.kernel_channels(), rng)?,
            slope,
        })
    }

    /// Output of the two activated stages, `(B, M, N, k)`.
    pub fn hidden(&self, geo: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = T::from_f64_lossy(self.slope);
        let y0 = leaky_relu(&self.bn0.forward(&self.conv0.forward(geo)?, mode)?, s);
        Ok(leaky_relu(&self.bn_mid.forward(&self.conv_mid.forward(&y0)?, mode)?, s))
    }
}

impl<T: Element> Module<T> for KernelGenerator<T> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        self.conv0.parameters(out);
        self.bn0.parameters(out);
        self.conv_mid.parameters(out);
        self.bn_mid.parameters(out);
        self.conv1.parameters(out);
    }

    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<T>>) {
        self.conv0.parameters_mut(out);
        self.bn0.parameters_mut(out);
        self.conv_mid.parameters_mut(out);
        self.bn_mid.parameters_mut(out);
        self.conv1.parameters_mut(out);
    }

    fn buffers<'a>(&'a self, out: &mut Vec<(&'a str, &'a BatchNormStats<T>)>) {
        self.bn0.buffers(out);
        self.bn_mid.buffers(out);
    }
}

#[derive(Debug)]
pub struct Projection<T: Element> {
    pub conv: Linear<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Debug)]
pub struct MakLayer<T: Element> {
    config: MakConfig,
    pub generator: KernelGenerator<T>,
    pub projection: Option<Projection<T>>,
    pub bn_out: BatchNorm<T>,
    pub slope: f64,
}

impl<T: Element> MakLayer<T> {
    /// Builds a layer whose parameters are named under `prefix`
    /// (`{prefix}.gen.*`, `{prefix}.proj.*`, `{prefix}.bn_out.*`).
    pub fn new(prefix: &str, config: MakConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::with_slope(prefix, config, DEFAULT_LEAKY_SLOPE, rng)
    }

    pub fn with_slope(prefix: &str, config: MakConfig, slope: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let generator = KernelGenerator::new(&format!("{prefix}.gen"), &config, slope, rng)?;
        let projection = if config.has_projection() {
            Some(Projection {
                conv: Linear::new(&format!("{prefix}.proj.conv"), config.in_channels, config.out_channels, rng)?,
                bn: BatchNorm::new(&format!("{prefix}.proj.bn"), config.out_channels)?,
            })
        } else {
            None
        };
        Ok(MakLayer {
            config,
            generator,
            projection,
            bn_out: BatchNorm::new(&format!("{prefix}.bn_out"), config.out_channels)?,
            slope,
        })
    }

    pub fn config(&self) -> &MakConfig {
        &self.config
    }

    fn check_inputs(&self, geo: &Tensor<T>, feat: Option<&Tensor<T>>) -> Result<()> {
        let c = &self.config;
        let ok_geo = geo.rank() == 4 && geo.shape()[1] == c.gen_in_channels;
        if !ok_geo {
            return Err(Error::Shape {
                op: "mak.geo",
                lhs: geo.shape().to_vec(),
                rhs: vec![c.gen_in_channels],
            });
        }
        if let Some(f) = feat {
            let (gs, fs) = (geo.shape(), f.shape());
            if f.rank() != 4 || fs[1] != c.in_channels || fs[0] != gs[0] || fs[2..] != gs[2..] {
                return Err(Error::Shape {
                    op: "mak.feat",
                    lhs: fs.to_vec(),
                    rhs: gs.to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Materializes the full kernel bank for `geo` `(B, C_geo, N, k)`.
    pub fn generate_kernels(&self, geo: &Tensor<T>, mode: Mode) -> Result<DynamicKernelBank<T>> {
        self.check_inputs(geo, None)?;
        let raw = self.generator.conv1.forward(&self.generator.hidden(geo, mode)?)?;
        let c = &self.config;
        DynamicKernelBank::from_generator_output(&raw, c.out_channels, c.in_channels, c.num_heads)
    }

    /// `LeakyReLU(BN_out(filtered + identity))`.
    fn integrate(&self, filtered: Tensor<T>, feat: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let summed = if !self.config.residual {
            filtered
        } else if let Some(p) = &self.projection {
            add(&filtered, &p.bn.forward(&p.conv.forward(feat)?, mode)?)?
        } else {
            add(&filtered, feat)?
        };
        Ok(leaky_relu(&self.bn_out.forward(&summed, mode)?, T::from_f64_lossy(self.slope)))
    }

    /// Layer output `(B, C_out, N, k)` without materializing the kernel bank.
    pub fn forward(&self, geo: &Tensor<T>, feat: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_inputs(geo, Some(feat))?;
        let hidden = self.generator.hidden(geo, mode)?;
        let conv1 = &self.generator.conv1;
        let filtered = fused_dynamic_filter(
            &hidden,
            conv1.weight.value(),
            conv1.bias.value(),
            feat,
            self.config.out_channels,
            self.config.num_heads,
        )?;
        self.integrate(filtered, feat, mode)
    }

    /// Same result as [`MakLayer::forward`], computed through the explicit
    /// kernel bank. Memory grows with `N * k * C_out * C_in * H`.
    pub fn forward_explicit(&self, geo: &Tensor<T>, feat: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_inputs(geo, Some(feat))?;
        let bank = self.generate_kernels(geo, mode)?;
        self.integrate(apply_heads(&bank, feat)?, feat, mode)
    }
}

impl<T: Element> Module<T> for MakLayer<T> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        self.generator.parameters(out);
        if let Some(p) = &self.projection {
            p.conv.parameters(out);
            p.bn.parameters(out);
        }
        self.bn_out.parameters(out);
    }

    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<T>>) {
        self.generator.parameters_mut(out);
        if let Some(p) = &mut self.projection {
            p.conv.parameters_mut(out);
            p.bn.parameters_mut(out);
        }
        self.bn_out.parameters_mut(out);
    }

    fn buffers<'a>(&'a self, out: &mut Vec<(&'a str, &'a BatchNormStats<T>)>) {
        self.generator.buffers(out);
        if let Some(p) = &self.projection {
            p.bn.buffers(out);
        }
        self.bn_out.buffers(out);
    }
}
