use super::Tensor;
use crate::error::{Error, Result};

/// PSNR reported for identical inputs, and the ceiling for every other input.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActKind {
    Relu,
    Silu,
}

impl ActKind {
    pub fn name(self) -> &'static str {
        match self {
            ActKind::Relu => "relu",
            ActKind::Silu => "silu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(ActKind::Relu),
            "silu" => Some(ActKind::Silu),
            _ => None,
        }
    }

    pub fn apply(self, x: f32) -> f32 {
        match self {
            ActKind::Relu => x.max(0.0),
            ActKind::Silu => silu(x),
        }
    }

    /// d/dx of the activation at `x`.
    pub fn derivative(self, x: f32) -> f32 {
        match self {
            ActKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActKind::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

/// `c[m×n] = a[m×k] · b[k×n]`, row-major, sequential accumulation over `k`.
pub fn matmul_f32(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0.0f32;
            for (kk, &av) in row.iter().enumerate() {
                acc += av * b[kk * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// Exact integer product of zero-point-centered operands:
/// `acc[i,j] = Σ_k (qa[i,k] - za) · (qb[k,j] - zb)`.
pub fn matmul_int(qa: &[i32], za: i32, qb: &[i32], zb: i32, m: usize, k: usize, n: usize) -> Vec<i64> {
    debug_assert_eq!(qa.len(), m * k);
    debug_assert_eq!(qb.len(), k * n);
    let mut c = vec![0i64; m * n];
    for i in 0..m {
        let row = &qa[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0i64;
            for (kk, &av) in row.iter().enumerate() {
                acc += (av - za) as i64 * (qb[kk * n + j] - zb) as i64;
            }
            c[i * n + j] = acc;
        }
    }
    c
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let c = matmul_f32(a.as_f32()?, b.as_f32()?, m, k, n);
    Tensor::from_f32(vec![m, n], c)
}

pub fn elementwise(a: &Tensor, b: &Tensor, op: BinaryOp) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim("elementwise", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (x, y) = (a.as_f32()?, b.as_f32()?);
    let out = match op {
        BinaryOp::Add => x.iter().zip(y).map(|(p, q)| p + q).collect(),
        BinaryOp::Mul => x.iter().zip(y).map(|(p, q)| p * q).collect(),
    };
    Tensor::from_f32(a.shape().to_vec(), out)
}

pub fn activation(x: &Tensor, kind: ActKind) -> Result<Tensor> {
    let out = x.as_f32()?.iter().map(|&v| kind.apply(v)).collect();
    Tensor::from_f32(x.shape().to_vec(), out)
}

/// Multiplies every element by the single element of `s`.
pub fn scale(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    if s.numel() != 1 {
        return Err(Error::dim("scale", format!("scalar expected, got {:?}", s.shape())));
    }
    let f = s.as_f32()?[0];
    let out = x.as_f32()?.iter().map(|&v| v * f).collect();
    Tensor::from_f32(x.shape().to_vec(), out)
}

/// Concatenates rank-2 tensors along the leading (feature) axis.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::Empty("concat input list"))?;
    let (_, n) = first.dims2()?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (r, c) = p.dims2()?;
        if c != n {
            return Err(Error::dim("concat", format!("column count {c} != {n}")));
        }
        rows += r;
        data.extend_from_slice(p.as_f32()?);
    }
    Tensor::from_f32(vec![rows, n], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeom {
    /// Geometry for NCHW input `x` and OIHW weight `w`.
    pub fn new(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[batch, in_ch, h, wd], &[out_ch, wc, kh, kw]) = (x, w) else {
            return Err(Error::dim("conv2d", format!("expected rank-4 input and weight, got {x:?} and {w:?}")));
        };
        if wc != in_ch {
            return Err(Error::dim("conv2d", format!("weight expects {wc} channels, input has {in_ch}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::dim("conv2d", "kernel larger than padded input"));
        }
        Ok(Conv2dGeom { batch, in_ch, h, w: wd, out_ch, kh, kw, stride, padding })
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_h(), self.out_w()]
    }

    /// Visits every (output index, input index, weight index) triple that
    /// contributes to the output, skipping padded positions. Traversal order
    /// is fixed: output element, then channel, then kernel row, then column.
    pub(crate) fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let pad = self.padding as isize;
        for b in 0..self.batch {
            for o in 0..self.out_ch {
                for y in 0..oh {
                    for x in 0..ow {
                        let out_idx = ((b * self.out_ch + o) * oh + y) * ow + x;
                        for c in 0..self.in_ch {
                            for ky in 0..self.kh {
                                let iy = (y * self.stride + ky) as isize - pad;
                                if iy < 0 || iy >= self.h as isize {
                                    continue;
                                }
                                for kx in 0..self.kw {
                                    let ix = (x * self.stride + kx) as isize - pad;
                                    if ix < 0 || ix >= self.w as isize {
                                        continue;
                                    }
                                    let in_idx = ((b * self.in_ch + c) * self.h + iy as usize) * self.w + ix as usize;
                                    let w_idx = ((o * self.in_ch + c) * self.kh + ky) * self.kw + kx;
                                    f(out_idx, in_idx, w_idx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_f32(x: &[f32], w: &[f32], g: &Conv2dGeom) -> Vec<f32> {
    let mut out = vec![0.0f32; g.out_shape().iter().product()];
    g.for_each_tap(|o, i, k| out[o] += x[i] * w[k]);
    out
}

/// Centered integer convolution; padded taps contribute exactly zero.
pub fn conv2d_int(qx: &[i32], zx: i32, qw: &[i32], zw: i32, g: &Conv2dGeom) -> Vec<i64> {
    let mut out = vec![0i64; g.out_shape().iter().product()];
    g.for_each_tap(|o, i, k| out[o] += (qx[i] - zx) as i64 * (qw[k] - zw) as i64);
    out
}

/// NCHW convolution with zero padding, no dilation.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = Conv2dGeom::new(x.shape(), w.shape(), stride, padding)?;
    Tensor::from_f32(g.out_shape(), conv2d_f32(x.as_f32()?, w.as_f32()?, &g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub range_lo: f32,
    pub range_hi: f32,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn bin_count(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Normalized bin masses in f64.
    pub fn probabilities(&self) -> Vec<f64> {
        let total = self.total() as f64;
        self.counts.iter().map(|&c| c as f64 / total).collect()
    }
}

/// Values are clamped into `[lo, hi]` and binned; `hi` itself lands in the last bin.
pub fn histogram(x: &Tensor, bins: usize, lo: f32, hi: f32) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::Range(format!("need at least 2 bins, got {bins}")));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Range(format!("degenerate histogram range [{lo}, {hi}]")));
    }
    let mut counts = vec![0u64; bins];
    let width = (hi as f64) - (lo as f64);
    for &v in x.as_f32()? {
        let v = v.clamp(lo, hi) as f64;
        let idx = (((v - lo as f64) / width) * bins as f64).floor() as usize;
        counts[idx.min(bins - 1)] += 1;
    }
    Ok(Histogram { range_lo: lo, range_hi: hi, counts })
}

/// `dot(a,b) / (|a|·|b|)` over the flattened tensors, clamped to `[-1, 1]`.
/// A zero vector against a nonzero one has similarity 0.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("cosine_similarity", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (x, y) = (a.as_f32()?, b.as_f32()?);
    let mut dot = 0.0f64;
    let mut nx = 0.0f64;
    let mut ny = 0.0f64;
    for (&p, &q) in x.iter().zip(y) {
        dot += p as f64 * q as f64;
        nx += p as f64 * p as f64;
        ny += q as f64 * q as f64;
    }
    if nx == 0.0 && ny == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    if nx == 0.0 || ny == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (nx.sqrt() * ny.sqrt())).clamp(-1.0, 1.0))
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(reference: &Tensor, test: &Tensor, peak: f64) -> Result<f64> {
    if reference.shape() != test.shape() {
        return Err(Error::dim("psnr", format!("{:?} vs {:?}", reference.shape(), test.shape())));
    }
    if !(peak > 0.0) {
        return Err(Error::Param(format!("psnr peak must be positive, got {peak}")));
    }
    let (r, t) = (reference.as_f32()?, test.as_f32()?);
    let mse = r.iter().zip(t).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / r.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}
