//! Raw numeric kernels behind the taped operations.

use crate::tensor::gemm;

/// Geometry of a stride-1, unpadded 2-d convolution over NHWC input with
/// a `[kh, kw, c, f]` kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub f: usize,
}

impl ConvGeom {
    pub fn oh(&self) -> usize {
        self.h + 1 - self.kh
    }

    pub fn ow(&self) -> usize {
        self.w + 1 - self.kw
    }

    pub fn rows(&self) -> usize {
        self.n * self.oh() * self.ow()
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.c
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.n, self.h, self.w, self.c]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.oh(), self.ow(), self.f]
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        vec![self.kh, self.kw, self.c, self.f]
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow, patch) = (g.oh(), g.ow(), g.patch());
    let row_len = g.kw * g.c;
    let mut cols = vec![0.0; g.rows() * patch];
    let mut r = 0;
    for n in 0..g.n {
        let img = &x[n * g.h * g.w * g.c..(n + 1) * g.h * g.w * g.c];
        for i in 0..oh {
            for j in 0..ow {
                let dst = &mut cols[r * patch..(r + 1) * patch];
                for di in 0..g.kh {
                    let src = ((i + di) * g.w + j) * g.c;
                    dst[di * row_len..(di + 1) * row_len].copy_from_slice(&img[src..src + row_len]);
                }
                r += 1;
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow, patch) = (g.oh(), g.ow(), g.patch());
    let row_len = g.kw * g.c;
    let mut x = vec![0.0; g.n * g.h * g.w * g.c];
    let mut r = 0;
    for n in 0..g.n {
        let img = &mut x[n * g.h * g.w * g.c..(n + 1) * g.h * g.w * g.c];
        for i in 0..oh {
            for j in 0..ow {
                let src = &cols[r * patch..(r + 1) * patch];
                for di in 0..g.kh {
                    let dst = ((i + di) * g.w + j) * g.c;
                    for (d, s) in img[dst..dst + row_len].iter_mut().zip(&src[di * row_len..(di + 1) * row_len]) {
                        *d += s;
                    }
                }
                r += 1;
            }
        }
    }
    x
}

pub fn conv2d(x: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(x, g);
    let mut out = vec![0.0; g.rows() * g.f];
    gemm(&cols, false, kernel, false, g.rows(), g.patch(), g.f, &mut out);
    out
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad(gy: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dcols = vec![0.0; g.rows() * g.patch()];
    gemm(gy, false, kernel, true, g.rows(), g.f, g.patch(), &mut dcols);
    col2im(&dcols, g)
}

/// Adjoint of [`conv2d`] with respect to its kernel.
pub fn conv2d_kernel_grad(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(x, g);
    let mut dk = vec![0.0; g.patch() * g.f];
    gemm(&cols, true, gy, false, g.patch(), g.rows(), g.f, &mut dk);
    dk
}

/// Zero-pads the two spatial axes of an NHWC tensor by `p` on every side.
pub fn pad_spatial(x: &[f64], shape: &[usize], p: usize) -> Vec<f64> {
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; n * ph * pw * c];
    for b in 0..n {
        for i in 0..h {
            let src = ((b * h + i) * w) * c;
            let dst = ((b * ph + i + p) * pw + p) * c;
            out[dst..dst + w * c].copy_from_slice(&x[src..src + w * c]);
        }
    }
    out
}

/// Inverse of [`pad_spatial`]: `shape` is the padded shape.
pub fn crop_spatial(x: &[f64], shape: &[usize], p: usize) -> Vec<f64> {
    let (n, ph, pw, c) = (shape[0], shape[1], shape[2], shape[3]);
    let (h, w) = (ph - 2 * p, pw - 2 * p);
    let mut out = vec![0.0; n * h * w * c];
    for b in 0..n {
        for i in 0..h {
            let src = ((b * ph + i + p) * pw + p) * c;
            let dst = ((b * h + i) * w) * c;
            out[dst..dst + w * c].copy_from_slice(&x[src..src + w * c]);
        }
    }
    out
}

/// Flat source index of each max-pool output; the first maximum in
/// row-major window order wins.
pub fn max_pool_indices(x: &[f64], shape: &[usize], size: usize) -> (Vec<usize>, Vec<usize>) {
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / size, w / size);
    let mut idx = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut best = ((b * h + i * size) * w + j * size) * c + ch;
                    for di in 0..size {
                        for dj in 0..size {
                            let k = ((b * h + i * size + di) * w + j * size + dj) * c + ch;
                            if x[k] > x[best] {
                                best = k;
                            }
                        }
                    }
                    idx.push(best);
                }
            }
        }
    }
    (idx, vec![n, oh, ow, c])
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^v)` without overflow.
pub fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}
