//! Flat parameter buffers, initialisation, Adam and a few activation helpers
//! shared by the embedder and the denoiser.

use std::ops::Range;

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Named slice of a flat parameter vector holding a row-major matrix or vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.rows * self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mat<'a>(&self, buf: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &buf[self.range()]).expect("block shape")
    }

    pub fn mat_mut<'a>(&self, buf: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut buf[self.range()]).expect("block shape")
    }

    pub fn vec<'a>(&self, buf: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&buf[self.range()])
    }

    pub fn vec_mut<'a>(&self, buf: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut buf[self.range()])
    }
}

/// Sequential allocator of [`Block`]s.
#[derive(Debug, Default)]
pub struct LayoutBuilder {
    next: usize,
}

impl LayoutBuilder {
    pub fn matrix(&mut self, rows: usize, cols: usize) -> Block {
        let b = Block { offset: self.next, rows, cols };
        self.next += rows * cols;
        b
    }

    pub fn vector(&mut self, len: usize) -> Block {
        self.matrix(1, len)
    }

    pub fn total(&self) -> usize {
        self.next
    }
}

/// Fills a block with N(0, scale^2) draws.
pub fn init_normal<R: Rng + ?Sized>(buf: &mut [f64], block: &Block, scale: f64, rng: &mut R) {
    for v in &mut buf[block.range()] {
        let z: f64 = StandardNormal.sample(rng);
        *v = z * scale;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `log(sigmoid(x))` without overflow.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Average-pools an (h, w, c) row-major image by `factor` in both spatial axes.
pub fn avg_pool(x: &[f64], h: usize, w: usize, c: usize, factor: usize) -> Vec<f64> {
    if factor == 1 {
        return x.to_vec();
    }
    let (ph, pw) = (h / factor, w / factor);
    let mut out = vec![0.0; ph * pw * c];
    let norm = 1.0 / (factor * factor) as f64;
    for y in 0..ph * factor {
        for xx in 0..pw * factor {
            let src = (y * w + xx) * c;
            let dst = ((y / factor) * pw + xx / factor) * c;
            for ch in 0..c {
                out[dst + ch] += x[src + ch] * norm;
            }
        }
    }
    out
}

/// Unfolds `n` stacked (h, w, c) images (rows of `x`, one pixel per row) into
/// zero-padded `k x k` patches: output row `b*h*w + y*w + x` holds the patch
/// centred on that pixel, ordered (dy, dx, channel).
pub fn im2col(x: &Array2<f64>, n: usize, h: usize, w: usize, k: usize) -> Array2<f64> {
    let c = x.ncols();
    let src = x.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let width = k * k * c;
    let mut out = vec![0.0; n * h * w * width];
    for_each_tap(n, h, w, k, |dst_px, src_px, tap| {
        let at = dst_px * width + tap * c;
        out[at..at + c].copy_from_slice(&src[src_px * c..src_px * c + c]);
    });
    Array2::from_shape_vec((n * h * w, width), out).expect("patch shape")
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto pixels.
pub fn col2im(cols: &Array2<f64>, n: usize, h: usize, w: usize, k: usize, c: usize) -> Array2<f64> {
    let src = cols.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let width = k * k * c;
    let mut out = vec![0.0; n * h * w * c];
    for_each_tap(n, h, w, k, |dst_px, src_px, tap| {
        let at = dst_px * width + tap * c;
        for ch in 0..c {
            out[src_px * c + ch] += src[at + ch];
        }
    });
    Array2::from_shape_vec((n * h * w, c), out).expect("pixel shape")
}

/// Calls `f(pixel, neighbour, tap)` for every in-bounds kernel tap.
fn for_each_tap<F: FnMut(usize, usize, usize)>(n: usize, h: usize, w: usize, k: usize, mut f: F) {
    let r = (k / 2) as isize;
    for b in 0..n {
        let base = b * h * w;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let px = base + (y as usize) * w + x as usize;
                for dy in 0..k as isize {
                    let sy = y + dy - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..k as isize {
                        let sx = x + dx - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        f(px, base + sy as usize * w + sx as usize, (dy * k as isize + dx) as usize);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0 }
    }
}

/// Adam with bias correction and optional global norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        Adam { cfg, m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        self.step += 1;
        let norm = l2_norm(grad);
        let scale = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i] * scale;
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Derives a child seed from `base` and a path of indices (SplitMix64 finaliser).
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x = splitmix(x ^ splitmix(p.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    splitmix(x)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Central finite-difference gradient of `f` at `x`.
///
/// Test-support utility; kept independent from every analytic gradient.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(x: &[f64], h: f64, mut f: F) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = l2_norm(a).max(l2_norm(b)).max(1e-12);
    diff / scale
}
