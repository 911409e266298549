//! Raw kernels for the spatial ops (no graph bookkeeping).

use super::gemm_strided;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_px(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let opx = g.out_px();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * opx..(row + 1) * opx];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &img[(c * g.h + ii as usize) * g.w..(c * g.h + ii as usize + 1) * g.w];
                    for (oj, v) in out_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let opx = g.out_px();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * opx..(row + 1) * opx];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + ii as usize) * g.w;
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            img[base + jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (patch, opx) = (g.patch(), g.out_px());
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.f * opx;
    let mut out = vec![0.0; g.n * out_sz];
    let mut cols = if is_pointwise(g) { Vec::new() } else { vec![0.0; patch * opx] };
    for n in 0..g.n {
        let img = &input[n * in_sz..(n + 1) * in_sz];
        let cols_ref: &[f64] = if is_pointwise(g) {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        gemm_strided(
            g.f,
            patch,
            opx,
            kernel,
            (patch as isize, 1),
            cols_ref,
            (opx as isize, 1),
            &mut out[n * out_sz..(n + 1) * out_sz],
            0.0,
        );
    }
    out
}

/// Returns (d_input, d_kernel); either may be skipped.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    d_out: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (patch, opx) = (g.patch(), g.out_px());
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.f * opx;
    let mut d_in = want_input.then(|| vec![0.0; g.n * in_sz]);
    let mut d_k = want_kernel.then(|| vec![0.0; g.f * patch]);
    let mut cols = vec![0.0; patch * opx];
    let mut d_cols = vec![0.0; patch * opx];
    for n in 0..g.n {
        let img = &input[n * in_sz..(n + 1) * in_sz];
        let dy = &d_out[n * out_sz..(n + 1) * out_sz];
        if let Some(dk) = d_k.as_mut() {
            let cols_ref: &[f64] = if is_pointwise(g) {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            // dK[f, p] += Σ_q dy[f, q] · cols[p, q]
            gemm_strided(
                g.f,
                opx,
                patch,
                dy,
                (opx as isize, 1),
                cols_ref,
                (1, opx as isize),
                dk,
                1.0,
            );
        }
        if let Some(di) = d_in.as_mut() {
            let di_n = &mut di[n * in_sz..(n + 1) * in_sz];
            if is_pointwise(g) {
                gemm_strided(
                    patch,
                    g.f,
                    opx,
                    kernel,
                    (1, patch as isize),
                    dy,
                    (opx as isize, 1),
                    di_n,
                    1.0,
                );
            } else {
                gemm_strided(
                    patch,
                    g.f,
                    opx,
                    kernel,
                    (1, patch as isize),
                    dy,
                    (opx as isize, 1),
                    &mut d_cols,
                    0.0,
                );
                col2im_add(g, &d_cols, di_n);
            }
        }
    }
    (d_in, d_k)
}

/// Nearest-neighbour 2× upsampling of `[planes × h × w]`.
pub(crate) fn upsample2x(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * h2 * w2];
    for p in 0..planes {
        for i in 0..h2 {
            let src = &x[(p * h + i / 2) * w..(p * h + i / 2 + 1) * w];
            let dst = &mut out[(p * h2 + i) * w2..(p * h2 + i + 1) * w2];
            for (j, v) in dst.iter_mut().enumerate() {
                *v = src[j / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward(dy: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                let r0 = (p * h2 + 2 * i) * w2 + 2 * j;
                let r1 = r0 + w2;
                dx[(p * h + i) * w + j] = dy[r0] + dy[r0 + 1] + dy[r1] + dy[r1 + 1];
            }
        }
    }
    dx
}

/// Non-overlapping `k×k` average pooling of `[planes × h × w]`.
pub(crate) fn avg_pool(x: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (ho, wo) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        for oi in 0..ho {
            for oj in 0..wo {
                let mut s = 0.0;
                for di in 0..k {
                    let row = (p * h + oi * k + di) * w + oj * k;
                    for v in &x[row..row + k] {
                        s += v;
                    }
                }
                out[(p * ho + oi) * wo + oj] = s * scale;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(dy: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (ho, wo) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                dx[(p * h + i) * w + j] = dy[(p * ho + i / k) * wo + j / k] * scale;
            }
        }
    }
    dx
}
