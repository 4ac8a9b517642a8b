//! im2col + GEMM convolution kernels.
//!
//! Each batch item is independent, so forward and input-gradient passes run
//! per item. Weight and bias gradients are produced per item and summed in
//! item order afterwards, which keeps the result independent of scheduling.

use crate::parallel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn in_item(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_item(&self) -> usize {
        self.cout * self.out_pixels()
    }
}

/// Output extent for one spatial axis, or `None` when it would be empty.
pub(crate) fn output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn im2col(g: &ConvGeometry, x: &[f64], cols: &mut [f64]) {
    let p = g.out_pixels();
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..(ci * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, cols: &[f64], dx: &mut [f64]) {
    let p = g.out_pixels();
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] = a[m x k] * b[k x n] (+ c if accumulate)`, all row-major, with
/// optional transposition of the stored operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked by the callers' geometry and the
    // strides above address exactly m*k, k*n and m*n elements.
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn forward(g: &ConvGeometry, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.out_item()];
    let (k, p) = (g.patch_len(), g.out_pixels());
    parallel::for_each_chunk_mut(&mut out, g.out_item(), |i, o| {
        let mut cols = vec![0.0; k * p];
        im2col(g, &x[i * g.in_item()..(i + 1) * g.in_item()], &mut cols);
        for (co, row) in o.chunks_mut(p).enumerate() {
            row.fill(bias[co]);
        }
        gemm(g.cout, k, p, weight, false, &cols, false, o, true);
    });
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn backward(
    g: &ConvGeometry,
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads {
    let (k, p) = (g.patch_len(), g.out_pixels());
    let per_item = parallel::map_indexed(g.n, |i| {
        let go = &grad_out[i * g.out_item()..(i + 1) * g.out_item()];
        let dx = need_input.then(|| {
            let mut dcols = vec![0.0; k * p];
            gemm(k, g.cout, p, weight, true, go, false, &mut dcols, false);
            let mut dx = vec![0.0; g.in_item()];
            col2im(g, &dcols, &mut dx);
            dx
        });
        let dw = need_weight.then(|| {
            let mut cols = vec![0.0; k * p];
            im2col(g, &x[i * g.in_item()..(i + 1) * g.in_item()], &mut cols);
            let mut dw = vec![0.0; g.cout * k];
            gemm(g.cout, p, k, go, false, &cols, true, &mut dw, false);
            dw
        });
        (dx, dw)
    });

    let mut input = need_input.then(|| Vec::with_capacity(g.n * g.in_item()));
    let mut weight_grad = need_weight.then(|| vec![0.0; g.cout * k]);
    for (dx, dw) in per_item {
        if let (Some(acc), Some(dx)) = (input.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
        if let (Some(acc), Some(dw)) = (weight_grad.as_mut(), dw) {
            acc.iter_mut().zip(&dw).for_each(|(a, d)| *a += d);
        }
    }
    let bias = need_bias.then(|| {
        let mut db = vec![0.0; g.cout];
        for i in 0..g.n {
            let go = &grad_out[i * g.out_item()..(i + 1) * g.out_item()];
            for (co, row) in go.chunks(p).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
        db
    });
    ConvGrads {
        input,
        weight: weight_grad,
        bias,
    }
}
