//! Dense kernels on channels-last (`height x width x channels`) tensors.
//!
//! Transposed convolution uses kernel 4, stride 2, padding 1, so
//! `out = 2 * in`. Output `(oy, ox)` receives input `(iy, ix)` through tap
//! `(ky, kx)` iff `oy = 2 * iy - 1 + ky` and `ox = 2 * ix - 1 + kx`.
//! Weights are laid out `[ky][kx][c_in][c_out]`.
//!
//! Every reduction runs in a fixed order independent of the thread count.

use rayon::prelude::*;

pub const KERNEL: usize = 4;
pub const TAPS: usize = KERNEL * KERNEL;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// The two `(tap, input index)` pairs feeding output index `o` along one axis.
#[inline]
fn sources(o: usize, n_in: usize) -> impl Iterator<Item = (usize, usize)> {
    let k0 = (o + 1) % 2;
    [k0, k0 + 2].into_iter().filter_map(move |k| {
        let num = o as isize + 1 - k as isize;
        let i = num / 2;
        (num >= 0 && (i as usize) < n_in).then_some((k, i as usize))
    })
}

/// Output index fed by input `i` through tap `k`, if inside `0..n_out`.
#[inline]
fn target(i: usize, k: usize, n_out: usize) -> Option<usize> {
    let o = 2 * i as isize - 1 + k as isize;
    (o >= 0 && (o as usize) < n_out).then_some(o as usize)
}

pub fn deconv_forward(input: &Tensor, weight: &[f64], bias: &[f64], c_out: usize) -> Tensor {
    let c_in = input.channels;
    debug_assert_eq!(weight.len(), TAPS * c_in * c_out);
    let (h_out, w_out) = (2 * input.height, 2 * input.width);
    let mut out = Tensor::zeros(h_out, w_out, c_out);
    out.data
        .par_chunks_mut(w_out * c_out)
        .enumerate()
        .for_each(|(oy, row)| {
            for ox in 0..w_out {
                let acc = &mut row[ox * c_out..(ox + 1) * c_out];
                acc.copy_from_slice(bias);
                for (ky, iy) in sources(oy, input.height) {
                    for (kx, ix) in sources(ox, input.width) {
                        let x = input.pixel(iy, ix);
                        let w_tap = &weight[(ky * KERNEL + kx) * c_in * c_out..][..c_in * c_out];
                        for (ci, &xv) in x.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let w_row = &w_tap[ci * c_out..(ci + 1) * c_out];
                            for (a, &w) in acc.iter_mut().zip(w_row) {
                                *a += xv * w;
                            }
                        }
                    }
                }
            }
        });
    out
}

pub struct DeconvGrads {
    pub input: Tensor,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn deconv_backward(input: &Tensor, weight: &[f64], grad_out: &Tensor, need_input: bool) -> DeconvGrads {
    let c_in = input.channels;
    let c_out = grad_out.channels;
    let (h_out, w_out) = (grad_out.height, grad_out.width);

    let mut bias = vec![0.0; c_out];
    for px in grad_out.data.chunks_exact(c_out) {
        for (b, &g) in bias.iter_mut().zip(px) {
            *b += g;
        }
    }

    let weight_grad: Vec<f64> = (0..TAPS)
        .into_par_iter()
        .flat_map_iter(|tap| {
            let (ky, kx) = (tap / KERNEL, tap % KERNEL);
            let mut dw = vec![0.0; c_in * c_out];
            for iy in 0..input.height {
                let Some(oy) = target(iy, ky, h_out) else { continue };
                for ix in 0..input.width {
                    let Some(ox) = target(ix, kx, w_out) else { continue };
                    let x = input.pixel(iy, ix);
                    let g = grad_out.pixel(oy, ox);
                    for (ci, &xv) in x.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for (d, &gv) in dw[ci * c_out..(ci + 1) * c_out].iter_mut().zip(g) {
                            *d += xv * gv;
                        }
                    }
                }
            }
            dw
        })
        .collect();

    let mut input_grad = Tensor::zeros(input.height, input.width, c_in);
    if need_input {
        input_grad
            .data
            .par_chunks_mut(input.width * c_in)
            .enumerate()
            .for_each(|(iy, row)| {
                for ix in 0..input.width {
                    let acc = &mut row[ix * c_in..(ix + 1) * c_in];
                    for ky in 0..KERNEL {
                        let Some(oy) = target(iy, ky, h_out) else { continue };
                        for kx in 0..KERNEL {
                            let Some(ox) = target(ix, kx, w_out) else { continue };
                            let g = grad_out.pixel(oy, ox);
                            let w_tap = &weight[(ky * KERNEL + kx) * c_in * c_out..][..c_in * c_out];
                            for (ci, a) in acc.iter_mut().enumerate() {
                                let w_row = &w_tap[ci * c_out..(ci + 1) * c_out];
                                *a += w_row.iter().zip(g).map(|(w, g)| w * g).sum::<f64>();
                            }
                        }
                    }
                }
            });
    }
    DeconvGrads {
        input: input_grad,
        weight: weight_grad,
        bias,
    }
}

pub fn relu_in_place(t: &mut Tensor) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient where the post-activation value is not positive.
pub fn relu_backward_in_place(grad: &mut Tensor, activated: &Tensor) {
    for (g, &a) in grad.data.iter_mut().zip(&activated.data) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 1x1 convolution; weight laid out `[c_out][c_in]`.
pub fn pointwise_forward(input: &Tensor, weight: &[f64], bias: &[f64], c_out: usize) -> Tensor {
    let c_in = input.channels;
    let mut out = Tensor::zeros(input.height, input.width, c_out);
    out.data
        .par_chunks_mut(c_out * input.width)
        .zip(input.data.par_chunks(c_in * input.width))
        .for_each(|(o_row, i_row)| {
            for (o, x) in o_row.chunks_exact_mut(c_out).zip(i_row.chunks_exact(c_in)) {
                for (co, ov) in o.iter_mut().enumerate() {
                    let w = &weight[co * c_in..(co + 1) * c_in];
                    *ov = bias[co] + w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
                }
            }
        });
    out
}

pub fn pointwise_backward(input: &Tensor, weight: &[f64], grad_out: &Tensor) -> DeconvGrads {
    let c_in = input.channels;
    let c_out = grad_out.channels;
    let mut weight_grad = vec![0.0; c_out * c_in];
    let mut bias = vec![0.0; c_out];
    let mut input_grad = Tensor::zeros(input.height, input.width, c_in);
    for ((x, g), dx) in input
        .data
        .chunks_exact(c_in)
        .zip(grad_out.data.chunks_exact(c_out))
        .zip(input_grad.data.chunks_exact_mut(c_in))
    {
        for (co, &gv) in g.iter().enumerate() {
            bias[co] += gv;
            let w = &weight[co * c_in..(co + 1) * c_in];
            let dw = &mut weight_grad[co * c_in..(co + 1) * c_in];
            for ci in 0..c_in {
                dw[ci] += x[ci] * gv;
                dx[ci] += w[ci] * gv;
            }
        }
    }
    DeconvGrads {
        input: input_grad,
        weight: weight_grad,
        bias,
    }
}

/// Per-axis bilinear sampling weights with half-pixel centres:
/// output `o` reads `(1 - f) * in[i0] + f * in[i1]`.
#[derive(Clone, Debug)]
pub struct AxisResample {
    pub taps: Vec<(usize, usize, f64)>,
    pub n_in: usize,
}

impl AxisResample {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let max = (n_in - 1) as f64;
        let taps = (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect();
        Self { taps, n_in }
    }

    pub fn is_identity(&self) -> bool {
        self.taps.len() == self.n_in && self.taps.iter().enumerate().all(|(o, &(i0, _, f))| i0 == o && f == 0.0)
    }
}

pub fn resize_forward(input: &Tensor, rows: &AxisResample, cols: &AxisResample) -> Tensor {
    if rows.is_identity() && cols.is_identity() {
        return input.clone();
    }
    let c = input.channels;
    let (h_out, w_out) = (rows.taps.len(), cols.taps.len());
    let mut out = Tensor::zeros(h_out, w_out, c);
    out.data
        .par_chunks_mut(w_out * c)
        .enumerate()
        .for_each(|(oy, row)| {
            let (y0, y1, fy) = rows.taps[oy];
            for (ox, &(x0, x1, fx)) in cols.taps.iter().enumerate() {
                let (p00, p01) = (input.pixel(y0, x0), input.pixel(y0, x1));
                let (p10, p11) = (input.pixel(y1, x0), input.pixel(y1, x1));
                for ch in 0..c {
                    let top = p00[ch] * (1.0 - fx) + p01[ch] * fx;
                    let bottom = p10[ch] * (1.0 - fx) + p11[ch] * fx;
                    row[ox * c + ch] = top * (1.0 - fy) + bottom * fy;
                }
            }
        });
    out
}

pub fn resize_backward(grad_out: &Tensor, rows: &AxisResample, cols: &AxisResample) -> Tensor {
    if rows.is_identity() && cols.is_identity() {
        return grad_out.clone();
    }
    let c = grad_out.channels;
    let mut grad_in = Tensor::zeros(rows.n_in, cols.n_in, c);
    let w_in = cols.n_in;
    for (oy, &(y0, y1, fy)) in rows.taps.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in cols.taps.iter().enumerate() {
            let g = grad_out.pixel(oy, ox);
            for (y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (x, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let base = (y * w_in + x) * c;
                    for (dst, &gv) in grad_in.data[base..base + c].iter_mut().zip(g) {
                        *dst += wgt * gv;
                    }
                }
            }
        }
    }
    grad_in
}
