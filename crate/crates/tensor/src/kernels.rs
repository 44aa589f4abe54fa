//! Raw numeric kernels shared by the forward and backward passes.

use crate::tensor::Tensor;

/// Strided `c = alpha * a @ b + beta * c` with `a: [m, k]`, `b: [k, n]`.
///
/// `ta`/`tb` read the operand as transposed storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths checked above; strides describe in-bounds row-major layouts.
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

/// Matrix product of the trailing two axes. `a: [.., m, k]`, `b: [.., k, n]` or `[k, n]`.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (batch, m, k) = split_matrix(a.shape());
    let (bb, k2, n) = split_matrix(b.shape());
    assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
    assert!(bb == batch || bb == 1 && b.rank() == 2, "matmul batch {:?} x {:?}", a.shape(), b.shape());
    let mut out_shape = a.shape()[..a.rank() - 1].to_vec();
    out_shape.push(n);
    let mut out = vec![0.0; batch * m * n];
    for i in 0..batch {
        let bo = if bb == 1 { 0 } else { i * k * n };
        gemm(m, k, n, &a.data()[i * m * k..], false, &b.data()[bo..], false, &mut out[i * m * n..], 0.0);
    }
    Tensor::new(out_shape, out)
}

/// Gradients of `matmul` given the upstream gradient `g: [.., m, n]`.
pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (batch, m, k) = split_matrix(a.shape());
    let (bb, _, n) = split_matrix(b.shape());
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for i in 0..batch {
        let bo = if bb == 1 { 0 } else { i * k * n };
        // ga = g @ b^T
        gemm(m, n, k, &g.data()[i * m * n..], false, &b.data()[bo..], true, &mut ga[i * m * k..], 0.0);
        // gb += a^T @ g
        let beta = if bb == 1 && i > 0 { 1.0 } else { 0.0 };
        gemm(k, m, n, &a.data()[i * m * k..], true, &g.data()[i * m * n..], false, &mut gb[bo..], beta);
    }
    (Tensor::new(a.shape().to_vec(), ga), Tensor::new(b.shape().to_vec(), gb))
}

fn split_matrix(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "matmul operand must have rank >= 2, got {shape:?}");
    let r = shape.len();
    (shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn output_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.padding - kernel) / self.stride + 1
    }
}

/// Unfold one `[c, h, w]` image into columns `[c*kh*kw, ho*wo]`.
fn im2col(
    img: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    geo: Conv2dGeometry,
    cols: &mut [f64],
) {
    let ho = geo.output_size(h, kh);
    let wo = geo.output_size(w, kw);
    let pad = geo.padding as isize;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let y = (oy * geo.stride + ki) as isize - pad;
                    for ox in 0..wo {
                        let x = (ox * geo.stride + kj) as isize - pad;
                        dst[oy * wo + ox] = if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
                            img[(ci * h + y as usize) * w + x as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    geo: Conv2dGeometry,
    img: &mut [f64],
) {
    let ho = geo.output_size(h, kh);
    let wo = geo.output_size(w, kw);
    let pad = geo.padding as isize;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let y = (oy * geo.stride + ki) as isize - pad;
                    if y < 0 || y as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let x = (ox * geo.stride + kj) as isize - pad;
                        if x >= 0 && (x as usize) < w {
                            img[(ci * h + y as usize) * w + x as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x: [b, cin, h, w]`, `weight: [cout, cin, kh, kw]`, `bias: [cout]`.
pub(crate) fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geo: Conv2dGeometry) -> Tensor {
    let (b, cin, h, w) = dims4(x.shape());
    let (cout, cin2, kh, kw) = dims4(weight.shape());
    assert_eq!(cin, cin2, "conv2d channels: input {:?}, weight {:?}", x.shape(), weight.shape());
    assert!(h + 2 * geo.padding >= kh && w + 2 * geo.padding >= kw, "conv2d kernel larger than input");
    let ho = geo.output_size(h, kh);
    let wo = geo.output_size(w, kw);
    let kdim = cin * kh * kw;
    let mut cols = vec![0.0; kdim * ho * wo];
    let mut out = vec![0.0; b * cout * ho * wo];
    for i in 0..b {
        im2col(&x.data()[i * cin * h * w..(i + 1) * cin * h * w], (cin, h, w), (kh, kw), geo, &mut cols);
        let dst = &mut out[i * cout * ho * wo..(i + 1) * cout * ho * wo];
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(ho * wo).enumerate() {
                chunk.fill(bias.data()[co]);
            }
            gemm(cout, kdim, ho * wo, weight.data(), false, &cols, false, dst, 1.0);
        } else {
            gemm(cout, kdim, ho * wo, weight.data(), false, &cols, false, dst, 0.0);
        }
    }
    Tensor::new([b, cout, ho, wo], out)
}

/// Returns `(grad_x, grad_weight, grad_bias)`.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    g: &Tensor,
    geo: Conv2dGeometry,
) -> (Tensor, Tensor, Tensor) {
    let (b, cin, h, w) = dims4(x.shape());
    let (cout, _, kh, kw) = dims4(weight.shape());
    let (_, _, ho, wo) = dims4(g.shape());
    let kdim = cin * kh * kw;
    let mut cols = vec![0.0; kdim * ho * wo];
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; cout];
    for i in 0..b {
        let gi = &g.data()[i * cout * ho * wo..(i + 1) * cout * ho * wo];
        for (co, chunk) in gi.chunks(ho * wo).enumerate() {
            gb[co] += chunk.iter().sum::<f64>();
        }
        im2col(&x.data()[i * cin * h * w..(i + 1) * cin * h * w], (cin, h, w), (kh, kw), geo, &mut cols);
        gemm(cout, ho * wo, kdim, gi, false, &cols, true, &mut gw, 1.0);
        gemm(kdim, cout, ho * wo, weight.data(), true, gi, false, &mut cols, 0.0);
        col2im(&cols, (cin, h, w), (kh, kw), geo, &mut gx[i * cin * h * w..(i + 1) * cin * h * w]);
    }
    (Tensor::new(x.shape().to_vec(), gx), Tensor::new(weight.shape().to_vec(), gw), Tensor::new([cout], gb))
}

pub(crate) fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(s.len(), 4, "expected a rank-4 tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// Nearest-neighbour upsampling of the last two axes by an integer factor.
pub(crate) fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let (b, c, h, w) = dims4(x.shape());
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; b * c * oh * ow];
    for p in 0..b * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / factor) * w + xx / factor];
            }
        }
    }
    Tensor::new([b, c, oh, ow], out)
}

pub(crate) fn upsample_nearest_backward(g: &Tensor, factor: usize) -> Tensor {
    let (b, c, oh, ow) = dims4(g.shape());
    let (h, w) = (oh / factor, ow / factor);
    let mut out = vec![0.0; b * c * h * w];
    for p in 0..b * c {
        let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / factor) * w + xx / factor] += src[y * ow + xx];
            }
        }
    }
    Tensor::new([b, c, h, w], out)
}

/// Softmax along the last axis, max-shifted for stability.
pub(crate) fn softmax_last(x: &Tensor) -> Tensor {
    let c = *x.shape().last().expect("softmax on scalar");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn log_softmax_last(x: &Tensor) -> Tensor {
    let c = *x.shape().last().expect("log_softmax on scalar");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Split a shape around `axis` into `(outer, dim, inner)`.
pub(crate) fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, geo: Conv2dGeometry) -> Tensor {
        let (b, cin, h, ww) = dims4(x.shape());
        let (cout, _, kh, kw) = dims4(w.shape());
        let ho = geo.output_size(h, kh);
        let wo = geo.output_size(ww, kw);
        let mut out = Tensor::zeros([b, cout, ho, wo]);
        for n in 0..b {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let y = (oy * geo.stride + ki) as isize - geo.padding as isize;
                                    let xx = (ox * geo.stride + kj) as isize - geo.padding as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < ww {
                                        s += x.at(&[n, ci, y as usize, xx as usize]) * w.at(&[co, ci, ki, kj]);
                                    }
                                }
                            }
                        }
                        out.set(&[n, co, oy, ox], s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = Tensor::from_fn([2, 3, 7, 6], |i| ((i * 37 % 11) as f64) - 5.0);
        let w = Tensor::from_fn([4, 3, 3, 3], |i| ((i * 13 % 7) as f64) * 0.1 - 0.3);
        for geo in [Conv2dGeometry { stride: 1, padding: 1 }, Conv2dGeometry { stride: 2, padding: 1 }] {
            let fast = conv2d(&x, &w, None, geo);
            let slow = naive_conv(&x, &w, geo);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_ones_stride_two_conv_on_constant_grid() {
        let x = Tensor::ones([1, 1, 4, 4]);
        let w = Tensor::ones([1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, Conv2dGeometry { stride: 2, padding: 1 });
        // corner windows see 2x2, edges 2x3, interior 3x3 of the padded grid
        assert_eq!(y.data(), &[4.0, 6.0, 6.0, 9.0]);
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new([2, 2], vec![1., 2., 3., 4.]);
        let b = Tensor::new([2, 1], vec![5., 6.]);
        assert_eq!(matmul(&a, &b).data(), &[17., 39.]);
    }
}
