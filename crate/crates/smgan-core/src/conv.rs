//! Strided valid (unpadded) 3D correlation kernels and their two adjoints.
//!
//! Layouts: input `[B,C,D,H,W]`, kernel `[F,C,kd,kh,kw]`, output
//! `[B,F,D',H',W']` with `D' = (D-kd)/sd + 1` and likewise for H, W.
//! 2D convolutions are routed through these kernels with a unit depth axis.
//!
//! The inner loops run along the contiguous W axis so the unit-stride case
//! vectorizes; the (b,f) / (b,c) / (f,c) outer products are data-parallel
//! with a fixed per-slice summation order, keeping results bit-deterministic
//! regardless of thread count.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Work below this many output elements stays single-threaded.
const PAR_THRESHOLD: usize = 1 << 14;

pub fn out_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || kernel > input || stride == 0 {
        None
    } else {
        Some((input - kernel) / stride + 1)
    }
}

fn check_rank5(t: &Tensor, what: &str) -> Result<()> {
    if t.shape().len() != 5 {
        return Err(Error::shape(format!(
            "{what} must have rank 5, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Output shape of a valid convolution, or a dimension error naming the
/// offending axes.
pub fn conv_out_shape(
    input_shape: &[usize],
    kernel_shape: &[usize],
    stride: [usize; 3],
) -> Result<Vec<usize>> {
    let (b, c_in) = (input_shape[0], input_shape[1]);
    let (f, c_k) = (kernel_shape[0], kernel_shape[1]);
    if c_in != c_k {
        return Err(Error::shape(format!(
            "conv channel mismatch on axis 1: input has {c_in}, kernel has {c_k}"
        )));
    }
    let mut out = vec![b, f];
    for (axis, name) in [(0usize, "depth"), (1, "height"), (2, "width")] {
        let (i, k) = (input_shape[axis + 2], kernel_shape[axis + 2]);
        match out_extent(i, k, stride[axis]) {
            Some(e) => out.push(e),
            None => {
                return Err(Error::shape(format!(
                    "conv {name} axis: kernel {k} does not fit input {i} at stride {}",
                    stride[axis]
                )))
            }
        }
    }
    Ok(out)
}

/// Forward correlation: `out[b,f,p] = sum_{c,q} input[b,c,p*s+q] * kernel[f,c,q]`.
pub fn conv3d_forward(input: &Tensor, kernel: &Tensor, stride: [usize; 3]) -> Result<Tensor> {
    check_rank5(input, "conv input")?;
    check_rank5(kernel, "conv kernel")?;
    let out_shape = conv_out_shape(input.shape(), kernel.shape(), stride)?;
    let [b, f, od, oh, ow] = [
        out_shape[0],
        out_shape[1],
        out_shape[2],
        out_shape[3],
        out_shape[4],
    ];
    let c = input.shape()[1];
    let (id, ih, iw) = (input.shape()[2], input.shape()[3], input.shape()[4]);
    let (kd, kh, kw) = (kernel.shape()[2], kernel.shape()[3], kernel.shape()[4]);
    let [sd, sh, sw] = stride;

    let mut out = Tensor::zeros(&out_shape);
    let out_slice_len = od * oh * ow;
    let in_plane = id * ih * iw;
    let k_plane = kd * kh * kw;
    let in_data = input.data();
    let k_data = kernel.data();

    let body = |bf: usize, out_bf: &mut [f64]| {
        let (bi, fi) = (bf / f, bf % f);
        for ci in 0..c {
            let in_base = (bi * c + ci) * in_plane;
            let k_base = (fi * c + ci) * k_plane;
            for qd in 0..kd {
                for qh in 0..kh {
                    let taps = &k_data[k_base + (qd * kh + qh) * kw..][..kw];
                    for pd in 0..od {
                        let idx_d = pd * sd + qd;
                        for ph in 0..oh {
                            let idx_h = ph * sh + qh;
                            let in_row = &in_data[in_base + (idx_d * ih + idx_h) * iw..];
                            let out_row = &mut out_bf[(pd * oh + ph) * ow..][..ow];
                            if sw == 1 && kw == 3 {
                                let (k0, k1, k2) = (taps[0], taps[1], taps[2]);
                                let r0 = &in_row[..ow];
                                let r1 = &in_row[1..ow + 1];
                                let r2 = &in_row[2..ow + 2];
                                for i in 0..ow {
                                    out_row[i] += k0 * r0[i] + k1 * r1[i] + k2 * r2[i];
                                }
                            } else if sw == 1 {
                                for (qw, &k) in taps.iter().enumerate() {
                                    for (o, x) in
                                        out_row.iter_mut().zip(&in_row[qw..qw + ow])
                                    {
                                        *o += k * *x;
                                    }
                                }
                            } else {
                                for (qw, &k) in taps.iter().enumerate() {
                                    for (pw, o) in out_row.iter_mut().enumerate() {
                                        *o += k * in_row[pw * sw + qw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    };

    if out.numel() >= PAR_THRESHOLD && b * f > 1 {
        out.data_mut()
            .par_chunks_mut(out_slice_len)
            .enumerate()
            .for_each(|(bf, chunk)| body(bf, chunk));
    } else {
        for (bf, chunk) in out.data_mut().chunks_mut(out_slice_len).enumerate() {
            body(bf, chunk);
        }
    }
    Ok(out)
}

/// Adjoint of the forward map with respect to the input:
/// `d_input[b,c,t] = sum_{f,p,q : p*s+q = t} grad[b,f,p] * kernel[f,c,q]`.
pub fn conv3d_input_vjp(
    grad: &Tensor,
    kernel: &Tensor,
    stride: [usize; 3],
    input_spatial: [usize; 3],
) -> Result<Tensor> {
    check_rank5(grad, "conv grad")?;
    check_rank5(kernel, "conv kernel")?;
    let b = grad.shape()[0];
    let f = grad.shape()[1];
    let c = kernel.shape()[1];
    if kernel.shape()[0] != f {
        return Err(Error::shape(format!(
            "conv input-vjp filter mismatch on axis 0/1: grad has {f}, kernel has {}",
            kernel.shape()[0]
        )));
    }
    let in_shape = vec![b, c, input_spatial[0], input_spatial[1], input_spatial[2]];
    let expect_out = conv_out_shape(&in_shape, kernel.shape(), stride)?;
    if expect_out != grad.shape() {
        return Err(Error::shape(format!(
            "conv input-vjp: grad shape {:?} does not match expected {:?}",
            grad.shape(),
            expect_out
        )));
    }
    let (od, oh, ow) = (grad.shape()[2], grad.shape()[3], grad.shape()[4]);
    let (kd, kh, kw) = (kernel.shape()[2], kernel.shape()[3], kernel.shape()[4]);
    let [id, ih, iw] = input_spatial;
    let [sd, sh, sw] = stride;

    let mut out = Tensor::zeros(&in_shape);
    let in_plane = id * ih * iw;
    let g_plane = od * oh * ow;
    let k_plane = kd * kh * kw;
    let g_data = grad.data();
    let k_data = kernel.data();

    let body = |bc: usize, dx: &mut [f64]| {
        let (bi, ci) = (bc / c, bc % c);
        for fi in 0..f {
            let g_base = (bi * f + fi) * g_plane;
            let k_base = (fi * c + ci) * k_plane;
            for qd in 0..kd {
                for qh in 0..kh {
                    let taps = &k_data[k_base + (qd * kh + qh) * kw..][..kw];
                    for pd in 0..od {
                        let idx_d = pd * sd + qd;
                        for ph in 0..oh {
                            let idx_h = ph * sh + qh;
                            let g_row = &g_data[g_base + (pd * oh + ph) * ow..][..ow];
                            let dx_row = &mut dx[(idx_d * ih + idx_h) * iw..];
                            if sw == 1 && kw == 3 {
                                // dx[u] += k0*g[u] + k1*g[u-1] + k2*g[u-2],
                                // edges unrolled.
                                let (k0, k1, k2) = (taps[0], taps[1], taps[2]);
                                dx_row[0] += k0 * g_row[0];
                                if ow >= 2 {
                                    dx_row[1] += k0 * g_row[1] + k1 * g_row[0];
                                } else {
                                    dx_row[1] += k1 * g_row[0];
                                }
                                for u in 2..ow {
                                    dx_row[u] +=
                                        k0 * g_row[u] + k1 * g_row[u - 1] + k2 * g_row[u - 2];
                                }
                                if ow >= 2 {
                                    dx_row[ow] += k1 * g_row[ow - 1] + k2 * g_row[ow - 2];
                                }
                                dx_row[ow + 1] += k2 * g_row[ow - 1];
                            } else if sw == 1 {
                                for (qw, &k) in taps.iter().enumerate() {
                                    for (x, g) in
                                        dx_row[qw..qw + ow].iter_mut().zip(g_row)
                                    {
                                        *x += k * *g;
                                    }
                                }
                            } else {
                                for (qw, &k) in taps.iter().enumerate() {
                                    for (pw, g) in g_row.iter().enumerate() {
                                        dx_row[pw * sw + qw] += k * *g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    };

    if out.numel() >= PAR_THRESHOLD && b * c > 1 {
        out.data_mut()
            .par_chunks_mut(in_plane)
            .enumerate()
            .for_each(|(bc, chunk)| body(bc, chunk));
    } else {
        for (bc, chunk) in out.data_mut().chunks_mut(in_plane).enumerate() {
            body(bc, chunk);
        }
    }
    Ok(out)
}

/// Adjoint of the forward map with respect to the kernel:
/// `d_kernel[f,c,q] = sum_{b,p} grad[b,f,p] * input[b,c,p*s+q]`.
pub fn conv3d_kernel_vjp(
    input: &Tensor,
    grad: &Tensor,
    stride: [usize; 3],
    kernel_spatial: [usize; 3],
) -> Result<Tensor> {
    check_rank5(input, "conv input")?;
    check_rank5(grad, "conv grad")?;
    let b = input.shape()[0];
    let c = input.shape()[1];
    let f = grad.shape()[1];
    if grad.shape()[0] != b {
        return Err(Error::shape(format!(
            "conv kernel-vjp batch mismatch on axis 0: input has {b}, grad has {}",
            grad.shape()[0]
        )));
    }
    let k_shape = vec![f, c, kernel_spatial[0], kernel_spatial[1], kernel_spatial[2]];
    let expect_out = conv_out_shape(input.shape(), &k_shape, stride)?;
    if expect_out != grad.shape() {
        return Err(Error::shape(format!(
            "conv kernel-vjp: grad shape {:?} does not match expected {:?}",
            grad.shape(),
            expect_out
        )));
    }
    let (id, ih, iw) = (input.shape()[2], input.shape()[3], input.shape()[4]);
    let (od, oh, ow) = (grad.shape()[2], grad.shape()[3], grad.shape()[4]);
    let [kd, kh, kw] = kernel_spatial;
    let [sd, sh, sw] = stride;

    let mut out = Tensor::zeros(&k_shape);
    let in_plane = id * ih * iw;
    let g_plane = od * oh * ow;
    let k_plane = kd * kh * kw;
    let in_data = input.data();
    let g_data = grad.data();

    let body = |fc: usize, dk: &mut [f64]| {
        let (fi, ci) = (fc / c, fc % c);
        for qd in 0..kd {
            for qh in 0..kh {
                if sw == 1 && kw == 3 {
                    let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
                    for bi in 0..b {
                        let g_base = (bi * f + fi) * g_plane;
                        let in_base = (bi * c + ci) * in_plane;
                        for pd in 0..od {
                            let idx_d = pd * sd + qd;
                            for ph in 0..oh {
                                let idx_h = ph * sh + qh;
                                let g_row = &g_data[g_base + (pd * oh + ph) * ow..][..ow];
                                let in_row =
                                    &in_data[in_base + (idx_d * ih + idx_h) * iw..];
                                let r0 = &in_row[..ow];
                                let r1 = &in_row[1..ow + 1];
                                let r2 = &in_row[2..ow + 2];
                                for i in 0..ow {
                                    let g = g_row[i];
                                    a0 += g * r0[i];
                                    a1 += g * r1[i];
                                    a2 += g * r2[i];
                                }
                            }
                        }
                    }
                    let base = (qd * kh + qh) * 3;
                    dk[base] = a0;
                    dk[base + 1] = a1;
                    dk[base + 2] = a2;
                    continue;
                }
                for qw in 0..kw {
                    let mut acc = 0.0;
                    for bi in 0..b {
                        let g_base = (bi * f + fi) * g_plane;
                        let in_base = (bi * c + ci) * in_plane;
                        for pd in 0..od {
                            let idx_d = pd * sd + qd;
                            for ph in 0..oh {
                                let idx_h = ph * sh + qh;
                                let g_row = &g_data[g_base + (pd * oh + ph) * ow..][..ow];
                                let in_row =
                                    &in_data[in_base + (idx_d * ih + idx_h) * iw + qw..];
                                if sw == 1 {
                                    for (g, x) in g_row.iter().zip(&in_row[..ow]) {
                                        acc += *g * *x;
                                    }
                                } else {
                                    for (pw, g) in g_row.iter().enumerate() {
                                        acc += *g * in_row[pw * sw];
                                    }
                                }
                            }
                        }
                    }
                    dk[(qd * kh + qh) * kw + qw] = acc;
                }
            }
        }
    };

    if grad.numel() >= PAR_THRESHOLD && f * c > 1 {
        out.data_mut()
            .par_chunks_mut(k_plane)
            .enumerate()
            .for_each(|(fc, chunk)| body(fc, chunk));
    } else {
        for (fc, chunk) in out.data_mut().chunks_mut(k_plane).enumerate() {
            body(fc, chunk);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Six-loop reference correlation used as the oracle.
    fn naive_forward(input: &Tensor, kernel: &Tensor, stride: [usize; 3]) -> Tensor {
        let os = conv_out_shape(input.shape(), kernel.shape(), stride).unwrap();
        let mut out = Tensor::zeros(&os);
        let (b, f, c) = (os[0], os[1], input.shape()[1]);
        let (kd, kh, kw) = (kernel.shape()[2], kernel.shape()[3], kernel.shape()[4]);
        for bi in 0..b {
            for fi in 0..f {
                for pd in 0..os[2] {
                    for ph in 0..os[3] {
                        for pw in 0..os[4] {
                            let mut acc = 0.0;
                            for ci in 0..c {
                                for qd in 0..kd {
                                    for qh in 0..kh {
                                        for qw in 0..kw {
                                            acc += input.get(&[
                                                bi,
                                                ci,
                                                pd * stride[0] + qd,
                                                ph * stride[1] + qh,
                                                pw * stride[2] + qw,
                                            ]) * kernel.get(&[fi, ci, qd, qh, qw]);
                                        }
                                    }
                                }
                            }
                            out.set(&[bi, fi, pd, ph, pw], acc);
                        }
                    }
                }
            }
        }
        out
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    #[test]
    fn forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ishape, kshape, stride) in [
            (vec![2, 3, 4, 7, 7], vec![2, 3, 3, 3, 3], [1, 1, 1]),
            (vec![1, 2, 1, 9, 9], vec![4, 2, 1, 3, 3], [1, 2, 2]),
            (vec![2, 1, 5, 6, 8], vec![3, 1, 3, 2, 4], [2, 1, 3]),
        ] {
            let input = rand_tensor(&mut rng, &ishape);
            let kernel = rand_tensor(&mut rng, &kshape);
            let got = conv3d_forward(&input, &kernel, stride).unwrap();
            let want = naive_forward(&input, &kernel, stride);
            assert_close(&got, &want, 1e-12);
        }
    }

    #[test]
    fn input_vjp_is_adjoint_of_forward() {
        // <conv(x,k), g> == <x, input_vjp(g,k)> for random x, k, g.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for stride in [[1, 1, 1], [1, 2, 2], [2, 2, 1]] {
            let x = rand_tensor(&mut rng, &[2, 2, 5, 8, 9]);
            let k = rand_tensor(&mut rng, &[3, 2, 3, 3, 3]);
            let y = conv3d_forward(&x, &k, stride).unwrap();
            let g = rand_tensor(&mut rng, y.shape());
            let dx = conv3d_input_vjp(&g, &k, stride, [5, 8, 9]).unwrap();
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn kernel_vjp_is_adjoint_of_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for stride in [[1, 1, 1], [2, 1, 2]] {
            let x = rand_tensor(&mut rng, &[2, 3, 4, 7, 6]);
            let k = rand_tensor(&mut rng, &[2, 3, 2, 3, 3]);
            let y = conv3d_forward(&x, &k, stride).unwrap();
            let g = rand_tensor(&mut rng, y.shape());
            let dk = conv3d_kernel_vjp(&x, &g, stride, [2, 3, 3]).unwrap();
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = k.data().iter().zip(dk.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn all_ones_3x3_sums_to_nine() {
        let x = Tensor::filled(&[1, 1, 1, 3, 3], 1.0);
        let k = Tensor::filled(&[1, 1, 1, 3, 3], 1.0);
        let y = conv3d_forward(&x, &k, [1, 1, 1]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.item().unwrap(), 9.0);
    }

    #[test]
    fn oversized_kernel_reports_axis() {
        let x = Tensor::zeros(&[1, 1, 2, 5, 5]);
        let k = Tensor::zeros(&[1, 1, 3, 3, 3]);
        let err = conv3d_forward(&x, &k, [1, 1, 1]).unwrap_err();
        assert!(err.to_string().contains("depth"), "{err}");
    }
}
