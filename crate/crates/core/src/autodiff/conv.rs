//! Convolution kernels: im2col + GEMM forward, and the two adjoints.
//!
//! Layouts: activations `[n, c, spatial...]`, convolution weights
//! `[c_out, c_in, k, k(, k)]`, transposed-convolution weights
//! `[c_in, c_out, k, k(, k)]`.  A transposed convolution is evaluated through
//! the same three primitives with the data/gradient roles swapped, so there is
//! exactly one indexing implementation to get right.

use super::{ConvSpec, TensorD};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

/// Output size along one axis: `(i + 2p - k) / s + 1`.
pub fn out_size(input: usize, spec: ConvSpec) -> usize {
    let padded = input + 2 * spec.pad;
    assert!(padded >= spec.ksize, "conv: input {input} too small for kernel");
    (padded - spec.ksize) / spec.stride + 1
}

pub fn out_spatial(in_sp: &[usize], spec: ConvSpec) -> Vec<usize> {
    in_sp.iter().map(|&i| out_size(i, spec)).collect()
}

/// `x [n, c_in, sp...] * w [c_out, c_in, k...] (+ bias [c_out]) -> [n, c_out, osp...]`
pub fn conv_forward(x: &TensorD, w: &TensorD, bias: Option<&TensorD>, spec: ConvSpec) -> TensorD {
    let (n, cin, in_sp) = split_shape(x);
    let ws = w.shape();
    let cout = ws[0];
    assert_eq!(ws[1], cin, "conv: channel mismatch");
    assert_eq!(ws.len(), 2 + in_sp.len(), "conv: weight rank mismatch");
    let kd: usize = ws[2..].iter().product();
    let out_sp = out_spatial(in_sp, spec);
    let s_in: usize = in_sp.iter().product();
    let s_out: usize = out_sp.iter().product();

    let xv = x.as_slice().unwrap();
    let w2 = ArrayView2::from_shape((cout, cin * kd), w.as_slice().unwrap()).unwrap();
    let mut out = vec![0.0; n * cout * s_out];

    for ni in 0..n {
        let x_n = &xv[ni * cin * s_in..(ni + 1) * cin * s_in];
        let out_n = &mut out[ni * cout * s_out..(ni + 1) * cout * s_out];
        let mut c = ArrayViewMut2::from_shape((cout, s_out), out_n).unwrap();
        if is_pointwise(spec) {
            let a = ArrayView2::from_shape((cin, s_in), x_n).unwrap();
            general_mat_mul(1.0, &w2, &a, 0.0, &mut c);
        } else {
            let cols = im2col(x_n, cin, in_sp, &out_sp, spec);
            general_mat_mul(1.0, &w2, &cols, 0.0, &mut c);
        }
    }

    let mut shape = vec![n, cout];
    shape.extend_from_slice(&out_sp);
    let mut t = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
    if let Some(b) = bias {
        add_bias(&mut t, b);
    }
    t
}

/// Gradient w.r.t. the convolution input: `gout [n, c_out, osp...] -> [n, c_in, in_sp...]`.
/// Also serves as the forward pass of a transposed convolution.
pub fn conv_grad_input(gout: &TensorD, w: &TensorD, spec: ConvSpec, in_sp: &[usize]) -> TensorD {
    let (n, cout, out_sp) = split_shape(gout);
    let ws = w.shape();
    assert_eq!(ws[0], cout, "conv_grad_input: channel mismatch");
    let cin = ws[1];
    let kd: usize = ws[2..].iter().product();
    assert_eq!(
        out_spatial(in_sp, spec),
        out_sp,
        "conv_grad_input: geometry inconsistent"
    );
    let s_in: usize = in_sp.iter().product();
    let s_out: usize = out_sp.iter().product();

    let gv = gout.as_slice().unwrap();
    let w2 = ArrayView2::from_shape((cout, cin * kd), w.as_slice().unwrap()).unwrap();
    let mut gx = vec![0.0; n * cin * s_in];

    for ni in 0..n {
        let g_n = ArrayView2::from_shape((cout, s_out), &gv[ni * cout * s_out..(ni + 1) * cout * s_out])
            .unwrap();
        let gx_n = &mut gx[ni * cin * s_in..(ni + 1) * cin * s_in];
        if is_pointwise(spec) {
            let mut c = ArrayViewMut2::from_shape((cin, s_in), gx_n).unwrap();
            general_mat_mul(1.0, &w2.t(), &g_n, 0.0, &mut c);
        } else {
            let mut gcols = Array2::<f64>::zeros((cin * kd, s_out));
            general_mat_mul(1.0, &w2.t(), &g_n, 0.0, &mut gcols);
            col2im_add(gcols.as_slice().unwrap(), gx_n, cin, in_sp, out_sp, spec);
        }
    }

    let mut shape = vec![n, cin];
    shape.extend_from_slice(in_sp);
    ArrayD::from_shape_vec(IxDyn(&shape), gx).unwrap()
}

/// Gradient w.r.t. the weight: returns `[gout_channels, x_channels, k...]`.
pub fn conv_grad_weight(x: &TensorD, gout: &TensorD, spec: ConvSpec) -> TensorD {
    let (n, cin, in_sp) = split_shape(x);
    let (n2, cout, out_sp) = split_shape(gout);
    assert_eq!(n, n2, "conv_grad_weight: batch mismatch");
    assert_eq!(
        out_spatial(in_sp, spec),
        out_sp,
        "conv_grad_weight: geometry inconsistent"
    );
    let k = spec.ksize;
    let kd = k.pow(in_sp.len() as u32);
    let s_in: usize = in_sp.iter().product();
    let s_out: usize = out_sp.iter().product();

    let xv = x.as_slice().unwrap();
    let gv = gout.as_slice().unwrap();
    let mut gw = Array2::<f64>::zeros((cout, cin * kd));

    for ni in 0..n {
        let x_n = &xv[ni * cin * s_in..(ni + 1) * cin * s_in];
        let g_n = ArrayView2::from_shape((cout, s_out), &gv[ni * cout * s_out..(ni + 1) * cout * s_out])
            .unwrap();
        if is_pointwise(spec) {
            let a = ArrayView2::from_shape((cin, s_in), x_n).unwrap();
            general_mat_mul(1.0, &g_n, &a.t(), 1.0, &mut gw);
        } else {
            let cols = im2col(x_n, cin, in_sp, out_sp, spec);
            general_mat_mul(1.0, &g_n, &cols.t(), 1.0, &mut gw);
        }
    }

    let mut shape = vec![cout, cin];
    shape.extend(std::iter::repeat(k).take(in_sp.len()));
    ArrayD::from_shape_vec(IxDyn(&shape), gw.into_raw_vec_and_offset().0).unwrap()
}

/// Sum over batch and spatial axes: the bias gradient, shape `[c]`.
pub fn sum_batch_spatial(g: &TensorD) -> TensorD {
    let (n, c, sp) = split_shape(g);
    let s: usize = sp.iter().product();
    let gv = g.as_slice().unwrap();
    let mut out = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * s;
            out[ci] += gv[off..off + s].iter().sum::<f64>();
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[c]), out).unwrap()
}

/// In-place per-channel bias add.
pub fn add_bias(t: &mut TensorD, bias: &TensorD) {
    let (n, c, sp) = split_shape(t);
    let s: usize = sp.iter().product();
    assert_eq!(bias.shape(), &[c], "bias shape");
    let bv = bias.as_slice().unwrap().to_vec();
    let tv = t.as_slice_mut().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * s;
            for v in &mut tv[off..off + s] {
                *v += bv[ci];
            }
        }
    }
}

fn split_shape(t: &TensorD) -> (usize, usize, &[usize]) {
    let sh = t.shape();
    assert!(sh.len() >= 3, "expected [n, c, spatial...], got {sh:?}");
    (sh[0], sh[1], &sh[2..])
}

fn is_pointwise(spec: ConvSpec) -> bool {
    spec.ksize == 1 && spec.stride == 1 && spec.pad == 0
}

/// Lowered patch matrix `[c_in * k^d, prod(out_sp)]`; out-of-bounds taps stay zero.
fn im2col(
    x_n: &[f64],
    cin: usize,
    in_sp: &[usize],
    out_sp: &[usize],
    spec: ConvSpec,
) -> Array2<f64> {
    let k = spec.ksize;
    let d = in_sp.len();
    let kd = k.pow(d as u32);
    let s_out: usize = out_sp.iter().product();
    let mut cols = Array2::<f64>::zeros((cin * kd, s_out));
    let cv = cols.as_slice_mut().unwrap();

    match d {
        2 => {
            let (ih, iw) = (in_sp[0], in_sp[1]);
            let (oh, ow) = (out_sp[0], out_sp[1]);
            for ci in 0..cin {
                let xb = ci * ih * iw;
                for ky in 0..k {
                    for kx in 0..k {
                        let rb = ((ci * k + ky) * k + kx) * s_out;
                        for oy in 0..oh {
                            let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let xrow = xb + iy as usize * iw;
                            gather_row(
                                &mut cv[rb + oy * ow..rb + (oy + 1) * ow],
                                &x_n[xrow..xrow + iw],
                                kx,
                                spec,
                            );
                        }
                    }
                }
            }
        }
        3 => {
            let (id, ih, iw) = (in_sp[0], in_sp[1], in_sp[2]);
            let (od, oh, ow) = (out_sp[0], out_sp[1], out_sp[2]);
            for ci in 0..cin {
                let xb = ci * id * ih * iw;
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let rb = (((ci * k + kz) * k + ky) * k + kx) * s_out;
                            for oz in 0..od {
                                let iz = (oz * spec.stride + kz) as isize - spec.pad as isize;
                                if iz < 0 || iz >= id as isize {
                                    continue;
                                }
                                for oy in 0..oh {
                                    let iy =
                                        (oy * spec.stride + ky) as isize - spec.pad as isize;
                                    if iy < 0 || iy >= ih as isize {
                                        continue;
                                    }
                                    let xrow = xb + (iz as usize * ih + iy as usize) * iw;
                                    let crow = rb + (oz * oh + oy) * ow;
                                    gather_row(
                                        &mut cv[crow..crow + ow],
                                        &x_n[xrow..xrow + iw],
                                        kx,
                                        spec,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
        d => panic!("conv supports 2 or 3 spatial axes, got {d}"),
    }
    cols
}

/// Scatter-add of the lowered gradient back onto the input grid.
fn col2im_add(
    gcols: &[f64],
    gx_n: &mut [f64],
    cin: usize,
    in_sp: &[usize],
    out_sp: &[usize],
    spec: ConvSpec,
) {
    let k = spec.ksize;
    let d = in_sp.len();
    let s_out: usize = out_sp.iter().product();

    match d {
        2 => {
            let (ih, iw) = (in_sp[0], in_sp[1]);
            let (oh, ow) = (out_sp[0], out_sp[1]);
            for ci in 0..cin {
                let xb = ci * ih * iw;
                for ky in 0..k {
                    for kx in 0..k {
                        let rb = ((ci * k + ky) * k + kx) * s_out;
                        for oy in 0..oh {
                            let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let xrow = xb + iy as usize * iw;
                            scatter_row(
                                &gcols[rb + oy * ow..rb + (oy + 1) * ow],
                                &mut gx_n[xrow..xrow + iw],
                                kx,
                                spec,
                            );
                        }
                    }
                }
            }
        }
        3 => {
            let (id, ih, iw) = (in_sp[0], in_sp[1], in_sp[2]);
            let (od, oh, ow) = (out_sp[0], out_sp[1], out_sp[2]);
            for ci in 0..cin {
                let xb = ci * id * ih * iw;
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let rb = (((ci * k + kz) * k + ky) * k + kx) * s_out;
                            for oz in 0..od {
                                let iz = (oz * spec.stride + kz) as isize - spec.pad as isize;
                                if iz < 0 || iz >= id as isize {
                                    continue;
                                }
                                for oy in 0..oh {
                                    let iy =
                                        (oy * spec.stride + ky) as isize - spec.pad as isize;
                                    if iy < 0 || iy >= ih as isize {
                                        continue;
                                    }
                                    let xrow = xb + (iz as usize * ih + iy as usize) * iw;
                                    let crow = rb + (oz * oh + oy) * ow;
                                    scatter_row(
                                        &gcols[crow..crow + ow],
                                        &mut gx_n[xrow..xrow + iw],
                                        kx,
                                        spec,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
        d => panic!("conv supports 2 or 3 spatial axes, got {d}"),
    }
}

/// Innermost-axis gather: `row[ox] = x_row[ox*s + kx - p]` where in range.
fn gather_row(row: &mut [f64], x_row: &[f64], kx: usize, spec: ConvSpec) {
    let (s, p) = (spec.stride, spec.pad);
    let ow = row.len();
    let iw = x_row.len();
    if s == 1 {
        let lo = p.saturating_sub(kx);
        let hi = (iw as isize + p as isize - kx as isize).clamp(0, ow as isize) as usize;
        if hi > lo {
            let src = lo + kx - p;
            row[lo..hi].copy_from_slice(&x_row[src..src + (hi - lo)]);
        }
    } else {
        for (ox, slot) in row.iter_mut().enumerate() {
            let ix = (ox * s + kx) as isize - p as isize;
            if ix >= 0 && (ix as usize) < iw {
                *slot = x_row[ix as usize];
            }
        }
    }
}

/// Adjoint of [`gather_row`]: scatter-add back onto the input row.
fn scatter_row(row: &[f64], gx_row: &mut [f64], kx: usize, spec: ConvSpec) {
    let (s, p) = (spec.stride, spec.pad);
    let ow = row.len();
    let iw = gx_row.len();
    if s == 1 {
        let lo = p.saturating_sub(kx);
        let hi = (iw as isize + p as isize - kx as isize).clamp(0, ow as isize) as usize;
        if hi > lo {
            let src = lo + kx - p;
            for (a, b) in gx_row[src..src + (hi - lo)].iter_mut().zip(&row[lo..hi]) {
                *a += b;
            }
        }
    } else {
        for (ox, &v) in row.iter().enumerate() {
            let ix = (ox * s + kx) as isize - p as isize;
            if ix >= 0 && (ix as usize) < iw {
                gx_row[ix as usize] += v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::relative_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> TensorD {
        let len: usize = shape.iter().product();
        let v: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    /// Direct O(everything) convolution used as the reference.
    fn conv_naive_2d(x: &TensorD, w: &TensorD, spec: ConvSpec) -> TensorD {
        let (n, cin) = (x.shape()[0], x.shape()[1]);
        let (ih, iw) = (x.shape()[2], x.shape()[3]);
        let cout = w.shape()[0];
        let k = spec.ksize;
        let (oh, ow) = (out_size(ih, spec), out_size(iw, spec));
        let mut out = ArrayD::zeros(IxDyn(&[n, cout, oh, ow]));
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                    if iy >= 0
                                        && ix >= 0
                                        && (iy as usize) < ih
                                        && (ix as usize) < iw
                                    {
                                        acc += x[[ni, ci, iy as usize, ix as usize]]
                                            * w[[co, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        out[[ni, co, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1), (1, 2, 3)] {
            let spec = ConvSpec::new(k, stride, pad);
            let x = rand_t(&mut rng, &[2, 3, 6, 6]);
            let w = rand_t(&mut rng, &[4, 3, k, k]);
            let got = conv_forward(&x, &w, None, spec);
            let want = conv_naive_2d(&x, &w, spec);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_3d_matches_separable_check() {
        // A kernel that is a delta at its centre must reproduce the input.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = rand_t(&mut rng, &[1, 2, 4, 4, 4]);
        let mut w = ArrayD::zeros(IxDyn(&[2, 2, 3, 3, 3]));
        w[[0, 0, 1, 1, 1]] = 1.0;
        w[[1, 1, 1, 1, 1]] = 1.0;
        let y = conv_forward(&x, &w, None, ConvSpec::K3S1);
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn scalar_loss(t: &TensorD, probe: &TensorD) -> f64 {
        t.iter().zip(probe.iter()).map(|(a, b)| a * b).sum()
    }

    /// Finite differences through the full (x, w, bias) triple for one spec.
    fn check_conv_gradients(shape_x: &[usize], cout: usize, spec: ConvSpec, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = shape_x.len() - 2;
        let mut wshape = vec![cout, shape_x[1]];
        wshape.extend(std::iter::repeat(spec.ksize).take(d));
        let x = rand_t(&mut rng, shape_x);
        let w = rand_t(&mut rng, &wshape);
        let b = rand_t(&mut rng, &[cout]);
        let y = conv_forward(&x, &w, Some(&b), spec);
        let probe = rand_t(&mut rng, y.shape());

        // Analytic: dL/dout = probe, pull back.
        let gx = conv_grad_input(&probe, &w, spec, &shape_x[2..]);
        let gw = conv_grad_weight(&x, &probe, spec);
        let gb = sum_batch_spatial(&probe);

        let eps = 1e-6;
        let loss = |x: &TensorD, w: &TensorD, b: &TensorD| {
            scalar_loss(&conv_forward(x, w, Some(b), spec), &probe)
        };
        let check = |t0: &TensorD, analytic: &TensorD, which: &str| {
            let len = t0.len();
            for i in (0..len).step_by(1 + len / 11) {
                let mut tp = t0.clone();
                tp.as_slice_mut().unwrap()[i] += eps;
                let mut tm = t0.clone();
                tm.as_slice_mut().unwrap()[i] -= eps;
                let (fp, fm) = match which {
                    "x" => (loss(&tp, &w, &b), loss(&tm, &w, &b)),
                    "w" => (loss(&x, &tp, &b), loss(&x, &tm, &b)),
                    _ => (loss(&x, &w, &tp), loss(&x, &w, &tm)),
                };
                let numeric = (fp - fm) / (2.0 * eps);
                let got = analytic.as_slice().unwrap()[i];
                assert!(
                    relative_error(got, numeric) < 1e-6,
                    "{which}[{i}]: {got} vs {numeric}"
                );
            }
        };
        check(&x, &gx, "x");
        check(&w, &gw, "w");
        check(&b, &gb, "b");
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_conv_gradients(&[2, 3, 6, 6], 4, ConvSpec::K3S1, 30);
        check_conv_gradients(&[2, 3, 6, 6], 4, ConvSpec::K3S2, 31);
        check_conv_gradients(&[2, 3, 5, 5], 2, ConvSpec::K1, 32);
        check_conv_gradients(&[1, 2, 4, 4, 4], 3, ConvSpec::K3S1, 33);
        check_conv_gradients(&[1, 2, 4, 4, 4], 3, ConvSpec::K3S2, 34);
        check_conv_gradients(&[1, 3, 3, 3, 3], 2, ConvSpec::K1, 35);
    }

    #[test]
    fn transpose_conv_doubles_spatial_sizes() {
        // Via the tape so the swapped-role wiring is covered too.
        use crate::autodiff::{ParamStore, Tape};
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let x0 = rand_t(&mut rng, &[2, 4, 5, 5]);
        let w0 = rand_t(&mut rng, &[4, 2, 3, 3]); // [c_in, c_out, k, k]
        let b0 = rand_t(&mut rng, &[2]);
        let mut store = ParamStore::new();
        let wid = store.add("w", w0, true).unwrap();
        let bid = store.add("b", b0, true).unwrap();
        let mut t = Tape::new();
        let x = t.constant(x0);
        let w = t.param(&store, wid);
        let b = t.param(&store, bid);
        let y = t.conv_transpose(x, w, Some(b), ConvSpec::K3S2);
        assert_eq!(t.shape(y), &[2, 2, 10, 10]);
    }

    #[test]
    fn transpose_conv_gradients_match_finite_differences() {
        use crate::autodiff::{ParamStore, Tape};
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let x0 = rand_t(&mut rng, &[1, 3, 4, 4]);
        let w0 = rand_t(&mut rng, &[3, 2, 3, 3]);
        let b0 = rand_t(&mut rng, &[2]);
        let probe = rand_t(&mut rng, &[1, 2, 8, 8]);

        let mut store = ParamStore::new();
        let xid = store.add("x", x0, true).unwrap();
        let wid = store.add("w", w0, true).unwrap();
        let bid = store.add("b", b0, true).unwrap();

        let run = |store: &ParamStore| {
            let mut t = Tape::new();
            let x = t.param(store, xid);
            let w = t.param(store, wid);
            let b = t.param(store, bid);
            let y = t.conv_transpose(x, w, Some(b), ConvSpec::K3S2);
            let pr = t.constant(probe.clone());
            let prod = t.mul(y, pr);
            let loss = t.sum_all(prod);
            (t, loss)
        };
        let (tape, loss) = run(&store);
        let grads = tape.backward(loss);
        let pg = tape.param_grads(&grads, &store);

        let eps = 1e-6;
        for pid in [xid, wid, bid] {
            let len = store.value(pid).len();
            for i in (0..len).step_by(1 + len / 7) {
                let orig = store.value(pid).as_slice().unwrap()[i];
                store.value_mut(pid).as_slice_mut().unwrap()[i] = orig + eps;
                let (t, l) = run(&store);
                let fp = t.value(l).as_slice().unwrap()[0];
                store.value_mut(pid).as_slice_mut().unwrap()[i] = orig - eps;
                let (t, l) = run(&store);
                let fm = t.value(l).as_slice().unwrap()[0];
                store.value_mut(pid).as_slice_mut().unwrap()[i] = orig;
                let numeric = (fp - fm) / (2.0 * eps);
                let got = pg[pid.index()].as_ref().unwrap().as_slice().unwrap()[i];
                assert!(relative_error(got, numeric) < 1e-6);
            }
        }
    }
}
