//! Forward and backward kernels behind the tape ops.
//!
//! Convolutions go through im2col + matrix multiply; the im2col
//! buffer is rebuilt in the backward pass instead of being saved, so
//! graph memory stays proportional to activations. All kernels assume
//! standard (row-major, contiguous) layout, which the tape guarantees
//! for every stored value.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayView1, ArrayView2, ArrayView3,
    ArrayView4, ArrayViewMut3, Axis};

use super::tensor::Element;

const DICE_EPS: f64 = 1e-6;

/// Fills `cols` (C*9, H*W) with the 3x3 pad-1 patch matrix of one
/// image. Out-of-bounds taps stay zero.
fn im2col3<E: Element>(x: &ArrayView3<E>, cols: &mut Array2<E>) {
    let (c_n, h, w) = x.dim();
    cols.fill(E::zero());
    let xs = x.as_slice().expect("contiguous input");
    let cs = cols.as_slice_mut().expect("contiguous buffer");
    for c in 0..c_n {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = (c * 3 + ky) * 3 + kx;
                let base = row * h * w;
                // Valid destination x range for this tap.
                let dx0 = if kx == 0 { 1 } else { 0 };
                let dx1 = if kx == 2 { w - 1 } else { w };
                if dx1 <= dx0 {
                    continue;
                }
                for y in 0..h {
                    let sy = (y + ky).wrapping_sub(1);
                    if sy >= h {
                        continue;
                    }
                    let src = (c * h + sy) * w + dx0 + kx - 1;
                    let dst = base + y * w + dx0;
                    let n = dx1 - dx0;
                    cs[dst..dst + n].copy_from_slice(&xs[src..src + n]);
                }
            }
        }
    }
}

/// Adds the patch-matrix gradient back onto the image gradient; the
/// exact scatter adjoint of `im2col3`.
fn col2im3_add<E: Element>(cols: &Array2<E>, gx: &mut ArrayViewMut3<E>) {
    let (c_n, h, w) = gx.dim();
    let cs = cols.as_slice().expect("contiguous buffer");
    let gs = gx.as_slice_mut().expect("contiguous gradient");
    for c in 0..c_n {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = (c * 3 + ky) * 3 + kx;
                let base = row * h * w;
                let dx0 = if kx == 0 { 1 } else { 0 };
                let dx1 = if kx == 2 { w - 1 } else { w };
                if dx1 <= dx0 {
                    continue;
                }
                for y in 0..h {
                    let sy = (y + ky).wrapping_sub(1);
                    if sy >= h {
                        continue;
                    }
                    let dst = (c * h + sy) * w + dx0 + kx - 1;
                    let src = base + y * w + dx0;
                    for i in 0..dx1 - dx0 {
                        gs[dst + i] = gs[dst + i] + cs[src + i];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<E: Element>(
    x: &ArrayView4<E>,
    w: &ArrayView4<E>,
    b: &ArrayView1<E>,
) -> Array4<E> {
    let (bs, c, h, wd) = x.dim();
    let k = w.dim().0;
    let wmat = w.view().into_shape_with_order((k, c * 9)).unwrap();
    let mut cols = Array2::zeros((c * 9, h * wd));
    let mut out = Array4::zeros((bs, k, h, wd));
    for bi in 0..bs {
        im2col3(&x.index_axis(Axis(0), bi), &mut cols);
        let mut prod = wmat.dot(&cols);
        prod += &b.view().insert_axis(Axis(1));
        out.index_axis_mut(Axis(0), bi)
            .assign(&prod.into_shape_with_order((k, h, wd)).unwrap());
    }
    out
}

pub(crate) fn conv2d_backward<E: Element>(
    x: &ArrayView4<E>,
    w: &ArrayView4<E>,
    go: &ArrayView4<E>,
) -> (Array4<E>, Array4<E>, Array1<E>) {
    let (bs, c, h, wd) = x.dim();
    let k = w.dim().0;
    let wmat = w.view().into_shape_with_order((k, c * 9)).unwrap();
    let mut cols = Array2::zeros((c * 9, h * wd));
    let mut gx = Array4::zeros((bs, c, h, wd));
    let mut gw_mat = Array2::<E>::zeros((k, c * 9));
    let mut gb = Array1::<E>::zeros(k);
    for bi in 0..bs {
        im2col3(&x.index_axis(Axis(0), bi), &mut cols);
        let go_mat = go
            .index_axis(Axis(0), bi)
            .into_shape_with_order((k, h * wd))
            .unwrap();
        gw_mat += &go_mat.dot(&cols.t());
        gb += &go_mat.sum_axis(Axis(1));
        let tmp = wmat.t().dot(&go_mat);
        col2im3_add(&tmp, &mut gx.index_axis_mut(Axis(0), bi));
    }
    let gw = gw_mat.into_shape_with_order((k, c, 3, 3)).unwrap();
    (gx, gw, gb)
}

pub(crate) fn max_pool2_forward<E: Element>(x: &ArrayView4<E>) -> (Array4<E>, Vec<u8>) {
    let (bs, c, h, w) = x.dim();
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Array4::zeros((bs, c, h2, w2));
    let mut argmax = vec![0u8; bs * c * h2 * w2];
    let mut flat = 0usize;
    for bi in 0..bs {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), bi);
            let plane = plane.index_axis(Axis(0), ci);
            for y in 0..h2 {
                for xx in 0..w2 {
                    let mut best = plane[(2 * y, 2 * xx)];
                    let mut best_i = 0u8;
                    for (i, (dy, dx)) in
                        [(0usize, 1usize), (1, 0), (1, 1)].iter().enumerate()
                    {
                        let v = plane[(2 * y + dy, 2 * xx + dx)];
                        if v > best {
                            best = v;
                            best_i = i as u8 + 1;
                        }
                    }
                    out[(bi, ci, y, xx)] = best;
                    argmax[flat] = best_i;
                    flat += 1;
                }
            }
        }
    }
    (out, argmax)
}

pub(crate) fn max_pool2_backward<E: Element>(
    x_shape: &[usize],
    argmax: &[u8],
    go: &ArrayView4<E>,
) -> Array4<E> {
    let (bs, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (h2, w2) = (h / 2, w / 2);
    let mut gx = Array4::zeros((bs, c, h, w));
    let mut flat = 0usize;
    for bi in 0..bs {
        for ci in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let a = argmax[flat] as usize;
                    let (dy, dx) = (a / 2, a % 2);
                    gx[(bi, ci, 2 * y + dy, 2 * xx + dx)] =
                        gx[(bi, ci, 2 * y + dy, 2 * xx + dx)] + go[(bi, ci, y, xx)];
                    flat += 1;
                }
            }
        }
    }
    gx
}

pub(crate) fn conv_transpose2_forward<E: Element>(
    x: &ArrayView4<E>,
    w: &ArrayView4<E>,
    b: &ArrayView1<E>,
) -> Array4<E> {
    let (bs, c, h, wd) = x.dim();
    let k = w.dim().1;
    let wmat = w.view().into_shape_with_order((c, k * 4)).unwrap();
    let mut out = Array4::zeros((bs, k, 2 * h, 2 * wd));
    for bi in 0..bs {
        let xmat = x
            .index_axis(Axis(0), bi)
            .into_shape_with_order((c, h * wd))
            .unwrap();
        let tmp = wmat.t().dot(&xmat);
        for ki in 0..k {
            let bias = b[ki];
            for dy in 0..2usize {
                for dx in 0..2usize {
                    let row = (ki * 2 + dy) * 2 + dx;
                    for y in 0..h {
                        for xx in 0..wd {
                            out[(bi, ki, 2 * y + dy, 2 * xx + dx)] = tmp[(row, y * wd + xx)];
                        }
                    }
                }
            }
            out.index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), ki)
                .mapv_inplace(|v| v + bias);
        }
    }
    out
}

pub(crate) fn conv_transpose2_backward<E: Element>(
    x: &ArrayView4<E>,
    w: &ArrayView4<E>,
    go: &ArrayView4<E>,
) -> (Array4<E>, Array4<E>, Array1<E>) {
    let (bs, c, h, wd) = x.dim();
    let k = w.dim().1;
    let wmat = w.view().into_shape_with_order((c, k * 4)).unwrap();
    let mut gx = Array4::zeros((bs, c, h, wd));
    let mut gw_mat = Array2::<E>::zeros((c, k * 4));
    let mut gb = Array1::<E>::zeros(k);
    let mut gomat = Array2::<E>::zeros((k * 4, h * wd));
    for bi in 0..bs {
        for ki in 0..k {
            let mut bias_sum = E::zero();
            for dy in 0..2usize {
                for dx in 0..2usize {
                    let row = (ki * 2 + dy) * 2 + dx;
                    for y in 0..h {
                        for xx in 0..wd {
                            let g = go[(bi, ki, 2 * y + dy, 2 * xx + dx)];
                            gomat[(row, y * wd + xx)] = g;
                            bias_sum = bias_sum + g;
                        }
                    }
                }
            }
            gb[ki] = gb[ki] + bias_sum;
        }
        let xmat = x
            .index_axis(Axis(0), bi)
            .into_shape_with_order((c, h * wd))
            .unwrap();
        gx.index_axis_mut(Axis(0), bi)
            .assign(&wmat.dot(&gomat).into_shape_with_order((c, h, wd)).unwrap());
        gw_mat += &xmat.dot(&gomat.t());
    }
    let gw = gw_mat.into_shape_with_order((c, k, 2, 2)).unwrap();
    (gx, gw, gb)
}

/// Stride-2 2x2 valid convolution, written directly from its
/// definition. `conv_transpose2` must be its exact adjoint; tests
/// verify the inner-product identity against this function.
pub fn conv2d_stride2<E: Element>(y: &ArrayView4<E>, w: &ArrayView4<E>) -> Array4<E> {
    let (bs, k, h2, w2) = y.dim();
    let c = w.dim().0;
    assert_eq!(w.dim().1, k, "kernel output channels must match input");
    let (h, wd) = (h2 / 2, w2 / 2);
    let mut out = Array4::zeros((bs, c, h, wd));
    for bi in 0..bs {
        for ci in 0..c {
            for yy in 0..h {
                for xx in 0..wd {
                    let mut acc = E::zero();
                    for ki in 0..k {
                        for dy in 0..2usize {
                            for dx in 0..2usize {
                                acc = acc
                                    + y[(bi, ki, 2 * yy + dy, 2 * xx + dx)]
                                        * w[(ci, ki, dy, dx)];
                            }
                        }
                    }
                    out[(bi, ci, yy, xx)] = acc;
                }
            }
        }
    }
    out
}

pub(crate) fn linear_forward<E: Element>(
    x: &ArrayView2<E>,
    w: &ArrayView2<E>,
    b: &ArrayView1<E>,
) -> Array2<E> {
    let mut out = x.dot(&w.t());
    out += b;
    out
}

pub(crate) fn linear_backward<E: Element>(
    x: &ArrayView2<E>,
    w: &ArrayView2<E>,
    go: &ArrayView2<E>,
) -> (Array2<E>, Array2<E>, Array1<E>) {
    let gx = go.dot(w);
    let gw = go.t().dot(x);
    let gb = go.sum_axis(Axis(0));
    (gx, gw, gb)
}

fn as_bks<E: Element>(x: &ArrayD<E>) -> ArrayView3<'_, E> {
    let s = x.shape();
    let (b, k) = (s[0], s[1]);
    let rest: usize = s[2..].iter().product();
    x.view().into_shape_with_order((b, k, rest)).unwrap()
}

pub(crate) fn softmax_channels_forward<E: Element>(x: &ArrayD<E>) -> ArrayD<E> {
    let xv = as_bks(x);
    let (b, k, s) = xv.dim();
    let mut out = Array3::<E>::zeros((b, k, s));
    for bi in 0..b {
        for si in 0..s {
            let mut m = xv[(bi, 0, si)];
            for ki in 1..k {
                if xv[(bi, ki, si)] > m {
                    m = xv[(bi, ki, si)];
                }
            }
            let mut total = E::zero();
            for ki in 0..k {
                let e = (xv[(bi, ki, si)] - m).exp();
                out[(bi, ki, si)] = e;
                total = total + e;
            }
            for ki in 0..k {
                out[(bi, ki, si)] = out[(bi, ki, si)] / total;
            }
        }
    }
    out.into_shape_with_order(x.raw_dim()).unwrap()
}

/// Backward through softmax given the forward output `p`:
/// gx = p * (go - sum_k p*go).
pub(crate) fn softmax_channels_backward<E: Element>(p: &ArrayD<E>, go: &ArrayD<E>) -> ArrayD<E> {
    let pv = as_bks(p);
    let gv = as_bks(go);
    let (b, k, s) = pv.dim();
    let mut gx = Array3::<E>::zeros((b, k, s));
    for bi in 0..b {
        for si in 0..s {
            let mut dot = E::zero();
            for ki in 0..k {
                dot = dot + pv[(bi, ki, si)] * gv[(bi, ki, si)];
            }
            for ki in 0..k {
                gx[(bi, ki, si)] = pv[(bi, ki, si)] * (gv[(bi, ki, si)] - dot);
            }
        }
    }
    gx.into_shape_with_order(p.raw_dim()).unwrap()
}

pub(crate) fn cross_entropy_forward<E: Element>(logits: &ArrayD<E>, codes: &ArrayD<usize>) -> E {
    let lv = as_bks(logits);
    let (b, k, s) = lv.dim();
    let cv = codes.view().into_shape_with_order((b, s)).unwrap();
    let mut total = E::zero();
    for bi in 0..b {
        for si in 0..s {
            let mut m = lv[(bi, 0, si)];
            for ki in 1..k {
                if lv[(bi, ki, si)] > m {
                    m = lv[(bi, ki, si)];
                }
            }
            let mut z = E::zero();
            for ki in 0..k {
                z = z + (lv[(bi, ki, si)] - m).exp();
            }
            let lse = m + z.ln();
            total = total + lse - lv[(bi, cv[(bi, si)], si)];
        }
    }
    total / E::from_f64((b * s) as f64)
}

pub(crate) fn cross_entropy_backward<E: Element>(
    logits: &ArrayD<E>,
    codes: &ArrayD<usize>,
    go: E,
) -> ArrayD<E> {
    let lv = as_bks(logits);
    let (b, k, s) = lv.dim();
    let cv = codes.view().into_shape_with_order((b, s)).unwrap();
    let scale = go / E::from_f64((b * s) as f64);
    let mut gx = Array3::<E>::zeros((b, k, s));
    for bi in 0..b {
        for si in 0..s {
            let mut m = lv[(bi, 0, si)];
            for ki in 1..k {
                if lv[(bi, ki, si)] > m {
                    m = lv[(bi, ki, si)];
                }
            }
            let mut z = E::zero();
            for ki in 0..k {
                let e = (lv[(bi, ki, si)] - m).exp();
                gx[(bi, ki, si)] = e;
                z = z + e;
            }
            let code = cv[(bi, si)];
            for ki in 0..k {
                let p = gx[(bi, ki, si)] / z;
                let ind = if ki == code { E::one() } else { E::zero() };
                gx[(bi, ki, si)] = (p - ind) * scale;
            }
        }
    }
    gx.into_shape_with_order(logits.raw_dim()).unwrap()
}

/// Per-class sums behind the soft Dice loss.
fn dice_sums<E: Element>(p: &ArrayD<E>, g: &ArrayD<E>) -> Vec<(E, E)> {
    let pv = as_bks(p);
    let gv = as_bks(g);
    let (b, k, s) = pv.dim();
    let eps = E::from_f64(DICE_EPS);
    let two = E::from_f64(2.0);
    let mut sums = Vec::with_capacity(k);
    for ki in 0..k {
        let mut pg = E::zero();
        let mut pp = E::zero();
        let mut gg = E::zero();
        for bi in 0..b {
            for si in 0..s {
                let pe = pv[(bi, ki, si)];
                let ge = gv[(bi, ki, si)];
                pg = pg + pe * ge;
                pp = pp + pe * pe;
                gg = gg + ge * ge;
            }
        }
        sums.push((two * pg + eps, pp + gg + eps));
    }
    sums
}

pub(crate) fn soft_dice_forward<E: Element>(p: &ArrayD<E>, g: &ArrayD<E>) -> E {
    let sums = dice_sums(p, g);
    let k = E::from_f64(sums.len() as f64);
    let mut acc = E::zero();
    for (num, den) in &sums {
        acc = acc + *num / *den;
    }
    E::one() - acc / k
}

pub(crate) fn soft_dice_backward<E: Element>(p: &ArrayD<E>, g: &ArrayD<E>, go: E) -> ArrayD<E> {
    let sums = dice_sums(p, g);
    let pv = as_bks(p);
    let gv = as_bks(g);
    let (b, k, s) = pv.dim();
    let two = E::from_f64(2.0);
    let scale = go / E::from_f64(k as f64);
    let mut gx = Array3::<E>::zeros((b, k, s));
    for ki in 0..k {
        let (num, den) = sums[ki];
        for bi in 0..b {
            for si in 0..s {
                let pe = pv[(bi, ki, si)];
                let ge = gv[(bi, ki, si)];
                // d(num/den)/dp = (2g den - num 2p) / den^2
                let d = (two * ge * den - num * two * pe) / (den * den);
                gx[(bi, ki, si)] = -scale * d;
            }
        }
    }
    gx.into_shape_with_order(p.raw_dim()).unwrap()
}

fn softplus<E: Element>(z: E) -> E {
    let zero = E::zero();
    let pos = if z > zero { z } else { zero };
    pos + (-z.abs()).exp().ln_1p()
}

fn sigmoid<E: Element>(z: E) -> E {
    if z >= E::zero() {
        E::one() / (E::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (E::one() + e)
    }
}

pub(crate) fn soft_margin_forward<E: Element>(x: &ArrayD<E>, y: &ArrayD<E>) -> E {
    let n = E::from_f64(x.len() as f64);
    let mut total = E::zero();
    for (xe, ye) in x.iter().zip(y.iter()) {
        total = total + softplus(-*ye * *xe);
    }
    total / n
}

pub(crate) fn soft_margin_backward<E: Element>(x: &ArrayD<E>, y: &ArrayD<E>, go: E) -> ArrayD<E> {
    let scale = go / E::from_f64(x.len() as f64);
    let mut gx = x.clone();
    for (ge, (xe, ye)) in gx.iter_mut().zip(x.iter().zip(y.iter())) {
        *ge = -*ye * sigmoid(-*ye * *xe) * scale;
    }
    gx
}
