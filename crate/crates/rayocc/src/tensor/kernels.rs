//! Raw compute kernels behind the tape ops. Pure functions of their
//! inputs: each output element is produced by one sequential reduction,
//! so results are bit-identical regardless of how many threads run them.

use super::Scalar;
use rayon::prelude::*;

/// Below this many output elements the rayon dispatch overhead is not
/// worth paying.
const PAR_MIN_ELEMS: usize = 1 << 14;

fn for_rows<T, F>(out: &mut [T], row_len: usize, f: F)
where
    T: Scalar,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if out.len() >= PAR_MIN_ELEMS && rayon::current_num_threads() > 1 && row_len > 0 {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        for (i, row) in out.chunks_mut(row_len).enumerate() {
            f(i, row);
        }
    }
}

pub fn axpy<T: Scalar>(dst: &mut [T], src: &[T], s: T) {
    for (d, &x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

/// c[m,n] = a[m,k] @ b[k,n]
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for_rows(&mut c, n, |i, c_row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            axpy(c_row, &b[kk * n..(kk + 1) * n], aik);
        }
    });
    c
}

/// c[m,n] = a[m,k] @ b[n,k]^T  (rows of `b` are dotted against rows of `a`)
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for_rows(&mut c, n, |i, c_row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *cv = acc;
        }
    });
    c
}

/// c[k,n] = a[m,k]^T @ b[m,n]
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            axpy(&mut c[kk * n..(kk + 1) * n], b_row, a[i * k + kk]);
        }
    }
    c
}

pub fn conv2d_out_hw(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    (oh, ow)
}

/// Direct 2D convolution (cross-correlation). x: [ic,h,w], w: [oc,ic,kh,kw],
/// b: [oc] -> [oc,oh,ow].
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Scalar>(
    x: &[T],
    wt: &[T],
    b: &[T],
    ic: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let (oh, ow) = conv2d_out_hw(h, w, kh, kw, stride, pad);
    let mut out = vec![T::zero(); oc * oh * ow];
    for_rows(&mut out, oh * ow, |o, plane| {
        for v in plane.iter_mut() {
            *v = b[o];
        }
        for i in 0..ic {
            let xp = &x[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wt[((o * ic + i) * kh + ky) * kw + kx];
                    if stride == 1 {
                        // out[oy][ox] += wv * x[oy+ky-pad][ox+kx-pad]
                        for oy in 0..oh {
                            let iy = oy + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            let ox0 = pad.saturating_sub(kx);
                            let ox1 = (w + pad - kx).min(ow);
                            if ox0 >= ox1 {
                                continue;
                            }
                            let dst = &mut plane[oy * ow + ox0..oy * ow + ox1];
                            let src = &xp[iy * w + ox0 + kx - pad..iy * w + ox1 + kx - pad];
                            axpy(dst, src, wv);
                        }
                    } else {
                        for oy in 0..oh {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            for ox in 0..ow {
                                let ix = ox * stride + kx;
                                if ix < pad || ix - pad >= w {
                                    continue;
                                }
                                plane[oy * ow + ox] += wv * xp[iy * w + ix - pad];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradients of conv2d. Returns (dx, dw, db).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    wt: &[T],
    dy: &[T],
    ic: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (oh, ow) = conv2d_out_hw(h, w, kh, kw, stride, pad);
    let mut dx = vec![T::zero(); ic * h * w];
    let mut dw = vec![T::zero(); oc * ic * kh * kw];
    let mut db = vec![T::zero(); oc];

    for o in 0..oc {
        let dyp = &dy[o * oh * ow..(o + 1) * oh * ow];
        let mut acc = T::zero();
        for &g in dyp {
            acc += g;
        }
        db[o] = acc;
        for i in 0..ic {
            let xp = &x[i * h * w..(i + 1) * h * w];
            let dxp = &mut dx[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((o * ic + i) * kh + ky) * kw + kx;
                    let wv = wt[widx];
                    let mut wg = T::zero();
                    for oy in 0..oh {
                        let iy = oy * stride + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let iy = iy - pad;
                        if stride == 1 {
                            let ox0 = pad.saturating_sub(kx);
                            let ox1 = (w + pad - kx).min(ow);
                            if ox0 >= ox1 {
                                continue;
                            }
                            let dyr = &dyp[oy * ow + ox0..oy * ow + ox1];
                            let xr = &xp[iy * w + ox0 + kx - pad..iy * w + ox1 + kx - pad];
                            let dxr = &mut dxp[iy * w + ox0 + kx - pad..iy * w + ox1 + kx - pad];
                            for ((&g, &xv), dv) in dyr.iter().zip(xr).zip(dxr.iter_mut()) {
                                wg += g * xv;
                                *dv += wv * g;
                            }
                        } else {
                            for ox in 0..ow {
                                let ix = ox * stride + kx;
                                if ix < pad || ix - pad >= w {
                                    continue;
                                }
                                let ix = ix - pad;
                                let g = dyp[oy * ow + ox];
                                wg += g * xp[iy * w + ix];
                                dxp[iy * w + ix] += wv * g;
                            }
                        }
                    }
                    dw[widx] += wg;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Corner-aligned bilinear upsampling of [c,h,w] by an integer factor.
/// Output is [c, h*factor, w*factor]; source grid corners map to output
/// corners, so a 1-wide axis broadcasts its single value.
pub fn bilinear_upsample<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let (ho, wo) = (h * factor, w * factor);
    let sy = axis_scale(h, ho);
    let sx = axis_scale(w, wo);
    let mut out = vec![T::zero(); c * ho * wo];
    for_rows(&mut out, ho * wo, |ch, plane| {
        let xp = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..ho {
            let (y0, y1, fy) = axis_lerp(oy, sy, h);
            for ox in 0..wo {
                let (x0, x1, fx) = axis_lerp(ox, sx, w);
                let v00 = xp[y0 * w + x0];
                let v01 = xp[y0 * w + x1];
                let v10 = xp[y1 * w + x0];
                let v11 = xp[y1 * w + x1];
                let one = 1.0;
                let v = v00 * T::from_f64((one - fy) * (one - fx))
                    + v01 * T::from_f64((one - fy) * fx)
                    + v10 * T::from_f64(fy * (one - fx))
                    + v11 * T::from_f64(fy * fx);
                plane[oy * wo + ox] = v;
            }
        }
    });
    out
}

pub fn bilinear_upsample_backward<T: Scalar>(
    dy: &[T],
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<T> {
    let (ho, wo) = (h * factor, w * factor);
    let sy = axis_scale(h, ho);
    let sx = axis_scale(w, wo);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let dyp = &dy[ch * ho * wo..(ch + 1) * ho * wo];
        let dxp = &mut dx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..ho {
            let (y0, y1, fy) = axis_lerp(oy, sy, h);
            for ox in 0..wo {
                let (x0, x1, fx) = axis_lerp(ox, sx, w);
                let g = dyp[oy * wo + ox];
                dxp[y0 * w + x0] += g * T::from_f64((1.0 - fy) * (1.0 - fx));
                dxp[y0 * w + x1] += g * T::from_f64((1.0 - fy) * fx);
                dxp[y1 * w + x0] += g * T::from_f64(fy * (1.0 - fx));
                dxp[y1 * w + x1] += g * T::from_f64(fy * fx);
            }
        }
    }
    dx
}

fn axis_scale(n_in: usize, n_out: usize) -> f64 {
    if n_out > 1 {
        (n_in.max(1) - 1) as f64 / (n_out - 1) as f64
    } else {
        0.0
    }
}

fn axis_lerp(o: usize, scale: f64, n_in: usize) -> (usize, usize, f64) {
    let pos = o as f64 * scale;
    let i0 = (pos.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, pos - i0 as f64)
}

/// Sample a feature map [d,h,w] at continuous index coordinates
/// (column, row) per point, border-clamped. Output [t,d].
pub fn bilinear_sample<T: Scalar>(map: &[T], d: usize, h: usize, w: usize, points: &[[f64; 2]]) -> Vec<T> {
    let t = points.len();
    let mut out = vec![T::zero(); t * d];
    for_rows(&mut out, d, |pi, row| {
        let (x0, x1, fx, y0, y1, fy) = clamp_lerp(points[pi], h, w);
        let w00 = T::from_f64((1.0 - fy) * (1.0 - fx));
        let w01 = T::from_f64((1.0 - fy) * fx);
        let w10 = T::from_f64(fy * (1.0 - fx));
        let w11 = T::from_f64(fy * fx);
        for (ch, v) in row.iter_mut().enumerate() {
            let mp = &map[ch * h * w..(ch + 1) * h * w];
            *v = mp[y0 * w + x0] * w00
                + mp[y0 * w + x1] * w01
                + mp[y1 * w + x0] * w10
                + mp[y1 * w + x1] * w11;
        }
    });
    out
}

pub fn bilinear_sample_backward<T: Scalar>(
    dy: &[T],
    d: usize,
    h: usize,
    w: usize,
    points: &[[f64; 2]],
) -> Vec<T> {
    let mut dmap = vec![T::zero(); d * h * w];
    for (pi, &p) in points.iter().enumerate() {
        let (x0, x1, fx, y0, y1, fy) = clamp_lerp(p, h, w);
        let w00 = T::from_f64((1.0 - fy) * (1.0 - fx));
        let w01 = T::from_f64((1.0 - fy) * fx);
        let w10 = T::from_f64(fy * (1.0 - fx));
        let w11 = T::from_f64(fy * fx);
        for ch in 0..d {
            let g = dy[pi * d + ch];
            let mp = &mut dmap[ch * h * w..(ch + 1) * h * w];
            mp[y0 * w + x0] += g * w00;
            mp[y0 * w + x1] += g * w01;
            mp[y1 * w + x0] += g * w10;
            mp[y1 * w + x1] += g * w11;
        }
    }
    dmap
}

#[allow(clippy::type_complexity)]
fn clamp_lerp(p: [f64; 2], h: usize, w: usize) -> (usize, usize, f64, usize, usize, f64) {
    let cx = p[0].clamp(0.0, (w - 1) as f64);
    let cy = p[1].clamp(0.0, (h - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    (x0, x1, cx - x0 as f64, y0, y1, cy - y0 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [2,3] @ [3,2]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let c = matmul::<f64>(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        // a: [3,4], b: [4,5]
        let c = matmul(&a, &b, 3, 4, 5);
        // b_t: [5,4]
        let mut b_t = vec![0.0; 20];
        for i in 0..4 {
            for j in 0..5 {
                b_t[j * 4 + i] = b[i * 5 + j];
            }
        }
        let c_nt = matmul_nt(&a, &b_t, 3, 4, 5);
        for (x, y) in c.iter().zip(&c_nt) {
            assert!((x - y).abs() < 1e-12);
        }
        // a_t: [4,3]; matmul_tn(a_t as "a"=[m=4? ...]) — check a^T @ a via tn
        let g = matmul_tn(&a, &a, 3, 4, 4); // a[3,4]^T @ a[3,4] -> [4,4]
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for r in 0..3 {
                    acc += a[r * 4 + i] * a[r * 4 + j];
                }
                assert!((g[i * 4 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input
        let x: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let w = [1.0];
        let b = [0.0];
        let y = conv2d(&x, &w, &b, 1, 3, 3, 1, 1, 1, 1, 0);
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_strided_shape() {
        let x = vec![1.0f64; 1 * 5 * 5];
        let w = vec![1.0; 9];
        let b = [0.0];
        let y = conv2d(&x, &w, &b, 1, 5, 5, 1, 3, 3, 2, 1);
        let (oh, ow) = conv2d_out_hw(5, 5, 3, 3, 2, 1);
        assert_eq!((oh, ow), (3, 3));
        assert_eq!(y.len(), 9);
        // center tap sees the full 3x3 ones window
        assert_eq!(y[4], 9.0);
        // corner (0,0) window covers 2x2 valid cells
        assert_eq!(y[0], 4.0);
    }

    #[test]
    fn upsample_reproduces_corners() {
        // 2x2 map by factor 2, corner-aligned: source sites land on corners
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let y = bilinear_upsample(&x, 1, 2, 2, 2);
        assert_eq!(y.len(), 16);
        assert_eq!(y[0], 1.0);
        assert_eq!(y[3], 2.0);
        assert_eq!(y[12], 3.0);
        assert_eq!(y[15], 4.0);
        // midpoint of top edge is on the interpolant
        assert!((y[1] - (1.0 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn upsample_of_single_cell_broadcasts() {
        let x = [5.0f64];
        let y = bilinear_upsample(&x, 1, 1, 1, 4);
        assert_eq!(y, vec![5.0; 16]);
    }

    #[test]
    fn sample_at_cell_center_is_exact() {
        let map: Vec<f64> = (0..12).map(|i| i as f64).collect(); // [1,3,4]
        let out = bilinear_sample(&map, 1, 3, 4, &[[2.0, 1.0]]);
        assert_eq!(out[0], map[4 + 2]);
    }
}
