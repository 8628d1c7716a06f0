//! Raw numeric kernels behind the graph operations.
//!
//! Convolutions have two forward implementations: a direct nested-loop version
//! and an im2col+matmul version. Both accumulate partial products in the same
//! (channel, tap) order, so they agree bitwise; the graph picks between them
//! with a deterministic size threshold. `kernel_tests` pins the agreement.

use crate::error::{Error, Result};

/// Output length of a 1D convolution axis, or None when the geometry is empty.
pub fn conv_out_len(
    input: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// c[m,n] += a[m,k] * b[k,n]; accumulation over k ascending.
pub fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(&mut c, a, b, m, k, n);
    c
}

/// c[m,n] = a[m,k] * b[n,k]^T (dot products of rows).
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// c[k,n] = a[m,k]^T * b[m,n].
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let apv = arow[p];
            if apv == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += apv * brow[j];
            }
        }
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub c_in: usize,
    pub t_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub t_out: usize,
}

impl Conv1dGeom {
    pub fn new(
        c_in: usize,
        t_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 || k == 0 || stride == 0 || dilation == 0 {
            return Err(Error::Geometry(format!(
                "conv1d with zero extent: c_in={c_in} c_out={c_out} k={k} stride={stride} dilation={dilation}"
            )));
        }
        let t_out = conv_out_len(t_in, k, stride, dilation, padding).ok_or_else(|| {
            Error::Geometry(format!(
                "conv1d kernel span exceeds padded input: t_in={t_in} k={k} dilation={dilation} padding={padding}"
            ))
        })?;
        Ok(Conv1dGeom { c_in, t_in, c_out, k, stride, dilation, padding, t_out })
    }

    fn flops(&self) -> usize {
        self.c_out * self.c_in * self.k * self.t_out
    }
}

/// Direct (nested loop) 1D cross-correlation.
pub fn conv1d_direct(x: &[f64], kern: &[f64], g: &Conv1dGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.c_out * g.t_out];
    for co in 0..g.c_out {
        let orow = &mut out[co * g.t_out..(co + 1) * g.t_out];
        for ci in 0..g.c_in {
            let xrow = &x[ci * g.t_in..(ci + 1) * g.t_in];
            let krow = &kern[(co * g.c_in + ci) * g.k..(co * g.c_in + ci + 1) * g.k];
            for kk in 0..g.k {
                let kv = krow[kk];
                for j in 0..g.t_out {
                    let pos = j * g.stride + kk * g.dilation;
                    if pos < g.padding {
                        continue;
                    }
                    let src = pos - g.padding;
                    if src < g.t_in {
                        orow[j] += kv * xrow[src];
                    }
                }
            }
        }
    }
    out
}

/// Lowered input for the 1D fast path: rows indexed by (ci, tap), columns by
/// output position.
pub fn im2col_1d(x: &[f64], g: &Conv1dGeom) -> Vec<f64> {
    let rows = g.c_in * g.k;
    let mut cols = vec![0.0; rows * g.t_out];
    for ci in 0..g.c_in {
        let xrow = &x[ci * g.t_in..(ci + 1) * g.t_in];
        for kk in 0..g.k {
            let crow = &mut cols[(ci * g.k + kk) * g.t_out..(ci * g.k + kk + 1) * g.t_out];
            for j in 0..g.t_out {
                let pos = j * g.stride + kk * g.dilation;
                if pos < g.padding {
                    continue;
                }
                let src = pos - g.padding;
                if src < g.t_in {
                    crow[j] = xrow[src];
                }
            }
        }
    }
    cols
}

pub fn conv1d_im2col(x: &[f64], kern: &[f64], g: &Conv1dGeom) -> Vec<f64> {
    let cols = im2col_1d(x, g);
    matmul(kern, &cols, g.c_out, g.c_in * g.k, g.t_out)
}

const DIRECT_FLOP_LIMIT: usize = 4096;

pub fn conv1d_forward(x: &[f64], kern: &[f64], g: &Conv1dGeom) -> Vec<f64> {
    if g.flops() <= DIRECT_FLOP_LIMIT {
        conv1d_direct(x, kern, g)
    } else {
        conv1d_im2col(x, kern, g)
    }
}

/// Gradients for conv1d. `gout` is [c_out, t_out]; returns (gx, gkern).
pub fn conv1d_backward(
    x: &[f64],
    kern: &[f64],
    gout: &[f64],
    g: &Conv1dGeom,
) -> (Vec<f64>, Vec<f64>) {
    let rows = g.c_in * g.k;
    let cols = im2col_1d(x, g);
    let gkern = matmul_nt(gout, &cols, g.c_out, g.t_out, rows);
    // gcols[p, j] = sum_co kern[co, p] * gout[co, j]
    let gcols = matmul_tn(kern, gout, g.c_out, rows, g.t_out);
    let mut gx = vec![0.0; g.c_in * g.t_in];
    for ci in 0..g.c_in {
        let xrow = &mut gx[ci * g.t_in..(ci + 1) * g.t_in];
        for kk in 0..g.k {
            let crow = &gcols[(ci * g.k + kk) * g.t_out..(ci * g.k + kk + 1) * g.t_out];
            for j in 0..g.t_out {
                let pos = j * g.stride + kk * g.dilation;
                if pos < g.padding {
                    continue;
                }
                let src = pos - g.padding;
                if src < g.t_in {
                    xrow[src] += crow[j];
                }
            }
        }
    }
    (gx, gkern)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub c_in: usize,
    pub f_in: usize,
    pub t_in: usize,
    pub c_out: usize,
    pub kf: usize,
    pub kt: usize,
    pub stride_f: usize,
    pub stride_t: usize,
    pub pad_f: usize,
    pub pad_t: usize,
    pub f_out: usize,
    pub t_out: usize,
}

impl Conv2dGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        f_in: usize,
        t_in: usize,
        c_out: usize,
        kf: usize,
        kt: usize,
        stride_f: usize,
        stride_t: usize,
        pad_f: usize,
        pad_t: usize,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 || kf == 0 || kt == 0 || stride_f == 0 || stride_t == 0 {
            return Err(Error::Geometry(format!(
                "conv2d with zero extent: c_in={c_in} c_out={c_out} kf={kf} kt={kt} stride_f={stride_f} stride_t={stride_t}"
            )));
        }
        let f_out = conv_out_len(f_in, kf, stride_f, 1, pad_f).ok_or_else(|| {
            Error::Geometry(format!(
                "conv2d kernel height exceeds padded input: f_in={f_in} kf={kf} pad_f={pad_f}"
            ))
        })?;
        let t_out = conv_out_len(t_in, kt, stride_t, 1, pad_t).ok_or_else(|| {
            Error::Geometry(format!(
                "conv2d kernel width exceeds padded input: t_in={t_in} kt={kt} pad_t={pad_t}"
            ))
        })?;
        Ok(Conv2dGeom {
            c_in, f_in, t_in, c_out, kf, kt, stride_f, stride_t, pad_f, pad_t, f_out, t_out,
        })
    }

    fn flops(&self) -> usize {
        self.c_out * self.c_in * self.kf * self.kt * self.f_out * self.t_out
    }
}

/// Direct 2D cross-correlation over a (frequency, time) grid.
pub fn conv2d_direct(x: &[f64], kern: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    let out_hw = g.f_out * g.t_out;
    let in_hw = g.f_in * g.t_in;
    let mut out = vec![0.0; g.c_out * out_hw];
    for co in 0..g.c_out {
        let oplane = &mut out[co * out_hw..(co + 1) * out_hw];
        for ci in 0..g.c_in {
            let xplane = &x[ci * in_hw..(ci + 1) * in_hw];
            let kbase = ((co * g.c_in) + ci) * g.kf * g.kt;
            for kf in 0..g.kf {
                for kt in 0..g.kt {
                    let kv = kern[kbase + kf * g.kt + kt];
                    for fo in 0..g.f_out {
                        let fpos = fo * g.stride_f + kf;
                        if fpos < g.pad_f || fpos - g.pad_f >= g.f_in {
                            continue;
                        }
                        let fsrc = fpos - g.pad_f;
                        let orow = &mut oplane[fo * g.t_out..(fo + 1) * g.t_out];
                        let xrow = &xplane[fsrc * g.t_in..(fsrc + 1) * g.t_in];
                        for to in 0..g.t_out {
                            let tpos = to * g.stride_t + kt;
                            if tpos < g.pad_t {
                                continue;
                            }
                            let tsrc = tpos - g.pad_t;
                            if tsrc < g.t_in {
                                orow[to] += kv * xrow[tsrc];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Lowered input for the 2D fast path: rows indexed by (ci, kf, kt).
pub fn im2col_2d(x: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    let rows = g.c_in * g.kf * g.kt;
    let out_hw = g.f_out * g.t_out;
    let in_hw = g.f_in * g.t_in;
    let mut cols = vec![0.0; rows * out_hw];
    for ci in 0..g.c_in {
        let xplane = &x[ci * in_hw..(ci + 1) * in_hw];
        for kf in 0..g.kf {
            for kt in 0..g.kt {
                let r = (ci * g.kf + kf) * g.kt + kt;
                let crow = &mut cols[r * out_hw..(r + 1) * out_hw];
                for fo in 0..g.f_out {
                    let fpos = fo * g.stride_f + kf;
                    if fpos < g.pad_f || fpos - g.pad_f >= g.f_in {
                        continue;
                    }
                    let fsrc = fpos - g.pad_f;
                    let xrow = &xplane[fsrc * g.t_in..(fsrc + 1) * g.t_in];
                    for to in 0..g.t_out {
                        let tpos = to * g.stride_t + kt;
                        if tpos < g.pad_t {
                            continue;
                        }
                        let tsrc = tpos - g.pad_t;
                        if tsrc < g.t_in {
                            crow[fo * g.t_out + to] = xrow[tsrc];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub fn conv2d_im2col(x: &[f64], kern: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    let cols = im2col_2d(x, g);
    matmul(kern, &cols, g.c_out, g.c_in * g.kf * g.kt, g.f_out * g.t_out)
}

pub fn conv2d_forward(x: &[f64], kern: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    if g.flops() <= DIRECT_FLOP_LIMIT {
        conv2d_direct(x, kern, g)
    } else {
        conv2d_im2col(x, kern, g)
    }
}

pub fn conv2d_backward(
    x: &[f64],
    kern: &[f64],
    gout: &[f64],
    g: &Conv2dGeom,
) -> (Vec<f64>, Vec<f64>) {
    let rows = g.c_in * g.kf * g.kt;
    let out_hw = g.f_out * g.t_out;
    let cols = im2col_2d(x, g);
    let gkern = matmul_nt(gout, &cols, g.c_out, out_hw, rows);
    let gcols = matmul_tn(kern, gout, g.c_out, rows, out_hw);
    let in_hw = g.f_in * g.t_in;
    let mut gx = vec![0.0; g.c_in * in_hw];
    for ci in 0..g.c_in {
        let xplane = &mut gx[ci * in_hw..(ci + 1) * in_hw];
        for kf in 0..g.kf {
            for kt in 0..g.kt {
                let r = (ci * g.kf + kf) * g.kt + kt;
                let crow = &gcols[r * out_hw..(r + 1) * out_hw];
                for fo in 0..g.f_out {
                    let fpos = fo * g.stride_f + kf;
                    if fpos < g.pad_f || fpos - g.pad_f >= g.f_in {
                        continue;
                    }
                    let fsrc = fpos - g.pad_f;
                    for to in 0..g.t_out {
                        let tpos = to * g.stride_t + kt;
                        if tpos < g.pad_t {
                            continue;
                        }
                        let tsrc = tpos - g.pad_t;
                        if tsrc < g.t_in {
                            xplane[fsrc * g.t_in + tsrc] += crow[fo * g.t_out + to];
                        }
                    }
                }
            }
        }
    }
    (gx, gkern)
}
