//! Forward and backward kernels for [`Op`].

use alloc::vec;
use alloc::vec::Vec;

use super::{Op, Unary};
use crate::error::shape_err;
use crate::real::{gemm, MatRef};
use crate::tensor::split_at_axis;
use crate::{Real, Result, Tensor};

/// 1-D convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Stride 1, dilation 1, symmetric zero padding.
    pub fn same(padding: usize) -> Self {
        Self {
            stride: 1,
            pad_left: padding,
            pad_right: padding,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn out_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + self.pad_left + self.pad_right;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

pub(super) fn forward<T: Real>(op: &Op<T>, ins: &[&Tensor<T>]) -> Result<Tensor<T>> {
    match op {
        Op::Add => ins[0].zip_map(ins[1], |a, b| a + b),
        Op::Sub => ins[0].zip_map(ins[1], |a, b| a - b),
        Op::Mul => ins[0].zip_map(ins[1], |a, b| a * b),
        Op::Scale(c) => Ok(ins[0].map(|a| a * *c)),
        Op::AddScalar(c) => Ok(ins[0].map(|a| a + *c)),
        Op::AddBias { axis } => add_bias(ins[0], ins[1], *axis),
        Op::MatMul { ta, tb } => matmul(ins[0], ins[1], *ta, *tb),
        Op::Reshape(shape) => ins[0].clone().reshape(shape),
        Op::Permute(perm) => ins[0].permute(perm),
        Op::Narrow { axis, start, len } => narrow(ins[0], *axis, *start, *len),
        Op::Conv1d(spec) => conv1d(ins[0], ins[1], ins.get(2).copied(), spec),
        Op::ConvTranspose1d { stride, padding } => {
            conv_transpose1d(ins[0], ins[1], ins.get(2).copied(), *stride, *padding)
        }
        Op::PadReflect { left, right } => pad_reflect(ins[0], *left, *right),
        Op::AvgPool1d {
            kernel,
            stride,
            padding,
        } => avg_pool1d(ins[0], *kernel, *stride, *padding),
        Op::Unary(u) => Ok(unary_forward(ins[0], *u)),
        Op::Softmax => Ok(softmax(ins[0])),
        Op::LayerNorm { eps } => layer_norm(ins[0], ins[1], ins[2], *eps),
        Op::MeanAll => {
            let n = ins[0].len().max(1);
            Ok(Tensor::scalar(ins[0].sum() / T::from_f64(n as f64)))
        }
        Op::SumAll => Ok(Tensor::scalar(ins[0].sum())),
        Op::Dropout { mask } => {
            let m = Tensor::new(ins[0].shape(), mask.clone())?;
            ins[0].zip_map(&m, |a, b| a * b)
        }
    }
}

pub(super) fn backward<T: Real>(
    op: &Op<T>,
    ins: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    Ok(match op {
        Op::Add => vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())],
        Op::Sub => vec![want(0).then(|| g.clone()), want(1).then(|| g.map(|x| -x))],
        Op::Mul => vec![
            if want(0) { Some(g.zip_map(ins[1], |a, b| a * b)?) } else { None },
            if want(1) { Some(g.zip_map(ins[0], |a, b| a * b)?) } else { None },
        ],
        Op::Scale(c) => vec![Some(g.map(|x| x * *c))],
        Op::AddScalar(_) => vec![Some(g.clone())],
        Op::AddBias { axis } => {
            let gb = if want(1) {
                let (outer, n, inner) = split_at_axis(g.shape(), *axis);
                let mut acc = vec![T::zero(); n];
                let d = g.data();
                for o in 0..outer {
                    for (i, a) in acc.iter_mut().enumerate() {
                        let base = (o * n + i) * inner;
                        *a += d[base..base + inner].iter().copied().sum::<T>();
                    }
                }
                Some(Tensor::new(&[n], acc)?)
            } else {
                None
            };
            vec![want(0).then(|| g.clone()), gb]
        }
        Op::MatMul { ta, tb } => {
            let (ga, gb) = matmul_backward(ins[0], ins[1], g, *ta, *tb, want(0), want(1))?;
            vec![ga, gb]
        }
        Op::Reshape(_) => vec![Some(g.clone().reshape(ins[0].shape())?)],
        Op::Permute(perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![Some(g.permute(&inv)?)]
        }
        Op::Narrow { axis, start, len } => {
            let (outer, n, inner) = split_at_axis(ins[0].shape(), *axis);
            let mut gx = vec![T::zero(); ins[0].len()];
            let gd = g.data();
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * n + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
            }
            vec![Some(Tensor::new(ins[0].shape(), gx)?)]
        }
        Op::Conv1d(spec) => {
            let (gx, gw, gb) = conv1d_backward(ins[0], ins[1], g, spec, want(0), want(1), want(2))?;
            vec![gx, gw, gb]
        }
        Op::ConvTranspose1d { stride, padding } => {
            let (gx, gw, gb) = conv_transpose1d_backward(
                ins[0], ins[1], g, *stride, *padding, want(0), want(1), want(2),
            )?;
            vec![gx, gw, gb]
        }
        Op::PadReflect { left, right } => vec![Some(pad_reflect_backward(ins[0], g, *left, *right)?)],
        Op::AvgPool1d {
            kernel,
            stride,
            padding,
        } => vec![Some(avg_pool1d_backward(ins[0], g, *kernel, *stride, *padding)?)],
        Op::Unary(u) => vec![Some(unary_backward(ins[0], out, g, *u))],
        Op::Softmax => vec![Some(softmax_backward(out, g))],
        Op::LayerNorm { eps } => {
            let (gx, gg, gb) = layer_norm_backward(ins[0], ins[1], g, *eps)?;
            vec![want(0).then_some(gx), want(1).then_some(gg), want(2).then_some(gb)]
        }
        Op::MeanAll => {
            let n = ins[0].len().max(1);
            let v = g.item() / T::from_f64(n as f64);
            vec![Some(Tensor::full(ins[0].shape(), v))]
        }
        Op::SumAll => vec![Some(Tensor::full(ins[0].shape(), g.item()))],
        Op::Dropout { mask } => {
            let m = Tensor::new(g.shape(), mask.clone())?;
            vec![Some(g.zip_map(&m, |a, b| a * b)?)]
        }
    })
}

fn add_bias<T: Real>(x: &Tensor<T>, b: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || b.shape() != [x.dim(axis)] {
        return Err(shape_err!(
            "add_bias",
            "bias {:?} does not match axis {} of {:?}",
            b.shape(),
            axis,
            x.shape()
        ));
    }
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    let mut out = x.clone();
    let bd = b.data();
    let od = out.data_mut();
    for o in 0..outer {
        for (i, &bi) in bd.iter().enumerate() {
            let base = (o * n + i) * inner;
            for v in &mut od[base..base + inner] {
                *v += bi;
            }
        }
    }
    Ok(out)
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

fn matmul_dims<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<MatMulDims> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || rb < 2 {
        return Err(shape_err!("matmul", "operands must have rank >= 2: {:?} {:?}", a.shape(), b.shape()));
    }
    let (m, ka) = if ta {
        (a.dim(ra - 1), a.dim(ra - 2))
    } else {
        (a.dim(ra - 2), a.dim(ra - 1))
    };
    let (kb, n) = if tb {
        (b.dim(rb - 1), b.dim(rb - 2))
    } else {
        (b.dim(rb - 2), b.dim(rb - 1))
    };
    if ka != kb {
        return Err(shape_err!("matmul", "inner dims differ: {:?} x {:?} (ta={}, tb={})", a.shape(), b.shape(), ta, tb));
    }
    let batch: usize = a.shape()[..ra - 2].iter().product();
    let shared_b = rb == 2;
    if !shared_b && a.shape()[..ra - 2] != b.shape()[..rb - 2] {
        return Err(shape_err!("matmul", "batch dims differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(MatMulDims {
        batch,
        m,
        k: ka,
        n,
        shared_b,
    })
}

fn view<T>(data: &[T], rows: usize, cols: usize, transposed: bool) -> MatRef<'_, T> {
    // `data` holds the stored (untransposed) matrix.
    if transposed {
        MatRef::new(data, cols, rows).t()
    } else {
        MatRef::new(data, rows, cols)
    }
}

fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let d = matmul_dims(a, b, ta, tb)?;
    let mut shape = a.shape()[..a.rank() - 2].to_vec();
    shape.push(d.m);
    shape.push(d.n);
    let mut out = vec![T::zero(); d.batch * d.m * d.n];
    let bm = |i: usize| -> MatRef<'_, T> {
        let off = if d.shared_b { 0 } else { i * d.k * d.n };
        view(&b.data()[off..off + d.k * d.n], d.k, d.n, tb)
    };
    if d.shared_b && !ta {
        let rows = d.batch * d.m;
        gemm(T::one(), MatRef::new(a.data(), rows, d.k), bm(0), T::zero(), &mut out, d.n);
    } else {
        for i in 0..d.batch {
            let am = view(&a.data()[i * d.m * d.k..(i + 1) * d.m * d.k], d.m, d.k, ta);
            gemm(T::one(), am, bm(i), T::zero(), &mut out[i * d.m * d.n..], d.n);
        }
    }
    Tensor::new(&shape, out)
}

#[allow(clippy::too_many_arguments)]
fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    ta: bool,
    tb: bool,
    want_a: bool,
    want_b: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let d = matmul_dims(a, b, ta, tb)?;
    let (m, k, n) = (d.m, d.k, d.n);
    let gmat = |i: usize| MatRef::new(&g.data()[i * m * n..(i + 1) * m * n], m, n);
    let bop = |i: usize| -> MatRef<'_, T> {
        let off = if d.shared_b { 0 } else { i * k * n };
        view(&b.data()[off..off + k * n], k, n, tb)
    };
    let aop = |i: usize| view(&a.data()[i * m * k..(i + 1) * m * k], m, k, ta);

    let ga = if want_a {
        let mut ga = vec![T::zero(); a.len()];
        for i in 0..d.batch {
            let dst = &mut ga[i * m * k..];
            if ta {
                // stored a is [k, m]: ga = op(b) @ g^T
                gemm(T::one(), bop(i), gmat(i).t(), T::zero(), dst, m);
            } else {
                gemm(T::one(), gmat(i), bop(i).t(), T::zero(), dst, k);
            }
        }
        Some(Tensor::new(a.shape(), ga)?)
    } else {
        None
    };

    let gb = if want_b {
        let mut gbuf = vec![T::zero(); b.len()];
        if d.shared_b && !ta {
            let rows = d.batch * m;
            let am = MatRef::new(a.data(), rows, k);
            let gm = MatRef::new(g.data(), rows, n);
            if tb {
                gemm(T::one(), gm.t(), am, T::zero(), &mut gbuf, k);
            } else {
                gemm(T::one(), am.t(), gm, T::zero(), &mut gbuf, n);
            }
        } else {
            for i in 0..d.batch {
                let (off, beta) = if d.shared_b {
                    (0, if i == 0 { T::zero() } else { T::one() })
                } else {
                    (i * k * n, T::zero())
                };
                let dst = &mut gbuf[off..];
                if tb {
                    // stored b is [n, k]: gb = g^T @ op(a)
                    gemm(T::one(), gmat(i).t(), aop(i), beta, dst, k);
                } else {
                    gemm(T::one(), aop(i).t(), gmat(i), beta, dst, n);
                }
            }
        }
        Some(Tensor::new(b.shape(), gbuf)?)
    } else {
        None
    };
    Ok((ga, gb))
}

fn narrow<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || start + len > x.dim(axis) {
        return Err(shape_err!("narrow", "range {}..{} on axis {} of {:?}", start, start + len, axis, x.shape()));
    }
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, out)
}

/// Columns per im2col chunk, keeping a chunk near `BUDGET` elements.
fn chunk_cols(rows: usize, total: usize) -> usize {
    const BUDGET: usize = 1 << 20;
    (BUDGET / rows.max(1)).max(64).min(total.max(1))
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    len: usize,
    cout: usize,
    kernel: usize,
    cin_g: usize,
    cout_g: usize,
    out_len: usize,
}

fn conv_geom<T: Real>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<ConvGeom> {
    if x.rank() != 3 || w.rank() != 3 {
        return Err(shape_err!("conv1d", "expected x [B,C,L] and w [O,C/g,K], got {:?} {:?}", x.shape(), w.shape()));
    }
    let (batch, cin, len) = (x.dim(0), x.dim(1), x.dim(2));
    let (cout, cin_g, kernel) = (w.dim(0), w.dim(1), w.dim(2));
    let g = spec.groups;
    if g == 0 || spec.stride == 0 || spec.dilation == 0 || kernel == 0 {
        return Err(shape_err!("conv1d", "degenerate spec {:?} / kernel {}", spec, kernel));
    }
    if cin != cin_g * g || cout % g != 0 {
        return Err(shape_err!("conv1d", "channels {} -> {} incompatible with weight {:?} and {} groups", cin, cout, w.shape(), g));
    }
    let out_len = spec
        .out_len(len, kernel)
        .ok_or_else(|| shape_err!("conv1d", "input length {} too short for kernel {} ({:?})", len, kernel, spec))?;
    Ok(ConvGeom {
        batch,
        cin,
        len,
        cout,
        kernel,
        cin_g,
        cout_g: cout / g,
        out_len,
    })
}

fn is_pointwise(spec: &ConvSpec, kernel: usize) -> bool {
    kernel == 1 && spec.stride == 1 && spec.pad_left == 0 && spec.pad_right == 0
}

/// Fills `col [cin_g * K, tc]` for output columns `t0..t0+tc`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    cin_g: usize,
    len: usize,
    kernel: usize,
    spec: &ConvSpec,
    t0: usize,
    tc: usize,
    col: &mut [T],
) {
    let pl = spec.pad_left as isize;
    for ci in 0..cin_g {
        let row = &x[ci * len..(ci + 1) * len];
        for k in 0..kernel {
            let dst = &mut col[(ci * kernel + k) * tc..(ci * kernel + k + 1) * tc];
            let shift = (k * spec.dilation) as isize - pl;
            for (j, v) in dst.iter_mut().enumerate() {
                let src = ((t0 + j) * spec.stride) as isize + shift;
                *v = if src >= 0 && (src as usize) < len {
                    row[src as usize]
                } else {
                    T::zero()
                };
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Real>(
    col: &[T],
    cin_g: usize,
    len: usize,
    kernel: usize,
    spec: &ConvSpec,
    t0: usize,
    tc: usize,
    dx: &mut [T],
) {
    let pl = spec.pad_left as isize;
    for ci in 0..cin_g {
        let row = &mut dx[ci * len..(ci + 1) * len];
        for k in 0..kernel {
            let src = &col[(ci * kernel + k) * tc..(ci * kernel + k + 1) * tc];
            let shift = (k * spec.dilation) as isize - pl;
            for (j, &v) in src.iter().enumerate() {
                let t = ((t0 + j) * spec.stride) as isize + shift;
                if t >= 0 && (t as usize) < len {
                    row[t as usize] += v;
                }
            }
        }
    }
}

fn conv1d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let gm = conv_geom(x, w, spec)?;
    if let Some(b) = bias {
        if b.shape() != [gm.cout] {
            return Err(shape_err!("conv1d", "bias {:?} for {} output channels", b.shape(), gm.cout));
        }
    }
    let rows = gm.cin_g * gm.kernel;
    let mut out = vec![T::zero(); gm.batch * gm.cout * gm.out_len];
    let pointwise = is_pointwise(spec, gm.kernel);
    let tc_max = chunk_cols(rows, gm.out_len);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); rows * tc_max] };
    for b in 0..gm.batch {
        let xb = &x.data()[b * gm.cin * gm.len..(b + 1) * gm.cin * gm.len];
        let ob = &mut out[b * gm.cout * gm.out_len..(b + 1) * gm.cout * gm.out_len];
        for g in 0..spec.groups {
            let xg = &xb[g * gm.cin_g * gm.len..(g + 1) * gm.cin_g * gm.len];
            let wg = MatRef::new(&w.data()[g * gm.cout_g * rows..(g + 1) * gm.cout_g * rows], gm.cout_g, rows);
            let og = &mut ob[g * gm.cout_g * gm.out_len..];
            if pointwise {
                gemm(T::one(), wg, MatRef::new(xg, gm.cin_g, gm.len), T::zero(), og, gm.out_len);
                continue;
            }
            let mut t0 = 0;
            while t0 < gm.out_len {
                let tc = tc_max.min(gm.out_len - t0);
                im2col(xg, gm.cin_g, gm.len, gm.kernel, spec, t0, tc, &mut col[..rows * tc]);
                gemm(T::one(), wg, MatRef::new(&col[..rows * tc], rows, tc), T::zero(), &mut og[t0..], gm.out_len);
                t0 += tc;
            }
        }
        if let Some(bias) = bias {
            for (c, &bv) in bias.data().iter().enumerate() {
                for v in &mut ob[c * gm.out_len..(c + 1) * gm.out_len] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(&[gm.batch, gm.cout, gm.out_len], out)
}

type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

fn conv1d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    spec: &ConvSpec,
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> Result<ConvGrads<T>> {
    let gm = conv_geom(x, w, spec)?;
    let rows = gm.cin_g * gm.kernel;
    let pointwise = is_pointwise(spec, gm.kernel);
    let tc_max = chunk_cols(rows, gm.out_len);
    let mut col = vec![T::zero(); if pointwise { 0 } else { rows * tc_max }];
    let mut dcol = vec![T::zero(); if pointwise { 0 } else { rows * tc_max }];
    let mut gx = if want_x { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut gw = if want_w { vec![T::zero(); w.len()] } else { Vec::new() };
    let gd = g.data();
    for b in 0..gm.batch {
        let xb = &x.data()[b * gm.cin * gm.len..(b + 1) * gm.cin * gm.len];
        let gb = &gd[b * gm.cout * gm.out_len..(b + 1) * gm.cout * gm.out_len];
        for grp in 0..spec.groups {
            let xg = &xb[grp * gm.cin_g * gm.len..(grp + 1) * gm.cin_g * gm.len];
            let wg = MatRef::new(&w.data()[grp * gm.cout_g * rows..(grp + 1) * gm.cout_g * rows], gm.cout_g, rows);
            let gg = &gb[grp * gm.cout_g * gm.out_len..(grp + 1) * gm.cout_g * gm.out_len];
            let x_off = b * gm.cin * gm.len + grp * gm.cin_g * gm.len;
            if pointwise {
                let gmat = MatRef::new(gg, gm.cout_g, gm.out_len);
                if want_w {
                    let dst = &mut gw[grp * gm.cout_g * rows..];
                    gemm(T::one(), gmat, MatRef::new(xg, gm.cin_g, gm.len).t(), T::one(), dst, rows);
                }
                if want_x {
                    gemm(T::one(), wg.t(), gmat, T::zero(), &mut gx[x_off..], gm.len);
                }
                continue;
            }
            let mut t0 = 0;
            while t0 < gm.out_len {
                let tc = tc_max.min(gm.out_len - t0);
                let gchunk = MatRef {
                    data: &gg[t0..],
                    rows: gm.cout_g,
                    cols: tc,
                    rs: gm.out_len,
                    cs: 1,
                };
                if want_w {
                    im2col(xg, gm.cin_g, gm.len, gm.kernel, spec, t0, tc, &mut col[..rows * tc]);
                    let dst = &mut gw[grp * gm.cout_g * rows..];
                    gemm(T::one(), gchunk, MatRef::new(&col[..rows * tc], rows, tc).t(), T::one(), dst, rows);
                }
                if want_x {
                    gemm(T::one(), wg.t(), gchunk, T::zero(), &mut dcol[..rows * tc], tc);
                    col2im_add(
                        &dcol[..rows * tc],
                        gm.cin_g,
                        gm.len,
                        gm.kernel,
                        spec,
                        t0,
                        tc,
                        &mut gx[x_off..x_off + gm.cin_g * gm.len],
                    );
                }
                t0 += tc;
            }
        }
    }
    let gbias = if want_b { Some(channel_sums(g, gm.cout)?) } else { None };
    Ok((
        if want_x { Some(Tensor::new(x.shape(), gx)?) } else { None },
        if want_w { Some(Tensor::new(w.shape(), gw)?) } else { None },
        gbias,
    ))
}

/// Sums `g [B, C, L]` over batch and length.
fn channel_sums<T: Real>(g: &Tensor<T>, c: usize) -> Result<Tensor<T>> {
    let (b, l) = (g.dim(0), g.dim(2));
    let mut acc = vec![T::zero(); c];
    for bi in 0..b {
        for (ci, a) in acc.iter_mut().enumerate() {
            let base = (bi * c + ci) * l;
            *a += g.data()[base..base + l].iter().copied().sum::<T>();
        }
    }
    Tensor::new(&[c], acc)
}

fn conv_transpose_geom<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if x.rank() != 3 || w.rank() != 3 || x.dim(1) != w.dim(0) || stride == 0 {
        return Err(shape_err!("conv_transpose1d", "x {:?} / w {:?} / stride {}", x.shape(), w.shape(), stride));
    }
    let (batch, cin, lin) = (x.dim(0), x.dim(1), x.dim(2));
    let (cout, kernel) = (w.dim(1), w.dim(2));
    let full = (lin.max(1) - 1) * stride + kernel;
    if lin == 0 || full <= 2 * padding {
        return Err(shape_err!("conv_transpose1d", "empty output for length {}", lin));
    }
    Ok((batch, cin, lin, cout, kernel, full - 2 * padding))
}

fn conv_transpose1d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (batch, cin, lin, cout, kernel, lout) = conv_transpose_geom(x, w, stride, padding)?;
    let ck = cout * kernel;
    let wr = MatRef::new(w.data(), cin, ck);
    let mut cols = vec![T::zero(); ck * lin];
    let mut out = vec![T::zero(); batch * cout * lout];
    for b in 0..batch {
        let xb = MatRef::new(&x.data()[b * cin * lin..(b + 1) * cin * lin], cin, lin);
        gemm(T::one(), wr.t(), xb, T::zero(), &mut cols, lin);
        let ob = &mut out[b * cout * lout..(b + 1) * cout * lout];
        for co in 0..cout {
            let orow = &mut ob[co * lout..(co + 1) * lout];
            for k in 0..kernel {
                let crow = &cols[(co * kernel + k) * lin..(co * kernel + k + 1) * lin];
                for (l, &v) in crow.iter().enumerate() {
                    let t = (l * stride + k) as isize - padding as isize;
                    if t >= 0 && (t as usize) < lout {
                        orow[t as usize] += v;
                    }
                }
            }
            if let Some(bias) = bias {
                let bv = bias.data()[co];
                for v in orow.iter_mut() {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(&[batch, cout, lout], out)
}

#[allow(clippy::too_many_arguments)]
fn conv_transpose1d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    padding: usize,
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> Result<ConvGrads<T>> {
    let (batch, cin, lin, cout, kernel, lout) = conv_transpose_geom(x, w, stride, padding)?;
    let ck = cout * kernel;
    let wr = MatRef::new(w.data(), cin, ck);
    let mut dcols = vec![T::zero(); ck * lin];
    let mut gx = if want_x { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut gw = if want_w { vec![T::zero(); w.len()] } else { Vec::new() };
    for b in 0..batch {
        let gb = &g.data()[b * cout * lout..(b + 1) * cout * lout];
        for co in 0..cout {
            let grow = &gb[co * lout..(co + 1) * lout];
            for k in 0..kernel {
                let drow = &mut dcols[(co * kernel + k) * lin..(co * kernel + k + 1) * lin];
                for (l, d) in drow.iter_mut().enumerate() {
                    let t = (l * stride + k) as isize - padding as isize;
                    *d = if t >= 0 && (t as usize) < lout {
                        grow[t as usize]
                    } else {
                        T::zero()
                    };
                }
            }
        }
        let dm = MatRef::new(&dcols, ck, lin);
        if want_x {
            gemm(T::one(), wr, dm, T::zero(), &mut gx[b * cin * lin..], lin);
        }
        if want_w {
            let xb = MatRef::new(&x.data()[b * cin * lin..(b + 1) * cin * lin], cin, lin);
            gemm(T::one(), xb, dm.t(), T::one(), &mut gw, ck);
        }
    }
    let gbias = if want_b { Some(channel_sums(g, cout)?) } else { None };
    Ok((
        if want_x { Some(Tensor::new(x.shape(), gx)?) } else { None },
        if want_w { Some(Tensor::new(w.shape(), gw)?) } else { None },
        gbias,
    ))
}

/// Source index of padded position `j` under repeated reflection.
pub(crate) fn reflect_index(j: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut i = j.rem_euclid(period);
    if i >= len as isize {
        i = period - i;
    }
    i as usize
}

fn pad_reflect<T: Real>(x: &Tensor<T>, left: usize, right: usize) -> Result<Tensor<T>> {
    let r = x.rank();
    if r == 0 || x.dim(r - 1) == 0 {
        return Err(shape_err!("pad_reflect", "cannot pad {:?}", x.shape()));
    }
    let len = x.dim(r - 1);
    let rows = x.len() / len;
    let new_len = len + left + right;
    let mut out = Vec::with_capacity(rows * new_len);
    for row in x.data().chunks_exact(len) {
        for j in 0..new_len {
            out.push(row[reflect_index(j as isize - left as isize, len)]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 1] = new_len;
    Tensor::new(&shape, out)
}

fn pad_reflect_backward<T: Real>(x: &Tensor<T>, g: &Tensor<T>, left: usize, right: usize) -> Result<Tensor<T>> {
    let len = x.dim(x.rank() - 1);
    let new_len = len + left + right;
    let mut gx = vec![T::zero(); x.len()];
    for (grow, xrow) in g.data().chunks_exact(new_len).zip(gx.chunks_exact_mut(len)) {
        for (j, &v) in grow.iter().enumerate() {
            xrow[reflect_index(j as isize - left as isize, len)] += v;
        }
    }
    Tensor::new(x.shape(), gx)
}

fn pool_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 || len + 2 * padding < kernel {
        return Err(shape_err!("avg_pool1d", "length {} kernel {} stride {}", len, kernel, stride));
    }
    Ok((len + 2 * padding - kernel) / stride + 1)
}

fn avg_pool1d<T: Real>(x: &Tensor<T>, kernel: usize, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let r = x.rank();
    let len = x.dim(r - 1);
    let out_len = pool_out_len(len, kernel, stride, padding)?;
    let inv = T::from_f64(1.0 / kernel as f64);
    let mut out = Vec::with_capacity(x.len() / len.max(1) * out_len);
    for row in x.data().chunks_exact(len) {
        for t in 0..out_len {
            let start = (t * stride) as isize - padding as isize;
            let mut s = T::zero();
            for j in 0..kernel as isize {
                let i = start + j;
                if i >= 0 && (i as usize) < len {
                    s += row[i as usize];
                }
            }
            out.push(s * inv);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 1] = out_len;
    Tensor::new(&shape, out)
}

fn avg_pool1d_backward<T: Real>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let len = x.dim(x.rank() - 1);
    let out_len = pool_out_len(len, kernel, stride, padding)?;
    let inv = T::from_f64(1.0 / kernel as f64);
    let mut gx = vec![T::zero(); x.len()];
    for (grow, xrow) in g.data().chunks_exact(out_len).zip(gx.chunks_exact_mut(len)) {
        for (t, &gv) in grow.iter().enumerate() {
            let start = (t * stride) as isize - padding as isize;
            for j in 0..kernel as isize {
                let i = start + j;
                if i >= 0 && (i as usize) < len {
                    xrow[i as usize] += gv * inv;
                }
            }
        }
    }
    Tensor::new(x.shape(), gx)
}

fn std_normal_pdf<T: Real>(x: T) -> T {
    let inv_sqrt_2pi = T::from_f64(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-(x * x) * T::from_f64(0.5)).exp()
}

fn std_normal_cdf<T: Real>(x: T) -> T {
    T::from_f64(0.5) * (T::one() + (x * T::FRAC_1_SQRT_2()).erf())
}

fn unary_forward<T: Real>(x: &Tensor<T>, u: Unary) -> Tensor<T> {
    match u {
        Unary::Tanh => x.map(|v| v.tanh()),
        Unary::Gelu => x.map(|v| v * std_normal_cdf(v)),
        Unary::LeakyRelu(s) => {
            let s = T::from_f64(s);
            x.map(|v| if v > T::zero() { v } else { v * s })
        }
        Unary::Sqrt => x.map(|v| v.sqrt()),
        Unary::Log => x.map(|v| v.ln()),
        Unary::Exp => x.map(|v| v.exp()),
        Unary::Abs => x.map(|v| v.abs()),
        Unary::Square => x.map(|v| v * v),
        Unary::ClampMin(c) => {
            let c = T::from_f64(c);
            x.map(|v| if v > c { v } else { c })
        }
        Unary::Neg => x.map(|v| -v),
    }
}

fn unary_backward<T: Real>(x: &Tensor<T>, y: &Tensor<T>, g: &Tensor<T>, u: Unary) -> Tensor<T> {
    let one = T::one();
    let two = one + one;
    let f = |dy: &dyn Fn(T, T) -> T| -> Tensor<T> {
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .zip(g.data())
            .map(|((&xv, &yv), &gv)| gv * dy(xv, yv))
            .collect();
        Tensor::new(x.shape(), data).expect("same shape")
    };
    match u {
        Unary::Tanh => f(&|_, yv| one - yv * yv),
        Unary::Gelu => f(&|xv, _| std_normal_cdf(xv) + xv * std_normal_pdf(xv)),
        Unary::LeakyRelu(s) => {
            let s = T::from_f64(s);
            f(&|xv, _| if xv > T::zero() { one } else { s })
        }
        Unary::Sqrt => f(&|_, yv| one / (two * yv)),
        Unary::Log => f(&|xv, _| one / xv),
        Unary::Exp => f(&|_, yv| yv),
        Unary::Abs => f(&|xv, _| {
            if xv > T::zero() {
                one
            } else if xv < T::zero() {
                -one
            } else {
                T::zero()
            }
        }),
        Unary::Square => f(&|xv, _| two * xv),
        Unary::ClampMin(c) => {
            let c = T::from_f64(c);
            f(&|xv, _| if xv > c { one } else { T::zero() })
        }
        Unary::Neg => f(&|_, _| -one),
    }
}

fn softmax<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.dim(x.rank() - 1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn softmax_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let n = y.dim(y.rank() - 1);
    let mut gx = g.clone();
    for (grow, yrow) in gx.data_mut().chunks_exact_mut(n).zip(y.data().chunks_exact(n)) {
        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
        for (gv, &yv) in grow.iter_mut().zip(yrow) {
            *gv = yv * (*gv - dot);
        }
    }
    gx
}

fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let n = x.dim(x.rank() - 1);
    if gamma.shape() != [n] || beta.shape() != [n] {
        return Err(shape_err!("layer_norm", "affine params {:?}/{:?} for width {}", gamma.shape(), beta.shape(), n));
    }
    let eps = T::from_f64(eps);
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        let mean = row.iter().copied().sum::<T>() * inv_n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let rstd = T::one() / (var + eps).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rstd * gamma.data()[i] + beta.data()[i];
        }
    }
    Ok(out)
}

fn layer_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let n = x.dim(x.rank() - 1);
    let eps = T::from_f64(eps);
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut gx = vec![T::zero(); x.len()];
    let mut gg = vec![T::zero(); n];
    let mut gb = vec![T::zero(); n];
    let mut xhat = vec![T::zero(); n];
    let mut dxhat = vec![T::zero(); n];
    for ((xrow, grow), gxrow) in x
        .data()
        .chunks_exact(n)
        .zip(g.data().chunks_exact(n))
        .zip(gx.chunks_exact_mut(n))
    {
        let mean = xrow.iter().copied().sum::<T>() * inv_n;
        let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let rstd = T::one() / (var + eps).sqrt();
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for i in 0..n {
            xhat[i] = (xrow[i] - mean) * rstd;
            dxhat[i] = grow[i] * gamma.data()[i];
            gg[i] += grow[i] * xhat[i];
            gb[i] += grow[i];
            m1 += dxhat[i];
            m2 += dxhat[i] * xhat[i];
        }
        m1 *= inv_n;
        m2 *= inv_n;
        for i in 0..n {
            gxrow[i] = rstd * (dxhat[i] - m1 - xhat[i] * m2);
        }
    }
    Ok((
        Tensor::new(x.shape(), gx)?,
        Tensor::new(&[n], gg)?,
        Tensor::new(&[n], gb)?,
    ))
}
