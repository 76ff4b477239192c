//! Forward and backward passes of the operator set.

use super::{Real, Tensor4};
use crate::error::{Error, Result};
use crate::par;

/// Gradients of a convolution with respect to input, weights and bias.
#[derive(Debug, Clone)]
pub struct Conv2dGrads<T> {
    pub dx: Tensor4<T>,
    pub dw: Tensor4<T>,
    pub db: Vec<T>,
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    /// Output columns `ox` whose input column `ox * s + kx - p` is in range.
    #[inline]
    fn ox_range(&self, kx: usize) -> std::ops::Range<usize> {
        let lo = if self.pad > kx {
            (self.pad - kx).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if self.w - 1 + self.pad >= kx {
            ((self.w - 1 + self.pad - kx) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        lo..hi.max(lo)
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

fn conv_geom<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: &[T],
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let [n, cin, h, wd] = x.shape();
    let [cout, wcin, kh, kw] = w.shape();
    if wcin != cin {
        return Err(Error::Shape(format!("conv weight expects {wcin} input channels, got {cin}")));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Shape(format!("conv kernel {kh}x{kw} must be odd")));
    }
    if b.len() != cout {
        return Err(Error::Shape(format!("bias length {} != {cout}", b.len())));
    }
    if stride == 0 {
        return Err(Error::Shape("stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw || h == 0 || wd == 0 {
        return Err(Error::Shape(format!("input {h}x{wd} too small for kernel {kh}x{kw}")));
    }
    Ok(ConvGeom {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (wd + 2 * pad - kw) / stride + 1,
        stride,
        pad,
    })
}

/// 2D cross-correlation with bias. Output size is `(H + 2p - k) / s + 1`.
pub fn conv2d<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: &[T],
    stride: usize,
    pad: usize,
) -> Result<Tensor4<T>> {
    let g = conv_geom(x, w, b, stride, pad)?;
    let mut out = Tensor4::zeros([g.n, g.cout, g.ho, g.wo]);
    let plane = g.ho * g.wo;
    par::for_each_chunk_mut(out.data_mut(), plane, |i, y| {
        let (n, o) = (i / g.cout, i % g.cout);
        y.fill(b[o]);
        for ci in 0..g.cin {
            let xp = x.plane(n, ci);
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = w.at(o, ci, ky, kx);
                    let cols = g.ox_range(kx);
                    for oy in 0..g.ho {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let xrow = &xp[iy * g.w..(iy + 1) * g.w];
                        let yrow = &mut y[oy * g.wo..(oy + 1) * g.wo];
                        for ox in cols.clone() {
                            yrow[ox] += wv * xrow[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    stride: usize,
    pad: usize,
    dy: &Tensor4<T>,
) -> Result<Conv2dGrads<T>> {
    let zeros = vec![T::zero(); w.shape()[0]];
    let g = conv_geom(x, w, &zeros, stride, pad)?;
    if dy.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(Error::Shape(format!("conv dy shape {:?}", dy.shape())));
    }
    let db: Vec<T> = (0..g.cout)
        .map(|o| (0..g.n).map(|n| dy.plane(n, o).iter().copied().sum::<T>()).sum())
        .collect();

    let mut dw = Tensor4::zeros(w.shape());
    let wchunk = g.cin * g.kh * g.kw;
    par::for_each_chunk_mut(dw.data_mut(), wchunk, |o, dwo| {
        for n in 0..g.n {
            let dyp = dy.plane(n, o);
            for ci in 0..g.cin {
                let xp = x.plane(n, ci);
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let cols = g.ox_range(kx);
                        let mut acc = T::zero();
                        for oy in 0..g.ho {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let xrow = &xp[iy * g.w..(iy + 1) * g.w];
                            let dyrow = &dyp[oy * g.wo..(oy + 1) * g.wo];
                            for ox in cols.clone() {
                                acc += dyrow[ox] * xrow[ox * g.stride + kx - g.pad];
                            }
                        }
                        dwo[(ci * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    });

    let mut dx = Tensor4::zeros(x.shape());
    par::for_each_chunk_mut(dx.data_mut(), g.h * g.w, |i, dxp| {
        let (n, ci) = (i / g.cin, i % g.cin);
        for o in 0..g.cout {
            let dyp = dy.plane(n, o);
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = w.at(o, ci, ky, kx);
                    let cols = g.ox_range(kx);
                    for oy in 0..g.ho {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let dyrow = &dyp[oy * g.wo..(oy + 1) * g.wo];
                        let dxrow = &mut dxp[iy * g.w..(iy + 1) * g.w];
                        for ox in cols.clone() {
                            dxrow[ox * g.stride + kx - g.pad] += wv * dyrow[ox];
                        }
                    }
                }
            }
        }
    });
    Ok(Conv2dGrads { dx, dw, db })
}

fn check_pointwise<T: Real>(x: &Tensor4<T>, w: &Tensor4<T>, b: &[T]) -> Result<(usize, usize)> {
    let [_, cin, _, _] = x.shape();
    let [cout, wcin, kh, kw] = w.shape();
    if wcin != cin || kh != 1 || kw != 1 || b.len() != cout {
        return Err(Error::Shape(format!(
            "pointwise weight {:?} / bias {} incompatible with input {:?}",
            w.shape(),
            b.len(),
            x.shape()
        )));
    }
    Ok((cin, cout))
}

/// 1x1 convolution: per-pixel channel mixing.
pub fn pointwise_conv<T: Real>(x: &Tensor4<T>, w: &Tensor4<T>, b: &[T]) -> Result<Tensor4<T>> {
    let (cin, cout) = check_pointwise(x, w, b)?;
    let [n, _, h, wd] = x.shape();
    let mut out = Tensor4::zeros([n, cout, h, wd]);
    par::for_each_chunk_mut(out.data_mut(), h * wd, |i, y| {
        let (n, o) = (i / cout, i % cout);
        y.fill(b[o]);
        for ci in 0..cin {
            let wv = w.data()[o * cin + ci];
            for (yv, &xv) in y.iter_mut().zip(x.plane(n, ci)) {
                *yv += wv * xv;
            }
        }
    });
    Ok(out)
}

pub fn pointwise_conv_backward<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dy: &Tensor4<T>,
) -> Result<Conv2dGrads<T>> {
    let zeros = vec![T::zero(); w.shape()[0]];
    let (cin, cout) = check_pointwise(x, w, &zeros)?;
    let [n, _, h, wd] = x.shape();
    if dy.shape() != [n, cout, h, wd] {
        return Err(Error::Shape(format!("pointwise dy shape {:?}", dy.shape())));
    }
    let db: Vec<T> = (0..cout)
        .map(|o| (0..n).map(|k| dy.plane(k, o).iter().copied().sum::<T>()).sum())
        .collect();
    let mut dw = Tensor4::zeros(w.shape());
    par::for_each_chunk_mut(dw.data_mut(), cin, |o, dwo| {
        for k in 0..n {
            let dyp = dy.plane(k, o);
            for (ci, slot) in dwo.iter_mut().enumerate() {
                *slot += dyp.iter().zip(x.plane(k, ci)).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
    });
    let mut dx = Tensor4::zeros(x.shape());
    par::for_each_chunk_mut(dx.data_mut(), h * wd, |i, dxp| {
        let (k, ci) = (i / cin, i % cin);
        for o in 0..cout {
            let wv = w.data()[o * cin + ci];
            for (d, &g) in dxp.iter_mut().zip(dy.plane(k, o)) {
                *d += wv * g;
            }
        }
    });
    Ok(Conv2dGrads { dx, dw, db })
}

fn check_corr<T: Real>(search: &Tensor4<T>, templ: &Tensor4<T>) -> Result<()> {
    let [n, c, hs, ws] = search.shape();
    let [tn, tc, ht, wt] = templ.shape();
    if tn != n || tc != c {
        return Err(Error::Shape(format!(
            "template features {:?} do not match search features {:?}",
            templ.shape(),
            search.shape()
        )));
    }
    if ht % 2 == 0 || wt % 2 == 0 {
        return Err(Error::Shape(format!("correlation kernel {ht}x{wt} must be odd")));
    }
    if ht > hs || wt > ws {
        return Err(Error::Shape(format!(
            "correlation kernel {ht}x{wt} larger than search {hs}x{ws}"
        )));
    }
    Ok(())
}

/// Per-channel cross-correlation of search features with template features
/// used as kernels, zero-padded so the output keeps the search grid.
///
/// `out[n,c,u,v] = sum_{i,j} templ[n,c,i,j] * search[n,c,u+i-ph,v+j-pw]`
/// with `ph = (ht-1)/2`, `pw = (wt-1)/2`.
pub fn depthwise_corr<T: Real>(search: &Tensor4<T>, templ: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_corr(search, templ)?;
    let [_, c, hs, ws] = search.shape();
    let [_, _, ht, wt] = templ.shape();
    let (ph, pw) = ((ht - 1) / 2, (wt - 1) / 2);
    let mut out = Tensor4::zeros(search.shape());
    par::for_each_chunk_mut(out.data_mut(), hs * ws, |i, y| {
        let (n, ch) = (i / c, i % c);
        let sp = search.plane(n, ch);
        let tp = templ.plane(n, ch);
        for ti in 0..ht {
            for tj in 0..wt {
                let tv = tp[ti * wt + tj];
                let v_lo = pw.saturating_sub(tj);
                let v_hi = (ws + pw - tj).min(ws);
                if v_lo >= v_hi {
                    continue;
                }
                for u in 0..hs {
                    let su = u + ti;
                    if su < ph || su - ph >= hs {
                        continue;
                    }
                    let srow = &sp[(su - ph) * ws..(su - ph + 1) * ws];
                    let yrow = &mut y[u * ws..(u + 1) * ws];
                    for v in v_lo..v_hi {
                        yrow[v] += tv * srow[v + tj - pw];
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of [`depthwise_corr`] with respect to both inputs.
pub fn depthwise_corr_backward<T: Real>(
    search: &Tensor4<T>,
    templ: &Tensor4<T>,
    dy: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    check_corr(search, templ)?;
    if dy.shape() != search.shape() {
        return Err(Error::Shape(format!("corr dy shape {:?}", dy.shape())));
    }
    let [n, c, hs, ws] = search.shape();
    let [_, _, ht, wt] = templ.shape();
    let (ph, pw) = ((ht - 1) / 2, (wt - 1) / 2);
    let planes: Vec<(Vec<T>, Vec<T>)> = par::map_range(n * c, |i| {
        let (k, ch) = (i / c, i % c);
        let sp = search.plane(k, ch);
        let tp = templ.plane(k, ch);
        let dyp = dy.plane(k, ch);
        let mut ds = vec![T::zero(); hs * ws];
        let mut dt = vec![T::zero(); ht * wt];
        for ti in 0..ht {
            for tj in 0..wt {
                let tv = tp[ti * wt + tj];
                let v_lo = pw.saturating_sub(tj);
                let v_hi = (ws + pw - tj).min(ws);
                if v_lo >= v_hi {
                    continue;
                }
                let mut acc = T::zero();
                for u in 0..hs {
                    let su = u + ti;
                    if su < ph || su - ph >= hs {
                        continue;
                    }
                    let row = (su - ph) * ws;
                    let dyrow = &dyp[u * ws..(u + 1) * ws];
                    for v in v_lo..v_hi {
                        let si = row + v + tj - pw;
                        acc += dyrow[v] * sp[si];
                        ds[si] += tv * dyrow[v];
                    }
                }
                dt[ti * wt + tj] = acc;
            }
        }
        (ds, dt)
    });
    let mut ds = Vec::with_capacity(search.len());
    let mut dt = Vec::with_capacity(templ.len());
    for (a, b) in planes {
        ds.extend(a);
        dt.extend(b);
    }
    Ok((
        Tensor4::from_vec(search.shape(), ds)?,
        Tensor4::from_vec(templ.shape(), dt)?,
    ))
}

/// `out(n, c, h*r+i, w*r+j) = in(n, c*r*r + i*r + j, h, w)`.
pub fn pixel_shuffle<T: Real>(x: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    let [n, cr, h, w] = x.shape();
    if r == 0 || cr % (r * r) != 0 {
        return Err(Error::Shape(format!("{cr} channels not divisible by r^2 = {}", r * r)));
    }
    let c = cr / (r * r);
    let mut out = Tensor4::zeros([n, c, h * r, w * r]);
    let (oh, ow) = (h * r, w * r);
    for k in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src = x.plane(k, ch * r * r + i * r + j);
                    let base = (k * c + ch) * oh * ow;
                    for y in 0..h {
                        for xx in 0..w {
                            out.data_mut()[base + (y * r + i) * ow + xx * r + j] = src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`pixel_shuffle`]; also its backward pass.
pub fn pixel_unshuffle<T: Real>(x: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    let [n, c, oh, ow] = x.shape();
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(Error::Shape(format!("spatial size {oh}x{ow} not divisible by {r}")));
    }
    let (h, w) = (oh / r, ow / r);
    let mut out = Tensor4::zeros([n, c * r * r, h, w]);
    for k in 0..n {
        for ch in 0..c {
            let src = x.plane(k, ch);
            for i in 0..r {
                for j in 0..r {
                    let oc = ch * r * r + i * r + j;
                    let base = (k * c * r * r + oc) * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            out.data_mut()[base + y * w + xx] = src[(y * r + i) * ow + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn map<T: Real>(x: &Tensor4<T>, f: impl Fn(T) -> T) -> Tensor4<T> {
    Tensor4::from_fn(x.shape(), |i| f(x.data()[i]))
}

fn zip_grad<T: Real>(a: &Tensor4<T>, dy: &Tensor4<T>, f: impl Fn(T, T) -> T) -> Result<Tensor4<T>> {
    if a.shape() != dy.shape() {
        return Err(Error::Shape(format!("activation dy {:?} vs {:?}", dy.shape(), a.shape())));
    }
    Ok(Tensor4::from_fn(a.shape(), |i| f(a.data()[i], dy.data()[i])))
}

pub fn relu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    map(x, |v| if v > T::zero() { v } else { T::zero() })
}

/// Backward of relu given its input.
pub fn relu_backward<T: Real>(x: &Tensor4<T>, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
    zip_grad(x, dy, |v, g| if v > T::zero() { g } else { T::zero() })
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(v: T) -> T {
    // Clamp the exponent so extreme logits saturate without overflow.
    let v = v.max(T::of(-80.0)).min(T::of(80.0));
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    map(x, sigmoid_scalar)
}

/// Backward of sigmoid given its output.
pub fn sigmoid_backward<T: Real>(y: &Tensor4<T>, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
    zip_grad(y, dy, |s, g| g * s * (T::one() - s))
}

pub fn tanh<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    map(x, |v| v.tanh())
}

/// Backward of tanh given its output.
pub fn tanh_backward<T: Real>(y: &Tensor4<T>, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
    zip_grad(y, dy, |t, g| g * (T::one() - t * t))
}
