//! Slice-level forward and backward kernels behind the differentiable ops.
//!
//! Every kernel works on contiguous row-major buffers. Axis-wise kernels view
//! a tensor as `[outer, axis, inner]`.

use crate::numcore::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.padding - self.kernel) / self.stride + 1,
            (self.width + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `k`.
    #[inline]
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.padding as isize;
        // need 0 <= o*s + off <= extent-1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_num = extent as isize - 1 - off;
        let hi = if hi_num < 0 {
            0
        } else {
            (hi_num / s + 1).min(out as isize)
        };
        (lo.max(0) as usize, hi.max(lo).max(0) as usize)
    }

    #[inline]
    fn in_channel(&self, o: usize, j: usize) -> usize {
        let in_per = self.in_ch / self.groups;
        let out_per = self.out_ch / self.groups;
        (o / out_per) * in_per + j
    }
}

/// Grouped 2-D cross-correlation. `w` has shape `(out_ch, in_ch/groups, k, k)`.
pub fn conv2d<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let k = g.kernel;
    let in_per = g.in_ch / g.groups;
    let hw = g.height * g.width;
    let mut out = vec![T::zero(); g.batch * g.out_ch * oh * ow];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let plane = &mut out[(b * g.out_ch + o) * oh * ow..][..oh * ow];
            if let Some(bias) = bias {
                plane.iter_mut().for_each(|v| *v = bias[o]);
            }
            for j in 0..in_per {
                let ic = g.in_ch_of(o, j);
                let xin = &x[(b * g.in_ch + ic) * hw..][..hw];
                for ky in 0..k {
                    let (y_lo, y_hi) = g.valid_range(ky, g.height, oh);
                    for kx in 0..k {
                        let wv = w[((o * in_per + j) * k + ky) * k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (x_lo, x_hi) = g.valid_range(kx, g.width, ow);
                        for oy in y_lo..y_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let row_in = &xin[iy * g.width..][..g.width];
                            let row_out = &mut plane[oy * ow..][..ow];
                            for ox in x_lo..x_hi {
                                let ix = ox * g.stride + kx - g.padding;
                                row_out[ox] += wv * row_in[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (oh, ow) = g.out_hw();
    let k = g.kernel;
    let in_per = g.in_ch / g.groups;
    let hw = g.height * g.width;
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); g.out_ch];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let gplane = &gout[(b * g.out_ch + o) * oh * ow..][..oh * ow];
            gb[o] += gplane.iter().copied().sum::<T>();
            for j in 0..in_per {
                let ic = g.in_ch_of(o, j);
                let xoff = (b * g.in_ch + ic) * hw;
                for ky in 0..k {
                    let (y_lo, y_hi) = g.valid_range(ky, g.height, oh);
                    for kx in 0..k {
                        let widx = ((o * in_per + j) * k + ky) * k + kx;
                        let wv = w[widx];
                        let (x_lo, x_hi) = g.valid_range(kx, g.width, ow);
                        let mut acc = T::zero();
                        for oy in y_lo..y_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let grow = &gplane[oy * ow..][..ow];
                            let base = xoff + iy * g.width;
                            for ox in x_lo..x_hi {
                                let ix = base + ox * g.stride + kx - g.padding;
                                let go = grow[ox];
                                acc += go * x[ix];
                                gx[ix] += go * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

impl ConvGeom {
    #[inline]
    fn in_ch_of(&self, o: usize, j: usize) -> usize {
        self.in_channel(o, j)
    }
}

/// Layer normalisation over axis 1 of `[outer, ch, inner]`. Returns the output,
/// the normalised values and per-position inverse standard deviations.
pub fn layer_norm<T: Scalar>(
    x: &[T],
    outer: usize,
    ch: usize,
    inner: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); outer * inner];
    let n = T::of(ch as f64);
    for o in 0..outer {
        let base = o * ch * inner;
        for i in 0..inner {
            let mut mean = T::zero();
            for c in 0..ch {
                mean += x[base + c * inner + i];
            }
            mean /= n;
            let mut var = T::zero();
            for c in 0..ch {
                let d = x[base + c * inner + i] - mean;
                var += d * d;
            }
            var /= n;
            let is = (var + eps).sqrt().recip();
            inv_std[o * inner + i] = is;
            for c in 0..ch {
                let idx = base + c * inner + i;
                let h = (x[idx] - mean) * is;
                xhat[idx] = h;
                y[idx] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, xhat, inv_std)
}

pub fn layer_norm_backward<T: Scalar>(
    gout: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    outer: usize,
    ch: usize,
    inner: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); gout.len()];
    let mut gg = vec![T::zero(); ch];
    let mut gbeta = vec![T::zero(); ch];
    let n = T::of(ch as f64);
    for o in 0..outer {
        let base = o * ch * inner;
        for i in 0..inner {
            let mut mean_g = T::zero();
            let mut mean_gx = T::zero();
            for c in 0..ch {
                let idx = base + c * inner + i;
                let gh = gout[idx] * gamma[c];
                mean_g += gh;
                mean_gx += gh * xhat[idx];
                gg[c] += gout[idx] * xhat[idx];
                gbeta[c] += gout[idx];
            }
            mean_g /= n;
            mean_gx /= n;
            let is = inv_std[o * inner + i];
            for c in 0..ch {
                let idx = base + c * inner + i;
                let gh = gout[idx] * gamma[c];
                gx[idx] = is * (gh - mean_g - xhat[idx] * mean_gx);
            }
        }
    }
    (gx, gg, gbeta)
}

/// Affine map along axis 1 of `[outer, fin, inner]` with `w: (fout, fin)`.
pub fn linear<T: Scalar>(
    x: &[T],
    outer: usize,
    fin: usize,
    inner: usize,
    w: &[T],
    fout: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut y = vec![T::zero(); outer * fout * inner];
    for o in 0..outer {
        let xb = &x[o * fin * inner..][..fin * inner];
        let yb = &mut y[o * fout * inner..][..fout * inner];
        for j in 0..fout {
            let row = &mut yb[j * inner..][..inner];
            if let Some(b) = bias {
                row.iter_mut().for_each(|v| *v = b[j]);
            }
            for f in 0..fin {
                let wv = w[j * fin + f];
                let xr = &xb[f * inner..][..inner];
                for (r, &xv) in row.iter_mut().zip(xr) {
                    *r += wv * xv;
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    x: &[T],
    outer: usize,
    fin: usize,
    inner: usize,
    w: &[T],
    fout: usize,
    gout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); fout];
    for o in 0..outer {
        let xb = &x[o * fin * inner..][..fin * inner];
        let gxb = &mut gx[o * fin * inner..][..fin * inner];
        let gyb = &gout[o * fout * inner..][..fout * inner];
        for j in 0..fout {
            let gy = &gyb[j * inner..][..inner];
            gb[j] += gy.iter().copied().sum::<T>();
            for f in 0..fin {
                let wv = w[j * fin + f];
                let xr = &xb[f * inner..][..inner];
                let gxr = &mut gxb[f * inner..][..inner];
                let mut acc = T::zero();
                for i in 0..inner {
                    acc += gy[i] * xr[i];
                    gxr[i] += gy[i] * wv;
                }
                gw[j * fin + f] += acc;
            }
        }
    }
    (gx, gw, gb)
}

/// Numerically stable softmax along axis 1 of `[outer, n, inner]`.
pub fn softmax<T: Scalar>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * n * inner + a * inner + i;
            let m = (0..n).map(|a| x[at(a)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for a in 0..n {
                let e = (x[at(a)] - m).exp();
                y[at(a)] = e;
                z += e;
            }
            for a in 0..n {
                y[at(a)] /= z;
            }
        }
    }
    y
}

pub fn softmax_backward<T: Scalar>(
    y: &[T],
    gout: &[T],
    outer: usize,
    n: usize,
    inner: usize,
) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * n * inner + a * inner + i;
            let dot: T = (0..n).map(|a| gout[at(a)] * y[at(a)]).sum();
            for a in 0..n {
                gx[at(a)] = y[at(a)] * (gout[at(a)] - dot);
            }
        }
    }
    gx
}

/// Nearest-neighbour ×2 upsampling of `(b, c, h, w)`.
pub fn upsample2x<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                y[(p * oh + oy) * ow + ox] = x[(p * h + oy / 2) * w + ox / 2];
            }
        }
    }
    y
}

pub fn upsample2x_backward<T: Scalar>(gout: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                gx[(p * h + oy / 2) * w + ox / 2] += gout[(p * oh + oy) * ow + ox];
            }
        }
    }
    gx
}
