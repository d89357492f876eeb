//! Raw slice kernels behind the graph ops. Shapes are validated by the caller.

/// Geometry of a 1-D convolution over `[B, C, L]` with kernel `[O, C, K]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv1dGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub len: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_len: usize,
}

impl Conv1dGeom {
    /// Length of each stride phase of the zero-padded input.
    #[inline]
    fn phase_len(&self) -> usize {
        self.out_len + (self.ksize - 1) / self.stride
    }

    /// Splits channel `xs` (zero-padded by `pad` on the left) into `stride`
    /// phases so that tap `t` of output `i` reads `phase[t % s][i + t / s]`.
    fn split(&self, xs: &[f64], buf: &mut [f64]) {
        let (s, m) = (self.stride, self.phase_len());
        buf.iter_mut().for_each(|v| *v = 0.0);
        for (r, ph) in buf.chunks_exact_mut(m).enumerate().take(s) {
            for (i, v) in ph.iter_mut().enumerate() {
                let pos = i * s + r;
                if pos >= self.pad && pos - self.pad < self.len {
                    *v = xs[pos - self.pad];
                }
            }
        }
    }

    /// Inverse of [`Conv1dGeom::split`] for gradients: adds phase values back, dropping padding.
    fn merge(&self, buf: &[f64], gx: &mut [f64]) {
        let (s, m) = (self.stride, self.phase_len());
        for (r, ph) in buf.chunks_exact(m).enumerate().take(s) {
            for (i, &v) in ph.iter().enumerate() {
                let pos = i * s + r;
                if pos >= self.pad && pos - self.pad < self.len {
                    gx[pos - self.pad] += v;
                }
            }
        }
    }
}

/// `y += a * x`.
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with eight independent accumulators (fixed summation order).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub fn conv1d_forward(g: &Conv1dGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let (c_in, l, k, lo_len, s) = (g.in_ch, g.len, g.ksize, g.out_len, g.stride);
    let m = g.phase_len();
    let mut buf = alloc::vec![0.0; c_in * s * m];
    for b in 0..g.batch {
        for c in 0..c_in {
            g.split(&x[(b * c_in + c) * l..][..l], &mut buf[c * s * m..][..s * m]);
        }
        for o in 0..g.out_ch {
            let y = &mut out[(b * g.out_ch + o) * lo_len..][..lo_len];
            let b0 = bias.map_or(0.0, |bs| bs[o]);
            y.iter_mut().for_each(|v| *v = b0);
            for c in 0..c_in {
                let ws = &w[(o * c_in + c) * k..][..k];
                for (t, &wt) in ws.iter().enumerate() {
                    let src = &buf[c * s * m + (t % s) * m + t / s..][..lo_len];
                    axpy(y, wt, src);
                }
            }
        }
    }
}

/// Accumulates input/kernel/bias gradients for a 1-D convolution.
pub fn conv1d_backward(
    g: &Conv1dGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let (c_in, l, k, lo_len, s) = (g.in_ch, g.len, g.ksize, g.out_len, g.stride);
    let m = g.phase_len();
    if let Some(gb) = gb {
        for b in 0..g.batch {
            for o in 0..g.out_ch {
                gb[o] += gout[(b * g.out_ch + o) * lo_len..][..lo_len].iter().sum::<f64>();
            }
        }
    }
    let mut buf = alloc::vec![0.0; c_in * s * m];
    let mut gbuf = alloc::vec![0.0; if gx.is_some() { c_in * s * m } else { 0 }];
    for b in 0..g.batch {
        if gw.is_some() {
            for c in 0..c_in {
                g.split(&x[(b * c_in + c) * l..][..l], &mut buf[c * s * m..][..s * m]);
            }
        }
        gbuf.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..g.out_ch {
            let gy = &gout[(b * g.out_ch + o) * lo_len..][..lo_len];
            for c in 0..c_in {
                let woff = (o * c_in + c) * k;
                for t in 0..k {
                    let off = c * s * m + (t % s) * m + t / s;
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[woff + t] += dot(gy, &buf[off..off + lo_len]);
                    }
                    if gx.is_some() {
                        axpy(&mut gbuf[off..off + lo_len], w[woff + t], gy);
                    }
                }
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            for c in 0..c_in {
                g.merge(&gbuf[c * s * m..][..s * m], &mut gx[(b * c_in + c) * l..][..l]);
            }
        }
    }
}

/// Geometry of a same-padded, stride-1 2-D convolution over `[B, C, H, W]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl Conv2dGeom {
    /// Row width of the padded plane. Rows are laid out with this pitch so that
    /// every kernel offset becomes one contiguous shifted range; the extra
    /// `kw - 1` columns of each output row are scratch.
    #[inline]
    fn pitch(&self) -> usize {
        self.w + self.kw - 1
    }

    /// Padded input plane length, with room for the last shifted read.
    #[inline]
    fn padded_len(&self) -> usize {
        (self.h + self.kh - 1) * self.pitch() + self.kw - 1
    }

    #[inline]
    fn out_span(&self) -> usize {
        self.h * self.pitch()
    }

    fn pad_plane(&self, xs: &[f64], buf: &mut [f64]) {
        let (pw, ph, pitch) = (self.kw / 2, self.kh / 2, self.pitch());
        buf.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.h {
            buf[(i + ph) * pitch + pw..][..self.w].copy_from_slice(&xs[i * self.w..][..self.w]);
        }
    }
}

pub fn conv2d_forward(g: &Conv2dGeom, x: &[f64], k: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let (h, w, kh, kw) = (g.h, g.w, g.kh, g.kw);
    let (plane, pitch, plen, span) = (h * w, g.pitch(), g.padded_len(), g.out_span());
    let mut xp = alloc::vec![0.0; g.in_ch * plen];
    let mut acc = alloc::vec![0.0; span];
    for b in 0..g.batch {
        for c in 0..g.in_ch {
            g.pad_plane(&x[(b * g.in_ch + c) * plane..][..plane], &mut xp[c * plen..][..plen]);
        }
        for o in 0..g.out_ch {
            let b0 = bias.map_or(0.0, |bs| bs[o]);
            acc.iter_mut().for_each(|v| *v = b0);
            for c in 0..g.in_ch {
                let src = &xp[c * plen..][..plen];
                let ks = &k[(o * g.in_ch + c) * kh * kw..][..kh * kw];
                for u in 0..kh {
                    for v in 0..kw {
                        axpy(&mut acc, ks[u * kw + v], &src[u * pitch + v..][..span]);
                    }
                }
            }
            let y = &mut out[(b * g.out_ch + o) * plane..][..plane];
            for i in 0..h {
                y[i * w..][..w].copy_from_slice(&acc[i * pitch..][..w]);
            }
        }
    }
}

pub fn conv2d_backward(
    g: &Conv2dGeom,
    x: &[f64],
    k: &[f64],
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gk: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let (h, w, kh, kw) = (g.h, g.w, g.kh, g.kw);
    let (ph, pw) = (kh / 2, kw / 2);
    let (plane, pitch, plen, span) = (h * w, g.pitch(), g.padded_len(), g.out_span());
    if let Some(gb) = gb {
        for b in 0..g.batch {
            for o in 0..g.out_ch {
                gb[o] += gout[(b * g.out_ch + o) * plane..][..plane].iter().sum::<f64>();
            }
        }
    }
    let mut xp = alloc::vec![0.0; if gk.is_some() { g.in_ch * plen } else { 0 }];
    let mut gxp = alloc::vec![0.0; if gx.is_some() { g.in_ch * plen } else { 0 }];
    // output gradient on the pitched layout, scratch columns zero
    let mut gyp = alloc::vec![0.0; span];
    for b in 0..g.batch {
        if gk.is_some() {
            for c in 0..g.in_ch {
                g.pad_plane(&x[(b * g.in_ch + c) * plane..][..plane], &mut xp[c * plen..][..plen]);
            }
        }
        gxp.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..g.out_ch {
            let gy = &gout[(b * g.out_ch + o) * plane..][..plane];
            for i in 0..h {
                gyp[i * pitch..][..w].copy_from_slice(&gy[i * w..][..w]);
            }
            for c in 0..g.in_ch {
                let koff = (o * g.in_ch + c) * kh * kw;
                for u in 0..kh {
                    for v in 0..kw {
                        let off = c * plen + u * pitch + v;
                        if let Some(gk) = gk.as_deref_mut() {
                            gk[koff + u * kw + v] += dot(&gyp, &xp[off..off + span]);
                        }
                        if gx.is_some() {
                            axpy(&mut gxp[off..off + span], k[koff + u * kw + v], &gyp);
                        }
                    }
                }
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            for c in 0..g.in_ch {
                let dst = &mut gx[(b * g.in_ch + c) * plane..][..plane];
                let src = &gxp[c * plen..][..plen];
                for i in 0..h {
                    for (d, &s) in dst[i * w..][..w].iter_mut().zip(&src[(i + ph) * pitch + pw..][..w]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Per-group normalization statistics saved for the backward pass.
#[derive(Debug, Clone)]
pub struct NormSaved {
    /// Normalized values `(x - mean) / (std + eps)`, same layout as the input.
    pub xhat: alloc::vec::Vec<f64>,
    /// Standard deviation per (sample, channel) group.
    pub std: alloc::vec::Vec<f64>,
    pub eps: f64,
}

/// Normalizes each contiguous group of `group` values over `channels` channels.
/// `x` is laid out `[B, C, group]`; `gamma`/`beta` are per channel.
pub fn instance_norm_forward(
    x: &[f64],
    channels: usize,
    group: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
) -> NormSaved {
    let groups = x.len() / group;
    let mut xhat = alloc::vec![0.0; x.len()];
    let mut stds = alloc::vec![0.0; groups];
    let inv_n = 1.0 / group as f64;
    for gi in 0..groups {
        let c = gi % channels;
        let xs = &x[gi * group..][..group];
        let mean = xs.iter().sum::<f64>() * inv_n;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_n;
        let std = libm::sqrt(var);
        let inv = 1.0 / (std + eps);
        stds[gi] = std;
        let xh = &mut xhat[gi * group..][..group];
        let ys = &mut out[gi * group..][..group];
        for ((h, y), &v) in xh.iter_mut().zip(ys.iter_mut()).zip(xs) {
            *h = (v - mean) * inv;
            *y = gamma[c] * *h + beta[c];
        }
    }
    NormSaved { xhat, std: stds, eps }
}

#[allow(clippy::too_many_arguments)]
pub fn instance_norm_backward(
    saved: &NormSaved,
    channels: usize,
    group: usize,
    gamma: &[f64],
    gout: &[f64],
    gx: Option<&mut [f64]>,
    ggamma: Option<&mut [f64]>,
    gbeta: Option<&mut [f64]>,
) {
    let groups = gout.len() / group;
    if let Some(gg) = ggamma {
        for gi in 0..groups {
            let c = gi % channels;
            let gy = &gout[gi * group..][..group];
            let xh = &saved.xhat[gi * group..][..group];
            gg[c] += gy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    if let Some(gbt) = gbeta {
        for gi in 0..groups {
            gbt[gi % channels] += gout[gi * group..][..group].iter().sum::<f64>();
        }
    }
    if let Some(gx) = gx {
        let n = group as f64;
        for gi in 0..groups {
            let c = gi % channels;
            let std = saved.std[gi];
            let inv = 1.0 / (std + saved.eps);
            let gy = &gout[gi * group..][..group];
            let xh = &saved.xhat[gi * group..][..group];
            // dL/dxhat = gamma * gy
            let mean_g = gy.iter().sum::<f64>() * gamma[c] / n;
            let dot = gy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() * gamma[c];
            let coef = if std > 0.0 { dot / (n * std) } else { 0.0 };
            let dst = &mut gx[gi * group..][..group];
            for ((d, &g), &h) in dst.iter_mut().zip(gy).zip(xh) {
                *d += inv * (gamma[c] * g - mean_g) - h * coef;
            }
        }
    }
}
