//! Raw numeric kernels behind the graph ops.
//!
//! All kernels accumulate into their output slice (`out += ...`); callers zero
//! the buffer first. Parallel variants split work across disjoint output
//! regions only, and the per-element summation order never depends on the
//! thread count, so results are bit-identical for any pool size.

use rayon::prelude::*;

/// Multiply-accumulate count above which a kernel bothers with rayon.
const PAR_THRESHOLD: usize = 1 << 14;

/// out[m,p] += a[m,k] * b[k,p]
pub fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, p: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    let row = |i: usize, out_row: &mut [f64]| {
        for t in 0..k {
            let av = a[i * k + t];
            let brow = &b[t * p..(t + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * p >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(p).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(p).enumerate() {
            row(i, r);
        }
    }
}

/// out[m,p] += a[m,k] * b[p,k]^T
pub fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, p: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), p * k);
    debug_assert_eq!(out.len(), m * p);
    let row = |i: usize, out_row: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for t in 0..k {
                s += arow[t] * brow[t];
            }
            *o += s;
        }
    };
    if m * k * p >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(p).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(p).enumerate() {
            row(i, r);
        }
    }
}

/// out[m,p] += a[k,m]^T * b[k,p]
pub fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, p: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    let row = |i: usize, out_row: &mut [f64]| {
        for t in 0..k {
            let av = a[t * m + i];
            let brow = &b[t * p..(t + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * p >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(p).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(p).enumerate() {
            row(i, r);
        }
    }
}

/// Static geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

impl Conv2dDims {
    pub fn new(
        n: usize,
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        assert!(stride >= 1, "conv2d stride must be >= 1");
        assert!(ksize >= 1, "conv2d kernel must be >= 1");
        assert!(
            h + 2 * pad >= ksize && w + 2 * pad >= ksize,
            "conv2d kernel {}x{} larger than padded input {}x{}",
            ksize,
            ksize,
            h + 2 * pad,
            w + 2 * pad
        );
        let hout = (h + 2 * pad - ksize) / stride + 1;
        let wout = (w + 2 * pad - ksize) / stride + 1;
        Self { n, cin, h, w, cout, ksize, stride, pad, hout, wout }
    }

    /// Range of output rows whose receptive field stays inside the input for
    /// kernel row `kh` (and the same for columns with `kw`).
    fn out_range(&self, len_in: usize, len_out: usize, koff: usize) -> (usize, usize) {
        let lo = if self.pad > koff { (self.pad - koff + self.stride - 1) / self.stride } else { 0 };
        if len_in + self.pad < koff + 1 {
            return (1, 0); // empty
        }
        let hi = ((len_in - 1 + self.pad - koff) / self.stride).min(len_out - 1);
        (lo, hi)
    }
}

/// out[n,co,ho,wo] += sum_{ci,kh,kw} x[n,ci,ho*s-p+kh,wo*s-p+kw] * k[co,ci,kh,kw]
///
/// Zero padding: out-of-range taps are skipped.
pub fn conv2d_fwd(x: &[f64], kern: &[f64], d: &Conv2dDims, out: &mut [f64]) {
    debug_assert_eq!(x.len(), d.n * d.cin * d.h * d.w);
    debug_assert_eq!(kern.len(), d.cout * d.cin * d.ksize * d.ksize);
    debug_assert_eq!(out.len(), d.n * d.cout * d.hout * d.wout);
    let plane = |idx: usize, op: &mut [f64]| {
        let (ni, co) = (idx / d.cout, idx % d.cout);
        for ci in 0..d.cin {
            let xbase = (ni * d.cin + ci) * d.h * d.w;
            for kh in 0..d.ksize {
                let (ho_lo, ho_hi) = d.out_range(d.h, d.hout, kh);
                if ho_lo > ho_hi {
                    continue;
                }
                for kw in 0..d.ksize {
                    let (wo_lo, wo_hi) = d.out_range(d.w, d.wout, kw);
                    if wo_lo > wo_hi {
                        continue;
                    }
                    let kv = kern[((co * d.cin + ci) * d.ksize + kh) * d.ksize + kw];
                    for ho in ho_lo..=ho_hi {
                        let hi_ = ho * d.stride + kh - d.pad;
                        let xrow = &x[xbase + hi_ * d.w..xbase + (hi_ + 1) * d.w];
                        let orow = &mut op[ho * d.wout..(ho + 1) * d.wout];
                        for wo in wo_lo..=wo_hi {
                            orow[wo] += kv * xrow[wo * d.stride + kw - d.pad];
                        }
                    }
                }
            }
        }
    };
    let work = d.cin * d.ksize * d.ksize * d.hout * d.wout;
    if work * d.n * d.cout >= PAR_THRESHOLD && d.n * d.cout > 1 {
        out.par_chunks_mut(d.hout * d.wout).enumerate().for_each(|(i, p)| plane(i, p));
    } else {
        for (i, p) in out.chunks_mut(d.hout * d.wout).enumerate() {
            plane(i, p);
        }
    }
}

/// dx[n,ci,hi,wi] += sum_{co,kh,kw} k[co,ci,kh,kw] * dout[n,co,ho,wo]
pub fn conv2d_bwd_input(kern: &[f64], dout: &[f64], d: &Conv2dDims, dx: &mut [f64]) {
    debug_assert_eq!(dx.len(), d.n * d.cin * d.h * d.w);
    let plane = |idx: usize, dxp: &mut [f64]| {
        let (ni, ci) = (idx / d.cin, idx % d.cin);
        for co in 0..d.cout {
            let dbase = (ni * d.cout + co) * d.hout * d.wout;
            for kh in 0..d.ksize {
                let (ho_lo, ho_hi) = d.out_range(d.h, d.hout, kh);
                if ho_lo > ho_hi {
                    continue;
                }
                for kw in 0..d.ksize {
                    let (wo_lo, wo_hi) = d.out_range(d.w, d.wout, kw);
                    if wo_lo > wo_hi {
                        continue;
                    }
                    let kv = kern[((co * d.cin + ci) * d.ksize + kh) * d.ksize + kw];
                    for ho in ho_lo..=ho_hi {
                        let hi_ = ho * d.stride + kh - d.pad;
                        let drow = &dout[dbase + ho * d.wout..dbase + (ho + 1) * d.wout];
                        let xrow = &mut dxp[hi_ * d.w..(hi_ + 1) * d.w];
                        for wo in wo_lo..=wo_hi {
                            xrow[wo * d.stride + kw - d.pad] += kv * drow[wo];
                        }
                    }
                }
            }
        }
    };
    let work = d.cout * d.ksize * d.ksize * d.hout * d.wout;
    if work * d.n * d.cin >= PAR_THRESHOLD && d.n * d.cin > 1 {
        dx.par_chunks_mut(d.h * d.w).enumerate().for_each(|(i, p)| plane(i, p));
    } else {
        for (i, p) in dx.chunks_mut(d.h * d.w).enumerate() {
            plane(i, p);
        }
    }
}

/// dk[co,ci,kh,kw] += sum_{n,ho,wo} dout[n,co,ho,wo] * x[n,ci,ho*s-p+kh,wo*s-p+kw]
pub fn conv2d_bwd_kernel(x: &[f64], dout: &[f64], d: &Conv2dDims, dk: &mut [f64]) {
    debug_assert_eq!(dk.len(), d.cout * d.cin * d.ksize * d.ksize);
    let per_cout = |co: usize, dkc: &mut [f64]| {
        for ci in 0..d.cin {
            for kh in 0..d.ksize {
                let (ho_lo, ho_hi) = d.out_range(d.h, d.hout, kh);
                if ho_lo > ho_hi {
                    continue;
                }
                for kw in 0..d.ksize {
                    let (wo_lo, wo_hi) = d.out_range(d.w, d.wout, kw);
                    if wo_lo > wo_hi {
                        continue;
                    }
                    let mut s = 0.0;
                    for ni in 0..d.n {
                        let dbase = (ni * d.cout + co) * d.hout * d.wout;
                        let xbase = (ni * d.cin + ci) * d.h * d.w;
                        for ho in ho_lo..=ho_hi {
                            let hi_ = ho * d.stride + kh - d.pad;
                            let drow = &dout[dbase + ho * d.wout..dbase + (ho + 1) * d.wout];
                            let xrow = &x[xbase + hi_ * d.w..xbase + (hi_ + 1) * d.w];
                            for wo in wo_lo..=wo_hi {
                                s += drow[wo] * xrow[wo * d.stride + kw - d.pad];
                            }
                        }
                    }
                    dkc[(ci * d.ksize + kh) * d.ksize + kw] += s;
                }
            }
        }
    };
    let work = d.cin * d.ksize * d.ksize * d.n * d.hout * d.wout;
    if work * d.cout >= PAR_THRESHOLD && d.cout > 1 {
        dk.par_chunks_mut(d.cin * d.ksize * d.ksize)
            .enumerate()
            .for_each(|(co, c)| per_cout(co, c));
    } else {
        for (co, c) in dk.chunks_mut(d.cin * d.ksize * d.ksize).enumerate() {
            per_cout(co, c);
        }
    }
}

/// Per-axis interpolation stencil for bilinear resizing.
#[derive(Debug, Clone, Copy)]
pub struct Lerp {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
}

/// Half-pixel-center sampling: source position of output index `i` is
/// `(i + 0.5) * src/dst - 0.5`, clamped to the valid range. When sizes match
/// the stencil degenerates to the identity.
pub fn bilinear_axis(src_len: usize, dst_len: usize) -> Vec<Lerp> {
    assert!(src_len >= 1 && dst_len >= 1);
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|i| {
            let mut s = (i as f64 + 0.5) * scale - 0.5;
            let max = (src_len - 1) as f64;
            s = s.clamp(0.0, max);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            Lerp { i0, i1, frac: s - i0 as f64 }
        })
        .collect()
}

/// out[n,c,i,j] += bilinear sample of x at the stencil positions.
pub fn bilinear_fwd(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    ys: &[Lerp],
    xs: &[Lerp],
    out: &mut [f64],
) {
    let (oh, ow) = (ys.len(), xs.len());
    debug_assert_eq!(x.len(), planes * h * w);
    debug_assert_eq!(out.len(), planes * oh * ow);
    let plane = |idx: usize, op: &mut [f64]| {
        let xp = &x[idx * h * w..(idx + 1) * h * w];
        for (i, ly) in ys.iter().enumerate() {
            let r0 = &xp[ly.i0 * w..(ly.i0 + 1) * w];
            let r1 = &xp[ly.i1 * w..(ly.i1 + 1) * w];
            let orow = &mut op[i * ow..(i + 1) * ow];
            for (j, lx) in xs.iter().enumerate() {
                let top = r0[lx.i0] * (1.0 - lx.frac) + r0[lx.i1] * lx.frac;
                let bot = r1[lx.i0] * (1.0 - lx.frac) + r1[lx.i1] * lx.frac;
                orow[j] += top * (1.0 - ly.frac) + bot * ly.frac;
            }
        }
    };
    if planes * oh * ow >= PAR_THRESHOLD && planes > 1 {
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(i, p)| plane(i, p));
    } else {
        for (i, p) in out.chunks_mut(oh * ow).enumerate() {
            plane(i, p);
        }
    }
}

/// Transpose of [`bilinear_fwd`]: scatters the four stencil weights of each
/// output pixel back into dx. Scatter order is fixed within a plane.
pub fn bilinear_bwd(
    dout: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    ys: &[Lerp],
    xs: &[Lerp],
    dx: &mut [f64],
) {
    let (oh, ow) = (ys.len(), xs.len());
    debug_assert_eq!(dout.len(), planes * oh * ow);
    debug_assert_eq!(dx.len(), planes * h * w);
    let plane = |idx: usize, dxp: &mut [f64]| {
        let dop = &dout[idx * oh * ow..(idx + 1) * oh * ow];
        for (i, ly) in ys.iter().enumerate() {
            for (j, lx) in xs.iter().enumerate() {
                let g = dop[i * ow + j];
                dxp[ly.i0 * w + lx.i0] += (1.0 - ly.frac) * (1.0 - lx.frac) * g;
                dxp[ly.i0 * w + lx.i1] += (1.0 - ly.frac) * lx.frac * g;
                dxp[ly.i1 * w + lx.i0] += ly.frac * (1.0 - lx.frac) * g;
                dxp[ly.i1 * w + lx.i1] += ly.frac * lx.frac * g;
            }
        }
    };
    if planes * oh * ow >= PAR_THRESHOLD && planes > 1 {
        dx.par_chunks_mut(h * w).enumerate().for_each(|(i, p)| plane(i, p));
    } else {
        for (i, p) in dx.chunks_mut(h * w).enumerate() {
            plane(i, p);
        }
    }
}
