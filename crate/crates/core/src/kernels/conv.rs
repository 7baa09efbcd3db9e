//! Grouped 2-D cross-correlation via im2col + GEMM.

use super::gemm::{gemm, gemm_nt, gemm_tn};
use crate::error::{Error, Result};
use crate::par;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Validates shapes for `x[N,Cin,H,W]` and `w[Cout,Cin/g,kh,kw]`.
    pub fn new(
        x_dims: &[usize],
        w_dims: &[usize],
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        if x_dims.len() != 4 {
            return Err(Error::dim(OP, "input rank", 4, x_dims.len()));
        }
        if w_dims.len() != 4 {
            return Err(Error::dim(OP, "weight rank", 4, w_dims.len()));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be positive"));
        }
        if groups == 0 {
            return Err(Error::invalid(OP, "groups must be positive"));
        }
        let (n, cin, h, w) = (x_dims[0], x_dims[1], x_dims[2], x_dims[3]);
        let (cout, cin_g, kh, kw) = (w_dims[0], w_dims[1], w_dims[2], w_dims[3]);
        if cin % groups != 0 {
            return Err(Error::dim(OP, "input channels (divisible by groups)", format!("multiple of {groups}"), cin));
        }
        if cout % groups != 0 {
            return Err(Error::dim(OP, "output channels (divisible by groups)", format!("multiple of {groups}"), cout));
        }
        if cin_g != cin / groups {
            return Err(Error::dim(OP, "weight axis 1 (Cin/groups)", cin / groups, cin_g));
        }
        let oh = out_extent(h, kh, stride, pad).ok_or_else(|| {
            Error::dim(OP, "height", format!(">= {} after padding", kh), h + 2 * pad)
        })?;
        let ow = out_extent(w, kw, stride, pad).ok_or_else(|| {
            Error::dim(OP, "width", format!(">= {} after padding", kw), w + 2 * pad)
        })?;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            groups,
            oh,
            ow,
        })
    }

    pub fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Rows of the im2col matrix for one group.
    pub fn patch_len(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    pub fn out_dims(&self) -> [usize; 4] {
        [self.n, self.cout, self.oh, self.ow]
    }

    /// Multiply-accumulates for the whole batch, bias excluded.
    pub fn macs(&self) -> u64 {
        (self.n * self.cout * self.patch_len() * self.out_pixels()) as u64
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `floor((len + 2·pad − k)/stride) + 1`, or `None` when the window does not fit.
pub fn out_extent(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// im2col for channel range `[c0, c0 + cin_g)` of one image into `cols[K×P]`.
fn im2col<T: Real>(g: &ConvGeom, img: &[T], c0: usize, cols: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.cin_g() {
        let plane = &img[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of `cols[K×P]` back into channels `[c0, c0 + cin_g)` of one image.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], c0: usize, img: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.cin_g() {
        let plane = &mut img[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        plane[iy as usize * g.w + ix as usize] += src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

pub fn forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let p = g.out_pixels();
    let kl = g.patch_len();
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let img_in = g.cin * g.h * g.w;
    let img_out = g.cout * p;
    let mut out = vec![T::zero(); g.n * img_out];
    par::for_each_chunk_mut(&mut out, img_out, |n, o| {
        let img = &x[n * img_in..(n + 1) * img_in];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kl * p] };
        for grp in 0..g.groups {
            let wg = &w[grp * cout_g * kl..(grp + 1) * cout_g * kl];
            let og = &mut o[grp * cout_g * p..(grp + 1) * cout_g * p];
            if g.is_pointwise() {
                let xs = &img[grp * cin_g * p..(grp + 1) * cin_g * p];
                gemm(cout_g, p, kl, wg, xs, og, false);
            } else {
                im2col(g, img, grp * cin_g, &mut cols);
                gemm(cout_g, p, kl, wg, &cols, og, false);
            }
        }
        if let Some(b) = bias {
            for (co, plane) in o.chunks_mut(p).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    });
    out
}

/// Gradients `(dx, dw, dbias)` given the upstream gradient `dy[N,Cout,OH,OW]`.
pub fn backward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], dy: &[T], want_dx: bool) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let p = g.out_pixels();
    let kl = g.patch_len();
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let img_in = g.cin * g.h * g.w;
    let img_out = g.cout * p;

    let dx = want_dx.then(|| {
        let mut dx = vec![T::zero(); g.n * img_in];
        par::for_each_chunk_mut(&mut dx, img_in, |n, dimg| {
            let dyn_ = &dy[n * img_out..(n + 1) * img_out];
            let mut dcols = vec![T::zero(); kl * p];
            for grp in 0..g.groups {
                let wg = &w[grp * cout_g * kl..(grp + 1) * cout_g * kl];
                let dyg = &dyn_[grp * cout_g * p..(grp + 1) * cout_g * p];
                if g.is_pointwise() {
                    let dxs = &mut dimg[grp * cin_g * p..(grp + 1) * cin_g * p];
                    gemm_tn(kl, p, cout_g, wg, dyg, dxs, false);
                } else {
                    gemm_tn(kl, p, cout_g, wg, dyg, &mut dcols, false);
                    col2im(g, &dcols, grp * cin_g, dimg);
                }
            }
        });
        dx
    });

    // Per-image weight gradients, folded in image order.
    let partials = par::map_range(g.n, |n| {
        let img = &x[n * img_in..(n + 1) * img_in];
        let dyn_ = &dy[n * img_out..(n + 1) * img_out];
        let mut dw = vec![T::zero(); w.len()];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kl * p] };
        for grp in 0..g.groups {
            let dyg = &dyn_[grp * cout_g * p..(grp + 1) * cout_g * p];
            let dwg = &mut dw[grp * cout_g * kl..(grp + 1) * cout_g * kl];
            if g.is_pointwise() {
                let xs = &img[grp * cin_g * p..(grp + 1) * cin_g * p];
                gemm_nt(cout_g, kl, p, dyg, xs, dwg, false);
            } else {
                im2col(g, img, grp * cin_g, &mut cols);
                gemm_nt(cout_g, kl, p, dyg, &cols, dwg, false);
            }
        }
        dw
    });
    let mut dw = vec![T::zero(); w.len()];
    for part in &partials {
        dw.iter_mut().zip(part).for_each(|(a, &b)| *a += b);
    }

    let mut db = vec![T::zero(); g.cout];
    for n in 0..g.n {
        for (co, d) in db.iter_mut().enumerate() {
            let plane = &dy[n * img_out + co * p..n * img_out + (co + 1) * p];
            *d += plane.iter().copied().sum::<T>();
        }
    }
    (dx, dw, db)
}
