//! 2-D convolution kernels (im2col + gemm), forward and backward.
//!
//! Output positions are processed in tiles of whole output rows so the
//! column buffer stays bounded for full-resolution images.

use crate::tensor::{Element, Tensor};

const TILE_ELEMS: usize = 1 << 19;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], weight: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv input must be NCHW, got {x:?}");
        assert_eq!(weight.len(), 4, "conv weight must be OIHW, got {weight:?}");
        assert_eq!(x[1], weight[1], "conv channel mismatch: input {x:?}, weight {weight:?}");
        assert_eq!(weight[2], weight[3], "only square kernels are supported");
        let k = weight[2];
        assert!(
            x[2] + 2 * pad >= k && x[3] + 2 * pad >= k,
            "conv input {x:?} smaller than kernel {k} with padding {pad}"
        );
        let oh = (x[2] + 2 * pad - k) / stride + 1;
        let ow = (x[3] + 2 * pad - k) / stride + 1;
        ConvGeom {
            n: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: weight[0],
            k,
            stride,
            pad,
            oh,
            ow,
        }
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows_per_tile(&self) -> usize {
        (TILE_ELEMS / (self.patch_len() * self.ow).max(1)).clamp(1, self.oh)
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, r0: usize, r1: usize, col: &mut [T]) {
    let tw = (r1 - r0) * g.ow;
    let plane = g.h * g.w;
    for ci in 0..g.cin {
        let src_plane = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * tw;
                for oy in r0..r1 {
                    let dst = &mut col[row + (oy - r0) * g.ow..row + (oy - r0 + 1) * g.ow];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &src_plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix >= 0 && ix < g.w as isize {
                            src[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(col: &[T], g: &ConvGeom, r0: usize, r1: usize, dx: &mut [T]) {
    let tw = (r1 - r0) * g.ow;
    let plane = g.h * g.w;
    for ci in 0..g.cin {
        let dst_plane = &mut dx[ci * plane..(ci + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * tw;
                for oy in r0..r1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &col[row + (oy - r0) * g.ow..row + (oy - r0 + 1) * g.ow];
                    let dst = &mut dst_plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad);
    let positions = g.oh * g.ow;
    let kk = g.patch_len();
    let mut y = Tensor::zeros(&[g.n, g.cout, g.oh, g.ow]);
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * positions;
    let rows = g.rows_per_tile();
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * rows * g.ow]
    };

    for n in 0..g.n {
        let xn = &x.data()[n * in_len..(n + 1) * in_len];
        let yn = &mut y.data_mut()[n * out_len..(n + 1) * out_len];
        if g.is_pointwise() {
            unsafe {
                T::gemm(
                    g.cout,
                    kk,
                    positions,
                    T::one(),
                    weight.data().as_ptr(),
                    kk as isize,
                    1,
                    xn.as_ptr(),
                    positions as isize,
                    1,
                    T::zero(),
                    yn.as_mut_ptr(),
                    positions as isize,
                    1,
                );
            }
        } else {
            let mut r0 = 0;
            while r0 < g.oh {
                let r1 = (r0 + rows).min(g.oh);
                let tw = (r1 - r0) * g.ow;
                im2col(xn, &g, r0, r1, &mut col);
                unsafe {
                    T::gemm(
                        g.cout,
                        kk,
                        tw,
                        T::one(),
                        weight.data().as_ptr(),
                        kk as isize,
                        1,
                        col.as_ptr(),
                        tw as isize,
                        1,
                        T::zero(),
                        yn.as_mut_ptr().add(r0 * g.ow),
                        positions as isize,
                        1,
                    );
                }
                r0 = r1;
            }
        }
        if let Some(b) = bias {
            for (co, chunk) in yn.chunks_mut(positions).enumerate() {
                let bv = b.data()[co];
                for v in chunk {
                    *v += bv;
                }
            }
        }
    }
    y
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad);
    let positions = g.oh * g.ow;
    let kk = g.patch_len();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * positions;
    let rows = g.rows_per_tile();

    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(weight.shape()));
    let db = need_db.then(|| {
        let mut db = Tensor::zeros(&[g.cout]);
        for n in 0..g.n {
            let dyn_ = &dy.data()[n * out_len..(n + 1) * out_len];
            for (co, chunk) in dyn_.chunks(positions).enumerate() {
                db.data_mut()[co] += chunk.iter().copied().sum::<T>();
            }
        }
        db
    });

    if !need_dx && !need_dw {
        return ConvGrads { dx, dw, db };
    }

    let tile_cap = kk * rows * g.ow;
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { tile_cap }];
    let mut dcol = vec![T::zero(); if need_dx { tile_cap } else { 0 }];

    for n in 0..g.n {
        let xn = &x.data()[n * in_len..(n + 1) * in_len];
        let dyn_ = &dy.data()[n * out_len..(n + 1) * out_len];
        let mut r0 = 0;
        while r0 < g.oh {
            let r1 = (r0 + rows).min(g.oh);
            let tw = (r1 - r0) * g.ow;
            let dy_tile = unsafe { dyn_.as_ptr().add(r0 * g.ow) };

            if let Some(dw) = dw.as_mut() {
                let (cols_ptr, cols_rs) = if g.is_pointwise() {
                    (unsafe { xn.as_ptr().add(r0 * g.ow) }, positions as isize)
                } else {
                    im2col(xn, &g, r0, r1, &mut col);
                    (col.as_ptr(), tw as isize)
                };
                // dW += dY_tile * cols^T
                unsafe {
                    T::gemm(
                        g.cout,
                        tw,
                        kk,
                        T::one(),
                        dy_tile,
                        positions as isize,
                        1,
                        cols_ptr,
                        1,
                        cols_rs,
                        T::one(),
                        dw.data_mut().as_mut_ptr(),
                        kk as isize,
                        1,
                    );
                }
            }

            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx.data_mut()[n * in_len..(n + 1) * in_len];
                if g.is_pointwise() {
                    // dX = W^T * dY, written straight into the input gradient.
                    unsafe {
                        T::gemm(
                            kk,
                            g.cout,
                            tw,
                            T::one(),
                            weight.data().as_ptr(),
                            1,
                            kk as isize,
                            dy_tile,
                            positions as isize,
                            1,
                            T::one(),
                            dxn.as_mut_ptr().add(r0 * g.ow),
                            positions as isize,
                            1,
                        );
                    }
                } else {
                    unsafe {
                        T::gemm(
                            kk,
                            g.cout,
                            tw,
                            T::one(),
                            weight.data().as_ptr(),
                            1,
                            kk as isize,
                            dy_tile,
                            positions as isize,
                            1,
                            T::zero(),
                            dcol.as_mut_ptr(),
                            tw as isize,
                            1,
                        );
                    }
                    col2im_add(&dcol[..kk * tw], &g, r0, r1, dxn);
                }
            }
            r0 = r1;
        }
    }
    ConvGrads { dx, dw, db }
}
