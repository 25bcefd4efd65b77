//! 2-D convolution (cross-correlation) via im2col.

use crate::error::{DmpError, Result};
use crate::tape::{BackwardRule, NodeId, Tape};
use crate::tensor::{gemm, gemm_at, gemm_bt, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

/// Output extent of a convolution along one axis. Trailing rows that do not
/// fill a whole stride are dropped, as in every mainstream framework.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(DmpError::shape("convolution stride must be positive"));
    }
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(DmpError::shape(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(DmpError::shape(format!(
                "conv2d needs [b,n,H,W] input and [m,n,k,k] weights, got {x:?} and {w:?}"
            )));
        }
        if w[2] != w[3] {
            return Err(DmpError::shape(format!("conv2d kernel must be square, got {w:?}")));
        }
        if x[1] != w[1] {
            return Err(DmpError::shape(format!(
                "conv2d input has {} channels but weights expect {}",
                x[1], w[1]
            )));
        }
        let out_height = conv_out_size(x[2], w[2], stride, padding)?;
        let out_width = conv_out_size(x[3], w[2], stride, padding)?;
        Ok(ConvGeometry {
            batch: x[0],
            in_channels: x[1],
            height: x[2],
            width: x[3],
            filters: w[0],
            kernel: w[2],
            stride,
            padding,
            out_height,
            out_width,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Visit every (im2col index, image index) pair whose source pixel lies
    /// inside the image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let (h, w) = (self.height as isize, self.width as isize);
        let npix = self.out_pixels();
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..self.out_height {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for ox in 0..self.out_width {
                            let ix = (ox * s + kx) as isize - p;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            let src = (c * self.height + iy as usize) * self.width + ix as usize;
                            f(row * npix + oy * self.out_width + ox, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        cols.iter_mut().for_each(|v| *v = 0.0);
        self.for_each_tap(|dst, src| cols[dst] = image[src]);
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        self.for_each_tap(|dst, src| image[src] += cols[dst]);
    }
}

/// Cross-correlation of `x: [b,n,H,W]` with `w: [m,n,k,k]`.
pub fn conv2d(tape: &mut Tape, x: NodeId, w: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
    let geo = ConvGeometry::new(tape.value(x).shape(), tape.value(w).shape(), stride, padding)?;
    let (xv, wv) = (tape.value(x), tape.value(w));
    let (plen, npix) = (geo.patch_len(), geo.out_pixels());
    let in_len = geo.in_channels * geo.height * geo.width;
    let out_len = geo.filters * npix;

    let mut out = vec![0.0; geo.batch * out_len];
    let mut cols = vec![0.0; plen * npix];
    for b in 0..geo.batch {
        geo.im2col(&xv.data()[b * in_len..(b + 1) * in_len], &mut cols);
        gemm(
            wv.data(),
            &cols,
            &mut out[b * out_len..(b + 1) * out_len],
            geo.filters,
            plen,
            npix,
        );
    }
    let value = Tensor::new(vec![geo.batch, geo.filters, geo.out_height, geo.out_width], out)?;

    let rule: BackwardRule = Box::new(move |ctx| {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let g = ctx.upstream.data();
        let mut gx = ctx.needs[0].then(|| vec![0.0; x.len()]);
        let mut gw = ctx.needs[1].then(|| vec![0.0; w.len()]);
        let mut cols = vec![0.0; plen * npix];
        let mut gcols = vec![0.0; plen * npix];
        for b in 0..geo.batch {
            let gb = &g[b * out_len..(b + 1) * out_len];
            if let Some(gw) = gw.as_mut() {
                geo.im2col(&x.data()[b * in_len..(b + 1) * in_len], &mut cols);
                gemm_bt(gb, &cols, gw, geo.filters, npix, plen);
            }
            if let Some(gx) = gx.as_mut() {
                gcols.iter_mut().for_each(|v| *v = 0.0);
                gemm_at(w.data(), gb, &mut gcols, plen, geo.filters, npix);
                geo.col2im(&gcols, &mut gx[b * in_len..(b + 1) * in_len]);
            }
        }
        vec![
            gx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("shape")),
            gw.map(|d| Tensor::new(w.shape().to_vec(), d).expect("shape")),
        ]
    });
    Ok(tape.push("conv2d", value, vec![x, w], Some(rule)))
}

/// Mean over the spatial axes: `[b,c,H,W] → [b,c]`.
pub fn global_avg_pool(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let xv = tape.value(x);
    if xv.rank() != 4 {
        return Err(DmpError::shape(format!(
            "global_avg_pool needs [b,c,H,W], got {:?}",
            xv.shape()
        )));
    }
    let (b, c, hw) = (xv.shape()[0], xv.shape()[1], xv.shape()[2] * xv.shape()[3]);
    let data: Vec<f64> = xv
        .data()
        .chunks(hw)
        .map(|ch| ch.iter().sum::<f64>() / hw as f64)
        .collect();
    let value = Tensor::new(vec![b, c], data)?;
    let shape = xv.shape().to_vec();
    let rule: BackwardRule = Box::new(move |ctx| {
        let mut gx = Vec::with_capacity(b * c * hw);
        for &g in ctx.upstream.data() {
            gx.extend(std::iter::repeat_n(g / hw as f64, hw));
        }
        vec![Some(Tensor::new(shape.clone(), gx).expect("shape"))]
    });
    Ok(tape.push("global_avg_pool", value, vec![x], Some(rule)))
}

/// Flatten everything after the batch axis.
pub fn flatten(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let rest: usize = shape[1..].iter().product();
    tape.reshape(x, &[shape[0], rest])
}
