//! Dense and convolution kernels with their adjoints.
//!
//! Activations are row-major: `(B, F)` for dense inputs and `(B, C, H, W)`
//! for images. Weights follow [`LayerSpec::weight_shape`](super::LayerSpec::weight_shape).

use crate::tensor::Tensor;

/// Geometry of a weighted layer as seen by the kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Linear {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
    },
}

impl Linear {
    pub fn outputs(&self) -> usize {
        match *self {
            Linear::Dense { outputs, .. } => outputs,
            Linear::Conv { cout, .. } => cout,
        }
    }

    /// Output shape for input `x`.
    pub fn out_shape(&self, x: &[usize]) -> Vec<usize> {
        match *self {
            Linear::Dense { outputs, .. } => vec![x[0], outputs],
            Linear::Conv { cout, .. } => vec![x[0], cout, x[2], x[3]],
        }
    }

    /// `y = x * w` (no bias).
    pub fn apply(&self, x: &Tensor, w: &Tensor) -> Tensor {
        match *self {
            Linear::Dense { inputs, outputs } => matmul(x, w.data(), inputs, outputs),
            Linear::Conv { kh, kw, cin, cout } => conv2d(x, w.data(), kh, kw, cin, cout),
        }
    }

    /// Adjoint with respect to the input.
    pub fn grad_input(&self, g: &Tensor, w: &Tensor, x_shape: &[usize]) -> Tensor {
        match *self {
            Linear::Dense { inputs, outputs } => matmul_t(g, w.data(), inputs, outputs),
            Linear::Conv { kh, kw, cin, cout } => {
                conv2d_grad_input(g, w.data(), x_shape, kh, kw, cin, cout)
            }
        }
    }

    /// Adjoint with respect to the weight, returned in weight layout.
    pub fn grad_weight(&self, x: &Tensor, g: &Tensor, w_shape: &[usize]) -> Tensor {
        let data = match *self {
            Linear::Dense { inputs, outputs } => outer_acc(x, g, inputs, outputs),
            Linear::Conv { kh, kw, cin, cout } => conv2d_grad_weight(x, g, kh, kw, cin, cout),
        };
        Tensor::new(w_shape.to_vec(), data).expect("weight gradient shape")
    }

    /// Adds a per-output bias in place.
    pub fn add_bias(&self, y: &mut Tensor, b: &[f64]) {
        let spatial = self.spatial(y.shape());
        let o = self.outputs();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += b[(i / spatial) % o];
        }
    }

    pub fn grad_bias(&self, g: &Tensor) -> Tensor {
        let spatial = self.spatial(g.shape());
        let o = self.outputs();
        let mut out = vec![0.0; o];
        for (i, v) in g.data().iter().enumerate() {
            out[(i / spatial) % o] += v;
        }
        Tensor::vector(out)
    }

    fn spatial(&self, shape: &[usize]) -> usize {
        match self {
            Linear::Dense { .. } => 1,
            Linear::Conv { .. } => shape[2] * shape[3],
        }
    }
}

fn matmul(x: &Tensor, w: &[f64], fi: usize, fo: usize) -> Tensor {
    let b = x.rows();
    let mut out = vec![0.0; b * fo];
    for (xr, yr) in x.data().chunks_exact(fi).zip(out.chunks_exact_mut(fo)) {
        for (i, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w[i * fo..(i + 1) * fo];
            for (y, &wv) in yr.iter_mut().zip(wr) {
                *y += xv * wv;
            }
        }
    }
    Tensor::new(vec![b, fo], out).unwrap()
}

/// `g * w^T`
fn matmul_t(g: &Tensor, w: &[f64], fi: usize, fo: usize) -> Tensor {
    let b = g.rows();
    let mut out = vec![0.0; b * fi];
    for (gr, xr) in g.data().chunks_exact(fo).zip(out.chunks_exact_mut(fi)) {
        for (i, x) in xr.iter_mut().enumerate() {
            let wr = &w[i * fo..(i + 1) * fo];
            *x = gr.iter().zip(wr).map(|(a, b)| a * b).sum();
        }
    }
    Tensor::new(vec![b, fi], out).unwrap()
}

/// `x^T * g`
fn outer_acc(x: &Tensor, g: &Tensor, fi: usize, fo: usize) -> Vec<f64> {
    let mut out = vec![0.0; fi * fo];
    for (xr, gr) in x.data().chunks_exact(fi).zip(g.data().chunks_exact(fo)) {
        for (i, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (o, &gv) in out[i * fo..(i + 1) * fo].iter_mut().zip(gr) {
                *o += xv * gv;
            }
        }
    }
    out
}

#[inline]
fn pads(kh: usize, kw: usize) -> (isize, isize) {
    (((kh - 1) / 2) as isize, ((kw - 1) / 2) as isize)
}

fn conv2d(x: &Tensor, k: &[f64], kh: usize, kw: usize, cin: usize, cout: usize) -> Tensor {
    let (b, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (ph, pw) = pads(kh, kw);
    let xd = x.data();
    let mut out = vec![0.0; b * cout * h * w];
    for n in 0..b {
        for ky in 0..kh {
            for kx in 0..kw {
                for ci in 0..cin {
                    let kbase = ((ky * kw + kx) * cin + ci) * cout;
                    let xbase = (n * cin + ci) * h * w;
                    for oy in 0..h {
                        let iy = oy as isize + ky as isize - ph;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..w {
                            let ix = ox as isize + kx as isize - pw;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xv = xd[xbase + iy as usize * w + ix as usize];
                            if xv == 0.0 {
                                continue;
                            }
                            for co in 0..cout {
                                out[((n * cout + co) * h + oy) * w + ox] += xv * k[kbase + co];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, cout, h, w], out).unwrap()
}

fn conv2d_grad_input(
    g: &Tensor,
    k: &[f64],
    x_shape: &[usize],
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
) -> Tensor {
    let (b, h, w) = (x_shape[0], x_shape[2], x_shape[3]);
    let (ph, pw) = pads(kh, kw);
    let gd = g.data();
    let mut dx = vec![0.0; b * cin * h * w];
    for n in 0..b {
        for ky in 0..kh {
            for kx in 0..kw {
                for ci in 0..cin {
                    let kbase = ((ky * kw + kx) * cin + ci) * cout;
                    let xbase = (n * cin + ci) * h * w;
                    for oy in 0..h {
                        let iy = oy as isize + ky as isize - ph;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..w {
                            let ix = ox as isize + kx as isize - pw;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let mut acc = 0.0;
                            for co in 0..cout {
                                acc += gd[((n * cout + co) * h + oy) * w + ox] * k[kbase + co];
                            }
                            dx[xbase + iy as usize * w + ix as usize] += acc;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx).unwrap()
}

fn conv2d_grad_weight(
    x: &Tensor,
    g: &Tensor,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
) -> Vec<f64> {
    let (b, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (ph, pw) = pads(kh, kw);
    let (xd, gd) = (x.data(), g.data());
    let mut dk = vec![0.0; kh * kw * cin * cout];
    for n in 0..b {
        for ky in 0..kh {
            for kx in 0..kw {
                for ci in 0..cin {
                    let kbase = ((ky * kw + kx) * cin + ci) * cout;
                    let xbase = (n * cin + ci) * h * w;
                    for oy in 0..h {
                        let iy = oy as isize + ky as isize - ph;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..w {
                            let ix = ox as isize + kx as isize - pw;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xv = xd[xbase + iy as usize * w + ix as usize];
                            if xv == 0.0 {
                                continue;
                            }
                            for co in 0..cout {
                                dk[kbase + co] += xv * gd[((n * cout + co) * h + oy) * w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dk
}
