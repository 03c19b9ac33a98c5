use super::{Gradients, ParamStore, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
        // im2col buffer, kept only when recording for backward.
        cols: Vec<T>,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Silu(usize),
    Add(usize, usize),
    Modulate {
        x: usize,
        scale: usize,
        shift: usize,
    },
    Upsample2(usize),
    GlobalAvgPool(usize),
}

struct Node<T> {
    // None for parameter nodes, which read through to the store.
    value: Option<Tensor<T>>,
    op: Op<T>,
}

/// A tape of tensor operations over a borrowed parameter store.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    record: bool,
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn plane(&self) -> usize {
        self.ho * self.wo
    }

    fn cols_len(&self) -> usize {
        self.c * self.k * self.k * self.n * self.plane()
    }
}

fn im2col<T: Scalar>(x: &[T], g: ConvGeom) -> Vec<T> {
    let np = g.n * g.plane();
    let mut cols = vec![T::zero(); g.cols_len()];
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for ni in 0..g.n {
                    let src = &x[(ni * g.c + ci) * g.h * g.w..(ni * g.c + ci + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let base = ni * g.plane() + oy * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: ConvGeom) -> Vec<T> {
    let np = g.n * g.plane();
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * np..(row + 1) * np];
                for ni in 0..g.n {
                    let off = (ni * g.c + ci) * g.h * g.w;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = ni * g.plane() + oy * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                let d = &mut x[off + iy as usize * g.w + ix as usize];
                                *d = *d + src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// A graph that records what backward needs.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A forward-only graph; calling [`Graph::backward`] on it panics.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self {
            record: false,
            ..Self::new(params)
        }
    }

    fn push(&mut self, value: Option<Tensor<T>>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        match self.nodes[i].op {
            Op::Param(p) => self.params.tensor(p),
            _ => self.nodes[i].value.as_ref().expect("node value"),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.val(v.0)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Some(t), Op::Input)
    }

    /// Reference a named parameter; panics on unknown names.
    pub fn param(&mut self, name: &str) -> Var {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.push(None, Op::Param(idx))
    }

    /// 2-D convolution; weight is `[out, in, k, k]`, bias `[out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.val(x.0).nchw();
        let ws = self.val(w.0).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be rank 4");
        assert_eq!(ws[1], c, "conv input channels");
        let (o, k) = (ws[0], ws[2]);
        let g = ConvGeom {
            n,
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let cols = im2col(self.val(x.0).data(), g);
        let np = n * g.plane();
        let kk = c * k * k;
        let mut out2 = vec![T::zero(); o * np];
        T::gemm(
            o,
            kk,
            np,
            T::one(),
            self.val(w.0).data(),
            kk as isize,
            1,
            &cols,
            np as isize,
            1,
            T::zero(),
            &mut out2,
            np as isize,
            1,
        );
        let bias = self.val(b.0).data();
        let p = g.plane();
        let mut y = vec![T::zero(); n * o * p];
        for oi in 0..o {
            for ni in 0..n {
                let src = &out2[oi * np + ni * p..oi * np + (ni + 1) * p];
                let dst = &mut y[(ni * o + oi) * p..(ni * o + oi + 1) * p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias[oi];
                }
            }
        }
        let value = Tensor::from_vec(vec![n, o, g.ho, g.wo], y);
        let cols = if self.record { cols } else { Vec::new() };
        self.push(
            Some(value),
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
                cols,
            },
        )
    }

    /// Affine map on `[n, in]` rows; weight is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.val(x.0).shape().to_vec();
        let ws = self.val(w.0).shape().to_vec();
        assert_eq!(xs.len(), 2, "linear input must be [n, in]");
        assert_eq!(xs[1], ws[1], "linear in-features");
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let bias = self.val(b.0).data();
        let mut y: Vec<T> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        T::gemm(
            n,
            i,
            o,
            T::one(),
            self.val(x.0).data(),
            i as isize,
            1,
            self.val(w.0).data(),
            1,
            i as isize,
            T::one(),
            &mut y,
            o as isize,
            1,
        );
        self.push(
            Some(Tensor::from_vec(vec![n, o], y)),
            Op::Linear { x: x.0, w: w.0, b: b.0 },
        )
    }

    /// x·sigmoid(x)
    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.val(x.0);
        let data = xv.data().iter().map(|&v| v * sigmoid(v)).collect();
        let value = Tensor::from_vec(xv.shape().to_vec(), data);
        self.push(Some(value), Op::Silu(x.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.val(a.0), self.val(b.0));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(av.shape().to_vec(), data);
        self.push(Some(value), Op::Add(a.0, b.0))
    }

    /// Per-sample, per-channel `x·(1 + scale) + shift`; scale/shift are `[n, c]`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (n, c, h, w) = self.val(x.0).nchw();
        assert_eq!(self.val(scale.0).shape(), &[n, c], "modulate scale shape");
        assert_eq!(self.val(shift.0).shape(), &[n, c], "modulate shift shape");
        let (xv, sv, tv) = (self.val(x.0).data(), self.val(scale.0).data(), self.val(shift.0).data());
        let p = h * w;
        let mut y = Vec::with_capacity(xv.len());
        for nc in 0..n * c {
            let (s, t) = (T::one() + sv[nc], tv[nc]);
            y.extend(xv[nc * p..(nc + 1) * p].iter().map(|&v| v * s + t));
        }
        self.push(
            Some(Tensor::from_vec(vec![n, c, h, w], y)),
            Op::Modulate {
                x: x.0,
                scale: scale.0,
                shift: shift.0,
            },
        )
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.val(x.0).nchw();
        let xv = self.val(x.0).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut y = vec![T::zero(); n * c * h2 * w2];
        for nc in 0..n * c {
            for yy in 0..h2 {
                for xx in 0..w2 {
                    y[nc * h2 * w2 + yy * w2 + xx] = xv[nc * h * w + (yy / 2) * w + xx / 2];
                }
            }
        }
        self.push(Some(Tensor::from_vec(vec![n, c, h2, w2], y)), Op::Upsample2(x.0))
    }

    /// Mean over the spatial dims: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.val(x.0).nchw();
        let p = h * w;
        let inv = T::from_f64_lossy(1.0 / p as f64);
        let xv = self.val(x.0).data();
        let y = (0..n * c)
            .map(|nc| xv[nc * p..(nc + 1) * p].iter().copied().sum::<T>() * inv)
            .collect();
        self.push(Some(Tensor::from_vec(vec![n, c], y)), Op::GlobalAvgPool(x.0))
    }

    /// Reverse pass from `out` seeded with `seed` (dL/d out).
    pub fn backward(&self, out: Var, seed: Tensor<T>) -> Gradients<T> {
        assert!(self.record, "backward on an inference graph");
        assert_eq!(seed.shape(), self.val(out.0).shape(), "seed gradient shape");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads = Gradients::new(self.params.len());
        grads[out.0] = Some(seed);

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], i: usize, g: Tensor<T>) {
            match &mut grads[i] {
                Some(a) => a.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(p) => pgrads.accumulate(*p, g),
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    cols,
                } => {
                    let (n, c, h, wd) = self.val(*x).nchw();
                    let ws = self.val(*w).shape().to_vec();
                    let (o, k) = (ws[0], ws[2]);
                    let (_, _, ho, wo) = g.nchw();
                    let geom = ConvGeom {
                        n,
                        c,
                        h,
                        w: wd,
                        k,
                        stride: *stride,
                        pad: *pad,
                        ho,
                        wo,
                    };
                    let p = geom.plane();
                    let np = n * p;
                    let kk = c * k * k;
                    // [n, o, p] -> [o, n*p]
                    let gd = g.data();
                    let mut g2 = vec![T::zero(); o * np];
                    for ni in 0..n {
                        for oi in 0..o {
                            g2[oi * np + ni * p..oi * np + (ni + 1) * p]
                                .copy_from_slice(&gd[(ni * o + oi) * p..(ni * o + oi + 1) * p]);
                        }
                    }
                    let mut dw = vec![T::zero(); o * kk];
                    T::gemm(
                        o,
                        np,
                        kk,
                        T::one(),
                        &g2,
                        np as isize,
                        1,
                        cols,
                        1,
                        np as isize,
                        T::zero(),
                        &mut dw,
                        kk as isize,
                        1,
                    );
                    let db: Vec<T> = (0..o)
                        .map(|oi| g2[oi * np..(oi + 1) * np].iter().copied().sum())
                        .collect();
                    let mut dcols = vec![T::zero(); kk * np];
                    T::gemm(
                        kk,
                        o,
                        np,
                        T::one(),
                        self.val(*w).data(),
                        1,
                        kk as isize,
                        &g2,
                        np as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        np as isize,
                        1,
                    );
                    let dx = col2im(&dcols, geom);
                    acc(&mut grads, *x, Tensor::from_vec(vec![n, c, h, wd], dx));
                    acc(&mut grads, *w, Tensor::from_vec(ws, dw));
                    acc(&mut grads, *b, Tensor::from_vec(vec![o], db));
                }
                Op::Linear { x, w, b } => {
                    let xs = self.val(*x).shape().to_vec();
                    let (n, iw) = (xs[0], xs[1]);
                    let o = self.val(*w).shape()[0];
                    let mut dx = vec![T::zero(); n * iw];
                    T::gemm(
                        n,
                        o,
                        iw,
                        T::one(),
                        g.data(),
                        o as isize,
                        1,
                        self.val(*w).data(),
                        iw as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        iw as isize,
                        1,
                    );
                    let mut dw = vec![T::zero(); o * iw];
                    T::gemm(
                        o,
                        n,
                        iw,
                        T::one(),
                        g.data(),
                        1,
                        o as isize,
                        self.val(*x).data(),
                        iw as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        iw as isize,
                        1,
                    );
                    let gd = g.data();
                    let db = (0..o).map(|oi| (0..n).map(|ni| gd[ni * o + oi]).sum()).collect();
                    acc(&mut grads, *x, Tensor::from_vec(xs, dx));
                    acc(&mut grads, *w, Tensor::from_vec(vec![o, iw], dw));
                    acc(&mut grads, *b, Tensor::from_vec(vec![o], db));
                }
                Op::Silu(x) => {
                    let xv = self.val(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gi)| {
                            let s = sigmoid(v);
                            gi * s * (T::one() + v * (T::one() - s))
                        })
                        .collect();
                    acc(&mut grads, *x, Tensor::from_vec(xv.shape().to_vec(), data));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Modulate { x, scale, shift } => {
                    let (n, c, h, w) = self.val(*x).nchw();
                    let p = h * w;
                    let (xv, sv) = (self.val(*x).data(), self.val(*scale).data());
                    let gd = g.data();
                    let mut dx = Vec::with_capacity(gd.len());
                    let mut ds = vec![T::zero(); n * c];
                    let mut dt = vec![T::zero(); n * c];
                    for nc in 0..n * c {
                        let s = T::one() + sv[nc];
                        let (gs, xs) = (&gd[nc * p..(nc + 1) * p], &xv[nc * p..(nc + 1) * p]);
                        dx.extend(gs.iter().map(|&gi| gi * s));
                        ds[nc] = gs.iter().zip(xs).map(|(&gi, &xi)| gi * xi).sum();
                        dt[nc] = gs.iter().copied().sum();
                    }
                    acc(&mut grads, *x, Tensor::from_vec(vec![n, c, h, w], dx));
                    acc(&mut grads, *scale, Tensor::from_vec(vec![n, c], ds));
                    acc(&mut grads, *shift, Tensor::from_vec(vec![n, c], dt));
                }
                Op::Upsample2(x) => {
                    let (n, c, h, w) = self.val(*x).nchw();
                    let (h2, w2) = (2 * h, 2 * w);
                    let gd = g.data();
                    let mut dx = vec![T::zero(); n * c * h * w];
                    for nc in 0..n * c {
                        for yy in 0..h2 {
                            for xx in 0..w2 {
                                let d = &mut dx[nc * h * w + (yy / 2) * w + xx / 2];
                                *d = *d + gd[nc * h2 * w2 + yy * w2 + xx];
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::from_vec(vec![n, c, h, w], dx));
                }
                Op::GlobalAvgPool(x) => {
                    let (n, c, h, w) = self.val(*x).nchw();
                    let p = h * w;
                    let inv = T::from_f64_lossy(1.0 / p as f64);
                    let gd = g.data();
                    let dx = (0..n * c).flat_map(|nc| std::iter::repeat_n(gd[nc] * inv, p)).collect();
                    acc(&mut grads, *x, Tensor::from_vec(vec![n, c, h, w], dx));
                }
            }
        }
        pgrads
    }
}
