//! Numeric kernels behind the tape primitives. Layouts are channels-first:
//! images are `[C, H, W]`, kernels `[O, C, KH, KW]`, dense weights `[out, in]`.

/// Output spatial size of a valid (unpadded) convolution.
pub(crate) fn conv_out(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl ConvDims {
    pub fn ho(&self) -> usize {
        conv_out(self.h, self.kh, self.stride)
    }
    pub fn wo(&self) -> usize {
        conv_out(self.w, self.kw, self.stride)
    }
}

pub(crate) fn conv2d(x: &[f64], k: &[f64], d: ConvDims) -> Vec<f64> {
    let (ho, wo, s) = (d.ho(), d.wo(), d.stride);
    let mut y = vec![0.0; d.o * ho * wo];
    for o in 0..d.o {
        let yo = &mut y[o * ho * wo..(o + 1) * ho * wo];
        for c in 0..d.c {
            let xc = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
            for u in 0..d.kh {
                for v in 0..d.kw {
                    let kv = k[((o * d.c + c) * d.kh + u) * d.kw + v];
                    if kv == 0.0 {
                        continue;
                    }
                    for i in 0..ho {
                        let xrow = &xc[(s * i + u) * d.w..(s * i + u + 1) * d.w];
                        let yrow = &mut yo[i * wo..(i + 1) * wo];
                        if s == 1 {
                            for (yv, xv) in yrow.iter_mut().zip(&xrow[v..v + wo]) {
                                *yv += kv * xv;
                            }
                        } else {
                            for (j, yv) in yrow.iter_mut().enumerate() {
                                *yv += kv * xrow[s * j + v];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Transpose of [`conv2d`] with respect to its input: maps an output-shaped
/// tensor back onto the input grid.
pub(crate) fn conv2d_input_grad(g: &[f64], k: &[f64], d: ConvDims) -> Vec<f64> {
    let (ho, wo, s) = (d.ho(), d.wo(), d.stride);
    let mut dx = vec![0.0; d.c * d.h * d.w];
    for o in 0..d.o {
        let go = &g[o * ho * wo..(o + 1) * ho * wo];
        for c in 0..d.c {
            let dxc = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
            for u in 0..d.kh {
                for v in 0..d.kw {
                    let kv = k[((o * d.c + c) * d.kh + u) * d.kw + v];
                    if kv == 0.0 {
                        continue;
                    }
                    for i in 0..ho {
                        let grow = &go[i * wo..(i + 1) * wo];
                        let row = s * i + u;
                        let dxrow = &mut dxc[row * d.w..(row + 1) * d.w];
                        if s == 1 {
                            for (dv, gv) in dxrow[v..v + wo].iter_mut().zip(grow) {
                                *dv += kv * gv;
                            }
                        } else {
                            for (j, gv) in grow.iter().enumerate() {
                                dxrow[s * j + v] += kv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Transpose of [`conv2d`] with respect to its kernel.
pub(crate) fn conv2d_kernel_grad(x: &[f64], g: &[f64], d: ConvDims) -> Vec<f64> {
    let (ho, wo, s) = (d.ho(), d.wo(), d.stride);
    let mut dk = vec![0.0; d.o * d.c * d.kh * d.kw];
    for o in 0..d.o {
        let go = &g[o * ho * wo..(o + 1) * ho * wo];
        for c in 0..d.c {
            let xc = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
            for u in 0..d.kh {
                for v in 0..d.kw {
                    let mut acc = 0.0;
                    for i in 0..ho {
                        let grow = &go[i * wo..(i + 1) * wo];
                        let xrow = &xc[(s * i + u) * d.w..(s * i + u + 1) * d.w];
                        if s == 1 {
                            acc += grow
                                .iter()
                                .zip(&xrow[v..v + wo])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        } else {
                            for (j, gv) in grow.iter().enumerate() {
                                acc += gv * xrow[s * j + v];
                            }
                        }
                    }
                    dk[((o * d.c + c) * d.kh + u) * d.kw + v] = acc;
                }
            }
        }
    }
    dk
}

/// `W x` for `W: [rows, cols]`.
pub(crate) fn matvec(w: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            w[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

/// `Wᵀ g` for `W: [rows, cols]`.
pub(crate) fn matvec_t(w: &[f64], g: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, &gr) in g.iter().enumerate().take(rows) {
        if gr == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += gr * wv;
        }
    }
    out
}

pub(crate) fn outer(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &av in a {
        out.extend(b.iter().map(|bv| av * bv));
    }
    out
}

/// Flat indices of the max element of every non-overlapping `window × window`
/// block of a `[C, H, W]` tensor. Ties go to the lowest flat index.
pub(crate) fn maxpool_indices(x: &[f64], c: usize, h: usize, w: usize, window: usize) -> Vec<usize> {
    let (ho, wo) = (h / window, w / window);
    let mut idx = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let mut best = ch * h * w + (i * window) * w + j * window;
                for u in 0..window {
                    for v in 0..window {
                        let f = ch * h * w + (i * window + u) * w + j * window + v;
                        if x[f] > x[best] {
                            best = f;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

pub(crate) fn avgpool(x: &[f64], c: usize, h: usize, w: usize, window: usize) -> Vec<f64> {
    let (ho, wo) = (h / window, w / window);
    let scale = 1.0 / (window * window) as f64;
    let mut y = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0.0;
                for u in 0..window {
                    for v in 0..window {
                        acc += x[ch * h * w + (i * window + u) * w + j * window + v];
                    }
                }
                y[(ch * ho + i) * wo + j] = acc * scale;
            }
        }
    }
    y
}

/// Transpose of [`avgpool`]: spreads each pooled value evenly over its window.
pub(crate) fn avgpool_t(g: &[f64], c: usize, h: usize, w: usize, window: usize) -> Vec<f64> {
    let (ho, wo) = (h / window, w / window);
    let scale = 1.0 / (window * window) as f64;
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let gv = g[(ch * ho + i) * wo + j] * scale;
                for u in 0..window {
                    for v in 0..window {
                        dx[ch * h * w + (i * window + u) * w + j * window + v] = gv;
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn gather(x: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| x[i]).collect()
}

pub(crate) fn scatter(g: &[f64], idx: &[usize], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (&i, &v) in idx.iter().zip(g) {
        out[i] += v;
    }
    out
}

/// Numerically stable `ln(1 + e^{βx}) / β`.
pub(crate) fn softplus(x: f64, beta: f64) -> f64 {
    let t = beta * x;
    if t > 0.0 {
        x + (-t).exp().ln_1p() / beta
    } else {
        t.exp().ln_1p() / beta
    }
}

/// `σ(βx)`.
pub(crate) fn sigmoid(x: f64, beta: f64) -> f64 {
    let t = beta * x;
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_over_ones_gives_nines() {
        let d = ConvDims { c: 1, h: 5, w: 5, o: 1, kh: 3, kw: 3, stride: 1 };
        let y = conv2d(&[1.0; 25], &[1.0; 9], d);
        assert_eq!(y, vec![9.0; 9]);
    }

    #[test]
    fn conv_transposes_are_adjoint() {
        // <conv(x, k), g> == <x, conv_input_grad(g, k)> == <k, conv_kernel_grad(x, g)>
        let d = ConvDims { c: 2, h: 7, w: 6, o: 3, kh: 3, kw: 2, stride: 2 };
        let x: Vec<f64> = (0..d.c * d.h * d.w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let k: Vec<f64> = (0..d.o * d.c * d.kh * d.kw).map(|i| ((i * 3) % 5) as f64 - 2.0).collect();
        let g: Vec<f64> = (0..d.o * d.ho() * d.wo()).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(&conv2d(&x, &k, d), &g);
        assert_eq!(lhs, dot(&x, &conv2d_input_grad(&g, &k, d)));
        assert_eq!(lhs, dot(&k, &conv2d_kernel_grad(&x, &g, d)));
    }

    #[test]
    fn maxpool_ties_pick_lowest_index() {
        let x = [1.0, 1.0, 1.0, 1.0];
        assert_eq!(maxpool_indices(&x, 1, 2, 2, 2), vec![0]);
        let x = [0.0, 2.0, 2.0, 1.0];
        assert_eq!(maxpool_indices(&x, 1, 2, 2, 2), vec![1]);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert!((softplus(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1e4, 10.0), 1e4);
        assert_eq!(softplus(-1e4, 10.0), 0.0);
        assert_eq!(sigmoid(0.0, 3.0), 0.5);
    }
}
