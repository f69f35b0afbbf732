//! Minimal f64 layers with hand-written backward passes.
//!
//! Layers do not own their weights. Each one records an offset into a flat
//! parameter slice (one slice per parameter group) so a model can expose its
//! parameters as four disjoint vectors and optimise them independently.

use rand::Rng;

/// Planar `C x H x W` activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), c * h * w);
        Tensor { c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn same_shape(&self) -> Tensor {
        Tensor::zeros(self.c, self.h, self.w)
    }

    pub fn relu(&self) -> Tensor {
        Tensor::from_vec(self.c, self.h, self.w, self.data.iter().map(|&v| v.max(0.0)).collect())
    }

    /// Gradient through a ReLU whose *output* is `out`.
    pub fn relu_backward(out: &Tensor, dy: &Tensor) -> Tensor {
        let data = out
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
            .collect();
        Tensor::from_vec(dy.c, dy.h, dy.w, data)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn global_avg_pool(&self) -> Vec<f64> {
        let p = self.plane() as f64;
        self.data.chunks(self.plane()).map(|ch| ch.iter().sum::<f64>() / p).collect()
    }
}

/// Valid output positions `o` such that `o * stride + k - pad` lies in `[0, n)`.
#[inline]
fn conv_range(out: usize, n: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let off = k as isize - pad as isize;
    let s = stride as isize;
    // o*s + off >= 0  ->  o >= ceil(-off / s)
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    // o*s + off <= n-1  ->  o <= floor((n-1-off)/s)
    let hi_num = n as isize - 1 - off;
    let hi = if hi_num < 0 { -1 } else { hi_num / s };
    let hi = hi.min(out as isize - 1);
    if hi < lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize + 1)
    }
}

/// Square-kernel 2-D convolution. Weights `[out][in][k][k]` then biases `[out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub offset: usize,
}

impl Conv2d {
    pub fn param_count(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k + self.out_c
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn wi(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        self.offset + ((o * self.in_c + i) * self.k + ky) * self.k + kx
    }

    fn bi(&self, o: usize) -> usize {
        self.offset + self.out_c * self.in_c * self.k * self.k + o
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng, gain: f64) {
        let fan_in = (self.in_c * self.k * self.k) as f64;
        let bound = gain * (6.0 / fan_in).sqrt();
        let nw = self.out_c * self.in_c * self.k * self.k;
        for p in &mut params[self.offset..self.offset + nw] {
            *p = rng.random_range(-bound..bound);
        }
        for p in &mut params[self.offset + nw..self.offset + self.param_count()] {
            *p = 0.0;
        }
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.in_c);
        let (oh, ow) = self.out_size(x.h, x.w);
        let mut y = Tensor::zeros(self.out_c, oh, ow);
        let s = self.stride;
        for o in 0..self.out_c {
            let yo = &mut y.data[o * oh * ow..(o + 1) * oh * ow];
            yo.fill(params[self.bi(o)]);
            for i in 0..self.in_c {
                let xi = &x.data[i * x.h * x.w..(i + 1) * x.h * x.w];
                for ky in 0..self.k {
                    let (y0, y1) = conv_range(oh, x.h, s, ky, self.pad);
                    for kx in 0..self.k {
                        let wv = params[self.wi(o, i, ky, kx)];
                        let (x0, x1) = conv_range(ow, x.w, s, kx, self.pad);
                        for oy in y0..y1 {
                            let iy = oy * s + ky - self.pad;
                            let row = &xi[iy * x.w..];
                            let out = &mut yo[oy * ow..(oy + 1) * ow];
                            for ox in x0..x1 {
                                out[ox] += wv * row[ox * s + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, params: &[f64], x: &Tensor, dy: &Tensor, grads: &mut [f64]) -> Tensor {
        let mut dx = x.same_shape();
        let (oh, ow) = (dy.h, dy.w);
        let s = self.stride;
        for o in 0..self.out_c {
            let go = &dy.data[o * oh * ow..(o + 1) * oh * ow];
            grads[self.bi(o)] += go.iter().sum::<f64>();
            for i in 0..self.in_c {
                let xi = &x.data[i * x.h * x.w..(i + 1) * x.h * x.w];
                let dxi_base = i * x.h * x.w;
                for ky in 0..self.k {
                    let (y0, y1) = conv_range(oh, x.h, s, ky, self.pad);
                    for kx in 0..self.k {
                        let widx = self.wi(o, i, ky, kx);
                        let wv = params[widx];
                        let (x0, x1) = conv_range(ow, x.w, s, kx, self.pad);
                        let mut gw = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * s + ky - self.pad;
                            let g = &go[oy * ow..(oy + 1) * ow];
                            let xrow = &xi[iy * x.w..(iy + 1) * x.w];
                            let dxrow = &mut dx.data[dxi_base + iy * x.w..dxi_base + (iy + 1) * x.w];
                            for ox in x0..x1 {
                                let ix = ox * s + kx - self.pad;
                                gw += g[ox] * xrow[ix];
                                dxrow[ix] += wv * g[ox];
                            }
                        }
                        grads[widx] += gw;
                    }
                }
            }
        }
        dx
    }
}

/// Transposed convolution (fractionally strided). Weights `[in][out][k][k]`
/// then biases `[out]`. Output size is `(n - 1) * stride - 2 * pad + k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTranspose2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub offset: usize,
}

impl ConvTranspose2d {
    pub fn param_count(&self) -> usize {
        self.in_c * self.out_c * self.k * self.k + self.out_c
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.k - 2 * self.pad,
            (w - 1) * self.stride + self.k - 2 * self.pad,
        )
    }

    fn wi(&self, i: usize, o: usize, ky: usize, kx: usize) -> usize {
        self.offset + ((i * self.out_c + o) * self.k + ky) * self.k + kx
    }

    fn bi(&self, o: usize) -> usize {
        self.offset + self.in_c * self.out_c * self.k * self.k + o
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng, gain: f64) {
        // each output sees roughly in_c * (k / stride)^2 taps
        let taps = (self.k as f64 / self.stride as f64).powi(2).max(1.0);
        let bound = gain * (6.0 / (self.in_c as f64 * taps)).sqrt();
        let nw = self.in_c * self.out_c * self.k * self.k;
        for p in &mut params[self.offset..self.offset + nw] {
            *p = rng.random_range(-bound..bound);
        }
        for p in &mut params[self.offset + nw..self.offset + self.param_count()] {
            *p = 0.0;
        }
    }

    // input positions i such that i*s + k - pad lies in [0, out)
    fn in_range(&self, n_in: usize, n_out: usize, k: usize) -> (usize, usize) {
        let off = k as isize - self.pad as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_num = n_out as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { (hi_num / s).min(n_in as isize - 1) };
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> Tensor {
        let (oh, ow) = self.out_size(x.h, x.w);
        let mut y = Tensor::zeros(self.out_c, oh, ow);
        let s = self.stride;
        for o in 0..self.out_c {
            let b = params[self.bi(o)];
            y.data[o * oh * ow..(o + 1) * oh * ow].fill(b);
        }
        for i in 0..self.in_c {
            let xi = &x.data[i * x.h * x.w..(i + 1) * x.h * x.w];
            for o in 0..self.out_c {
                let base = o * oh * ow;
                for ky in 0..self.k {
                    let (y0, y1) = self.in_range(x.h, oh, ky);
                    for kx in 0..self.k {
                        let wv = params[self.wi(i, o, ky, kx)];
                        let (x0, x1) = self.in_range(x.w, ow, kx);
                        for iy in y0..y1 {
                            let oy = iy * s + ky - self.pad;
                            for ix in x0..x1 {
                                let ox = ix * s + kx - self.pad;
                                y.data[base + oy * ow + ox] += wv * xi[iy * x.w + ix];
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, params: &[f64], x: &Tensor, dy: &Tensor, grads: &mut [f64]) -> Tensor {
        let mut dx = x.same_shape();
        let (oh, ow) = (dy.h, dy.w);
        let s = self.stride;
        for o in 0..self.out_c {
            grads[self.bi(o)] += dy.data[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
        }
        for i in 0..self.in_c {
            let xi_base = i * x.h * x.w;
            for o in 0..self.out_c {
                let base = o * oh * ow;
                for ky in 0..self.k {
                    let (y0, y1) = self.in_range(x.h, oh, ky);
                    for kx in 0..self.k {
                        let widx = self.wi(i, o, ky, kx);
                        let wv = params[widx];
                        let (x0, x1) = self.in_range(x.w, ow, kx);
                        let mut gw = 0.0;
                        for iy in y0..y1 {
                            let oy = iy * s + ky - self.pad;
                            for ix in x0..x1 {
                                let ox = ix * s + kx - self.pad;
                                let g = dy.data[base + oy * ow + ox];
                                gw += g * x.data[xi_base + iy * x.w + ix];
                                dx.data[xi_base + iy * x.w + ix] += wv * g;
                            }
                        }
                        grads[widx] += gw;
                    }
                }
            }
        }
        dx
    }
}

/// Fully connected layer `y = W x + b`, weights `[out][in]` then biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub in_f: usize,
    pub out_f: usize,
    pub offset: usize,
}

impl Linear {
    pub fn param_count(&self) -> usize {
        self.in_f * self.out_f + self.out_f
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng, gain: f64) {
        let bound = gain * (6.0 / self.in_f as f64).sqrt();
        let nw = self.in_f * self.out_f;
        for p in &mut params[self.offset..self.offset + nw] {
            *p = rng.random_range(-bound..bound);
        }
        for p in &mut params[self.offset + nw..self.offset + self.param_count()] {
            *p = 0.0;
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let w = &params[self.offset..self.offset + self.in_f * self.out_f];
        let b = &params[self.offset + self.in_f * self.out_f..self.offset + self.param_count()];
        (0..self.out_f)
            .map(|o| {
                let row = &w[o * self.in_f..(o + 1) * self.in_f];
                b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let nw = self.in_f * self.out_f;
        let mut dx = vec![0.0; self.in_f];
        for o in 0..self.out_f {
            let g = dy[o];
            grads[self.offset + nw + o] += g;
            if g == 0.0 {
                continue;
            }
            for i in 0..self.in_f {
                grads[self.offset + o * self.in_f + i] += g * x[i];
                dx[i] += params[self.offset + o * self.in_f + i] * g;
            }
        }
        dx
    }
}

/// Squeeze-and-excitation channel gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SqueezeExcite {
    pub squeeze: Linear,
    pub excite: Linear,
}

/// Saved activations of one squeeze-and-excitation pass.
#[derive(Debug, Clone)]
pub struct SeCache {
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    gate: Vec<f64>,
}

impl SqueezeExcite {
    pub fn new(channels: usize, reduction: usize, offset: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        let squeeze = Linear {
            in_f: channels,
            out_f: hidden,
            offset,
        };
        let excite = Linear {
            in_f: hidden,
            out_f: channels,
            offset: offset + squeeze.param_count(),
        };
        SqueezeExcite { squeeze, excite }
    }

    pub fn param_count(&self) -> usize {
        self.squeeze.param_count() + self.excite.param_count()
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        self.squeeze.init(params, rng, 1.0);
        self.excite.init(params, rng, 0.5);
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> (Tensor, SeCache) {
        let pooled = x.global_avg_pool();
        let hidden: Vec<f64> = self.squeeze.forward(params, &pooled).into_iter().map(|v| v.max(0.0)).collect();
        let gate: Vec<f64> = self
            .excite
            .forward(params, &hidden)
            .into_iter()
            .map(crate::heatmap::sigmoid)
            .collect();
        let mut y = x.clone();
        let p = x.plane();
        for (c, g) in gate.iter().enumerate() {
            for v in &mut y.data[c * p..(c + 1) * p] {
                *v *= g;
            }
        }
        (y, SeCache { pooled, hidden, gate })
    }

    pub fn backward(&self, params: &[f64], x: &Tensor, cache: &SeCache, dy: &Tensor, grads: &mut [f64]) -> Tensor {
        let p = x.plane();
        let mut dx = dy.clone();
        let mut dgate = vec![0.0; x.c];
        for c in 0..x.c {
            let g = cache.gate[c];
            let mut acc = 0.0;
            for j in c * p..(c + 1) * p {
                acc += dy.data[j] * x.data[j];
                dx.data[j] = dy.data[j] * g;
            }
            dgate[c] = acc;
        }
        let dlogit: Vec<f64> = dgate
            .iter()
            .zip(&cache.gate)
            .map(|(d, g)| d * g * (1.0 - g))
            .collect();
        let dhidden = self.excite.backward(params, &cache.hidden, &dlogit, grads);
        let dhidden: Vec<f64> = dhidden
            .iter()
            .zip(&cache.hidden)
            .map(|(d, h)| if *h > 0.0 { *d } else { 0.0 })
            .collect();
        let dpooled = self.squeeze.backward(params, &cache.pooled, &dhidden, grads);
        for c in 0..x.c {
            let add = dpooled[c] / p as f64;
            for v in &mut dx.data[c * p..(c + 1) * p] {
                *v += add;
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(11)
    }

    fn rand_tensor(c: usize, h: usize, w: usize, r: &mut impl Rng) -> Tensor {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    // Naive reference convolution written directly from the definition.
    fn conv_reference(l: &Conv2d, p: &[f64], x: &Tensor) -> Tensor {
        let (oh, ow) = l.out_size(x.h, x.w);
        let mut y = Tensor::zeros(l.out_c, oh, ow);
        for o in 0..l.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = p[l.bi(o)];
                    for i in 0..l.in_c {
                        for ky in 0..l.k {
                            for kx in 0..l.k {
                                let iy = (oy * l.stride + ky) as isize - l.pad as isize;
                                let ix = (ox * l.stride + kx) as isize - l.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                    acc += p[l.wi(o, i, ky, kx)] * x.data[(i * x.h + iy as usize) * x.w + ix as usize];
                                }
                            }
                        }
                    }
                    y.data[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_reference() {
        let mut r = rng();
        for (k, s, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
            let l = Conv2d { in_c: 2, out_c: 3, k, stride: s, pad, offset: 5 };
            let mut p = vec![0.0; 5 + l.param_count()];
            l.init(&mut p, &mut r, 1.0);
            for v in &mut p[5 + l.param_count() - 3..] {
                *v = r.random_range(-1.0..1.0);
            }
            let x = rand_tensor(2, 7, 6, &mut r);
            let a = l.forward(&p, &x);
            let b = conv_reference(&l, &p, &x);
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    // Scalar loss L = sum(c .* y) for a fixed random c; checks every
    // parameter and input gradient against central differences.
    fn check_layer<F>(n_params: usize, x: &Tensor, fwd: F, bwd: &dyn Fn(&[f64], &Tensor, &Tensor, &mut [f64]) -> Tensor)
    where
        F: Fn(&[f64], &Tensor) -> Tensor,
    {
        let mut r = rng();
        let p: Vec<f64> = (0..n_params).map(|_| r.random_range(-0.5..0.5)).collect();
        let y = fwd(&p, x);
        let c: Vec<f64> = (0..y.data.len()).map(|_| r.random_range(-1.0..1.0)).collect();
        let loss = |p: &[f64], x: &Tensor| fwd(p, x).data.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        let dy = Tensor::from_vec(y.c, y.h, y.w, c.clone());
        let mut g = vec![0.0; n_params];
        let dx = bwd(&p, x, &dy, &mut g);
        let h = 1e-6;
        for j in 0..n_params {
            let mut pp = p.clone();
            pp[j] += h;
            let mut pm = p.clone();
            pm[j] -= h;
            let fd = (loss(&pp, x) - loss(&pm, x)) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6 * (1.0 + fd.abs()), "param {j}: fd {fd} vs {}", g[j]);
        }
        for j in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[j] += h;
            let mut xm = x.clone();
            xm.data[j] -= h;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
            assert!((fd - dx.data[j]).abs() < 1e-6 * (1.0 + fd.abs()), "input {j}");
        }
    }

    #[test]
    fn conv_gradients() {
        let mut r = rng();
        let x = rand_tensor(2, 6, 5, &mut r);
        for (k, s, pad) in [(3, 2, 1), (1, 1, 0), (3, 1, 1)] {
            let l = Conv2d { in_c: 2, out_c: 3, k, stride: s, pad, offset: 0 };
            check_layer(l.param_count(), &x, |p, x| l.forward(p, x), &|p, x, dy, g| l.backward(p, x, dy, g));
        }
    }

    #[test]
    fn conv_transpose_gradients_and_shape() {
        let mut r = rng();
        let x = rand_tensor(3, 3, 4, &mut r);
        for (k, s, pad) in [(4, 2, 1), (2, 2, 0), (3, 1, 1)] {
            let l = ConvTranspose2d { in_c: 3, out_c: 2, k, stride: s, pad, offset: 0 };
            if (k, s, pad) == (4, 2, 1) {
                assert_eq!(l.out_size(3, 4), (6, 8));
            }
            check_layer(l.param_count(), &x, |p, x| l.forward(p, x), &|p, x, dy, g| l.backward(p, x, dy, g));
        }
    }

    #[test]
    fn linear_and_se_gradients() {
        let mut r = rng();
        let x = rand_tensor(4, 3, 3, &mut r);
        let se = SqueezeExcite::new(4, 2, 0);
        check_layer(
            se.param_count(),
            &x,
            |p, x| se.forward(p, x).0,
            &|p, x, dy, g| {
                let (_, cache) = se.forward(p, x);
                se.backward(p, x, &cache, dy, g)
            },
        );
        let lin = Linear { in_f: 36, out_f: 5, offset: 0 };
        check_layer(
            lin.param_count(),
            &x,
            |p, x| Tensor::from_vec(5, 1, 1, lin.forward(p, &x.data)),
            &|p, x, dy, g| Tensor::from_vec(x.c, x.h, x.w, lin.backward(p, &x.data, &dy.data, g)),
        );
    }
}
