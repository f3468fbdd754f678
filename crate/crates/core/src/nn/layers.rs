use rand::Rng;

use super::{gemm, relu_backward, relu_inplace, Module, Param, Real};

/// Fully connected layer, `y = x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Param<F>,
    pub b: Param<F>,
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            inputs,
            outputs,
            w: Param::he_uniform(inputs * outputs, inputs, gain, rng),
            b: Param::zeros(outputs),
        }
    }

    pub fn forward(&self, x: &[F], n: usize) -> Vec<F> {
        debug_assert_eq!(x.len(), n * self.inputs);
        let mut y = Vec::with_capacity(n * self.outputs);
        for _ in 0..n {
            y.extend_from_slice(&self.b.value);
        }
        gemm(n, self.inputs, self.outputs, x, false, &self.w.value, false, F::one(), &mut y);
        y
    }

    /// Accumulates parameter gradients and returns `dx` when asked.
    pub fn backward(&mut self, x: &[F], dy: &[F], n: usize, want_dx: bool) -> Option<Vec<F>> {
        gemm(self.inputs, n, self.outputs, x, true, dy, false, F::one(), &mut self.w.grad);
        accumulate_bias(&mut self.b.grad, dy);
        want_dx.then(|| {
            let mut dx = vec![F::zero(); n * self.inputs];
            gemm(n, self.outputs, self.inputs, dy, false, &self.w.value, true, F::zero(), &mut dx);
            dx
        })
    }
}

impl<F: Real> Module<F> for Linear<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>)) {
        f(&self.w);
        f(&self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

fn accumulate_bias<F: Real>(db: &mut [F], dy: &[F]) {
    let c = db.len();
    for row in dy.chunks_exact(c) {
        for (g, &d) in db.iter_mut().zip(row) {
            *g += d;
        }
    }
}

/// First encoder layer: a 2×2 stride-2 convolution applied directly to label
/// maps. A one-hot input has exactly one active class per pixel and slice,
/// so the convolution reduces to summing weight rows selected by label.
#[derive(Debug, Clone)]
pub struct OneHotEmbed<F> {
    pub slices: usize,
    pub classes: usize,
    pub outputs: usize,
    /// rows indexed by `(tap·slices + slice)·classes + class`
    pub w: Param<F>,
    pub b: Param<F>,
}

impl<F: Real> OneHotEmbed<F> {
    pub fn new<R: Rng>(slices: usize, classes: usize, outputs: usize, rng: &mut R) -> Self {
        // effective fan-in is 4 taps × slices active inputs
        Self {
            slices,
            classes,
            outputs,
            w: Param::he_uniform(4 * slices * classes * outputs, 4 * slices, 1.0, rng),
            b: Param::zeros(outputs),
        }
    }

    /// `labels` holds `n` frames of `slices × h × w` class ids; output is
    /// NHWC `(n, h/2, w/2, outputs)`.
    pub fn forward(&self, labels: &[u8], n: usize, h: usize, w: usize) -> Vec<F> {
        let (h2, w2, co) = (h / 2, w / 2, self.outputs);
        let plane = h * w;
        let mut y = vec![F::zero(); n * h2 * w2 * co];
        for f in 0..n {
            let frame = &labels[f * self.slices * plane..(f + 1) * self.slices * plane];
            for i in 0..h2 {
                for j in 0..w2 {
                    let out = &mut y[((f * h2 + i) * w2 + j) * co..][..co];
                    out.copy_from_slice(&self.b.value);
                    for tap in 0..4 {
                        let (di, dj) = (tap / 2, tap % 2);
                        for s in 0..self.slices {
                            let label = frame[s * plane + (2 * i + di) * w + 2 * j + dj] as usize;
                            let row = ((tap * self.slices + s) * self.classes + label) * co;
                            for (o, &wv) in out.iter_mut().zip(&self.w.value[row..row + co]) {
                                *o += wv;
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, labels: &[u8], dy: &[F], n: usize, h: usize, w: usize) {
        let (h2, w2, co) = (h / 2, w / 2, self.outputs);
        let plane = h * w;
        for f in 0..n {
            let frame = &labels[f * self.slices * plane..(f + 1) * self.slices * plane];
            for i in 0..h2 {
                for j in 0..w2 {
                    let g = &dy[((f * h2 + i) * w2 + j) * co..][..co];
                    for tap in 0..4 {
                        let (di, dj) = (tap / 2, tap % 2);
                        for s in 0..self.slices {
                            let label = frame[s * plane + (2 * i + di) * w + 2 * j + dj] as usize;
                            let row = ((tap * self.slices + s) * self.classes + label) * co;
                            for (gw, &gv) in self.w.grad[row..row + co].iter_mut().zip(g) {
                                *gw += gv;
                            }
                        }
                    }
                }
            }
        }
        accumulate_bias(&mut self.b.grad, dy);
    }
}

impl<F: Real> Module<F> for OneHotEmbed<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>)) {
        f(&self.w);
        f(&self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// 2×2 stride-2 convolution (non-overlapping patches), halving resolution.
#[derive(Debug, Clone)]
pub struct Down2x2<F> {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Param<F>,
    pub b: Param<F>,
}

impl<F: Real> Down2x2<F> {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            inputs,
            outputs,
            w: Param::he_uniform(4 * inputs * outputs, 4 * inputs, 1.0, rng),
            b: Param::zeros(outputs),
        }
    }

    fn patches(&self, x: &[F], n: usize, h: usize, w: usize) -> Vec<F> {
        let (h2, w2, c) = (h / 2, w / 2, self.inputs);
        let mut cols = vec![F::zero(); n * h2 * w2 * 4 * c];
        for f in 0..n {
            for i in 0..h2 {
                for j in 0..w2 {
                    let dst = &mut cols[((f * h2 + i) * w2 + j) * 4 * c..][..4 * c];
                    for tap in 0..4 {
                        let (di, dj) = (tap / 2, tap % 2);
                        let src = ((f * h + 2 * i + di) * w + 2 * j + dj) * c;
                        dst[tap * c..(tap + 1) * c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &[F], n: usize, h: usize, w: usize) -> Vec<F> {
        let rows = n * (h / 2) * (w / 2);
        let cols = self.patches(x, n, h, w);
        let mut y = Vec::with_capacity(rows * self.outputs);
        for _ in 0..rows {
            y.extend_from_slice(&self.b.value);
        }
        gemm(rows, 4 * self.inputs, self.outputs, &cols, false, &self.w.value, false, F::one(), &mut y);
        y
    }

    pub fn backward(&mut self, x: &[F], dy: &[F], n: usize, h: usize, w: usize) -> Vec<F> {
        let (h2, w2, c) = (h / 2, w / 2, self.inputs);
        let rows = n * h2 * w2;
        let cols = self.patches(x, n, h, w);
        gemm(4 * c, rows, self.outputs, &cols, true, dy, false, F::one(), &mut self.w.grad);
        accumulate_bias(&mut self.b.grad, dy);
        let mut dcols = cols;
        gemm(rows, self.outputs, 4 * c, dy, false, &self.w.value, true, F::zero(), &mut dcols);
        let mut dx = vec![F::zero(); x.len()];
        for f in 0..n {
            for i in 0..h2 {
                for j in 0..w2 {
                    let src = &dcols[((f * h2 + i) * w2 + j) * 4 * c..][..4 * c];
                    for tap in 0..4 {
                        let (di, dj) = (tap / 2, tap % 2);
                        let dst = ((f * h + 2 * i + di) * w + 2 * j + dj) * c;
                        dx[dst..dst + c].copy_from_slice(&src[tap * c..(tap + 1) * c]);
                    }
                }
            }
        }
        dx
    }
}

impl<F: Real> Module<F> for Down2x2<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>)) {
        f(&self.w);
        f(&self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// 2×2 stride-2 transposed convolution, doubling resolution. Each output
/// pixel receives exactly one input pixel through the weight slice of its
/// position inside the 2×2 block.
#[derive(Debug, Clone)]
pub struct Up2x2<F> {
    pub inputs: usize,
    pub outputs: usize,
    /// `inputs × (4·outputs)`, column `tap·outputs + o`
    pub w: Param<F>,
    pub b: Param<F>,
}

impl<F: Real> Up2x2<F> {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            inputs,
            outputs,
            w: Param::he_uniform(4 * inputs * outputs, inputs, gain, rng),
            b: Param::zeros(outputs),
        }
    }

    pub fn forward(&self, x: &[F], n: usize, h: usize, w: usize) -> Vec<F> {
        let rows = n * h * w;
        let co = self.outputs;
        let mut tmp = vec![F::zero(); rows * 4 * co];
        gemm(rows, self.inputs, 4 * co, x, false, &self.w.value, false, F::zero(), &mut tmp);
        let (h2, w2) = (2 * h, 2 * w);
        let mut y = vec![F::zero(); n * h2 * w2 * co];
        for f in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let src = &tmp[((f * h + i) * w + j) * 4 * co..][..4 * co];
                    for tap in 0..4 {
                        let (di, dj) = (tap / 2, tap % 2);
                        let dst = &mut y[((f * h2 + 2 * i + di) * w2 + 2 * j + dj) * co..][..co];
                        for ((d, &s), &b) in dst.iter_mut().zip(&src[tap * co..]).zip(&self.b.value) {
                            *d = s + b;
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: &[F], dy: &[F], n: usize, h: usize, w: usize, want_dx: bool) -> Option<Vec<F>> {
        let rows = n * h * w;
        let co = self.outputs;
        let (h2, w2) = (2 * h, 2 * w);
        let mut dtmp = vec![F::zero(); rows * 4 * co];
        for f in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let dst = &mut dtmp[((f * h + i) * w + j) * 4 * co..][..4 * co];
                    for tap in 0..4 {
                        let (di, dj) = (tap / 2, tap % 2);
                        let src = ((f * h2 + 2 * i + di) * w2 + 2 * j + dj) * co;
                        dst[tap * co..(tap + 1) * co].copy_from_slice(&dy[src..src + co]);
                    }
                }
            }
        }
        gemm(self.inputs, rows, 4 * co, x, true, &dtmp, false, F::one(), &mut self.w.grad);
        accumulate_bias(&mut self.b.grad, dy);
        want_dx.then(|| {
            let mut dx = vec![F::zero(); rows * self.inputs];
            gemm(rows, 4 * co, self.inputs, &dtmp, false, &self.w.value, true, F::zero(), &mut dx);
            dx
        })
    }
}

impl<F: Real> Module<F> for Up2x2<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>)) {
        f(&self.w);
        f(&self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// 3×3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone)]
pub struct Conv3x3<F> {
    pub inputs: usize,
    pub outputs: usize,
    /// `(9·inputs) × outputs`, row `tap·inputs + c`
    pub w: Param<F>,
    pub b: Param<F>,
}

impl<F: Real> Conv3x3<F> {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            inputs,
            outputs,
            w: Param::he_uniform(9 * inputs * outputs, 9 * inputs, gain, rng),
            b: Param::zeros(outputs),
        }
    }

    fn im2col(&self, x: &[F], n: usize, h: usize, w: usize) -> Vec<F> {
        let c = self.inputs;
        let mut cols = vec![F::zero(); n * h * w * 9 * c];
        for f in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let dst = &mut cols[((f * h + i) * w + j) * 9 * c..][..9 * c];
                    for tap in 0..9 {
                        let si = i as isize + (tap / 3) as isize - 1;
                        let sj = j as isize + (tap % 3) as isize - 1;
                        if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                            continue;
                        }
                        let src = ((f * h + si as usize) * w + sj as usize) * c;
                        dst[tap * c..(tap + 1) * c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &[F], n: usize, h: usize, w: usize) -> Vec<F> {
        let rows = n * h * w;
        let cols = self.im2col(x, n, h, w);
        let mut y = Vec::with_capacity(rows * self.outputs);
        for _ in 0..rows {
            y.extend_from_slice(&self.b.value);
        }
        gemm(rows, 9 * self.inputs, self.outputs, &cols, false, &self.w.value, false, F::one(), &mut y);
        y
    }

    pub fn backward(&mut self, x: &[F], dy: &[F], n: usize, h: usize, w: usize) -> Vec<F> {
        let c = self.inputs;
        let rows = n * h * w;
        let cols = self.im2col(x, n, h, w);
        gemm(9 * c, rows, self.outputs, &cols, true, dy, false, F::one(), &mut self.w.grad);
        accumulate_bias(&mut self.b.grad, dy);
        let mut dcols = cols;
        gemm(rows, self.outputs, 9 * c, dy, false, &self.w.value, true, F::zero(), &mut dcols);
        let mut dx = vec![F::zero(); x.len()];
        for f in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let src = &dcols[((f * h + i) * w + j) * 9 * c..][..9 * c];
                    for tap in 0..9 {
                        let si = i as isize + (tap / 3) as isize - 1;
                        let sj = j as isize + (tap % 3) as isize - 1;
                        if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                            continue;
                        }
                        let dst = ((f * h + si as usize) * w + sj as usize) * c;
                        for (d, &s) in dx[dst..dst + c].iter_mut().zip(&src[tap * c..(tap + 1) * c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
        dx
    }
}

impl<F: Real> Module<F> for Conv3x3<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>)) {
        f(&self.w);
        f(&self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// `relu(x + conv2(relu(conv1(x))))`, channel count preserved.
#[derive(Debug, Clone)]
pub struct ResBlock<F> {
    pub conv1: Conv3x3<F>,
    pub conv2: Conv3x3<F>,
}

/// Activations kept for the backward pass of a [`ResBlock`].
#[derive(Debug, Clone)]
pub struct ResCache<F> {
    pub input: Vec<F>,
    pub hidden: Vec<F>,
    pub output: Vec<F>,
}

impl<F: Real> ResBlock<F> {
    pub fn new<R: Rng>(channels: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv3x3::new(channels, channels, 1.0, rng),
            // small residual branch at init keeps the block near identity
            conv2: Conv3x3::new(channels, channels, 0.25, rng),
        }
    }

    pub fn forward(&self, x: Vec<F>, n: usize, h: usize, w: usize) -> ResCache<F> {
        let mut hidden = self.conv1.forward(&x, n, h, w);
        relu_inplace(&mut hidden);
        let mut output = self.conv2.forward(&hidden, n, h, w);
        for (o, &i) in output.iter_mut().zip(&x) {
            *o += i;
        }
        relu_inplace(&mut output);
        ResCache {
            input: x,
            hidden,
            output,
        }
    }

    pub fn backward(&mut self, cache: &ResCache<F>, dy: &[F], n: usize, h: usize, w: usize) -> Vec<F> {
        let mut g = dy.to_vec();
        relu_backward(&cache.output, &mut g);
        let mut dhidden = self.conv2.backward(&cache.hidden, &g, n, h, w);
        relu_backward(&cache.hidden, &mut dhidden);
        let mut dx = self.conv1.backward(&cache.input, &dhidden, n, h, w);
        for (d, &s) in dx.iter_mut().zip(&g) {
            *d += s;
        }
        dx
    }
}

impl<F: Real> Module<F> for ResBlock<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
    }
}
