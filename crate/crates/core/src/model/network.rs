//! Encoder, decoder and classifier heads with explicit activation caches.

use rand::Rng;

use super::ModelConfig;
use crate::nn::{
    relu_backward, relu_inplace, Down2x2, Linear, Module, OneHotEmbed, Param, Real, ResBlock,
    ResCache, Up2x2,
};
use crate::phantom::NUM_CLASSES;

/// Activations of one resolution stage: the post-ReLU entry activation and
/// the residual blocks applied to it.
#[derive(Debug, Clone)]
pub(crate) struct StageCache<F> {
    entry: Vec<F>,
    blocks: Vec<ResCache<F>>,
}

impl<F: Real> StageCache<F> {
    fn run(blocks: &[ResBlock<F>], entry: Vec<F>, n: usize, h: usize, w: usize) -> Self {
        let mut caches: Vec<ResCache<F>> = Vec::with_capacity(blocks.len());
        let mut entry = Some(entry);
        for b in blocks {
            let x = match caches.last() {
                Some(c) => c.output.clone(),
                None => entry.take().unwrap_or_default(),
            };
            caches.push(b.forward(x, n, h, w));
        }
        Self {
            entry: entry.unwrap_or_default(),
            blocks: caches,
        }
    }

    fn entry(&self) -> &[F] {
        self.blocks.first().map_or(&self.entry, |c| &c.input)
    }

    fn output(&self) -> &[F] {
        self.blocks.last().map_or(&self.entry, |c| &c.output)
    }

    /// Back through the residual blocks and the entry ReLU.
    fn backward(&self, blocks: &mut [ResBlock<F>], mut g: Vec<F>, n: usize, h: usize, w: usize) -> Vec<F> {
        for (b, c) in blocks.iter_mut().zip(&self.blocks).rev() {
            g = b.backward(c, &g, n, h, w);
        }
        relu_backward(self.entry(), &mut g);
        g
    }
}

#[derive(Debug, Clone)]
pub struct Encoder<F> {
    pub embed: OneHotEmbed<F>,
    pub downs: Vec<Down2x2<F>>,
    pub blocks: Vec<Vec<ResBlock<F>>>,
    pub mu: Linear<F>,
    pub log_sigma: Linear<F>,
}

pub(crate) struct EncoderCache<F> {
    n: usize,
    stages: Vec<StageCache<F>>,
}

impl<F: Real> Encoder<F> {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let fm = &cfg.feature_maps;
        let embed = OneHotEmbed::new(cfg.slices, NUM_CLASSES, fm[0], rng);
        let downs = (1..fm.len()).map(|i| Down2x2::new(fm[i - 1], fm[i], rng)).collect();
        let blocks = fm
            .iter()
            .zip(&cfg.res_blocks)
            .map(|(&c, &k)| (0..k).map(|_| ResBlock::new(c, rng)).collect())
            .collect();
        let flat = cfg.bottleneck_len();
        Self {
            embed,
            downs,
            blocks,
            mu: Linear::new(flat, cfg.latent_dim, 0.5, rng),
            log_sigma: Linear::new(flat, cfg.latent_dim, 0.1, rng),
        }
    }

    /// `labels` holds `n` frames back to back. Returns `(mu, log_sigma)` as
    /// `n × D` row-major buffers.
    pub(crate) fn forward(&self, labels: &[u8], n: usize, h: usize, w: usize) -> (Vec<F>, Vec<F>, EncoderCache<F>) {
        let mut stages: Vec<StageCache<F>> = Vec::with_capacity(self.blocks.len());
        let (mut hh, mut ww) = (h / 2, w / 2);
        let mut x = self.embed.forward(labels, n, h, w);
        relu_inplace(&mut x);
        stages.push(StageCache::run(&self.blocks[0], x, n, hh, ww));
        for (i, down) in self.downs.iter().enumerate() {
            let mut x = down.forward(stages[i].output(), n, hh, ww);
            hh /= 2;
            ww /= 2;
            relu_inplace(&mut x);
            stages.push(StageCache::run(&self.blocks[i + 1], x, n, hh, ww));
        }
        let feat = stages.last().map(StageCache::output).unwrap_or_default();
        let mu = self.mu.forward(feat, n);
        let ls = self.log_sigma.forward(feat, n);
        (mu, ls, EncoderCache { n, stages })
    }

    pub(crate) fn backward(
        &mut self,
        cache: &EncoderCache<F>,
        labels: &[u8],
        dmu: &[F],
        dls: Option<&[F]>,
        h: usize,
        w: usize,
    ) {
        let n = cache.n;
        let last = cache.stages.len() - 1;
        let feat = cache.stages[last].output();
        let mut g = self.mu.backward(feat, dmu, n, true).unwrap_or_default();
        if let Some(dls) = dls {
            let gl = self.log_sigma.backward(feat, dls, n, true).unwrap_or_default();
            for (a, b) in g.iter_mut().zip(gl) {
                *a += b;
            }
        }
        let stages = cache.stages.len();
        for i in (0..stages).rev() {
            let (hh, ww) = (h >> (i + 1), w >> (i + 1));
            g = cache.stages[i].backward(&mut self.blocks[i], g, n, hh, ww);
            if i > 0 {
                g = self.downs[i - 1].backward(cache.stages[i - 1].output(), &g, n, hh * 2, ww * 2);
            } else {
                self.embed.backward(labels, &g, n, h, w);
            }
        }
    }
}

impl<F: Real> Module<F> for Encoder<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>)) {
        self.embed.visit(f);
        self.downs.iter().for_each(|m| m.visit(f));
        self.blocks.iter().flatten().for_each(|m| m.visit(f));
        self.mu.visit(f);
        self.log_sigma.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.embed.visit_mut(f);
        self.downs.iter_mut().for_each(|m| m.visit_mut(f));
        self.blocks.iter_mut().flatten().for_each(|m| m.visit_mut(f));
        self.mu.visit_mut(f);
        self.log_sigma.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<F> {
    pub fc: Linear<F>,
    pub blocks: Vec<Vec<ResBlock<F>>>,
    /// `ups[i]` lifts stage `i` to the resolution of stage `i - 1`; `ups[0]`
    /// emits `S × 4` logits at full resolution.
    pub ups: Vec<Up2x2<F>>,
}

pub(crate) struct DecoderCache<F> {
    n: usize,
    z: Vec<F>,
    /// indexed by stage; entry activation is the fc output or the ReLU'd
    /// output of `ups[i + 1]`
    stages: Vec<StageCache<F>>,
}

impl<F: Real> Decoder<F> {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let fm = &cfg.feature_maps;
        let blocks = fm
            .iter()
            .zip(&cfg.res_blocks)
            .map(|(&c, &k)| (0..k).map(|_| ResBlock::new(c, rng)).collect())
            .collect();
        let ups = (0..fm.len())
            .map(|i| {
                // the output layer starts small so early logits sit near the bias
                let (out, gain) = if i == 0 { (cfg.slices * NUM_CLASSES, 0.1) } else { (fm[i - 1], 1.0) };
                Up2x2::new(fm[i], out, gain, rng)
            })
            .collect();
        Self {
            fc: Linear::new(cfg.latent_dim, cfg.bottleneck_len(), 1.0, rng),
            blocks,
            ups,
        }
    }

    /// Returns NHWC logits `(n, h, w, S·4)`.
    pub(crate) fn forward(&self, z: Vec<F>, n: usize, h: usize, w: usize) -> (Vec<F>, DecoderCache<F>) {
        let last = self.ups.len() - 1;
        let mut x = self.fc.forward(&z, n);
        relu_inplace(&mut x);
        let mut stages: Vec<Option<StageCache<F>>> = (0..=last).map(|_| None).collect();
        let mut logits = Vec::new();
        for i in (0..=last).rev() {
            let (hh, ww) = (h >> (i + 1), w >> (i + 1));
            let st = StageCache::run(&self.blocks[i], std::mem::take(&mut x), n, hh, ww);
            let mut y = self.ups[i].forward(st.output(), n, hh, ww);
            stages[i] = Some(st);
            if i > 0 {
                relu_inplace(&mut y);
                x = y;
            } else {
                logits = y;
            }
        }
        let stages = stages.into_iter().map(|s| s.expect("every stage ran")).collect();
        (logits, DecoderCache { n, z, stages })
    }

    /// Returns `dL/dz`.
    pub(crate) fn backward(&mut self, cache: &DecoderCache<F>, dlogits: &[F], h: usize, w: usize) -> Vec<F> {
        let n = cache.n;
        let mut g = dlogits.to_vec();
        for i in 0..self.ups.len() {
            let (hh, ww) = (h >> (i + 1), w >> (i + 1));
            let st = &cache.stages[i];
            g = self.ups[i]
                .backward(st.output(), &g, n, hh, ww, true)
                .unwrap_or_default();
            g = st.backward(&mut self.blocks[i], g, n, hh, ww);
        }
        self.fc.backward(&cache.z, &g, n, true).unwrap_or_default()
    }
}

impl<F: Real> Module<F> for Decoder<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>)) {
        self.fc.visit(f);
        self.blocks.iter().flatten().for_each(|m| m.visit(f));
        self.ups.iter().for_each(|m| m.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.fc.visit_mut(f);
        self.blocks.iter_mut().flatten().for_each(|m| m.visit_mut(f));
        self.ups.iter_mut().for_each(|m| m.visit_mut(f));
    }
}

/// Shared per-timepoint embedding of a latent column range, concatenation
/// over time, then fully connected layers down to a single logit.
#[derive(Debug, Clone)]
pub struct Head<F> {
    pub offset: usize,
    pub width: usize,
    pub frames: usize,
    pub embed: Linear<F>,
    pub layers: Vec<Linear<F>>,
}

pub(crate) struct HeadCache<F> {
    n: usize,
    input: Vec<F>,
    /// post-ReLU activations: embedding, then each hidden layer
    acts: Vec<Vec<F>>,
}

impl<F: Real> Head<F> {
    pub fn new<R: Rng>(offset: usize, width: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut sizes = vec![cfg.frames * cfg.embed_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(1);
        Self {
            offset,
            width,
            frames: cfg.frames,
            embed: Linear::new(width, cfg.embed_dim, 1.0, rng),
            layers: sizes
                .windows(2)
                .map(|p| Linear::new(p[0], p[1], 1.0, rng))
                .collect(),
        }
    }

    /// `mu` is `(n·T) × D`, subject-major. Returns `n` logits.
    pub(crate) fn forward(&self, mu: &[F], n: usize, latent_dim: usize) -> (Vec<F>, HeadCache<F>) {
        let rows = n * self.frames;
        let mut input = Vec::with_capacity(rows * self.width);
        for r in 0..rows {
            input.extend_from_slice(&mu[r * latent_dim + self.offset..][..self.width]);
        }
        let mut e = self.embed.forward(&input, rows);
        relu_inplace(&mut e);
        let mut acts = vec![e];
        let last = self.layers.len() - 1;
        let mut logits = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(acts.last().map(Vec::as_slice).unwrap_or_default(), n);
            if i < last {
                relu_inplace(&mut y);
                acts.push(y);
            } else {
                logits = y;
            }
        }
        (logits, HeadCache { n, input, acts })
    }

    /// Accumulates parameter gradients and adds `dL/dmu` into `dmu`.
    pub(crate) fn backward(&mut self, cache: &HeadCache<F>, dlogits: &[F], dmu: &mut [F], latent_dim: usize) {
        let n = cache.n;
        let mut g = dlogits.to_vec();
        for i in (0..self.layers.len()).rev() {
            g = self.layers[i].backward(&cache.acts[i], &g, n, true).unwrap_or_default();
            relu_backward(&cache.acts[i], &mut g);
        }
        let rows = n * self.frames;
        let dx = self.embed.backward(&cache.input, &g, rows, true).unwrap_or_default();
        for r in 0..rows {
            let dst = &mut dmu[r * latent_dim + self.offset..][..self.width];
            for (d, &s) in dst.iter_mut().zip(&dx[r * self.width..(r + 1) * self.width]) {
                *d += s;
            }
        }
    }
}

impl<F: Real> Module<F> for Head<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>)) {
        self.embed.visit(f);
        self.layers.iter().for_each(|m| m.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.embed.visit_mut(f);
        self.layers.iter_mut().for_each(|m| m.visit_mut(f));
    }
}
