//! Sequence VAE with a primary classifier over the latent means and concept
//! classifiers restricted to contiguous latent ranges.

mod checkpoint;
mod network;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader};
pub use network::{Decoder, Encoder, Head};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Module, Param, Real};
use crate::phantom::{SegFrame, SegSequence, NUM_CLASSES};
use crate::rng;

/// Lower clamp applied to every probability inside a logarithm.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSpec {
    pub name: String,
    /// first latent index read by the concept head
    pub start: usize,
    pub size: usize,
}

impl ConceptSpec {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    pub alpha: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.2,
            gamma: 1.0,
            alpha: vec![0.9],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.beta) {
            return Err(Error::config("weights.beta", "must be finite and >= 0"));
        }
        if !ok(self.gamma) {
            return Err(Error::config("weights.gamma", "must be finite and >= 0"));
        }
        if let Some(i) = self.alpha.iter().position(|&a| !ok(a)) {
            return Err(Error::config(format!("weights.alpha[{i}]"), "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha.get(k).copied().unwrap_or(0.0)
    }

    /// Same weights with classifier terms switched off.
    pub fn vae_only(&self) -> Self {
        Self {
            beta: self.beta,
            gamma: 0.0,
            alpha: vec![0.0; self.alpha.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub slices: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub latent_dim: usize,
    pub class_count: usize,
    /// channels per encoder stage; each stage halves the resolution
    pub feature_maps: Vec<usize>,
    /// residual blocks per stage, same length as `feature_maps`
    pub res_blocks: Vec<usize>,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub concepts: Vec<ConceptSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            slices: 3,
            frames: 25,
            height: 80,
            width: 80,
            latent_dim: 128,
            class_count: NUM_CLASSES,
            feature_maps: vec![32, 64, 128, 256],
            res_blocks: vec![1, 1, 1, 1],
            embed_dim: 32,
            hidden: vec![256, 64],
            concepts: vec![ConceptSpec {
                name: "SF".into(),
                start: 0,
                size: 64,
            }],
        }
    }

    /// Workstation-sized network: D=32 with a 16-wide concept range.
    pub fn desk() -> Self {
        Self {
            latent_dim: 32,
            feature_maps: vec![8, 16, 16, 32],
            res_blocks: vec![0, 0, 1, 1],
            embed_dim: 8,
            hidden: vec![64, 16],
            concepts: vec![ConceptSpec {
                name: "SF".into(),
                start: 0,
                size: 16,
            }],
            ..Self::paper()
        }
    }

    /// 8×8 frames, D=4, T=3; small enough for exhaustive finite differences.
    pub fn tiny() -> Self {
        Self {
            slices: 3,
            frames: 3,
            height: 8,
            width: 8,
            latent_dim: 4,
            class_count: NUM_CLASSES,
            feature_maps: vec![2, 3],
            res_blocks: vec![1, 1],
            embed_dim: 4,
            hidden: vec![8, 4],
            concepts: vec![ConceptSpec {
                name: "SF".into(),
                start: 0,
                size: 2,
            }],
        }
    }

    pub fn stages(&self) -> usize {
        self.feature_maps.len()
    }

    /// Spatial size of the deepest stage.
    pub fn bottleneck(&self) -> (usize, usize) {
        (self.height >> self.stages(), self.width >> self.stages())
    }

    pub fn bottleneck_len(&self) -> usize {
        let (h, w) = self.bottleneck();
        h * w * self.feature_maps.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("model.{key}"), "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("slices", self.slices)?;
        positive("frames", self.frames)?;
        positive("latent_dim", self.latent_dim)?;
        positive("embed_dim", self.embed_dim)?;
        if self.slices > u8::MAX as usize || self.frames > u8::MAX as usize {
            return Err(Error::config("model.slices", "slices and frames must fit in one byte"));
        }
        if self.class_count != NUM_CLASSES {
            return Err(Error::config("model.class_count", format!("must be {NUM_CLASSES}")));
        }
        if self.feature_maps.is_empty() || self.feature_maps.contains(&0) {
            return Err(Error::config("model.feature_maps", "need at least one stage, all widths positive"));
        }
        if self.res_blocks.len() != self.feature_maps.len() {
            return Err(Error::config("model.res_blocks", "must have one entry per feature-map stage"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "widths must be positive"));
        }
        let unit = 1usize << self.stages();
        for (key, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % unit != 0 {
                return Err(Error::config(
                    format!("model.{key}"),
                    format!("{v} is not a positive multiple of 2^stages = {unit}"),
                ));
            }
        }
        let mut covered = vec![false; self.latent_dim];
        for (k, c) in self.concepts.iter().enumerate() {
            if c.size == 0 {
                return Err(Error::config(format!("model.concepts[{k}].size"), "must be >= 1"));
            }
            if c.start + c.size > self.latent_dim {
                return Err(Error::config(
                    format!("model.concepts[{k}]"),
                    format!("range {}..{} exceeds latent_dim {}", c.start, c.start + c.size, self.latent_dim),
                ));
            }
            covered[c.range()].iter_mut().for_each(|v| *v = true);
        }
        if covered.iter().all(|&v| v) {
            return Err(Error::config(
                "model.concepts",
                "no reserved remainder: concept ranges cover the whole latent space",
            ));
        }
        Ok(())
    }

    pub fn frame_len(&self) -> usize {
        self.slices * self.height * self.width
    }

    fn check_frame(&self, frame: &SegFrame) -> Result<()> {
        let want = (self.slices, self.height, self.width);
        if frame.shape() != want || frame.labels.len() != self.frame_len() {
            return Err(Error::invalid(format!(
                "frame shape {:?} does not match model {:?}",
                frame.shape(),
                want
            )));
        }
        if frame.labels.iter().any(|&l| l as usize >= NUM_CLASSES) {
            return Err(Error::invalid("class id outside 0..4"));
        }
        Ok(())
    }

    fn check_sequence(&self, seq: &SegSequence) -> Result<()> {
        if seq.len() != self.frames {
            return Err(Error::invalid(format!(
                "sequence has {} frames, model expects {}",
                seq.len(),
                self.frames
            )));
        }
        seq.frames.iter().try_for_each(|f| self.check_frame(f))
    }
}

/// Per-frame latent means and log standard deviations of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub mu: Vec<Vec<f64>>,
    pub log_sigma: Vec<Vec<f64>>,
}

impl LatentCode {
    pub fn flat_mu(&self) -> Vec<f64> {
        self.mu.concat()
    }
}

/// Class probabilities of one decoded frame, indexed `(slice, class, row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbs {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    /// row-major `(row, col, slice, class)`
    pub data: Vec<f64>,
}

impl ClassProbs {
    fn from_nhwc<F: Real>(buf: &[F], slices: usize, height: usize, width: usize) -> Self {
        Self {
            slices,
            height,
            width,
            data: buf.iter().map(|v| v.to_f64_lossy()).collect(),
        }
    }

    pub fn get(&self, slice: usize, class: usize, row: usize, col: usize) -> f64 {
        self.data[((row * self.width + col) * self.slices + slice) * NUM_CLASSES + class]
    }

    pub fn argmax(&self) -> SegFrame {
        argmax_frame(&self.data, self.slices, self.height, self.width)
    }
}

fn argmax_frame<F: Real>(buf: &[F], slices: usize, height: usize, width: usize) -> SegFrame {
    let mut frame = SegFrame::empty(slices, height, width);
    for r in 0..height {
        for c in 0..width {
            for s in 0..slices {
                let p = &buf[((r * width + c) * slices + s) * NUM_CLASSES..][..NUM_CLASSES];
                let mut best = 0;
                for k in 1..NUM_CLASSES {
                    if p[k] > p[best] {
                        best = k;
                    }
                }
                frame.set(s, r, c, best as u8);
            }
        }
    }
    frame
}

/// Which parts of the network take part in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Path {
    /// encoder, decoder, KL and all heads
    Full,
    /// encoder and heads only; no reconstruction and no KL term
    EncoderOnly,
}

/// Result of a batched forward pass over whole subjects.
#[derive(Debug, Clone)]
pub struct BatchOutput<F> {
    pub subjects: usize,
    pub frames: usize,
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    /// `(subject, frame, row, col, slice, class)` probabilities, absent on the
    /// encoder-only path
    pub recon: Option<Vec<F>>,
    pub latent: Vec<LatentCode>,
    pub y_hat: Vec<f64>,
    /// `[subject][concept]`
    pub y_k_hat: Vec<Vec<f64>>,
}

impl<F: Real> BatchOutput<F> {
    fn frame_probs(&self, b: usize, t: usize) -> Option<&[F]> {
        let len = self.height * self.width * self.slices * NUM_CLASSES;
        self.recon
            .as_ref()
            .map(|r| &r[(b * self.frames + t) * len..][..len])
    }

    pub fn recon_frame(&self, b: usize, t: usize) -> Option<ClassProbs> {
        self.frame_probs(b, t)
            .map(|p| ClassProbs::from_nhwc(p, self.slices, self.height, self.width))
    }

    /// Per-pixel argmax of a reconstructed frame.
    pub fn recon_labels(&self, b: usize, t: usize) -> Option<SegFrame> {
        self.frame_probs(b, t)
            .map(|p| argmax_frame(p, self.slices, self.height, self.width))
    }
}

/// Binary targets of a batch. `y_k[b][k]` is concept `k` of subject `b`.
#[derive(Debug, Clone, Copy)]
pub struct Targets<'a> {
    pub y: &'a [u8],
    pub y_k: &'a [Vec<u8>],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// mean reconstruction term over frames
    pub recon: f64,
    /// mean KL term over frames
    pub kl: f64,
    pub primary: f64,
    pub concepts: Vec<f64>,
}

pub fn reparameterize(mu: &[f64], log_sigma: &[f64], epsilon: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != log_sigma.len() || mu.len() != epsilon.len() {
        return Err(Error::invalid("mu, log_sigma and epsilon differ in length"));
    }
    Ok(mu
        .iter()
        .zip(log_sigma)
        .zip(epsilon)
        .map(|((&m, &s), &e)| m + s.exp() * e)
        .collect())
}

/// KL divergence of `N(mu, exp(log_sigma)^2)` from the unit Gaussian.
pub fn kl_term(mu: &[f64], log_sigma: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_sigma)
        .map(|(&m, &s)| m * m + (2.0 * s).exp() - 1.0 - 2.0 * s)
        .sum::<f64>()
}

/// Mean over pixels and slices of `-ln p[true class]`.
pub fn recon_term(x: &SegFrame, probs: &ClassProbs) -> Result<f64> {
    if x.shape() != (probs.slices, probs.height, probs.width) {
        return Err(Error::invalid("reconstruction and target differ in shape"));
    }
    Ok(recon_nhwc(&x.labels, &probs.data, probs.slices, probs.height, probs.width))
}

/// `labels` slice-major, `probs` in `(row, col, slice, class)` order.
fn recon_nhwc<F: Real>(labels: &[u8], probs: &[F], slices: usize, height: usize, width: usize) -> f64 {
    let plane = height * width;
    let mut acc = 0.0;
    for s in 0..slices {
        for px in 0..plane {
            let c = labels[s * plane + px] as usize;
            let p = probs[(px * slices + s) * NUM_CLASSES + c].to_f64_lossy();
            acc -= p.max(PROB_FLOOR).ln();
        }
    }
    acc / (slices * plane) as f64
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Binary cross-entropy with the probability clamped to `[1e-7, 1 - 1e-7]`.
pub fn cls_term(y: u8, p: f64) -> f64 {
    let p = clamp_prob(p);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Joint loss of one subject from its per-frame components.
pub fn subject_loss(
    recon: &[f64],
    kl: &[f64],
    primary: f64,
    concepts: &[f64],
    weights: &LossWeights,
) -> f64 {
    let t = recon.len().max(1) as f64;
    let vae = recon
        .iter()
        .zip(kl)
        .map(|(&r, &k)| r + weights.beta * k)
        .sum::<f64>()
        / t;
    let mut total = vae + weights.gamma * primary;
    for (k, &c) in concepts.iter().enumerate() {
        total += weights.alpha(k) * c;
    }
    total
}

/// Batch loss: mean over subjects of [`subject_loss`]. `x` are the input
/// sequences; targets may be omitted only when every classifier weight is 0.
pub fn total_loss<F: Real>(
    batch: &BatchOutput<F>,
    x: &[&SegSequence],
    targets: Option<Targets<'_>>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let n = batch.subjects;
    if x.len() != n {
        return Err(Error::invalid("target count differs from batch size"));
    }
    let classify = weights.gamma > 0.0 || weights.alpha.iter().any(|&a| a > 0.0);
    if classify && targets.is_none() {
        return Err(Error::config("targets", "classifier weights are nonzero but no labels were given"));
    }
    if let Some(t) = targets {
        if t.y.len() != n || t.y_k.len() != n {
            return Err(Error::invalid("label count differs from batch size"));
        }
    }
    let kcount = batch.y_k_hat.first().map_or(0, Vec::len);
    let mut out = LossBreakdown {
        concepts: vec![0.0; kcount],
        ..Default::default()
    };
    let frames = batch.frames;
    for b in 0..n {
        let mut re = vec![0.0; frames];
        let mut kl = vec![0.0; frames];
        if batch.recon.is_some() {
            for t in 0..frames {
                let labels = &x[b].frames[t].labels;
                let probs = batch.frame_probs(b, t).unwrap_or_default();
                re[t] = recon_nhwc(labels, probs, batch.slices, batch.height, batch.width);
                kl[t] = kl_term(&batch.latent[b].mu[t], &batch.latent[b].log_sigma[t]);
            }
        }
        let (primary, concepts) = match targets {
            Some(tg) => (
                cls_term(tg.y[b], batch.y_hat[b]),
                (0..kcount)
                    .map(|k| {
                        let yk = tg.y_k[b].get(k).copied().unwrap_or(0);
                        cls_term(yk, batch.y_k_hat[b][k])
                    })
                    .collect(),
            ),
            None => (0.0, vec![0.0; kcount]),
        };
        out.total += subject_loss(&re, &kl, primary, &concepts, weights);
        out.recon += re.iter().sum::<f64>() / frames as f64;
        out.kl += kl.iter().sum::<f64>() / frames as f64;
        out.primary += primary;
        for (a, c) in out.concepts.iter_mut().zip(&concepts) {
            *a += c;
        }
    }
    let nf = n.max(1) as f64;
    out.total /= nf;
    out.recon /= nf;
    out.kl /= nf;
    out.primary /= nf;
    out.concepts.iter_mut().for_each(|c| *c /= nf);
    Ok(out)
}

fn softmax_groups<F: Real>(x: &mut [F]) {
    for g in x.chunks_exact_mut(NUM_CLASSES) {
        let m = g.iter().copied().fold(F::neg_infinity(), F::max);
        let mut s = F::zero();
        for v in g.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in g.iter_mut() {
            *v = *v / s;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<F = f32> {
    pub config: ModelConfig,
    pub encoder: Encoder<F>,
    pub decoder: Decoder<F>,
    pub primary: Head<F>,
    pub concepts: Vec<Head<F>>,
}

impl<F: Real> Module<F> for Model<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>)) {
        self.encoder.visit(f);
        self.decoder.visit(f);
        self.primary.visit(f);
        self.concepts.iter().for_each(|h| h.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.encoder.visit_mut(f);
        self.decoder.visit_mut(f);
        self.primary.visit_mut(f);
        self.concepts.iter_mut().for_each(|h| h.visit_mut(f));
    }
}

struct Forward<F> {
    labels: Vec<u8>,
    mu: Vec<F>,
    ls: Vec<F>,
    eps: Option<Vec<F>>,
    enc: network::EncoderCache<F>,
    dec: Option<network::DecoderCache<F>>,
    probs: Option<Vec<F>>,
    primary: (Vec<F>, network::HeadCache<F>),
    concepts: Vec<(Vec<F>, network::HeadCache<F>)>,
}

impl<F: Real> Model<F> {
    /// Fresh weights drawn from a stream derived from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, &[0x1417]);
        let encoder = Encoder::new(&config, &mut r);
        let decoder = Decoder::new(&config, &mut r);
        let primary = Head::new(0, config.latent_dim, &config, &mut r);
        let concepts = config
            .concepts
            .iter()
            .map(|c| Head::new(c.start, c.size, &config, &mut r))
            .collect();
        Ok(Self {
            config,
            encoder,
            decoder,
            primary,
            concepts,
        })
    }

    /// Sets the decoder output bias to the log of per-class pixel
    /// frequencies, so training starts from the class prior.
    pub fn set_output_prior(&mut self, freq: &[f64; NUM_CLASSES]) {
        let b = &mut self.decoder.ups[0].b.value;
        for (i, v) in b.iter_mut().enumerate() {
            *v = F::of(freq[i % NUM_CLASSES].max(1e-4).ln());
        }
    }

    /// Copy with every parameter converted to another precision.
    pub fn cast<G: Real>(&self) -> Model<G> {
        let mut out = Model::<G>::new(self.config.clone(), 0).expect("config already validated");
        let mut values: Vec<Vec<F>> = Vec::new();
        self.visit(&mut |p| values.push(p.value.clone()));
        let mut i = 0;
        out.visit_mut(&mut |p| {
            *p = Param {
                value: values[i].iter().map(|v| G::of(v.to_f64_lossy())).collect(),
                grad: vec![G::zero(); values[i].len()],
            };
            i += 1;
        });
        out
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn encode(&self, frame: &SegFrame) -> Result<(Vec<f64>, Vec<f64>)> {
        self.config.check_frame(frame)?;
        let c = &self.config;
        let (mu, ls, _) = self.encoder.forward(&frame.labels, 1, c.height, c.width);
        Ok((to_f64(&mu), to_f64(&ls)))
    }

    /// Latent means and log sigmas of every frame of a sequence.
    pub fn encode_sequence(&self, seq: &SegSequence) -> Result<LatentCode> {
        self.config.check_sequence(seq)?;
        let c = &self.config;
        let labels = seq.frames.iter().flat_map(|f| f.labels.iter().copied()).collect::<Vec<_>>();
        let (mu, ls, _) = self.encoder.forward(&labels, seq.len(), c.height, c.width);
        Ok(split_latent(&mu, &ls, 1, seq.len(), c.latent_dim).remove(0))
    }

    pub fn decode(&self, z: &[f64]) -> Result<ClassProbs> {
        Ok(self.decode_many(&[z.to_vec()])?.remove(0))
    }

    pub fn decode_many(&self, zs: &[Vec<f64>]) -> Result<Vec<ClassProbs>> {
        let c = &self.config;
        if zs.iter().any(|z| z.len() != c.latent_dim) {
            return Err(Error::invalid(format!("latent vectors must have dimension {}", c.latent_dim)));
        }
        let z: Vec<F> = zs.iter().flatten().map(|&v| F::of(v)).collect();
        let (mut logits, _) = self.decoder.forward(z, zs.len(), c.height, c.width);
        softmax_groups(&mut logits);
        let len = c.height * c.width * c.slices * NUM_CLASSES;
        Ok(logits
            .chunks_exact(len)
            .map(|p| ClassProbs::from_nhwc(p, c.slices, c.height, c.width))
            .collect())
    }

    fn check_means(&self, m: &[Vec<f64>]) -> Result<Vec<F>> {
        let c = &self.config;
        if m.len() != c.frames || m.iter().any(|v| v.len() != c.latent_dim) {
            return Err(Error::invalid(format!(
                "latent means must be {}×{}",
                c.frames, c.latent_dim
            )));
        }
        Ok(m.iter().flatten().map(|&v| F::of(v)).collect())
    }

    /// Primary probability from the `T × D` latent means of one subject.
    pub fn classify_primary(&self, m: &[Vec<f64>]) -> Result<f64> {
        let mu = self.check_means(m)?;
        let (logit, _) = self.primary.forward(&mu, 1, self.config.latent_dim);
        Ok(sigmoid(logit[0].to_f64_lossy()))
    }

    pub fn classify_concept(&self, m: &[Vec<f64>], k: usize) -> Result<f64> {
        let head = self
            .concepts
            .get(k)
            .ok_or_else(|| Error::invalid(format!("concept index {k} out of range")))?;
        let mu = self.check_means(m)?;
        let (logit, _) = head.forward(&mu, 1, self.config.latent_dim);
        Ok(sigmoid(logit[0].to_f64_lossy()))
    }

    fn run(&self, seqs: &[&SegSequence], eps: Option<&[f64]>, path: Path) -> Result<Forward<F>> {
        let c = &self.config;
        for s in seqs {
            c.check_sequence(s)?;
        }
        let n = seqs.len();
        let frames = n * c.frames;
        let mut labels = Vec::with_capacity(frames * c.frame_len());
        for s in seqs {
            for f in &s.frames {
                labels.extend_from_slice(&f.labels);
            }
        }
        let (mu, ls, enc) = self.encoder.forward(&labels, frames, c.height, c.width);
        let eps: Option<Vec<F>> = match eps {
            Some(e) if e.len() != frames * c.latent_dim => {
                return Err(Error::invalid("epsilon has the wrong length"));
            }
            Some(e) => Some(e.iter().map(|&v| F::of(v)).collect()),
            None => None,
        };
        let (dec, probs) = match path {
            Path::Full => {
                let z: Vec<F> = match &eps {
                    Some(e) => mu
                        .iter()
                        .zip(&ls)
                        .zip(e)
                        .map(|((&m, &s), &e)| m + s.exp() * e)
                        .collect(),
                    None => mu.clone(),
                };
                let (mut logits, cache) = self.decoder.forward(z, frames, c.height, c.width);
                softmax_groups(&mut logits);
                (Some(cache), Some(logits))
            }
            Path::EncoderOnly => (None, None),
        };
        let primary = self.primary.forward(&mu, n, c.latent_dim);
        let concepts = self
            .concepts
            .iter()
            .map(|h| h.forward(&mu, n, c.latent_dim))
            .collect();
        Ok(Forward {
            labels,
            mu,
            ls,
            eps,
            enc,
            dec,
            probs,
            primary,
            concepts,
        })
    }

    fn output(&self, fw: &mut Forward<F>, n: usize) -> BatchOutput<F> {
        let c = &self.config;
        BatchOutput {
            subjects: n,
            frames: c.frames,
            slices: c.slices,
            height: c.height,
            width: c.width,
            recon: fw.probs.take(),
            latent: split_latent(&fw.mu, &fw.ls, n, c.frames, c.latent_dim),
            y_hat: fw.primary.0.iter().map(|l| sigmoid(l.to_f64_lossy())).collect(),
            y_k_hat: (0..n)
                .map(|b| {
                    fw.concepts
                        .iter()
                        .map(|(l, _)| sigmoid(l[b].to_f64_lossy()))
                        .collect()
                })
                .collect(),
        }
    }

    /// Batched forward pass. Without `eps` the decoder reads the latent means.
    pub fn forward(&self, seqs: &[&SegSequence], eps: Option<&[f64]>, path: Path) -> Result<BatchOutput<F>> {
        let mut fw = self.run(seqs, eps, path)?;
        Ok(self.output(&mut fw, seqs.len()))
    }

    /// Evaluates the batch loss and accumulates its gradient into every
    /// parameter (gradients are zeroed first). Terms with zero weight are
    /// skipped entirely on the backward pass.
    pub fn loss_and_grad(
        &mut self,
        seqs: &[&SegSequence],
        targets: Option<Targets<'_>>,
        eps: Option<&[f64]>,
        weights: &LossWeights,
        path: Path,
    ) -> Result<LossBreakdown> {
        let n = seqs.len();
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let mut fw = self.run(seqs, eps, path)?;
        let mut out = self.output(&mut fw, n);
        let loss = total_loss(&out, seqs, targets, weights)?;
        self.zero_grad();

        let c = self.config.clone();
        let frames = n * c.frames;
        let d = c.latent_dim;
        let mut dmu = vec![F::zero(); frames * d];
        let mut dls: Option<Vec<F>> = None;
        let inv_bt = 1.0 / frames as f64;

        if let (Some(mut probs), Some(dec)) = (out.recon.take(), fw.dec.as_ref()) {
            // d(mean CE)/dlogits = (p - onehot) / (S·H·W), zero where the floor clamps
            let plane = c.height * c.width;
            let scale = F::of(inv_bt / (c.slices * plane) as f64);
            let floor = F::of(PROB_FLOOR);
            for (f, frame) in probs.chunks_exact_mut(plane * c.slices * NUM_CLASSES).enumerate() {
                let labels = &fw.labels[f * c.frame_len()..][..c.frame_len()];
                for px in 0..plane {
                    for s in 0..c.slices {
                        let g = &mut frame[(px * c.slices + s) * NUM_CLASSES..][..NUM_CLASSES];
                        let t = labels[s * plane + px] as usize;
                        if g[t] < floor {
                            g.iter_mut().for_each(|v| *v = F::zero());
                            continue;
                        }
                        g[t] -= F::one();
                        g.iter_mut().for_each(|v| *v *= scale);
                    }
                }
            }
            let dz = self.decoder.backward(dec, &probs, c.height, c.width);
            let mut g_ls = vec![F::zero(); frames * d];
            let e = fw.eps.as_ref();
            for i in 0..frames * d {
                dmu[i] += dz[i];
                if let Some(e) = e {
                    g_ls[i] = dz[i] * fw.ls[i].exp() * e[i];
                }
            }
            if weights.beta > 0.0 {
                let b = F::of(weights.beta * inv_bt);
                let two = F::of(2.0);
                for i in 0..frames * d {
                    dmu[i] += b * fw.mu[i];
                    g_ls[i] += b * ((two * fw.ls[i]).exp() - F::one());
                }
            }
            dls = Some(g_ls);
        }

        let inv_b = 1.0 / n as f64;
        if let Some(tg) = targets {
            let bce_grad = |p: f64, y: u8, w: f64| -> F {
                if p < PROB_FLOOR || p > 1.0 - PROB_FLOOR {
                    F::zero()
                } else {
                    F::of(w * inv_b * (p - y as f64))
                }
            };
            if weights.gamma > 0.0 {
                let g: Vec<F> = (0..n)
                    .map(|b| bce_grad(out.y_hat[b], tg.y[b], weights.gamma))
                    .collect();
                self.primary.backward(&fw.primary.1, &g, &mut dmu, d);
            }
            for (k, head) in self.concepts.iter_mut().enumerate() {
                let a = weights.alpha(k);
                if a > 0.0 {
                    let g: Vec<F> = (0..n)
                        .map(|b| bce_grad(out.y_k_hat[b][k], tg.y_k[b].get(k).copied().unwrap_or(0), a))
                        .collect();
                    head.backward(&fw.concepts[k].1, &g, &mut dmu, d);
                }
            }
        }

        self.encoder.backward(&fw.enc, &fw.labels, &dmu, dls.as_deref(), c.height, c.width);
        Ok(loss)
    }
}

fn to_f64<F: Real>(v: &[F]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

fn split_latent<F: Real>(mu: &[F], ls: &[F], n: usize, t: usize, d: usize) -> Vec<LatentCode> {
    (0..n)
        .map(|b| LatentCode {
            mu: (0..t).map(|i| to_f64(&mu[(b * t + i) * d..][..d])).collect(),
            log_sigma: (0..t).map(|i| to_f64(&ls[(b * t + i) * d..][..d])).collect(),
        })
        .collect()
}
