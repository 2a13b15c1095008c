//! A small differentiable stand-in for a text-conditioned diffusion
//! segmenter.
//!
//! The image (plus an optional edge channel) is patch-encoded to a 16×16
//! latent, noised with the per-view noise `eps`, passed through one
//! self-attention and one cross-attention block against the part-token
//! embeddings, and decoded to a noise prediction. The recorded attention
//! yields the WAS segmentation. Every projection carries a low-rank adapter
//! `W + A·B` whose `B` starts at zero.

pub mod checkpoint;
mod schedule;
mod train;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{attention_map_graph, was_map_graph, AttentionStack, LabelMap};
use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::geometry::{EdgeMap, RgbImage};

pub use schedule::{add_noise, mix, DiffusionSchedule};
pub use train::{evaluate_objective, held_out_corr, train, train_from, EpochRecord, TrainConfig, TrainOutcome, TrainSample};

/// Sub-blocks per latent cell side; each contributes a mean RGB triple.
const SUB: usize = 2;

const SELF_ATTN_SCALE: f64 = 3.0;
/// Encoder input width: `SUB²` RGB means plus a bias feature.
const ENC_IN: usize = SUB * SUB * 3 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyConfig {
    pub latent: usize,
    pub dim: usize,
    pub lora_rank: usize,
    pub parts: usize,
}

impl ToyConfig {
    pub fn new(parts: usize) -> Self {
        Self {
            latent: 16,
            dim: 32,
            lora_rank: 8,
            parts,
        }
    }

    pub fn hw(&self) -> usize {
        self.latent * self.latent
    }
}

/// Image and optional edge conditioning for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewInput {
    pub image: RgbImage,
    pub edges: Option<EdgeMap>,
}

/// Trainable part-token embeddings `[R, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings(pub Mat);

impl TextEmbeddings {
    pub fn random(parts: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self(gaussian((parts, dim), 1.0, rng))
    }

    pub fn parts(&self) -> usize {
        self.0.nrows()
    }
}

/// One latent-shaped Gaussian noise grid per view.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSet(pub Vec<Mat>);

impl NoiseSet {
    pub fn sample(views: usize, shape: (usize, usize), rng: &mut ChaCha8Rng) -> Self {
        Self((0..views).map(|_| gaussian(shape, 1.0, rng)).collect())
    }

    /// View `i` draws from stream `i` of a generator seeded with `seed`, so
    /// each grid is independent of the view count and of scheduling.
    pub fn forked(views: usize, shape: (usize, usize), seed: u64) -> Self {
        Self(
            (0..views)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i as u64);
                    gaussian(shape, 1.0, &mut rng)
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.0.first().ok_or_else(|| Error::contract("empty noise set"))?;
        if self.0.iter().any(|e| e.dim() != first.dim()) {
            return Err(Error::contract("noise grids differ in shape"));
        }
        if self.0.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::contract("noise set has non-finite entries"));
        }
        Ok(())
    }

    pub fn entry_count(&self) -> usize {
        self.0.iter().map(|e| e.len()).sum()
    }
}

pub(crate) fn gaussian(shape: (usize, usize), std: f64, rng: &mut ChaCha8Rng) -> Mat {
    Array2::from_shape_simple_fn(shape, || std * rng.sample::<f64, _>(StandardNormal))
}

/// Frozen base weight plus a low-rank adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub weight: Mat,
    pub lora_a: Mat,
    pub lora_b: Mat,
}

impl Projection {
    fn init(dim: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            weight: gaussian((dim, dim), std, rng),
            lora_a: gaussian((dim, rank), std, rng),
            lora_b: Array2::zeros((rank, dim)),
        }
    }

    /// Scaled identity plus a small perturbation, so self-attention scores
    /// behave like feature similarity in place of a pretrained grouping.
    fn similarity(dim: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::init(dim, rank, rng);
        p.weight *= 0.1;
        p.weight += &(Array2::eye(dim) * SELF_ATTN_SCALE);
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySegmenter {
    pub cfg: ToyConfig,
    pub encoder: Mat,
    pub edge_weight: Mat,
    pub edge_gain: f64,
    pub self_q: Projection,
    pub self_k: Projection,
    pub self_v: Projection,
    pub cross_q: Projection,
    pub cross_k: Projection,
    pub cross_v: Projection,
    pub decoder: Mat,
    pub schedule: DiffusionSchedule,
}

/// Which parameter groups become differentiable leaves when binding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Trainable {
    pub text: bool,
    pub adapters: bool,
    pub base: bool,
}

impl Trainable {
    pub const NONE: Self = Self {
        text: false,
        adapters: false,
        base: false,
    };
    pub const TEXT: Self = Self {
        text: true,
        adapters: false,
        base: false,
    };
    pub const TEXT_AND_ADAPTERS: Self = Self {
        text: true,
        adapters: true,
        base: false,
    };
}

#[derive(Debug, Clone, Copy)]
pub struct BoundProjection {
    pub weight: Var,
    pub lora_a: Var,
    pub lora_b: Var,
}

/// Graph handles for every model parameter.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub text: Var,
    pub encoder: Var,
    pub edge_weight: Var,
    pub edge_gain: Var,
    pub projections: [BoundProjection; 6],
    pub decoder: Var,
    pub positional: Var,
    /// When false, forwards use the base weights only.
    pub use_adapters: bool,
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[h·w, d]`.
    pub eps_pred: Var,
    /// `[h·w, h·w]`.
    pub f_sa: Var,
    /// `[h·w, R]`, one row per latent location.
    pub f_ca: Var,
    /// `[H·W, R]` WAS probabilities at image resolution.
    pub was: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub eps_pred: Mat,
    pub stack: AttentionStack,
    pub was: LabelMap,
}

impl ToySegmenter {
    pub fn init(cfg: ToyConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.dim;
        let r = cfg.lora_rank.max(1);
        Self {
            cfg: ToyConfig { lora_rank: r, ..cfg },
            encoder: gaussian((ENC_IN, d), 1.0 / (ENC_IN as f64 * 0.25).sqrt(), rng),
            edge_weight: gaussian((1, d), 1.0, rng),
            edge_gain: 1.0,
            self_q: Projection::similarity(d, r, rng),
            self_k: Projection::similarity(d, r, rng),
            self_v: Projection::init(d, r, rng),
            cross_q: Projection::similarity(d, r, rng),
            cross_k: Projection::similarity(d, r, rng),
            cross_v: Projection::init(d, r, rng),
            decoder: gaussian((d, d), 1.0 / (d as f64).sqrt(), rng),
            schedule: DiffusionSchedule::default(),
        }
    }

    pub fn noise_shape(&self) -> (usize, usize) {
        (self.cfg.hw(), self.cfg.dim)
    }

    pub fn projections(&self) -> [&Projection; 6] {
        [&self.self_q, &self.self_k, &self.self_v, &self.cross_q, &self.cross_k, &self.cross_v]
    }

    pub fn projections_mut(&mut self) -> [&mut Projection; 6] {
        [
            &mut self.self_q,
            &mut self.self_k,
            &mut self.self_v,
            &mut self.cross_q,
            &mut self.cross_k,
            &mut self.cross_v,
        ]
    }

    /// Sum of base (non-adapter, non-text) parameters, for change detection.
    pub fn base_checksum(&self) -> f64 {
        let mut s = self.encoder.sum() + self.edge_weight.sum() + self.edge_gain + self.decoder.sum();
        for p in self.projections() {
            s += p.weight.sum();
        }
        s
    }

    pub fn adapter_checksum(&self) -> f64 {
        self.projections().iter().map(|p| p.lora_a.sum() + p.lora_b.sum()).sum()
    }

    /// Records every parameter on `g`, as differentiable leaves where
    /// `trainable` says so.
    pub fn bind(&self, g: &mut Graph, text: &TextEmbeddings, trainable: Trainable) -> BoundModel {
        let leaf = |g: &mut Graph, m: &Mat, on: bool| if on { g.param(m.clone()) } else { g.constant(m.clone()) };
        let text_var = leaf(g, &text.0, trainable.text);
        let encoder = leaf(g, &self.encoder, trainable.base);
        let edge_weight = leaf(g, &self.edge_weight, trainable.base);
        let edge_gain = leaf(g, &Array2::from_elem((1, 1), self.edge_gain), trainable.base);
        let projections = self.projections().map(|p| BoundProjection {
            weight: leaf(g, &p.weight, trainable.base),
            lora_a: leaf(g, &p.lora_a, trainable.adapters),
            lora_b: leaf(g, &p.lora_b, trainable.adapters),
        });
        let decoder = leaf(g, &self.decoder, trainable.base);
        let positional = g.constant(positional_encoding(self.cfg.latent, self.cfg.dim));
        BoundModel {
            text: text_var,
            encoder,
            edge_weight,
            edge_gain,
            projections,
            decoder,
            positional,
            use_adapters: true,
        }
    }

    fn project(&self, g: &mut Graph, x: Var, p: &BoundProjection, use_adapters: bool) -> Result<Var> {
        if !use_adapters {
            return g.matmul(x, p.weight);
        }
        let delta = g.matmul(p.lora_a, p.lora_b)?;
        let w = g.add(p.weight, delta)?;
        g.matmul(x, w)
    }

    /// Records a full forward pass. `eps` is `[h·w, d]`; `t` is 1-based.
    pub fn forward_graph(&self, g: &mut Graph, m: &BoundModel, input: &ViewInput, eps: Var, t: usize) -> Result<ForwardVars> {
        let cfg = self.cfg;
        if g.value(m.text).dim() != (cfg.parts, cfg.dim) {
            return Err(Error::contract(format!(
                "text embeddings are {:?}, model expects {} parts x {}",
                g.value(m.text).dim(),
                cfg.parts,
                cfg.dim
            )));
        }
        if g.value(eps).dim() != self.noise_shape() {
            return Err(Error::contract(format!(
                "noise is {:?}, model expects {:?}",
                g.value(eps).dim(),
                self.noise_shape()
            )));
        }
        let (feats, edge_feat) = encode_features(input, cfg.latent)?;
        let alpha_bar = self.schedule.alpha_bar(t)?;

        let feats = g.constant(feats);
        let mut z0 = g.matmul(feats, m.encoder)?;
        let edge_feat = g.constant(edge_feat);
        let edge = g.matmul(edge_feat, m.edge_weight)?;
        let edge = g.scale_by(edge, m.edge_gain)?;
        z0 = g.add(z0, edge)?;
        z0 = g.add(z0, m.positional)?;

        let signal = g.scale(z0, alpha_bar.sqrt());
        let noise = g.scale(eps, (1.0 - alpha_bar).sqrt());
        let z_t = g.add(signal, noise)?;

        let [sq, sk, sv, cq, ck, cv] = &m.projections;
        let q = self.project(g, z_t, sq, m.use_adapters)?;
        let k = self.project(g, z_t, sk, m.use_adapters)?;
        let v = self.project(g, z_t, sv, m.use_adapters)?;
        let f_sa = attention_map_graph(g, q, k)?;
        let mixed = g.matmul(f_sa, v)?;
        let h1 = g.add(z_t, mixed)?;

        let qc = self.project(g, h1, cq, m.use_adapters)?;
        let kc = self.project(g, m.text, ck, m.use_adapters)?;
        let vc = self.project(g, m.text, cv, m.use_adapters)?;
        let f_ca = attention_map_graph(g, qc, kc)?;
        let injected = g.matmul(f_ca, vc)?;
        let h2 = g.add(h1, injected)?;
        let eps_pred = g.matmul(h2, m.decoder)?;

        let f_ca_grid = g.transpose(f_ca);
        let out = (input.image.height, input.image.width);
        let was = was_map_graph(g, f_ca_grid, f_sa, (cfg.latent, cfg.latent), out)?;
        Ok(ForwardVars {
            eps_pred,
            f_sa,
            f_ca,
            was,
        })
    }

    /// Plain forward pass returning the noise prediction and attention.
    pub fn forward(&self, input: &ViewInput, text: &TextEmbeddings, eps: &Mat, t: usize) -> Result<ForwardOutput> {
        self.forward_with(input, text, eps, t, true)
    }

    /// Forward pass that ignores the adapters.
    pub fn forward_base(&self, input: &ViewInput, text: &TextEmbeddings, eps: &Mat, t: usize) -> Result<ForwardOutput> {
        self.forward_with(input, text, eps, t, false)
    }

    fn forward_with(&self, input: &ViewInput, text: &TextEmbeddings, eps: &Mat, t: usize, use_adapters: bool) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let mut m = self.bind(&mut g, text, Trainable::NONE);
        m.use_adapters = use_adapters;
        let e = g.constant(eps.clone());
        let fv = self.forward_graph(&mut g, &m, input, e, t)?;
        let l = self.cfg.latent;
        let stack = AttentionStack::new(g.value(fv.f_ca).t().to_owned(), g.value(fv.f_sa).clone(), l, l)?;
        Ok(ForwardOutput {
            eps_pred: g.value(fv.eps_pred).clone(),
            stack,
            was: LabelMap::from_pixel_rows(g.value(fv.was), input.image.width, input.image.height)?,
        })
    }
}

/// Fixed sinusoidal encoding of latent cell positions, `[latent², dim]`.
pub fn positional_encoding(latent: usize, dim: usize) -> Mat {
    let quarter = (dim / 4).max(1);
    Array2::from_shape_fn((latent * latent, dim), |(i, c)| {
        let (y, x) = ((i / latent) as f64, (i % latent) as f64);
        let band = (c % quarter) as f64;
        let freq = std::f64::consts::PI / latent as f64 * (1.0 + band);
        let v = match (c / quarter) % 4 {
            0 => (x * freq).sin(),
            1 => (x * freq).cos(),
            2 => (y * freq).sin(),
            _ => (y * freq).cos(),
        };
        0.5 * v
    })
}

/// Per latent cell: `SUB×SUB` sub-block mean colors (centered) and a bias,
/// plus the mean edge strength as a separate `[h·w, 1]` column.
fn encode_features(input: &ViewInput, latent: usize) -> Result<(Mat, Mat)> {
    let img = &input.image;
    let cell = latent * SUB;
    if img.width == 0 || img.width % cell != 0 || img.height % cell != 0 || img.height == 0 {
        return Err(Error::contract(format!(
            "image {}x{} is not a multiple of {cell}",
            img.width, img.height
        )));
    }
    if let Some(e) = &input.edges {
        if (e.width, e.height) != (img.width, img.height) {
            return Err(Error::contract("edge map resolution differs from the image"));
        }
    }
    let (bx, by) = (img.width / cell, img.height / cell);
    let mut feats = Array2::zeros((latent * latent, ENC_IN));
    let mut edges = Array2::zeros((latent * latent, 1));
    for ly in 0..latent {
        for lx in 0..latent {
            let i = ly * latent + lx;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let mut acc = [0.0; 3];
                    for py in 0..by {
                        for px in 0..bx {
                            let y = (ly * SUB + sy) * by + py;
                            let x = (lx * SUB + sx) * bx + px;
                            let p = img.pixels[y * img.width + x];
                            for c in 0..3 {
                                acc[c] += p[c];
                            }
                        }
                    }
                    let n = (bx * by) as f64;
                    for c in 0..3 {
                        feats[[i, (sy * SUB + sx) * 3 + c]] = acc[c] / n - 0.5;
                    }
                }
            }
            feats[[i, ENC_IN - 1]] = 1.0;
            if let Some(e) = &input.edges {
                let (px0, py0) = (lx * SUB * bx, ly * SUB * by);
                let mut s = 0.0;
                for y in py0..py0 + SUB * by {
                    for x in px0..px0 + SUB * bx {
                        s += e.grid[y * e.width + x];
                    }
                }
                edges[[i, 0]] = s / (SUB * SUB * bx * by) as f64;
            }
        }
    }
    Ok((feats, edges))
}

/// Anything that maps a view and its noise to differentiable part
/// probabilities `[H·W, R]`.
pub trait Segmenter: Sync {
    fn parts(&self) -> usize;
    fn noise_shape(&self) -> (usize, usize);
    fn segment_graph(&self, g: &mut Graph, input: &ViewInput, eps: Var) -> Result<Var>;
}

/// A segmenter with its learned part tokens and inference timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedSegmenter {
    pub model: ToySegmenter,
    pub text: TextEmbeddings,
    pub t_infer: usize,
}

impl TrainedSegmenter {
    pub fn new(model: ToySegmenter, text: TextEmbeddings) -> Self {
        let t_infer = (model.schedule.steps() / 2).max(1);
        Self { model, text, t_infer }
    }

    pub fn segment(&self, input: &ViewInput, eps: &Mat) -> Result<LabelMap> {
        Ok(self.model.forward(input, &self.text, eps, self.t_infer)?.was)
    }
}

impl Segmenter for TrainedSegmenter {
    fn parts(&self) -> usize {
        self.model.cfg.parts
    }

    fn noise_shape(&self) -> (usize, usize) {
        self.model.noise_shape()
    }

    fn segment_graph(&self, g: &mut Graph, input: &ViewInput, eps: Var) -> Result<Var> {
        let m = self.model.bind(g, &self.text, Trainable::NONE);
        Ok(self.model.forward_graph(g, &m, input, eps, self.t_infer)?.was)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup() -> (ToySegmenter, TextEmbeddings, ViewInput, Mat) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = ToySegmenter::init(ToyConfig::new(3), &mut rng);
        let text = TextEmbeddings::random(3, 32, &mut rng);
        let mut image = RgbImage::new(32, 32);
        for (i, p) in image.pixels.iter_mut().enumerate() {
            *p = [(i % 7) as f64 / 7.0, (i % 5) as f64 / 5.0, (i % 3) as f64 / 3.0];
        }
        let input = ViewInput { image, edges: None };
        let eps = gaussian(model.noise_shape(), 1.0, &mut rng);
        (model, text, input, eps)
    }

    #[test]
    fn fresh_adapters_match_base_forward_exactly() {
        let (model, text, input, eps) = setup();
        let a = model.forward(&input, &text, &eps, 10).unwrap();
        let b = model.forward_base(&input, &text, &eps, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn self_attention_ignores_text() {
        let (model, text, input, eps) = setup();
        let a = model.forward(&input, &text, &eps, 10).unwrap();
        let mut doubled = text.clone();
        doubled.0.row_mut(1).mapv_inplace(|v| 2.0 * v);
        let b = model.forward(&input, &doubled, &eps, 10).unwrap();
        assert_eq!(a.stack.f_sa, b.stack.f_sa);
        assert_ne!(a.stack.f_ca, b.stack.f_ca);
    }

    #[test]
    fn self_attention_rows_are_distributions() {
        let (model, text, input, eps) = setup();
        let out = model.forward(&input, &text, &eps, 30).unwrap();
        for row in out.stack.f_sa.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn wrong_part_count_is_rejected() {
        let (model, _, input, eps) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let text = TextEmbeddings::random(4, 32, &mut rng);
        assert!(matches!(model.forward(&input, &text, &eps, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn adapter_contribution_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = Projection::init(8, 2, &mut rng);
        p.lora_b = gaussian((2, 8), 1.0, &mut rng);
        let x = gaussian((5, 8), 1.0, &mut rng);
        let full = x.dot(&(&p.weight + &p.lora_a.dot(&p.lora_b)));
        let base = x.dot(&p.weight);
        let adapter = x.dot(&p.lora_a).dot(&p.lora_b);
        let diff = &full - &base - &adapter;
        assert!(diff.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn forward_is_deterministic() {
        let (model, text, input, eps) = setup();
        assert_eq!(
            model.forward(&input, &text, &eps, 5).unwrap(),
            model.forward(&input, &text, &eps, 5).unwrap()
        );
    }
}
