//! Training losses for the part-token / adapter segmenter.
//!
//! Graph versions (`*_graph`) take pixel-row layouts (`[pixels, R]`); the
//! plain wrappers accept channel-outermost grids (`[R, pixels]`) like
//! [`AttentionStack::f_ca`](crate::attention::AttentionStack).

use std::sync::Arc;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::LabelMap;
use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};

/// Probability floor inside the cross-entropy log.
pub const CE_FLOOR: f64 = 1e-12;

/// Mutually exclusive, exhaustive part masks stored as one label per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GtMasks {
    pub parts: usize,
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u16>,
}

impl GtMasks {
    pub fn new(parts: usize, width: usize, height: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::contract("mask labels do not match resolution"));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= parts) {
            return Err(Error::contract(format!("mask label {l} >= part count {parts}")));
        }
        Ok(Self {
            parts,
            width,
            height,
            labels,
        })
    }

    /// From binary masks `[R][H·W]`; each pixel must be set in exactly one.
    pub fn from_binary(masks: &[Vec<bool>], width: usize, height: usize) -> Result<Self> {
        let n = width * height;
        let mut labels = vec![0u16; n];
        for (i, l) in labels.iter_mut().enumerate() {
            let on: Vec<usize> = (0..masks.len()).filter(|&r| masks[r][i]).collect();
            if on.len() != 1 {
                return Err(Error::contract(format!(
                    "pixel {i} belongs to {} masks, expected exactly 1",
                    on.len()
                )));
            }
            *l = on[0] as u16;
        }
        Self::new(masks.len(), width, height, labels)
    }

    /// Nearest-neighbor resize sampling source pixel centers.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        let pick = |o: usize, n_out: usize, n_in: usize| (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
        let labels = (0..height)
            .flat_map(|y| {
                let sy = pick(y, height, self.height);
                (0..width).map(move |x| (sy, pick(x, width, self.width)))
            })
            .map(|(sy, sx)| self.labels[sy * self.width + sx])
            .collect();
        Self {
            parts: self.parts,
            width,
            height,
            labels,
        }
    }

    /// `[H·W, R]` one-hot rows.
    pub fn one_hot_rows(&self) -> Mat {
        let mut m = Array2::zeros((self.labels.len(), self.parts));
        for (i, &l) in self.labels.iter().enumerate() {
            m[[i, l as usize]] = 1.0;
        }
        m
    }

    pub fn pixels_of(&self, part: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] as usize == part)
            .collect()
    }

    pub fn present_parts(&self) -> Vec<bool> {
        let mut seen = vec![false; self.parts];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        seen
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            delta: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma, self.delta];
        if w.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::contract("loss weights must be finite and non-negative"))
        }
    }
}

/// The four loss values entering the combined objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub ce: f64,
    pub mse: f64,
    pub ldm: f64,
    pub corr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CeDiagnostics {
    /// Pixels whose ground-truth probability fell below [`CE_FLOOR`].
    pub clamped_pixels: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrDiagnostics {
    /// Parts missing from at least one of the two views.
    pub skipped_parts: Vec<usize>,
    /// Selected pairs involving a zero-norm feature (cosine taken as 0).
    pub zero_norm_pairs: usize,
}

/// Mean squared difference between predicted and true noise.
pub fn ldm_graph(g: &mut Graph, eps_pred: Var, eps: Var) -> Result<Var> {
    let d = g.sub(eps_pred, eps)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Mean over pixels of `-ln p[r*]`, with `p` the row renormalized over parts.
/// `f_ca` is `[h·w, R]`; `gt` must already be at `(h, w)`.
pub fn ce_graph(g: &mut Graph, f_ca: Var, gt: &GtMasks) -> Result<(Var, CeDiagnostics)> {
    let (n, parts) = g.value(f_ca).dim();
    if n != gt.labels.len() || parts != gt.parts {
        return Err(Error::contract(format!(
            "cross-entropy: attention {:?} vs masks {}x{} (R={})",
            (n, parts),
            gt.width,
            gt.height,
            gt.parts
        )));
    }
    let cols: Arc<[usize]> = gt.labels.iter().map(|&l| l as usize).collect();
    let ones = g.constant(Array2::ones((parts, 1)));
    let sums = g.matmul(f_ca, ones)?;
    if g.value(sums).iter().any(|&s| !(s > 0.0)) {
        return Err(Error::contract("cross-entropy: attention row with zero mass"));
    }
    let picked = g.pick(f_ca, cols)?;
    let clamped_pixels = g
        .value(picked)
        .iter()
        .zip(g.value(sums).iter())
        .filter(|(p, s)| **p / **s < CE_FLOOR)
        .count();
    let log_p = g.log_clamped(picked, CE_FLOOR);
    let log_s = g.log_clamped(sums, f64::MIN_POSITIVE);
    let nll = g.sub(log_s, log_p)?;
    Ok((g.mean(nll), CeDiagnostics { clamped_pixels }))
}

/// Mean squared difference between `[H·W, R]` probabilities and one-hot masks.
pub fn mse_graph(g: &mut Graph, w: Var, gt: &GtMasks) -> Result<Var> {
    let target = gt.one_hot_rows();
    if g.value(w).dim() != target.dim() {
        return Err(Error::contract(format!(
            "mse: prediction {:?} vs masks {:?}",
            g.value(w).dim(),
            target.dim()
        )));
    }
    let t = g.constant(target);
    let d = g.sub(w, t)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Sampling controls for the correspondence loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorrSampling {
    /// Maximum pixels drawn per part and view (uniform, without replacement).
    pub cap: usize,
    pub seed: u64,
}

impl Default for CorrSampling {
    fn default() -> Self {
        Self { cap: 256, seed: 0 }
    }
}

fn subsample(pixels: Vec<usize>, cap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pixels.len() <= cap {
        return pixels;
    }
    let mut picked: Vec<usize> = sample(rng, pixels.len(), cap).into_iter().map(|k| pixels[k]).collect();
    picked.sort_unstable();
    picked
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> Option<f64> {
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    (na > 0.0 && nb > 0.0).then(|| a.dot(&b) / (na * nb))
}

/// Part-aware worst-match correspondence loss between two views.
///
/// For each part present in both views, every sampled pixel of view `i` is
/// paired with the view-`j` pixel of the same part whose feature has the
/// lowest cosine similarity to it (ties: lowest raster index). The loss is
/// the mean of `1 - cos` per part, averaged over the parts present. The
/// pairing is fixed from current values; gradients flow through the pair.
///
/// `f_i`, `f_j` are `[pixels, R]`; masks must match their pixel counts.
pub fn corr_graph(
    g: &mut Graph,
    f_i: Var,
    f_j: Var,
    gt_i: &GtMasks,
    gt_j: &GtMasks,
    sampling: CorrSampling,
) -> Result<(Var, CorrDiagnostics)> {
    if gt_i.parts != gt_j.parts {
        return Err(Error::contract("correspondence: views disagree on part count"));
    }
    if g.value(f_i).nrows() != gt_i.labels.len() || g.value(f_j).nrows() != gt_j.labels.len() {
        return Err(Error::contract("correspondence: features do not match mask sizes"));
    }
    if g.value(f_i).ncols() != g.value(f_j).ncols() {
        return Err(Error::contract("correspondence: feature widths differ"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let mut diag = CorrDiagnostics::default();
    let mut part_means = Vec::new();

    for r in 0..gt_i.parts {
        let p_i = subsample(gt_i.pixels_of(r), sampling.cap, &mut rng);
        let p_j = subsample(gt_j.pixels_of(r), sampling.cap, &mut rng);
        if p_i.is_empty() || p_j.is_empty() {
            diag.skipped_parts.push(r);
            continue;
        }
        let (fi, fj) = (g.value(f_i), g.value(f_j));
        let mut partners = Vec::with_capacity(p_i.len());
        for &pi in &p_i {
            let mut best = (f64::INFINITY, p_j[0]);
            for &pj in &p_j {
                let c = cosine(fi.row(pi), fj.row(pj)).unwrap_or(0.0);
                if c < best.0 {
                    best = (c, pj);
                }
            }
            if cosine(fi.row(pi), fj.row(best.1)).is_none() {
                diag.zero_norm_pairs += 1;
            }
            partners.push(best.1);
        }
        let a = g.gather_rows(f_i, p_i.into())?;
        let b = g.gather_rows(f_j, partners.into())?;
        let an = g.row_normalize(a);
        let bn = g.row_normalize(b);
        let cos = g.row_dot(an, bn)?;
        part_means.push(g.mean(cos));
    }

    if part_means.is_empty() {
        return Ok((g.scalar_constant(0.0), diag));
    }
    let count = part_means.len() as f64;
    let total = g.add_all(&part_means)?;
    let neg = g.scale(total, -1.0 / count);
    Ok((g.add_scalar(neg, 1.0), diag))
}

/// `α·CE + β·MSE + γ·LDM + δ·corr` recorded on `g`.
pub fn asia_graph(g: &mut Graph, ce: Var, mse: Var, ldm: Var, corr: Option<Var>, w: &LossWeights) -> Result<Var> {
    let mut terms = vec![g.scale(ce, w.alpha), g.scale(mse, w.beta), g.scale(ldm, w.gamma)];
    if let Some(c) = corr {
        terms.push(g.scale(c, w.delta));
    }
    g.add_all(&terms)
}

pub fn loss_ldm(eps_pred: &Mat, eps: &Mat) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(eps_pred.clone()), g.constant(eps.clone()));
    let l = ldm_graph(&mut g, a, b)?;
    Ok(g.scalar(l))
}

/// `f_ca` as `[R, h·w]`; `gt` is resized to the latent grid when needed.
pub fn loss_ce(f_ca: &Mat, latent: (usize, usize), gt: &GtMasks) -> Result<(f64, CeDiagnostics)> {
    let gt = if (gt.height, gt.width) == latent {
        gt.clone()
    } else {
        gt.resize_nearest(latent.1, latent.0)
    };
    let mut g = Graph::new();
    let f = g.constant(f_ca.t().to_owned());
    let (l, d) = ce_graph(&mut g, f, &gt)?;
    Ok((g.scalar(l), d))
}

pub fn loss_mse(w: &LabelMap, gt: &GtMasks) -> Result<f64> {
    if (w.width, w.height, w.parts) != (gt.width, gt.height, gt.parts) {
        return Err(Error::contract("mse: label map and masks differ in shape"));
    }
    let mut g = Graph::new();
    let wv = g.constant(w.to_pixel_rows());
    let l = mse_graph(&mut g, wv, gt)?;
    Ok(g.scalar(l))
}

/// `f_i`, `f_j` as `[R, pixels]` feature grids.
pub fn loss_corr(
    f_i: &Mat,
    f_j: &Mat,
    gt_i: &GtMasks,
    gt_j: &GtMasks,
    sampling: CorrSampling,
) -> Result<(f64, CorrDiagnostics)> {
    let mut g = Graph::new();
    let a = g.constant(f_i.t().to_owned());
    let b = g.constant(f_j.t().to_owned());
    let (l, d) = corr_graph(&mut g, a, b, gt_i, gt_j, sampling)?;
    Ok((g.scalar(l), d))
}

pub fn loss_asia(terms: LossTerms, w: &LossWeights) -> f64 {
    w.alpha * terms.ce + w.beta * terms.mse + w.gamma * terms.ldm + w.delta * terms.corr
}
