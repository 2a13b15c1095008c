//! Test-time optimization of per-view noise towards multi-view consistency.
//!
//! Each epoch segments every view with its current noise, fuses the labels
//! in UV space, renders the fused atlas back into each view as a pseudo
//! target, and takes one gradient step on the consistency energy
//! `(1/m) Σ D(W_i, Ŵ_i) + λ·L_reg(ε)`. The targets are constants within an
//! epoch; no gradient flows through voting or rendering.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::LabelMap;
use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::fusion::{vote, GlobalAtlas, PartialAtlas, VotePolicy};
use crate::geometry::{project_to_uv, render_atlas_view};
use crate::scene::PreparedView;
use crate::toymodel::{NoiseSet, Segmenter};

/// Floor applied to the pooled noise variance inside the log.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Which sign of the Gaussian-matching regularizer to minimize.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegSign {
    /// `KL(N(μ, σ²) ‖ N(0, 1)) / |ε|`, non-negative and zero at the standard normal.
    #[default]
    Kl,
    /// The negated form `(1 + ln σ² − μ² − σ²) / (2|ε|)`.
    Negated,
}

/// Per-view distance between a prediction and its pseudo target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataNorm {
    /// Mean squared difference over all entries.
    MeanSquared,
    /// Euclidean norm of the difference.
    L2,
}

pub const DATA_NORM: DataNorm = DataNorm::MeanSquared;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseOptConfig {
    pub lambda: f64,
    pub eta: f64,
    pub max_epochs: usize,
    pub reg_sign: RegSign,
    pub atlas_res: usize,
    pub vote_policy: VotePolicy,
}

impl Default for NoiseOptConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            eta: 0.005,
            max_epochs: 5,
            reg_sign: RegSign::Kl,
            atlas_res: 512,
            vote_policy: VotePolicy::OneVotePerView,
        }
    }
}

impl NoiseOptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::contract("lambda must be finite and >= 0"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::contract("eta must be finite and > 0"));
        }
        if self.max_epochs == 0 {
            return Err(Error::contract("max_epochs must be at least 1"));
        }
        if self.atlas_res == 0 {
            return Err(Error::contract("atlas resolution must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RegDiagnostics {
    /// The pooled variance fell below [`VARIANCE_FLOOR`].
    pub variance_clamped: bool,
}

/// Records the regularizer over all noise grids pooled together.
pub fn reg_graph(g: &mut Graph, eps: &[Var], sign: RegSign) -> Result<(Var, RegDiagnostics)> {
    if eps.is_empty() {
        return Err(Error::contract("regularizer needs a non-empty noise set"));
    }
    let n: usize = eps.iter().map(|&e| g.value(e).len()).sum();
    let sums: Vec<Var> = eps.iter().map(|&e| g.sum(e)).collect();
    let squares: Vec<Var> = eps
        .iter()
        .map(|&e| {
            let sq = g.square(e);
            g.sum(sq)
        })
        .collect();
    let total = g.add_all(&sums)?;
    let mean = g.scale(total, 1.0 / n as f64);
    let total_sq = g.add_all(&squares)?;
    let second = g.scale(total_sq, 1.0 / n as f64);
    let mean_sq = g.square(mean);
    let var = g.sub(second, mean_sq)?;
    let diag = RegDiagnostics {
        variance_clamped: g.scalar(var) < VARIANCE_FLOOR,
    };
    let log_var = g.log_clamped(var, VARIANCE_FLOOR);
    let a = g.sub(log_var, mean_sq)?;
    let b = g.sub(a, var)?;
    let inner = g.add_scalar(b, 1.0);
    let factor = match sign {
        RegSign::Kl => -1.0,
        RegSign::Negated => 1.0,
    } / (2.0 * n as f64);
    Ok((g.scale(inner, factor), diag))
}

pub fn reg_term(eps: &NoiseSet, sign: RegSign) -> Result<(f64, RegDiagnostics)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = eps.0.iter().map(|e| g.constant(e.clone())).collect();
    let (r, d) = reg_graph(&mut g, &vars, sign)?;
    Ok((g.scalar(r), d))
}

/// Distance between a `[H·W, R]` prediction and a constant target.
pub fn data_distance_graph(g: &mut Graph, w: Var, target: &Mat) -> Result<Var> {
    let t = g.constant(target.clone());
    let d = g.sub(w, t)?;
    let sq = g.square(d);
    Ok(match DATA_NORM {
        DataNorm::MeanSquared => g.mean(sq),
        DataNorm::L2 => {
            let s = g.sum(sq);
            g.sqrt(s)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyParts {
    pub total: f64,
    pub data: f64,
    /// Regularizer value before weighting by λ.
    pub reg: f64,
}

fn check_pairs(w: &[LabelMap], w_hat: &[LabelMap]) -> Result<()> {
    if w.len() != w_hat.len() || w.is_empty() {
        return Err(Error::contract(format!(
            "energy needs equal, non-empty view lists ({} vs {})",
            w.len(),
            w_hat.len()
        )));
    }
    for (a, b) in w.iter().zip(w_hat) {
        if (a.parts, a.width, a.height) != (b.parts, b.width, b.height) {
            return Err(Error::contract("prediction and target label maps differ in shape"));
        }
    }
    Ok(())
}

/// Consistency energy of fixed predictions against fixed targets.
pub fn energy(w: &[LabelMap], w_hat: &[LabelMap], eps: &NoiseSet, cfg: &NoiseOptConfig) -> Result<EnergyParts> {
    check_pairs(w, w_hat)?;
    let mut g = Graph::new();
    let mut dists = Vec::with_capacity(w.len());
    for (a, b) in w.iter().zip(w_hat) {
        let av = g.constant(a.to_pixel_rows());
        dists.push(data_distance_graph(&mut g, av, &b.to_pixel_rows())?);
    }
    let total = g.add_all(&dists)?;
    let data = g.scalar(total) / w.len() as f64;
    let (reg, _) = reg_term(eps, cfg.reg_sign)?;
    Ok(EnergyParts {
        total: data + cfg.lambda * reg,
        data,
        reg,
    })
}

/// Segments every view with its noise grid.
pub fn segment_views<S: Segmenter>(views: &[PreparedView], seg: &S, eps: &NoiseSet) -> Result<Vec<LabelMap>> {
    check_views(views, seg, eps)?;
    views
        .par_iter()
        .zip(eps.0.par_iter())
        .map(|(v, e)| {
            let mut g = Graph::new();
            let ev = g.constant(e.clone());
            let w = seg.segment_graph(&mut g, &v.input, ev)?;
            LabelMap::from_pixel_rows(g.value(w), v.input.image.width, v.input.image.height)
        })
        .collect()
}

/// Projects each view's labels to UV and votes.
pub fn fuse_views(
    views: &[PreparedView],
    labels: &[LabelMap],
    atlas_res: usize,
    policy: VotePolicy,
) -> Result<(Vec<PartialAtlas>, GlobalAtlas)> {
    let partials: Vec<PartialAtlas> = views
        .iter()
        .zip(labels)
        .map(|(v, l)| project_to_uv(&v.render, l, (atlas_res, atlas_res)))
        .collect::<Result<_>>()?;
    let atlas = vote(&partials, policy)?;
    Ok((partials, atlas))
}

/// Renders the fused atlas into every view.
pub fn pseudo_targets(views: &[PreparedView], atlas: &GlobalAtlas) -> Vec<LabelMap> {
    views.iter().map(|v| render_atlas_view(&v.render, atlas)).collect()
}

fn check_views<S: Segmenter>(views: &[PreparedView], seg: &S, eps: &NoiseSet) -> Result<()> {
    if views.is_empty() {
        return Err(Error::contract("no views to optimize"));
    }
    if views.len() != eps.0.len() {
        return Err(Error::contract(format!(
            "{} views but {} noise grids",
            views.len(),
            eps.0.len()
        )));
    }
    eps.validate()?;
    if eps.0[0].dim() != seg.noise_shape() {
        return Err(Error::contract("noise shape does not match the segmenter"));
    }
    Ok(())
}

/// Energy against fixed targets and its gradient with respect to each noise
/// grid, differentiating through the segmenter.
pub fn energy_and_gradient<S: Segmenter>(
    views: &[PreparedView],
    seg: &S,
    eps: &NoiseSet,
    targets: &[LabelMap],
    cfg: &NoiseOptConfig,
) -> Result<(EnergyParts, Vec<Mat>)> {
    check_views(views, seg, eps)?;
    if targets.len() != views.len() {
        return Err(Error::contract("one pseudo target per view is required"));
    }
    let m = views.len() as f64;
    let per_view: Vec<(f64, Mat)> = views
        .par_iter()
        .zip(eps.0.par_iter())
        .zip(targets.par_iter())
        .enumerate()
        .map(|(i, ((v, e), target))| {
            let mut g = Graph::new();
            let ev = g.param(e.clone());
            let w = seg.segment_graph(&mut g, &v.input, ev)?;
            if g.value(w).dim() != (target.width * target.height, target.parts) {
                return Err(Error::contract(format!("view {i}: target shape differs from prediction")));
            }
            let d = data_distance_graph(&mut g, w, &target.to_pixel_rows())?;
            let value = g.scalar(d);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    view: i,
                    detail: format!("data term {value}"),
                });
            }
            let scaled = g.scale(d, 1.0 / m);
            g.backward(scaled)?;
            Ok((value, g.grad(ev)?))
        })
        .collect::<Result<_>>()?;

    let mut g = Graph::new();
    let vars: Vec<Var> = eps.0.iter().map(|e| g.param(e.clone())).collect();
    let (reg, _) = reg_graph(&mut g, &vars, cfg.reg_sign)?;
    let reg_value = g.scalar(reg);
    if !reg_value.is_finite() {
        let view = eps.0.iter().position(|e| e.iter().any(|v| !v.is_finite())).unwrap_or(0);
        return Err(Error::NonFinite {
            view,
            detail: format!("regularizer {reg_value}"),
        });
    }
    let weighted = g.scale(reg, cfg.lambda);
    g.backward(weighted)?;

    let data = per_view.iter().map(|(d, _)| d).sum::<f64>() / m;
    let grads = per_view
        .into_iter()
        .zip(&vars)
        .map(|((_, gd), &v)| Ok(gd + &g.grad(v)?))
        .collect::<Result<_>>()?;
    Ok((
        EnergyParts {
            total: data + cfg.lambda * reg_value,
            data,
            reg: reg_value,
        },
        grads,
    ))
}

/// State of the noise set at one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub eps: NoiseSet,
    pub labels: Vec<LabelMap>,
    pub partials: Vec<PartialAtlas>,
    pub atlas: GlobalAtlas,
    pub energy: EnergyParts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseOptResult {
    /// State before any update.
    pub initial: Snapshot,
    /// Lowest-energy state among the post-update evaluations.
    pub best: Snapshot,
    /// Index into `trace` of `best`.
    pub best_epoch: usize,
    /// Energy after each gradient step (epoch `k` at index `k - 1`).
    pub trace: Vec<EnergyParts>,
    pub steps_applied: usize,
}

struct Evaluated {
    snapshot: Snapshot,
    grads: Vec<Mat>,
}

fn evaluate<S: Segmenter>(views: &[PreparedView], seg: &S, eps: NoiseSet, cfg: &NoiseOptConfig) -> Result<Evaluated> {
    let labels = segment_views(views, seg, &eps)?;
    let (partials, atlas) = fuse_views(views, &labels, cfg.atlas_res, cfg.vote_policy)?;
    let targets = pseudo_targets(views, &atlas);
    let (energy, grads) = energy_and_gradient(views, seg, &eps, &targets, cfg)?;
    Ok(Evaluated {
        snapshot: Snapshot {
            eps,
            labels,
            partials,
            atlas,
            energy,
        },
        grads,
    })
}

/// Runs up to `cfg.max_epochs` descent steps `ε ← ε − η·∇E` and returns the
/// lowest-energy post-update state.
pub fn optimize<S: Segmenter>(views: &[PreparedView], seg: &S, eps0: NoiseSet, cfg: &NoiseOptConfig) -> Result<NoiseOptResult> {
    cfg.validate()?;
    let first = evaluate(views, seg, eps0, cfg)?;
    let initial = first.snapshot.clone();
    let mut current = first;
    let mut trace = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(usize, Snapshot)> = None;
    for epoch in 0..cfg.max_epochs {
        let mut eps = current.snapshot.eps.clone();
        for (e, g) in eps.0.iter_mut().zip(&current.grads) {
            e.scaled_add(-cfg.eta, g);
        }
        current = evaluate(views, seg, eps, cfg)?;
        trace.push(current.snapshot.energy);
        if best.as_ref().map_or(true, |(_, b)| current.snapshot.energy.total < b.energy.total) {
            best = Some((epoch, current.snapshot.clone()));
        }
    }
    let (best_epoch, best) = best.expect("at least one epoch");
    Ok(NoiseOptResult {
        initial,
        best,
        best_epoch,
        steps_applied: trace.len(),
        trace,
    })
}

/// Writes `epoch,energy,data_term,reg_term` rows, one per epoch. The
/// `reg_term` column holds `λ·L_reg`.
pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[EnergyParts], lambda: f64) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,energy,data_term,reg_term")?;
    for (k, e) in trace.iter().enumerate() {
        writeln!(f, "{},{:.12e},{:.12e},{:.12e}", k + 1, e.total, e.data, lambda * e.reg)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn regularizer_fixed_point_and_examples() {
        let std_normal = NoiseSet(vec![array![[1.0, -1.0], [-1.0, 1.0]]]);
        assert_eq!(reg_term(&std_normal, RegSign::Kl).unwrap().0, 0.0);
        assert_eq!(reg_term(&std_normal, RegSign::Negated).unwrap().0, 0.0);
        let shifted = NoiseSet(vec![array![[0.0, 2.0]]]);
        let (v, _) = reg_term(&shifted, RegSign::Kl).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
        assert!((reg_term(&shifted, RegSign::Negated).unwrap().0 + 0.25).abs() < 1e-15);
    }

    #[test]
    fn degenerate_variance_is_clamped() {
        let flat = NoiseSet(vec![array![[0.3, 0.3, 0.3]]]);
        let (v, d) = reg_term(&flat, RegSign::Kl).unwrap();
        assert!(d.variance_clamped);
        assert!(v > 4.0);
        assert!(v.is_finite());
    }

    #[test]
    fn energy_of_consistent_views_is_zero() {
        let w = vec![LabelMap::one_hot(2, 2, 1, &[0, 1]).unwrap()];
        let eps = NoiseSet(vec![array![[1.0, -1.0]]]);
        let e = energy(&w, &w, &eps, &NoiseOptConfig::default()).unwrap();
        assert_eq!(e.total, 0.0);
        let mismatched = vec![LabelMap::one_hot(2, 1, 1, &[0]).unwrap()];
        assert!(energy(&w, &mismatched, &eps, &NoiseOptConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = NoiseOptConfig::default();
        assert!(c.validate().is_ok());
        c.max_epochs = 0;
        assert!(c.validate().is_err());
        c = NoiseOptConfig {
            eta: 0.0,
            ..NoiseOptConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
