use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{gaussian, TextEmbeddings, ToyConfig, ToySegmenter, Trainable, ViewInput};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{asia_graph, ce_graph, corr_graph, ldm_graph, mse_graph, CorrSampling, GtMasks, LossTerms, LossWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub input: ViewInput,
    pub gt: GtMasks,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// α, β, γ for both phases; `delta` is taken per phase below.
    pub weights: LossWeights,
    pub delta_phase1: f64,
    pub delta_phase2: f64,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    pub corr_cap: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            delta_phase1: 0.0,
            delta_phase2: 0.005,
            lr_phase1: 0.06,
            lr_phase2: 8e-5,
            epochs_phase1: 100,
            epochs_phase2: 100,
            batch_size: 2,
            corr_cap: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub phase: u8,
    pub epoch: usize,
    /// Mean loss terms over the epoch's samples.
    pub terms: LossTerms,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ToySegmenter,
    pub text: TextEmbeddings,
    pub history: Vec<EpochRecord>,
}

fn validate(dataset: &[TrainSample], parts: usize) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if let Some((i, s)) = dataset.iter().enumerate().find(|(_, s)| s.gt.parts != parts) {
        return Err(Error::Config(format!(
            "sample {i} has {} parts, expected {parts}",
            s.gt.parts
        )));
    }
    let mut seen = vec![false; parts];
    for s in dataset {
        for (a, b) in seen.iter_mut().zip(s.gt.present_parts()) {
            *a |= b;
        }
    }
    if let Some(r) = seen.iter().position(|s| !s) {
        return Err(Error::Config(format!("part {r} is absent from every training image")));
    }
    Ok(())
}

/// Per-sample loss terms and the combined objective, recorded on `g`.
struct SampleLoss {
    total: Var,
    terms: [Var; 3],
    corr: Option<Var>,
}

#[allow(clippy::too_many_arguments)]
fn sample_loss(
    g: &mut Graph,
    model: &ToySegmenter,
    bound: &super::BoundModel,
    sample: &TrainSample,
    partner: Option<(&TrainSample, usize, &ndarray::Array2<f64>)>,
    t: usize,
    eps: &ndarray::Array2<f64>,
    weights: &LossWeights,
    corr: CorrSampling,
) -> Result<SampleLoss> {
    let l = model.cfg.latent;
    let eps_var = g.constant(eps.clone());
    let fv = model.forward_graph(g, bound, &sample.input, eps_var, t)?;
    let gt_latent = sample.gt.resize_nearest(l, l);
    let (ce, _) = ce_graph(g, fv.f_ca, &gt_latent)?;
    let mse = mse_graph(g, fv.was, &sample.gt)?;
    let ldm = ldm_graph(g, fv.eps_pred, eps_var)?;
    let corr_var = match partner {
        Some((other, t2, eps2)) => {
            let e2 = g.constant(eps2.clone());
            let fv2 = model.forward_graph(g, bound, &other.input, e2, t2)?;
            let gt2 = other.gt.resize_nearest(l, l);
            Some(corr_graph(g, fv.f_ca, fv2.f_ca, &gt_latent, &gt2, corr)?.0)
        }
        None => None,
    };
    let total = asia_graph(g, ce, mse, ldm, corr_var, weights)?;
    Ok(SampleLoss {
        total,
        terms: [ce, mse, ldm],
        corr: corr_var,
    })
}

/// Initializes a model and part tokens from `cfg.seed` and trains both phases.
pub fn train(dataset: &[TrainSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let parts = dataset
        .first()
        .ok_or_else(|| Error::Config("training dataset is empty".into()))?
        .gt
        .parts;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = ToySegmenter::init(ToyConfig::new(parts), &mut rng);
    let text = TextEmbeddings::random(parts, model.cfg.dim, &mut rng);
    train_from(model, text, dataset, cfg)
}

/// Phase 1 optimizes the part tokens only; phase 2 adds the adapters and
/// the correspondence term. Plain gradient descent on batch-mean losses.
pub fn train_from(
    mut model: ToySegmenter,
    mut text: TextEmbeddings,
    dataset: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    validate(dataset, model.cfg.parts)?;
    cfg.weights.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut history = Vec::new();
    let phases = [
        (1u8, cfg.epochs_phase1, cfg.lr_phase1, cfg.delta_phase1, Trainable::TEXT),
        (2u8, cfg.epochs_phase2, cfg.lr_phase2, cfg.delta_phase2, Trainable::TEXT_AND_ADAPTERS),
    ];
    let steps = model.schedule.steps();

    for (phase, epochs, lr, delta, trainable) in phases {
        let weights = LossWeights { delta, ..cfg.weights };
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut rng);
            let mut sums = LossTerms::default();
            let mut total_sum = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let mut g = Graph::new();
                let bound = model.bind(&mut g, &text, trainable);
                let mut totals = Vec::with_capacity(batch.len());
                for &i in batch {
                    let t = rng.gen_range(1..=steps);
                    let eps = gaussian(model.noise_shape(), 1.0, &mut rng);
                    // Partner draws happen even when δ = 0 so that runs differing
                    // only in δ see identical timesteps and noise.
                    let partner = (dataset.len() > 1).then(|| {
                        let mut j = rng.gen_range(0..dataset.len() - 1);
                        if j >= i {
                            j += 1;
                        }
                        let t2 = rng.gen_range(1..=steps);
                        (j, t2, gaussian(model.noise_shape(), 1.0, &mut rng))
                    });
                    let partner = partner.filter(|_| delta > 0.0);
                    let corr = CorrSampling {
                        cap: cfg.corr_cap,
                        seed: rng.gen(),
                    };
                    let sl = sample_loss(
                        &mut g,
                        &model,
                        &bound,
                        &dataset[i],
                        partner.as_ref().map(|(j, t2, e2)| (&dataset[*j], *t2, e2)),
                        t,
                        &eps,
                        &weights,
                        corr,
                    )?;
                    sums.ce += g.scalar(sl.terms[0]);
                    sums.mse += g.scalar(sl.terms[1]);
                    sums.ldm += g.scalar(sl.terms[2]);
                    sums.corr += sl.corr.map_or(0.0, |c| g.scalar(c));
                    total_sum += g.scalar(sl.total);
                    totals.push(sl.total);
                }
                let batch_total = g.add_all(&totals)?;
                let loss = g.scale(batch_total, 1.0 / batch.len() as f64);
                g.backward(loss)?;
                apply_step(&mut model, &mut text, &g, &bound, trainable, lr)?;
            }
            let n = dataset.len() as f64;
            let terms = LossTerms {
                ce: sums.ce / n,
                mse: sums.mse / n,
                ldm: sums.ldm / n,
                corr: sums.corr / n,
            };
            history.push(EpochRecord {
                phase,
                epoch,
                terms,
                total: total_sum / n,
            });
        }
    }
    Ok(TrainOutcome { model, text, history })
}

fn apply_step(
    model: &mut ToySegmenter,
    text: &mut TextEmbeddings,
    g: &Graph,
    bound: &super::BoundModel,
    trainable: Trainable,
    lr: f64,
) -> Result<()> {
    if trainable.text {
        text.0.scaled_add(-lr, &g.grad(bound.text)?);
    }
    if trainable.adapters {
        for (p, b) in model.projections_mut().into_iter().zip(&bound.projections) {
            p.lora_a.scaled_add(-lr, &g.grad(b.lora_a)?);
            p.lora_b.scaled_add(-lr, &g.grad(b.lora_b)?);
        }
    }
    if trainable.base {
        return Err(Error::contract("base weights are frozen during training"));
    }
    Ok(())
}

/// Mean combined objective over the dataset with timesteps and noise drawn
/// from `seed`, so two models can be compared on identical draws. Every
/// sample is paired with the next one (cyclically) for the correspondence
/// term when `weights.delta > 0`.
pub fn evaluate_objective(
    model: &ToySegmenter,
    text: &TextEmbeddings,
    dataset: &[TrainSample],
    weights: &LossWeights,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = model.schedule.steps();
    let mut total = 0.0;
    for (i, s) in dataset.iter().enumerate() {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, text, Trainable::NONE);
        let t = rng.gen_range(1..=steps);
        let eps = gaussian(model.noise_shape(), 1.0, &mut rng);
        let t2 = rng.gen_range(1..=steps);
        let eps2 = gaussian(model.noise_shape(), 1.0, &mut rng);
        let partner = (weights.delta > 0.0 && dataset.len() > 1).then(|| (&dataset[(i + 1) % dataset.len()], t2, &eps2));
        let corr = CorrSampling { cap: 256, seed };
        let sl = sample_loss(&mut g, model, &bound, s, partner, t, &eps, weights, corr)?;
        total += g.scalar(sl.total);
    }
    Ok(total / dataset.len() as f64)
}

/// Mean correspondence loss over consecutive pairs of `views` at timestep
/// `t`, with noise drawn from `seed`.
pub fn held_out_corr(model: &ToySegmenter, text: &TextEmbeddings, views: &[TrainSample], t: usize, seed: u64) -> Result<f64> {
    if views.len() < 2 {
        return Err(Error::contract("held-out correspondence needs at least two views"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = model.cfg.latent;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, text, Trainable::NONE);
    let mut f_ca = Vec::with_capacity(views.len());
    for v in views {
        let eps = g.constant(gaussian(model.noise_shape(), 1.0, &mut rng));
        f_ca.push(model.forward_graph(&mut g, &bound, &v.input, eps, t)?.f_ca);
    }
    let mut total = 0.0;
    for k in 0..views.len() - 1 {
        let (a, b) = (&views[k], &views[k + 1]);
        let sampling = CorrSampling { cap: 256, seed };
        let (c, _) = corr_graph(&mut g, f_ca[k], f_ca[k + 1], &a.gt.resize_nearest(l, l), &b.gt.resize_nearest(l, l), sampling)?;
        total += g.scalar(c);
    }
    Ok(total / (views.len() - 1) as f64)
}
