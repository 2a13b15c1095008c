//! End-to-end commands: train, segment, noise optimization and evaluation.
//!
//! Every run writes into one directory with `views/`, `atlases/`, `fused/`
//! and `reports/`. All writes happen on the calling thread after the
//! parallel work finishes, so output trees are byte-identical per seed.

pub mod io;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::LabelMap;
use crate::error::{Error, Result};
use crate::eval::{miou, report_json, IoUReport};
use crate::fusion::{coverage, GlobalAtlas, PartialAtlas, VotePolicy};
use crate::geometry::{camera_rig, load_mesh, write_obj, RgbImage};
use crate::losses::LossWeights;
use crate::noiseopt::{fuse_views, optimize, segment_views, write_trace_csv, EnergyParts, NoiseOptConfig, RegSign};
use crate::scene::{prepare_views, EdgeParams, PreparedView};
use crate::synthetic;
use crate::toymodel::checkpoint::{load_model, save_model, save_noise};
use crate::toymodel::{train, EpochRecord, NoiseSet, TrainConfig, TrainedSegmenter};
use io::{Palette, UNCOVERED};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub views: usize,
    pub view_res: usize,
    pub fov: f64,
    pub atlas_res: usize,
    pub edges: bool,
    pub depth_thresh: f64,
    pub normal_thresh: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    pub corr_cap: usize,
    pub t_infer: usize,
    pub lambda: f64,
    pub eta: f64,
    pub max_epochs: usize,
    pub reg_sign: RegSign,
    pub vote_policy: VotePolicy,
    pub ignore_background: bool,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub texture: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let nopt = NoiseOptConfig::default();
        Self {
            views: 10,
            view_res: 64,
            fov: 0.7,
            atlas_res: 64,
            edges: true,
            depth_thresh: EdgeParams::default().depth_thresh,
            normal_thresh: EdgeParams::default().normal_thresh,
            alpha: train.weights.alpha,
            beta: train.weights.beta,
            gamma: train.weights.gamma,
            delta: train.delta_phase2,
            lr_phase1: train.lr_phase1,
            lr_phase2: train.lr_phase2,
            epochs_phase1: train.epochs_phase1,
            epochs_phase2: train.epochs_phase2,
            batch_size: train.batch_size,
            corr_cap: train.corr_cap,
            t_infer: 25,
            lambda: nopt.lambda,
            eta: nopt.eta,
            max_epochs: nopt.max_epochs,
            reg_sign: nopt.reg_sign,
            vote_policy: nopt.vote_policy,
            ignore_background: false,
            seed: 0,
            texture: None,
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `texture` path is taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&std::fs::read_to_string(path)?)?;
        if let (Some(t), Some(dir)) = (&cfg.texture, path.parent()) {
            if t.is_relative() {
                cfg.texture = Some(dir.join(t));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("views", self.views),
            ("view_res", self.view_res),
            ("atlas_res", self.atlas_res),
            ("batch_size", self.batch_size),
            ("corr_cap", self.corr_cap),
            ("t_infer", self.t_infer),
            ("max_epochs", self.max_epochs),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be at least 1")));
        }
        if self.view_res % 32 != 0 {
            return Err(Error::Config("view_res must be a multiple of 32".into()));
        }
        if !(self.fov > 0.0 && self.fov < std::f64::consts::PI) {
            return Err(Error::Config("fov must lie in (0, pi)".into()));
        }
        self.train_config().weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.noiseopt_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            weights: LossWeights {
                alpha: self.alpha,
                beta: self.beta,
                gamma: self.gamma,
                delta: 0.0,
            },
            delta_phase1: 0.0,
            delta_phase2: self.delta,
            lr_phase1: self.lr_phase1,
            lr_phase2: self.lr_phase2,
            epochs_phase1: self.epochs_phase1,
            epochs_phase2: self.epochs_phase2,
            batch_size: self.batch_size,
            corr_cap: self.corr_cap,
            seed: self.seed,
        }
    }

    pub fn noiseopt_config(&self) -> NoiseOptConfig {
        NoiseOptConfig {
            lambda: self.lambda,
            eta: self.eta,
            max_epochs: self.max_epochs,
            reg_sign: self.reg_sign,
            atlas_res: self.atlas_res,
            vote_policy: self.vote_policy,
        }
    }

    fn edge_params(&self) -> Option<EdgeParams> {
        self.edges.then_some(EdgeParams {
            depth_thresh: self.depth_thresh,
            normal_thresh: self.normal_thresh,
        })
    }
}

/// Command-line overrides applied on top of a config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub views: Option<usize>,
    pub atlas_res: Option<usize>,
    pub lambda: Option<f64>,
    pub eta: Option<f64>,
    /// Training epochs per phase for `train`, `max_epochs` for `noiseopt`.
    pub epochs: Option<usize>,
    pub ignore_background: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut PipelineConfig, training: bool) -> Result<()> {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.views {
            cfg.views = v;
        }
        if let Some(v) = self.atlas_res {
            cfg.atlas_res = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.eta {
            cfg.eta = v;
        }
        if let Some(v) = self.epochs {
            if training {
                cfg.epochs_phase1 = v;
                cfg.epochs_phase2 = v;
            } else {
                cfg.max_epochs = v;
            }
        }
        cfg.ignore_background |= self.ignore_background;
        cfg.validate()
    }
}

const CHECKPOINT_FILE: &str = "checkpoint.atsm";
const LOSS_FILE: &str = "train_loss.csv";

pub struct TrainRun {
    pub checkpoint: PathBuf,
    pub history: Vec<EpochRecord>,
}

/// Trains on a dataset directory and writes `checkpoint.atsm`,
/// `train_loss.csv` and the palette into `out`.
pub fn cmd_train(cfg: &PipelineConfig, dataset: &Path, out: &Path) -> Result<TrainRun> {
    cfg.validate()?;
    let (palette, samples) = io::load_dataset(dataset)?;
    let outcome = train(&samples, &cfg.train_config())?;
    std::fs::create_dir_all(out)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    save_model(&checkpoint, &outcome.model, &outcome.text)?;
    palette.save(out)?;
    let mut csv = String::from("phase,epoch,ce,mse,ldm,corr,total\n");
    for r in &outcome.history {
        writeln!(
            csv,
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            r.phase, r.epoch, r.terms.ce, r.terms.mse, r.terms.ldm, r.terms.corr, r.total
        )
        .expect("string write");
    }
    std::fs::write(out.join(LOSS_FILE), csv)?;
    Ok(TrainRun {
        checkpoint,
        history: outcome.history,
    })
}

/// Views of a mesh with a loaded segmenter and per-view seeded noise.
pub struct Scene {
    pub views: Vec<PreparedView>,
    pub segmenter: TrainedSegmenter,
    pub eps: NoiseSet,
    pub palette: Palette,
}

pub fn load_scene(cfg: &PipelineConfig, checkpoint: &Path, mesh: &Path) -> Result<Scene> {
    cfg.validate()?;
    let mesh = load_mesh(mesh)?;
    let (model, text) = load_model(checkpoint)?;
    let mut segmenter = TrainedSegmenter::new(model, text);
    segmenter.t_infer = cfg.t_infer;
    segmenter.model.schedule.alpha_bar(cfg.t_infer)?;
    let parts = segmenter.model.cfg.parts;
    let palette = checkpoint
        .parent()
        .and_then(|d| Palette::load(d).ok())
        .filter(|p| p.parts() == parts)
        .unwrap_or_else(|| Palette::generic(parts));
    let texture = cfg.texture.as_deref().map(io::read_rgb_png).transpose()?;
    let cams = camera_rig(&mesh, cfg.views, cfg.view_res, cfg.fov);
    let views = prepare_views(&mesh, &cams, texture.as_ref(), cfg.edge_params());
    let eps = NoiseSet::forked(cfg.views, segmenter.model.noise_shape(), cfg.seed);
    Ok(Scene {
        views,
        segmenter,
        eps,
        palette,
    })
}

pub struct SegmentRun {
    pub labels: Vec<LabelMap>,
    pub partials: Vec<PartialAtlas>,
    pub atlas: GlobalAtlas,
}

fn atlas_bytes(labels: &[Option<u16>]) -> Vec<u8> {
    labels.iter().map(|l| l.map_or(UNCOVERED, |v| v as u8)).collect()
}

fn create_layout(out: &Path) -> Result<()> {
    for d in ["views", "atlases", "fused", "reports"] {
        std::fs::create_dir_all(out.join(d))?;
    }
    Ok(())
}

fn write_views(out: &Path, views: &[PreparedView], labels: &[LabelMap]) -> Result<()> {
    for (i, (v, l)) in views.iter().zip(labels).enumerate() {
        let dir = out.join("views");
        io::write_rgb_png(&dir.join(format!("view{i:02}_image.png")), &v.input.image)?;
        if let Some(e) = &v.input.edges {
            io::write_gray_png(&dir.join(format!("view{i:02}_edges.png")), e.width, e.height, &e.grid)?;
        }
        let hard: Vec<u8> = l.argmax().iter().map(|&x| x as u8).collect();
        io::write_label_png(&dir.join(format!("view{i:02}_labels.png")), l.width, l.height, &hard)?;
        io::write_afp(&dir.join(format!("view{i:02}_probs.afp")), (l.parts, l.height, l.width), &l.probs)?;
    }
    Ok(())
}

fn write_fusion(out: &Path, partials: &[PartialAtlas], atlas: &GlobalAtlas) -> Result<()> {
    for (i, p) in partials.iter().enumerate() {
        io::write_label_png(&out.join(format!("atlases/partial{i:02}.png")), p.width, p.height, &atlas_bytes(&p.labels))?;
    }
    io::write_label_png(&out.join("fused/atlas.png"), atlas.width, atlas.height, &atlas_bytes(&atlas.labels))?;
    let valid: Vec<f64> = atlas.labels.iter().map(|l| l.is_some() as u8 as f64).collect();
    io::write_gray_png(&out.join("fused/valid.png"), atlas.width, atlas.height, &valid)?;
    let (n, r) = (atlas.width * atlas.height, atlas.parts);
    let votes: Vec<f64> = (0..r).flat_map(|p| (0..n).map(move |t| (t, p))).map(|(t, p)| atlas.votes[t * r + p] as f64).collect();
    io::write_afp(&out.join("fused/votes.afp"), (r, atlas.height, atlas.width), &votes)?;
    let cov = coverage(partials)?;
    std::fs::write(out.join("reports/coverage.json"), serde_json::to_string_pretty(&cov).expect("json") + "\n")?;
    Ok(())
}

/// Renders, segments and fuses every view; writes the full output tree.
pub fn cmd_segment(cfg: &PipelineConfig, checkpoint: &Path, mesh: &Path, out: &Path) -> Result<SegmentRun> {
    let scene = load_scene(cfg, checkpoint, mesh)?;
    let labels = segment_views(&scene.views, &scene.segmenter, &scene.eps)?;
    let (partials, atlas) = fuse_views(&scene.views, &labels, cfg.atlas_res, cfg.vote_policy)?;
    create_layout(out)?;
    scene.palette.save(out)?;
    write_views(out, &scene.views, &labels)?;
    write_fusion(out, &partials, &atlas)?;
    Ok(SegmentRun { labels, partials, atlas })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseOptSummary {
    pub initial: EnergyParts,
    pub best: EnergyParts,
    pub best_epoch: usize,
    pub steps_applied: usize,
}

pub struct NoiseOptRun {
    pub summary: NoiseOptSummary,
    pub trace: Vec<EnergyParts>,
    pub initial_atlas: GlobalAtlas,
    pub atlas: GlobalAtlas,
}

/// Runs noise optimization and writes the lowest-energy state, the initial
/// fused atlas, the optimized noise and the energy trace.
pub fn cmd_noiseopt(cfg: &PipelineConfig, checkpoint: &Path, mesh: &Path, out: &Path) -> Result<NoiseOptRun> {
    let scene = load_scene(cfg, checkpoint, mesh)?;
    let res = optimize(&scene.views, &scene.segmenter, scene.eps, &cfg.noiseopt_config())?;
    create_layout(out)?;
    scene.palette.save(out)?;
    write_views(out, &scene.views, &res.best.labels)?;
    write_fusion(out, &res.best.partials, &res.best.atlas)?;
    let init = &res.initial.atlas;
    io::write_label_png(&out.join("fused/initial_atlas.png"), init.width, init.height, &atlas_bytes(&init.labels))?;
    save_noise(out.join("fused/eps.atsm"), &res.best.eps)?;
    write_trace_csv(out.join("reports/trace.csv"), &res.trace, cfg.lambda)?;
    let summary = NoiseOptSummary {
        initial: res.initial.energy,
        best: res.best.energy,
        best_epoch: res.best_epoch + 1,
        steps_applied: res.steps_applied,
    };
    std::fs::write(out.join("reports/noiseopt.json"), serde_json::to_string_pretty(&summary).expect("json") + "\n")?;
    Ok(NoiseOptRun {
        summary,
        trace: res.trace,
        initial_atlas: res.initial.atlas,
        atlas: res.best.atlas,
    })
}

/// Compares two label PNGs over the valid texels. Without a mask, texels
/// uncovered in either image are invalid. Part names come from a
/// `palette.txt` next to `gt` when present.
pub fn cmd_eval(pred: &Path, gt: &Path, valid: Option<&Path>, ignore_background: bool) -> Result<(IoUReport, serde_json::Value)> {
    let p = io::read_label_png(pred)?;
    let g = io::read_label_png(gt)?;
    if (p.width, p.height) != (g.width, g.height) {
        return Err(Error::contract(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            p.width, p.height, g.width, g.height
        )));
    }
    let mask: Vec<bool> = match valid {
        Some(v) => {
            let (w, h, m) = io::read_gray_png(v)?;
            if (w, h) != (p.width, p.height) {
                return Err(Error::contract(format!("valid mask is {w}x{h}, atlases are {}x{}", p.width, p.height)));
            }
            m.iter().map(|&x| x > 0.0).collect()
        }
        None => p.labels.iter().zip(&g.labels).map(|(&a, &b)| a != UNCOVERED && b != UNCOVERED).collect(),
    };
    if mask
        .iter()
        .zip(p.labels.iter().zip(&g.labels))
        .any(|(&m, (&a, &b))| m && (a == UNCOVERED || b == UNCOVERED))
    {
        return Err(Error::contract("valid mask includes uncovered texels"));
    }
    let palette = gt.parent().and_then(|d| Palette::load(d).ok());
    let max_label = p
        .labels
        .iter()
        .chain(&g.labels)
        .filter(|&&l| l != UNCOVERED)
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(1);
    let parts = palette.as_ref().map_or(max_label, |pl| pl.parts().max(max_label));
    let to16 = |v: &[u8]| v.iter().map(|&l| if l == UNCOVERED { 0 } else { l as u16 }).collect::<Vec<_>>();
    let report = miou(&to16(&p.labels), &to16(&g.labels), &mask, parts, ignore_background)?;
    let cov = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
    let json = report_json(&report, cov, palette.as_ref().map(|pl| pl.names.as_slice()));
    Ok((report, json))
}

/// Writes the sphere fixture: `sphere.obj`, `texture.png`, a ground-truth
/// atlas with its palette, a training dataset of views that avoid the rig's
/// azimuths and a `config.toml` pointing at the texture.
pub fn cmd_fixture(cfg: &PipelineConfig, out: &Path, train_views: usize) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mesh = synthetic::uv_sphere(24, 48);
    write_obj(&mesh, out.join("sphere.obj"))?;
    let texture: RgbImage = synthetic::part_texture(cfg.atlas_res.max(64), synthetic::sphere_part);
    io::write_rgb_png(&out.join("texture.png"), &texture)?;
    let gt_dir = out.join("gt");
    std::fs::create_dir_all(&gt_dir)?;
    let gt = synthetic::gt_atlas(cfg.atlas_res, synthetic::sphere_part);
    io::write_label_png(&gt_dir.join("atlas.png"), gt.width, gt.height, &atlas_bytes(&gt.labels))?;
    let palette = Palette {
        names: synthetic::FIXTURE_PART_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    palette.save(&gt_dir)?;
    let azimuths: Vec<f64> = (0..train_views)
        .map(|i| std::f64::consts::TAU * (i as f64 + 0.5) / train_views as f64)
        .collect();
    let samples = synthetic::sphere_samples(&mesh, &texture, &azimuths, cfg.view_res, cfg.fov)?;
    let samples: Vec<_> = samples.into_iter().map(|(_, s)| s).collect();
    io::write_dataset(&out.join("dataset"), &palette, &samples)?;
    let mut fixture_cfg = cfg.clone();
    fixture_cfg.texture = Some(PathBuf::from("texture.png"));
    std::fs::write(out.join("config.toml"), fixture_cfg.to_toml())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips() {
        let cfg = PipelineConfig {
            lambda: 0.25,
            texture: Some("t.png".into()),
            reg_sign: RegSign::Negated,
            ..PipelineConfig::default()
        };
        let text = cfg.to_toml();
        let back = PipelineConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(PipelineConfig::parse(&back.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn config_rejects_unknown_keys_and_zero_counts() {
        assert!(matches!(PipelineConfig::parse("colour = 3"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::parse("views = 0"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::parse("view_res = 48"), Err(Error::Config(_))));
        assert_eq!(PipelineConfig::parse("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn epochs_override_targets_the_command() {
        let o = Overrides {
            epochs: Some(1),
            ..Overrides::default()
        };
        let mut c = PipelineConfig::default();
        o.apply(&mut c, true).unwrap();
        assert_eq!((c.epochs_phase1, c.epochs_phase2, c.max_epochs), (1, 1, 5));
        let mut c = PipelineConfig::default();
        o.apply(&mut c, false).unwrap();
        assert_eq!((c.epochs_phase1, c.max_epochs), (100, 1));
    }
}
