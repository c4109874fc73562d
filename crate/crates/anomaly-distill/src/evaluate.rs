//! Inference, evaluation and report output.

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::anomaly::{
    anomaly_map_layer, fuse_maps, pixel_auroc, score_image, AnomalyResult, MetricReport,
};
use crate::backbone::forward_pyramid;
use crate::checkpoint::Checkpoint;
use crate::config::PipelineConfig;
use crate::dataset::{conform_image, Label, LabeledSample};
use crate::distill::normalize_pyramid;
use crate::params::ParamSet;
use crate::pnm::{self, PnmError, PnmImage};
use crate::tensor::{BnMode, BnUpdate, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pnm(#[from] PnmError),
    #[error("checkpoint has no refinement calibration but mff is enabled")]
    MissingCalibration,
    #[error("evaluation split needs both classes: {0}")]
    SingleClass(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, EvalError>;

/// Raw per-level anomaly maps for a batch of images: both networks run in
/// eval mode, pyramids are L2-normalized, and each level yields one cosine
/// dissimilarity map per image.
pub fn batch_level_maps(
    teacher: &mut ParamSet<f32>,
    student: &mut ParamSet<f32>,
    config: &PipelineConfig,
    images: &Tensor<f32>,
) -> std::result::Result<Vec<Vec<Tensor<f32>>>, TensorError> {
    let b = images.shape()[0];
    let mut tape = Tape::new();
    let bound_t = teacher.bind(&mut tape, false);
    let bound_s = student.bind(&mut tape, false);
    let img = tape.leaf(images.clone(), false);
    let t_pyr = forward_pyramid(
        &mut tape,
        teacher,
        &bound_t,
        &config.backbone,
        img,
        BnMode::Eval,
        BnUpdate::None,
    )?;
    let s_pyr = forward_pyramid(
        &mut tape,
        student,
        &bound_s,
        &config.backbone,
        img,
        BnMode::Eval,
        BnUpdate::None,
    )?;
    let t_norm = normalize_pyramid(&mut tape, &t_pyr)?;
    let s_norm = normalize_pyramid(&mut tape, &s_pyr)?;

    let mut out: Vec<Vec<Tensor<f32>>> = (0..b).map(|_| Vec::new()).collect();
    for (&tv, &sv) in t_norm.levels.iter().zip(&s_norm.levels) {
        let t_val = tape.value(tv);
        let s_val = tape.value(sv);
        for (i, maps) in out.iter_mut().enumerate() {
            maps.push(anomaly_map_layer(
                &t_val.index_axis0(i),
                &s_val.index_axis0(i),
            )?);
        }
    }
    Ok(out)
}

fn fuse_and_score(
    ckpt: &Checkpoint,
    level_maps: Vec<Tensor<f32>>,
) -> Result<AnomalyResult> {
    let cfg = &ckpt.config;
    let refinement = if cfg.mff_enabled {
        Some(ckpt.refinement.as_ref().ok_or(EvalError::MissingCalibration)?)
    } else {
        None
    };
    let fused = fuse_maps(
        &level_maps,
        (cfg.input_extent, cfg.input_extent),
        refinement,
    )?;
    let (score, smoothed) = score_image(&fused, cfg.smoothing_sigma)?;
    Ok(AnomalyResult {
        level_maps,
        fused,
        smoothed,
        score,
    })
}

/// Run the full anomaly pipeline on one image (resized and channel-adapted
/// to the checkpoint's configuration if needed).
pub fn infer_image(ckpt: &Checkpoint, image: &Tensor<f32>) -> Result<AnomalyResult> {
    let cfg = &ckpt.config;
    let image = conform_image(image, cfg.input_extent, cfg.channels);
    let batch = Tensor::stack(&[&image])?;
    let mut teacher = ckpt.teacher.clone();
    let mut student = ckpt.student.clone();
    let mut maps = batch_level_maps(&mut teacher, &mut student, cfg, &batch)?;
    fuse_and_score(ckpt, maps.remove(0))
}

/// Evaluation products beyond the metric report.
#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: MetricReport,
    /// Per-sample image scores, in split order.
    pub scores: Vec<f64>,
    /// Min/max of all fused maps: the constants an 8-bit heatmap
    /// normalization of this run would use.
    pub fused_min: f32,
    pub fused_max: f32,
}

/// Score a labeled evaluation split: image-level AUROC over the max-of-map
/// scores and pixel-level AUROC over the fused maps against the masks.
pub fn evaluate(ckpt: &Checkpoint, split: &[LabeledSample]) -> Result<EvalOutcome> {
    let n_normal = split.iter().filter(|s| s.label == Label::Normal).count();
    let n_anomalous = split.len() - n_normal;
    if n_normal == 0 || n_anomalous == 0 {
        return Err(EvalError::SingleClass(format!(
            "{n_normal} normal / {n_anomalous} anomalous"
        )));
    }
    let cfg = &ckpt.config;
    let mut teacher = ckpt.teacher.clone();
    let mut student = ckpt.student.clone();

    let mut scores = Vec::with_capacity(split.len());
    let mut fused_maps = Vec::with_capacity(split.len());
    let mut masks = Vec::with_capacity(split.len());
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(cfg.batch_size.max(1)) {
        let parts: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &split[i].image).collect();
        let images = Tensor::stack(&parts)?;
        let per_image = batch_level_maps(&mut teacher, &mut student, cfg, &images)?;
        for (row, maps) in per_image.into_iter().enumerate() {
            let result = fuse_and_score(ckpt, maps)?;
            scores.push(result.score);
            fused_maps.push(result.fused);
            masks.push(split[chunk[row]].mask.clone());
        }
    }

    let labels: Vec<bool> = split.iter().map(|s| s.label == Label::Anomalous).collect();
    let image_auroc = crate::anomaly::auroc(&scores, &labels)?;
    let pixel = pixel_auroc(&fused_maps, &masks)?;
    let pixels_positive: usize = masks
        .iter()
        .flatten()
        .map(|m| m.data().iter().filter(|&&v| v > 0.5).count())
        .sum();
    let pixels_total: usize = fused_maps.iter().map(|m| m.numel()).sum();
    let mut fused_min = f32::INFINITY;
    let mut fused_max = f32::NEG_INFINITY;
    for m in &fused_maps {
        for &v in m.data() {
            fused_min = fused_min.min(v);
            fused_max = fused_max.max(v);
        }
    }
    Ok(EvalOutcome {
        report: MetricReport {
            image_auroc,
            pixel_auroc: pixel,
            n_normal,
            n_anomalous,
            pixels_positive,
            pixels_negative: pixels_total - pixels_positive,
        },
        scores,
        fused_min,
        fused_max,
    })
}

fn median(xs: &[f32]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v: Vec<f32> = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite losses"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0
    }
}

#[derive(Debug, Serialize)]
struct CountsDoc {
    n_normal: usize,
    n_anomalous: usize,
    pixels_positive: usize,
    pixels_negative: usize,
}

#[derive(Debug, Serialize)]
struct TrainingDoc {
    steps: u64,
    l_g_final: f64,
    l_g_median_first10: f64,
    l_g_median_last10: f64,
    l_d_final: f64,
    l_adv_final: f64,
    l_s_final: f64,
}

#[derive(Debug, Serialize)]
struct HeatmapDoc {
    fused_min: f32,
    fused_max: f32,
}

#[derive(Debug, Serialize)]
struct ReportDoc<'a> {
    image_auroc: f64,
    pixel_auroc: f64,
    counts: CountsDoc,
    training: TrainingDoc,
    heatmap: HeatmapDoc,
    config: &'a PipelineConfig,
}

/// Render the structured evaluation report document.
pub fn render_report(ckpt: &Checkpoint, outcome: &EvalOutcome) -> String {
    let h = &ckpt.history;
    let last = |xs: &Vec<f32>| xs.last().copied().unwrap_or(f32::NAN) as f64;
    let first10 = &h.l_g[..h.l_g.len().min(10)];
    let last10 = &h.l_g[h.l_g.len().saturating_sub(10)..];
    let doc = ReportDoc {
        image_auroc: outcome.report.image_auroc,
        pixel_auroc: outcome.report.pixel_auroc,
        counts: CountsDoc {
            n_normal: outcome.report.n_normal,
            n_anomalous: outcome.report.n_anomalous,
            pixels_positive: outcome.report.pixels_positive,
            pixels_negative: outcome.report.pixels_negative,
        },
        training: TrainingDoc {
            steps: ckpt.step,
            l_g_final: last(&h.l_g),
            l_g_median_first10: median(first10),
            l_g_median_last10: median(last10),
            l_d_final: last(&h.l_d),
            l_adv_final: last(&h.l_adv),
            l_s_final: last(&h.l_s),
        },
        heatmap: HeatmapDoc {
            fused_min: outcome.fused_min,
            fused_max: outcome.fused_max,
        },
        config: &ckpt.config,
    };
    toml::to_string(&doc).expect("report serializes")
}

pub fn write_report(path: &Path, ckpt: &Checkpoint, outcome: &EvalOutcome) -> Result<()> {
    std::fs::write(path, render_report(ckpt, outcome)).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Write a fused anomaly map as an 8-bit grayscale heatmap with min-max
/// normalization; returns (min, max) so the scaling is reversible.
pub fn write_heatmap(path: &Path, fused: &Tensor<f32>) -> Result<(f32, f32)> {
    let (h, w) = (fused.shape()[0], fused.shape()[1]);
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in fused.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let data: Vec<u8> = fused
        .data()
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (((v - lo) / span) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    pnm::write_pnm(
        path,
        &PnmImage {
            width: w,
            height: h,
            channels: 1,
            data,
        },
    )?;
    Ok((lo, hi))
}
