//! Dataset-level processing: sanitize, extract temporal factors per stream,
//! fuse, summarize, then train and evaluate a classifier.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{evaluate, stratified_split, train, ClassifierModel, ConfusionMatrix, MetricsReport, ModelKind, TrainConfig};
use crate::csi::{amplitude, load_frame, phase, sanitize_phase, CsiFrame, SlopeFit, INTEL5300_SUBCARRIERS};
use crate::error::{Error, Result};
use crate::features::{fuse, summarize};
use crate::hdfm::{extract_features, fit_factor_count, HdfmConfig};
use crate::io::list_dataset;
use crate::rng::derive_seed;
use crate::RealMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Streams {
    Amplitude,
    Phase,
    /// Amplitude factors stacked over phase factors.
    #[default]
    Fused,
}

impl std::str::FromStr for Streams {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "amplitude" => Ok(Self::Amplitude),
            "phase" => Ok(Self::Phase),
            "fused" => Ok(Self::Fused),
            other => Err(Error::InvalidArgument(format!("unknown streams {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMethod {
    /// Factor count chosen by HDFM.
    #[default]
    Hdfm,
    /// Principal components at a fixed count.
    Pca,
}

impl std::str::FromStr for FeatureMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hdfm" => Ok(Self::Hdfm),
            "pca" => Ok(Self::Pca),
            other => Err(Error::InvalidArgument(format!("unknown feature method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub streams: Streams,
    pub method: FeatureMethod,
    /// Factor count for PCA; overrides the HDFM choice when set with HDFM.
    pub p: Option<usize>,
    pub hdfm: HdfmConfig,
    pub slope_fit: SlopeFit,
    /// Subtract each row's temporal mean before factor extraction.
    pub center_rows: bool,
    pub classifier: ModelKind,
    pub train: TrainConfig,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            streams: Streams::Fused,
            method: FeatureMethod::Hdfm,
            p: None,
            hdfm: HdfmConfig::default(),
            slope_fit: SlopeFit::LeastSquares,
            center_rows: true,
            classifier: ModelKind::MultinomialLogistic,
            train: TrainConfig::default(),
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Settings needed to turn a frame into a feature vector, saved with models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecipe {
    pub streams: Streams,
    pub method: FeatureMethod,
    pub p: usize,
    pub slope_fit: SlopeFit,
    pub center_rows: bool,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub label: String,
    pub id: String,
    pub frame: CsiFrame,
}

/// Physical subcarrier numbers for a block of `n_sc` rows: the Intel 5300
/// grouping when `n_sc = 30`, otherwise `0..n_sc`.
pub fn default_subcarrier_index(n_sc: usize) -> Vec<i32> {
    if n_sc == INTEL5300_SUBCARRIERS.len() {
        INTEL5300_SUBCARRIERS.to_vec()
    } else {
        (0..n_sc as i32).collect()
    }
}

fn center(mut m: RealMatrix) -> RealMatrix {
    for mut row in m.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    m
}

/// The real matrices analysed for one frame, amplitude first.
pub fn stream_matrices(frame: &CsiFrame, streams: Streams, slope_fit: SlopeFit, center_rows: bool) -> Result<Vec<RealMatrix>> {
    let mut out = Vec::with_capacity(2);
    if matches!(streams, Streams::Amplitude | Streams::Fused) {
        out.push(amplitude(frame));
    }
    if matches!(streams, Streams::Phase | Streams::Fused) {
        let (raw, _) = phase(frame);
        let index = default_subcarrier_index(frame.n_sc() as usize);
        out.push(sanitize_phase(&raw, &index, slope_fit)?);
    }
    Ok(if center_rows { out.into_iter().map(center).collect() } else { out })
}

/// Summary vector of a frame's factors at a fixed count.
pub fn frame_features(frame: &CsiFrame, recipe: &FeatureRecipe) -> Result<Vec<f64>> {
    let mats = stream_matrices(frame, recipe.streams, recipe.slope_fit, recipe.center_rows)?;
    let factors: Vec<RealMatrix> = mats.iter().map(|m| extract_features(m, recipe.p)).collect::<Result<_>>()?;
    let stacked = match factors.as_slice() {
        [a, b] => fuse(a, b)?.into_matrix(),
        [a] => a.clone(),
        _ => unreachable!("one or two streams"),
    };
    summarize(&stacked)
}

/// Most frequent value, smallest on ties.
pub fn mode(values: &[usize]) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &v in values {
        *counts.entry(v).or_default() += 1;
    }
    let mut best: Option<(usize, usize)> = None;
    for (v, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((v, c));
        }
    }
    best.map(|(v, _)| v)
}

/// Per-frame factor counts, one entry per analysed stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSelection {
    pub label: String,
    pub id: String,
    pub p_hat: Vec<usize>,
    pub sigma2_hat: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub recipe: FeatureRecipe,
    pub selections: Vec<FrameSelection>,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub model: ClassifierModel,
    pub metrics: MetricsReport,
    pub confusion: ConfusionMatrix,
}

/// All frames must share antenna layout, packet count and sample rate.
pub fn check_consistent(samples: &[Sample]) -> Result<()> {
    let key = |f: &CsiFrame| (f.n_tx(), f.n_rx(), f.n_sc(), f.t(), f.sample_rate_hz().to_bits());
    let mut tally: BTreeMap<_, usize> = BTreeMap::new();
    for s in samples {
        *tally.entry(key(&s.frame)).or_default() += 1;
    }
    if tally.len() <= 1 {
        return Ok(());
    }
    let reference = tally.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(k, _)| *k).unwrap();
    let offenders: Vec<String> = samples
        .iter()
        .filter(|s| key(&s.frame) != reference)
        .map(|s| {
            format!(
                "{}/{} ({}x{}x{}, T={})",
                s.label,
                s.id,
                s.frame.n_tx(),
                s.frame.n_rx(),
                s.frame.n_sc(),
                s.frame.t()
            )
        })
        .collect();
    Err(Error::Shape(format!(
        "frames differ from the common {}x{}x{}, T={} layout: {}",
        reference.0,
        reference.1,
        reference.2,
        reference.3,
        offenders.join(", ")
    )))
}

pub fn load_samples(root: &Path) -> Result<Vec<Sample>> {
    let entries = list_dataset(root)?;
    if entries.is_empty() {
        return Err(Error::InvalidArgument(format!("no <label>/<id>.csif files under {}", root.display())));
    }
    entries
        .into_par_iter()
        .map(|e| {
            Ok(Sample {
                frame: load_frame(&e.path)?,
                label: e.label,
                id: e.id,
            })
        })
        .collect()
}

/// Chooses the factor count for the dataset: HDFM per frame and stream, then
/// the most common selection.
pub fn select_common_p(samples: &[Sample], config: &PipelineConfig) -> Result<(usize, Vec<FrameSelection>)> {
    let selections: Vec<FrameSelection> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mats = stream_matrices(&s.frame, config.streams, config.slope_fit, config.center_rows)?;
            let mut sel = FrameSelection {
                label: s.label.clone(),
                id: s.id.clone(),
                p_hat: Vec::new(),
                sigma2_hat: Vec::new(),
            };
            for (k, m) in mats.iter().enumerate() {
                let hdfm = HdfmConfig {
                    seed: derive_seed(config.seed, &[0x4844, i as u64, k as u64]),
                    ..config.hdfm.clone()
                };
                let res = fit_factor_count(m, &hdfm).map_err(|e| match e {
                    Error::DegenerateRows(rows) => Error::Validation(format!(
                        "{}/{}: stream {k} has constant rows {rows:?}; choose other streams",
                        s.label, s.id
                    )),
                    other => other,
                })?;
                sel.p_hat.push(res.p_hat);
                sel.sigma2_hat.push(res.sigma2_hat);
            }
            Ok(sel)
        })
        .collect::<Result<_>>()?;
    let all: Vec<usize> = selections.iter().flat_map(|s| s.p_hat.iter().copied()).collect();
    let p = mode(&all).unwrap_or(0);
    Ok((p, selections))
}

pub fn run_pipeline(samples: &[Sample], config: &PipelineConfig) -> Result<PipelineReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    check_consistent(samples)?;
    let (p, selections) = match (config.method, config.p) {
        (FeatureMethod::Pca, None) => {
            return Err(Error::InvalidArgument("the PCA baseline needs a fixed factor count".into()))
        }
        (FeatureMethod::Pca, Some(p)) => (p, Vec::new()),
        (FeatureMethod::Hdfm, fixed) => {
            let (p_sel, sel) = select_common_p(samples, config)?;
            (fixed.unwrap_or(p_sel), sel)
        }
    };
    if p == 0 {
        return Err(Error::Validation(
            "selected factor count is 0: the frames look like pure noise, nothing to classify".into(),
        ));
    }
    let recipe = FeatureRecipe {
        streams: config.streams,
        method: config.method,
        p,
        slope_fit: config.slope_fit,
        center_rows: config.center_rows,
    };
    let features: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| frame_features(&s.frame, &recipe))
        .collect::<Result<_>>()?;
    let labels: Vec<String> = samples.iter().map(|s| s.label.clone()).collect();
    let (train_ids, test_ids) = stratified_split(&labels, config.train_fraction, derive_seed(config.seed, &[0x5350]))?;
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<String>) {
        (
            idx.iter().map(|&i| features[i].clone()).collect(),
            idx.iter().map(|&i| labels[i].clone()).collect(),
        )
    };
    let (xtr, ytr) = pick(&train_ids);
    let (xte, yte) = pick(&test_ids);
    let train_cfg = TrainConfig {
        seed: derive_seed(config.seed, &[0x5452]),
        ..config.train
    };
    let mut model = train(&xtr, &ytr, config.classifier, &train_cfg)?;
    model.metadata.insert("recipe".into(), serde_json::to_value(recipe)?);
    let (metrics, confusion) = evaluate(&model, &xte, &yte)?;
    Ok(PipelineReport {
        recipe,
        selections,
        train_ids,
        test_ids,
        model,
        metrics,
        confusion,
    })
}

/// Feature recipe stored in a model by [`run_pipeline`].
pub fn model_recipe(model: &ClassifierModel) -> Result<FeatureRecipe> {
    let v = model
        .metadata
        .get("recipe")
        .ok_or_else(|| Error::Format("model carries no feature recipe".into()))?;
    Ok(serde_json::from_value(v.clone())?)
}

/// Scores a saved model on a dataset.
pub fn evaluate_samples(model: &ClassifierModel, samples: &[Sample]) -> Result<(MetricsReport, ConfusionMatrix)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    check_consistent(samples)?;
    let recipe = model_recipe(model)?;
    let features: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| frame_features(&s.frame, &recipe))
        .collect::<Result<_>>()?;
    let labels: Vec<String> = samples.iter().map(|s| s.label.clone()).collect();
    evaluate(model, &features, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Complex, DMatrix};

    fn frame(n_sc: u16, t: usize, fill: f64) -> CsiFrame {
        CsiFrame::new(1, 1, n_sc, 100.0, DMatrix::from_element(n_sc as usize, t, Complex::new(fill, 0.0))).unwrap()
    }

    #[test]
    fn mode_prefers_smaller_on_ties() {
        assert_eq!(mode(&[3, 2, 3, 2, 5]), Some(2));
        assert_eq!(mode(&[4, 4, 1]), Some(4));
        assert_eq!(mode(&[]), None);
    }

    #[test]
    fn inconsistent_shapes_list_offenders() {
        let s = |id: &str, f| Sample {
            label: "a".into(),
            id: id.into(),
            frame: f,
        };
        let samples = vec![s("0", frame(4, 10, 1.0)), s("1", frame(4, 10, 1.0)), s("2", frame(4, 12, 1.0))];
        let err = check_consistent(&samples).unwrap_err().to_string();
        assert!(err.contains("a/2"), "{err}");
        assert!(!err.contains("a/0"));
    }

    #[test]
    fn streams_are_centred() {
        let mats = stream_matrices(&frame(4, 10, 2.0), Streams::Fused, SlopeFit::LeastSquares, true).unwrap();
        assert_eq!(mats.len(), 2);
        assert!(mats.iter().all(|m| m.amax() < 1e-12));
        let raw = stream_matrices(&frame(4, 10, 2.0), Streams::Amplitude, SlopeFit::LeastSquares, false).unwrap();
        assert_eq!(raw[0][(0, 0)], 2.0);
    }

    #[test]
    fn pca_requires_p() {
        let samples = vec![Sample {
            label: "a".into(),
            id: "0".into(),
            frame: frame(4, 10, 1.0),
        }];
        let cfg = PipelineConfig {
            method: FeatureMethod::Pca,
            ..PipelineConfig::default()
        };
        assert!(run_pipeline(&samples, &cfg).is_err());
        assert!(run_pipeline(&[], &PipelineConfig::default()).is_err());
    }
}
