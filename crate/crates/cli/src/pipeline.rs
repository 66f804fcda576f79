//! Stage wiring: presentation preprocessing, protocol runs, scoring, and
//! report emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use fpad_core::demosaic::{self, DemosaicError, RgbFrame};
use fpad_core::evalproto::{
    self, EvalError, MetricsReport, PresentationScore, ScoreTable, SplitPlan,
};
use fpad_core::ingest::{self, IngestError, Label, Manifest, MinutiaSet, PresentationRecord};
use fpad_core::minutiae::{self, MinutiaeError, ReferenceSelection};
use fpad_core::patchseq::{self, PatchError};
use fpad_core::pnm::PnmError;
use fpad_core::synthgen::SynthError;
use fpad_nn::checkpoint::CheckpointError;
use fpad_nn::model::{nchw_from_thwc, Model, ModelError};
use fpad_nn::tensor::Tensor;
use fpad_nn::train::{self, Sample, TrainError, TrainingHistory};

use crate::config::{AppConfig, ConfigError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Pnm(#[from] PnmError),
    #[error(transparent)]
    Demosaic(#[from] DemosaicError),
    #[error(transparent)]
    Minutiae(#[from] MinutiaeError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Data(String),
}

impl CliError {
    /// 3 = data error, 4 = numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Train(TrainError::NonFiniteLoss { .. }) => 4,
            CliError::Train(TrainError::Adam(_)) => 4,
            _ => 3,
        }
    }
}

pub fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Protocol {
    KnownMaterial,
    CrossMaterial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum MinutiaeSource {
    /// Run the classical detector on every frame.
    Detect,
    /// Read minutiae.csv from each presentation directory.
    Provided,
}

/// One presentation converted to model-ready sequences.
pub struct PreppedPresentation {
    pub record: PresentationRecord,
    /// Patch sequences as (T, 3, S, S) tensors.
    pub sequences: Vec<Tensor>,
}

/// Load frames, demosaic, resolve minutiae, cut patch sequences, and
/// resize to the model input layout.
pub fn preprocess_presentation(
    root: &Path,
    record: &PresentationRecord,
    cfg: &AppConfig,
    source: MinutiaeSource,
    whole_frame: bool,
) -> Result<PreppedPresentation, CliError> {
    let dir = root.join(&record.path);
    let sequence = ingest::load_sequence(&dir)?;
    let rgb: Vec<RgbFrame> = sequence
        .frames
        .iter()
        .map(demosaic::demosaic_bilinear)
        .collect::<Result<_, _>>()?;

    let patch_sequences = if whole_frame {
        vec![patchseq::whole_frame_sequence(
            &rgb,
            &record.presentation_id,
            record.label,
        )?]
    } else {
        let reference = resolve_reference(&dir, &sequence, &rgb, cfg, source)?;
        patchseq::extract_patch_sequences(
            &rgb,
            &reference,
            cfg.patch_size,
            &record.presentation_id,
            record.label,
        )?
    };

    let model_config = cfg.model.model_config()?;
    let size = model_config.backbone.input_size;
    let sequences = patch_sequences
        .iter()
        .map(|seq| {
            let input = patchseq::to_model_input(seq, size, size);
            nchw_from_thwc(input.frames, input.height, input.width, &input.data)
        })
        .collect();
    Ok(PreppedPresentation {
        record: record.clone(),
        sequences,
    })
}

/// Build the reference selection either by running the detector on every
/// frame or from a provided minutiae.csv.
fn resolve_reference(
    dir: &Path,
    sequence: &ingest::FrameSequence,
    rgb: &[RgbFrame],
    cfg: &AppConfig,
    source: MinutiaeSource,
) -> Result<ReferenceSelection, CliError> {
    let frames = sequence.frame_count();
    let sets: Vec<MinutiaSet> = match source {
        MinutiaeSource::Detect => {
            let mut sets = Vec::with_capacity(frames);
            for (t, frame) in rgb.iter().enumerate() {
                let gray = minutiae::downscale_half(frame)?;
                let detection = minutiae::detect_minutiae_cn(&gray, &cfg.detector, t)?;
                sets.push(minutiae::to_native(&detection.set)?);
            }
            sets
        }
        MinutiaeSource::Provided => {
            let path = dir.join("minutiae.csv");
            let loaded =
                ingest::read_minutiae(&path, Some((sequence.width(), sequence.height())))?;
            let mut sets: Vec<MinutiaSet> = (0..frames)
                .map(|t| MinutiaSet::empty(t, ingest::CoordSpace::Native1000ppi))
                .collect();
            for set in loaded {
                let native = match set.space {
                    ingest::CoordSpace::Native1000ppi => set,
                    ingest::CoordSpace::Half500ppi => minutiae::to_native(&set)?,
                };
                if native.frame_index >= frames {
                    return Err(CliError::Data(format!(
                        "{}: minutiae for frame {} but sequence has {} frames",
                        path.display(),
                        native.frame_index,
                        frames
                    )));
                }
                sets[native.frame_index] = native;
            }
            sets
        }
    };
    Ok(minutiae::select_reference(&sets)?)
}

/// Training samples for a set of presentation ids (sorted order).
pub fn samples_for<'a>(
    prepped: &BTreeMap<String, PreppedPresentation>,
    ids: impl Iterator<Item = &'a String>,
) -> Vec<Sample> {
    let mut out = Vec::new();
    for id in ids {
        let p = &prepped[id];
        for seq in &p.sequences {
            out.push(Sample {
                sequence: seq.clone(),
                spoof: p.record.label == Label::Spoof,
                presentation_id: p.record.presentation_id.clone(),
                subject_id: p.record.subject_id.clone(),
            });
        }
    }
    out
}

/// Score one prepped presentation: per-sequence spoofness, mean-fused.
pub fn score_presentation(
    model: &Model,
    prepped: &PreppedPresentation,
) -> Result<PresentationScore, CliError> {
    let mut per_sequence = Vec::with_capacity(prepped.sequences.len());
    for seq in &prepped.sequences {
        per_sequence.push(model.predict(seq)?);
    }
    let fused = evalproto::fuse_scores(&per_sequence)?;
    Ok(PresentationScore {
        presentation_id: prepped.record.presentation_id.clone(),
        label: prepped.record.label,
        fused,
        per_sequence,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FoldReport {
    pub name: String,
    pub train_presentations: usize,
    pub test_presentations: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub metrics: MetricsReport,
    pub scores: ScoreTable,
}

#[derive(Debug, Serialize)]
pub struct PipelineReport {
    pub protocol: String,
    pub seed: u64,
    pub whole_frame: bool,
    pub minutiae_source: String,
    pub fdr_target: f64,
    pub tdr_mean: f64,
    pub tdr_sd: f64,
    pub folds: Vec<FoldReport>,
    pub config: AppConfig,
}

pub struct PipelineOptions {
    pub protocol: Protocol,
    pub material: Option<String>,
    pub whole_frame: bool,
    pub minutiae_source: MinutiaeSource,
}

pub fn build_splits(
    manifest: &Manifest,
    cfg: &AppConfig,
    opts: &PipelineOptions,
) -> Result<Vec<SplitPlan>, CliError> {
    match opts.protocol {
        Protocol::KnownMaterial => Ok(evalproto::make_known_material_folds(
            manifest,
            cfg.folds,
            cfg.derived_seed(1),
        )?),
        Protocol::CrossMaterial => {
            let material = opts
                .material
                .as_deref()
                .ok_or_else(|| CliError::Data("cross-material protocol needs --material".into()))?;
            Ok(vec![evalproto::make_cross_material_split(
                manifest,
                material,
                cfg.derived_seed(1),
            )?])
        }
    }
}

/// Train and evaluate one split over preprocessed presentations.
pub fn run_split(
    split: &SplitPlan,
    split_index: usize,
    prepped: &BTreeMap<String, PreppedPresentation>,
    cfg: &AppConfig,
) -> Result<(FoldReport, Model), CliError> {
    let samples = samples_for(prepped, split.train_ids.iter());
    let model_config = cfg.model.model_config()?;
    let mut model = Model::build(model_config, cfg.derived_seed(1000 + split_index as u64))?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.derived_seed(2000 + split_index as u64);
    let history = train::train(&mut model, &samples, &train_cfg)?;

    let mut entries = Vec::new();
    for id in &split.test_ids {
        entries.push(score_presentation(&model, &prepped[id])?);
    }
    let scores = ScoreTable { entries };
    let metrics = evalproto::tdr_at_fdr(&scores, cfg.fdr_target)?;
    Ok((
        FoldReport {
            name: split.name.clone(),
            train_presentations: split.train_ids.len(),
            test_presentations: split.test_ids.len(),
            epochs_run: history.epochs.len(),
            best_epoch: history.best_epoch,
            stopped_early: history.stopped_early,
            metrics,
            scores,
        },
        model,
    ))
}

/// The full chain: manifest -> splits -> preprocess -> per-split train and
/// score -> aggregated report.
pub fn run_pipeline(
    manifest_path: &Path,
    cfg: &AppConfig,
    opts: &PipelineOptions,
) -> Result<PipelineReport, CliError> {
    let manifest = ingest::load_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let splits = build_splits(&manifest, cfg, opts)?;

    let mut prepped = BTreeMap::new();
    for record in &manifest.records {
        let p = preprocess_presentation(root, record, cfg, opts.minutiae_source, opts.whole_frame)?;
        prepped.insert(record.presentation_id.clone(), p);
    }

    let mut folds = Vec::with_capacity(splits.len());
    for (i, split) in splits.iter().enumerate() {
        eprintln!(
            "split {} ({} train / {} test presentations)",
            split.name,
            split.train_ids.len(),
            split.test_ids.len()
        );
        let (fold, _) = run_split(split, i, &prepped, cfg)?;
        eprintln!(
            "  tdr {:.4} @ fdr target {} (threshold {:.4}, {} epochs)",
            fold.metrics.tdr, cfg.fdr_target, fold.metrics.threshold, fold.epochs_run
        );
        folds.push(fold);
    }

    let aggregate = evalproto::aggregate_folds(
        &folds.iter().map(|f| f.metrics.clone()).collect::<Vec<_>>(),
    )?;

    Ok(PipelineReport {
        protocol: match opts.protocol {
            Protocol::KnownMaterial => "known-material".to_string(),
            Protocol::CrossMaterial => format!(
                "cross-material:{}",
                opts.material.as_deref().unwrap_or_default()
            ),
        },
        seed: cfg.seed,
        whole_frame: opts.whole_frame,
        minutiae_source: match opts.minutiae_source {
            MinutiaeSource::Detect => "detect".to_string(),
            MinutiaeSource::Provided => "provided".to_string(),
        },
        fdr_target: cfg.fdr_target,
        tdr_mean: aggregate.mean_tdr,
        tdr_sd: aggregate.sd_tdr,
        folds,
        config: cfg.clone(),
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}
