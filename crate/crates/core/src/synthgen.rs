//! Deterministic synthetic presentation generator.
//!
//! Ridge patterns are oriented sinusoids with phase singularities implanted
//! at the ground-truth minutiae (each singularity terminates or forks one
//! ridge). Live presentations additionally ramp the red channel down frame
//! by frame (blanching proxy) and grow bright spots near selected minutiae
//! (perspiration proxy); spoof presentations are static up to translation
//! jitter. Frames are rendered to RGB and mosaiced to the same Bayer layout
//! the demosaic stage expects. Everything is a pure function of the seed.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::demosaic::{bayer_channel, RgbFrame};
use crate::ingest::{
    self, CoordSpace, FrameSequence, IngestError, Label, Manifest, Minutia, MinutiaSet,
    PresentationRecord, RawFrame, SequenceMeta,
};
use crate::util::round_u8;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("spoof presentations must have blanching_ramp = 1.0 and no perspiration spots")]
    SpoofWithCues,
    #[error("frame count must be >= 2, got {0}")]
    BadFrameCount(usize),
    #[error("frame dimensions must be even and >= 64x64, got {width}x{height}")]
    BadDimensions { width: usize, height: usize },
    #[error("could not place {requested} minutiae at separation {separation} in a {width}x{height} frame")]
    CapacityExceeded {
        requested: usize,
        separation: f64,
        width: usize,
        height: usize,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

#[derive(Debug, Clone)]
pub struct SynthParams {
    pub seed: u64,
    pub class: Label,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Ridge spacing in native pixels.
    pub ridge_period: f64,
    /// Wave direction (radians); ridges run perpendicular to it.
    pub orientation: f64,
    pub num_minutiae: usize,
    /// Per-frame multiplicative red attenuation; 1.0 = none.
    pub blanching_ramp: f64,
    /// Number of growing bright spots (live only).
    pub perspiration_spots: usize,
    /// Spot radius growth per frame, native pixels.
    pub spot_growth: f64,
    /// Maximum per-frame translation, native pixels. Frame 0 never moves.
    pub jitter: f64,
}

impl SynthParams {
    /// Strong temporal cues: the classes separate on the red ramp alone.
    pub fn strong(class: Label, seed: u64) -> Self {
        let live = class == Label::Live;
        Self {
            seed,
            class,
            width: 192,
            height: 128,
            frames: 10,
            ridge_period: 16.0,
            orientation: 0.5,
            num_minutiae: 4,
            blanching_ramp: if live { 0.92 } else { 1.0 },
            perspiration_spots: if live { 3 } else { 0 },
            spot_growth: if live { 0.7 } else { 0.0 },
            jitter: 1.0,
        }
    }

    /// Reduced cues for a non-trivial learning task.
    pub fn hard(class: Label, seed: u64) -> Self {
        let live = class == Label::Live;
        Self {
            blanching_ramp: if live { 0.98 } else { 1.0 },
            perspiration_spots: if live { 1 } else { 0 },
            spot_growth: if live { 0.3 } else { 0.0 },
            jitter: 2.0,
            ..Self::strong(class, seed)
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.class == Label::Spoof
            && (self.blanching_ramp != 1.0 || self.perspiration_spots != 0 || self.spot_growth != 0.0)
        {
            return Err(SynthError::SpoofWithCues);
        }
        if self.frames < 2 {
            return Err(SynthError::BadFrameCount(self.frames));
        }
        if self.width % 2 != 0 || self.height % 2 != 0 || self.width < 64 || self.height < 64 {
            return Err(SynthError::BadDimensions {
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }
}

/// Minimum distance between placed minutiae, native pixels. Far enough
/// apart that the detector's pair pruning cannot collapse neighbors.
const MIN_SEPARATION: f64 = 28.0;
/// Keep minutiae clear of the border: detector margin (12 half-res px
/// = 24 native) plus localization slack.
const PLACEMENT_MARGIN: f64 = 32.0;

const BASE_LUMA: f64 = 135.0;
const RIDGE_AMP: f64 = 55.0;
const RED_GAIN: f64 = 0.85;
const BLUE_GAIN: f64 = 0.62;
const SPOT_AMP: f64 = 50.0;
const SPOT_BASE_RADIUS: f64 = 2.0;
const WOBBLE_AMP: f64 = 0.6;
const WOBBLE_LEN: f64 = 60.0;

/// A fully resolved scene: every random choice drawn, ready to render any
/// frame. Construction is a pure function of the params.
#[derive(Debug, Clone)]
pub struct SynthScene {
    params: SynthParams,
    /// (x, y, singularity sign)
    minutiae: Vec<(f64, f64, f64)>,
    /// (cx, cy) perspiration spot centers
    spots: Vec<(f64, f64)>,
    /// per-frame translation, frame 0 = (0, 0)
    shifts: Vec<(f64, f64)>,
}

impl SynthScene {
    pub fn from_params(params: &SynthParams) -> Result<Self, SynthError> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

        let (w, h) = (params.width as f64, params.height as f64);
        let capacity_error = || SynthError::CapacityExceeded {
            requested: params.num_minutiae,
            separation: MIN_SEPARATION,
            width: params.width,
            height: params.height,
        };
        if w <= 2.0 * PLACEMENT_MARGIN || h <= 2.0 * PLACEMENT_MARGIN {
            return Err(capacity_error());
        }
        // rejection sampling with whole-configuration restarts: sequential
        // greedy placement can paint itself into a corner
        let mut minutiae: Vec<(f64, f64, f64)> = Vec::new();
        let mut restarts = 0usize;
        while minutiae.len() < params.num_minutiae {
            minutiae.clear();
            let mut attempts = 0usize;
            while minutiae.len() < params.num_minutiae && attempts < 200 {
                attempts += 1;
                let x = rng.random_range(PLACEMENT_MARGIN..w - PLACEMENT_MARGIN);
                let y = rng.random_range(PLACEMENT_MARGIN..h - PLACEMENT_MARGIN);
                let clear = minutiae.iter().all(|&(mx, my, _)| {
                    ((x - mx).powi(2) + (y - my).powi(2)).sqrt() >= MIN_SEPARATION
                });
                if clear {
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    minutiae.push((x, y, sign));
                }
            }
            if minutiae.len() < params.num_minutiae {
                restarts += 1;
                if restarts > 25 {
                    return Err(capacity_error());
                }
            }
        }

        let spots: Vec<(f64, f64)> = minutiae
            .iter()
            .take(params.perspiration_spots)
            .map(|&(mx, my, _)| {
                let angle = rng.random_range(0.0..2.0 * PI);
                let dist = rng.random_range(5.0..9.0);
                (mx + dist * angle.cos(), my + dist * angle.sin())
            })
            .collect();

        let mut shifts = vec![(0.0, 0.0)];
        for _ in 1..params.frames {
            let j = params.jitter;
            if j > 0.0 {
                shifts.push((rng.random_range(-j..=j), rng.random_range(-j..=j)));
            } else {
                shifts.push((0.0, 0.0));
            }
        }

        Ok(Self {
            params: params.clone(),
            minutiae,
            spots,
            shifts,
        })
    }

    pub fn params(&self) -> &SynthParams {
        &self.params
    }

    /// Ridge phase at pattern coordinates (x, y).
    fn phase(&self, x: f64, y: f64) -> f64 {
        let k = 2.0 * PI / self.params.ridge_period;
        let (c, s) = (self.params.orientation.cos(), self.params.orientation.sin());
        let along = x * c + y * s;
        let across = -x * s + y * c;
        let mut p = k * along + WOBBLE_AMP * (2.0 * PI * across / WOBBLE_LEN).sin();
        for &(mx, my, sign) in &self.minutiae {
            p += sign * (y - my).atan2(x - mx);
        }
        p
    }

    /// Continuous RGB at frame `t`, before quantization.
    fn shade(&self, t: usize, px: usize, py: usize) -> (f64, f64, f64) {
        let (dx, dy) = self.shifts[t];
        let x = px as f64 - dx;
        let y = py as f64 - dy;
        let luma = BASE_LUMA + RIDGE_AMP * self.phase(x, y).cos();
        let ramp = self.params.blanching_ramp.powi(t as i32);
        let mut r = luma * RED_GAIN * ramp;
        let mut g = luma;
        let mut b = luma * BLUE_GAIN;
        for &(cx, cy, rad) in self.spot_states(t).iter() {
            let d2 = (x - cx).powi(2) + (y - cy).powi(2);
            let bump = SPOT_AMP * (-d2 / (2.0 * rad * rad)).exp();
            r += bump;
            g += bump;
            b += bump;
        }
        (r, g, b)
    }

    fn spot_states(&self, t: usize) -> Vec<(f64, f64, f64)> {
        self.spots
            .iter()
            .map(|&(cx, cy)| {
                (
                    cx,
                    cy,
                    SPOT_BASE_RADIUS + self.params.spot_growth * t as f64,
                )
            })
            .collect()
    }

    /// The pre-mosaic RGB frame (quantized) at frame `t`.
    pub fn render_rgb(&self, t: usize) -> RgbFrame {
        let (w, h) = (self.params.width, self.params.height);
        let mut planes = [vec![0u8; w * h], vec![0u8; w * h], vec![0u8; w * h]];
        for y in 0..h {
            for x in 0..w {
                let (r, g, b) = self.shade(t, x, y);
                planes[0][y * w + x] = round_u8(r);
                planes[1][y * w + x] = round_u8(g);
                planes[2][y * w + x] = round_u8(b);
            }
        }
        RgbFrame::new(w, h, planes)
    }

    /// The Bayer-mosaiced capture at frame `t`.
    pub fn render_bayer(&self, t: usize) -> RawFrame {
        let (w, h) = (self.params.width, self.params.height);
        let mut pixels = vec![0u8; w * h];
        for y in 0..h {
            for x in 0..w {
                let (r, g, b) = self.shade(t, x, y);
                let v = match bayer_channel(y, x) {
                    0 => r,
                    1 => g,
                    _ => b,
                };
                pixels[y * w + x] = round_u8(v);
            }
        }
        RawFrame::new(w, h, pixels).expect("even synth dimensions")
    }

    /// Ground-truth minutiae in native space, attached to frame 0.
    pub fn ground_truth(&self) -> MinutiaSet {
        MinutiaSet {
            frame_index: 0,
            space: CoordSpace::Native1000ppi,
            minutiae: self
                .minutiae
                .iter()
                .map(|&(x, y, _)| Minutia {
                    x,
                    y,
                    theta: Some(self.params.orientation),
                    quality: None,
                })
                .collect(),
        }
    }

    /// Pixels of frame `t` where the pattern is locally smooth: at least
    /// 2 px from any dark ridge center, away from singularities, spots,
    /// and the frame border.
    pub fn smooth_mask(&self, t: usize) -> Vec<bool> {
        let (w, h) = (self.params.width, self.params.height);
        let k = 2.0 * PI / self.params.ridge_period;
        let (dx, dy) = self.shifts[t];
        let spots = self.spot_states(t);
        let mut mask = vec![false; w * h];
        for py in 0..h {
            for px in 0..w {
                if px < 2 || py < 2 || px >= w - 2 || py >= h - 2 {
                    continue;
                }
                let x = px as f64 - dx;
                let y = py as f64 - dy;
                let near_minutia = self.minutiae.iter().any(|&(mx, my, _)| {
                    (x - mx).powi(2) + (y - my).powi(2)
                        < (2.0 * self.params.ridge_period).powi(2)
                });
                if near_minutia {
                    continue;
                }
                let near_spot = spots
                    .iter()
                    .any(|&(cx, cy, r)| (x - cx).powi(2) + (y - cy).powi(2) < (3.0 * r + 4.0).powi(2));
                if near_spot {
                    continue;
                }
                // wrapped phase distance to the dark ridge center (phase = pi)
                let phi = self.phase(x, y).rem_euclid(2.0 * PI);
                let dist_to_ridge = (phi - PI).abs() / k;
                if dist_to_ridge >= 2.0 {
                    mask[py * w + px] = true;
                }
            }
        }
        mask
    }
}

/// Everything one synthetic presentation produces.
#[derive(Debug, Clone)]
pub struct SynthPresentation {
    pub sequence: FrameSequence,
    pub ground_truth: MinutiaSet,
    pub record: PresentationRecord,
}

/// Render a full presentation from params: frames, ground truth, and a
/// skeleton record (the dataset generator fills in identity fields).
pub fn generate_presentation(params: &SynthParams) -> Result<SynthPresentation, SynthError> {
    let scene = SynthScene::from_params(params)?;
    let presentation_id = format!("synth_{:016x}", params.seed);
    let frames: Vec<RawFrame> = (0..params.frames).map(|t| scene.render_bayer(t)).collect();
    let sequence = FrameSequence {
        meta: SequenceMeta {
            presentation_id: presentation_id.clone(),
            fps: ingest::NATIVE_FPS,
            ppi: ingest::NATIVE_PPI,
            frame_count: params.frames,
            device_capture: false,
        },
        frames,
    };
    let record = PresentationRecord {
        presentation_id: presentation_id.clone(),
        subject_id: String::new(),
        label: params.class,
        material: (params.class == Label::Spoof).then(|| "synthetic".to_string()),
        material_variant: None,
        path: presentation_id,
    };
    Ok(SynthPresentation {
        sequence,
        ground_truth: scene.ground_truth(),
        record,
    })
}

#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub n_live: usize,
    pub n_spoof: usize,
    pub subjects: usize,
    pub materials: usize,
    pub seed: u64,
    pub hard: bool,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_live: 8,
            n_spoof: 8,
            subjects: 4,
            materials: 2,
            seed: 0,
            hard: false,
            frames: 10,
            width: 192,
            height: 128,
        }
    }
}

/// Generate a dataset on disk in the ingest formats: one directory per
/// presentation (frames + meta.json + ground-truth minutiae.csv) and a
/// manifest.jsonl at the root. Subjects and synthetic materials are
/// assigned round-robin.
pub fn generate_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest, SynthError> {
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();

    let emit = |params: &mut SynthParams,
                    record_id: String,
                    subject_id: String,
                    material: Option<String>,
                    variant: Option<String>|
     -> Result<PresentationRecord, SynthError> {
        let scene = SynthScene::from_params(params)?;
        let dir = out_dir.join(&record_id);
        let frames: Vec<RawFrame> = (0..params.frames).map(|t| scene.render_bayer(t)).collect();
        let sequence = FrameSequence {
            meta: SequenceMeta {
                presentation_id: record_id.clone(),
                fps: ingest::NATIVE_FPS,
                ppi: ingest::NATIVE_PPI,
                frame_count: params.frames,
                device_capture: false,
            },
            frames,
        };
        ingest::save_sequence(&sequence, &dir)?;
        ingest::write_minutiae(&[scene.ground_truth()], &dir.join("minutiae.csv"))?;
        Ok(PresentationRecord {
            presentation_id: record_id.clone(),
            subject_id,
            label: params.class,
            material,
            material_variant: variant,
            path: record_id,
        })
    };

    for i in 0..cfg.n_live {
        let seed = master.random::<u64>();
        let orientation = master.random_range(0.0..PI);
        let mut params = if cfg.hard {
            SynthParams::hard(Label::Live, seed)
        } else {
            SynthParams::strong(Label::Live, seed)
        };
        params.orientation = orientation;
        params.frames = cfg.frames;
        params.width = cfg.width;
        params.height = cfg.height;
        let subject = format!("subj{:02}", i % cfg.subjects.max(1));
        records.push(emit(
            &mut params,
            format!("live{i:04}"),
            subject,
            None,
            None,
        )?);
    }
    for i in 0..cfg.n_spoof {
        let seed = master.random::<u64>();
        let orientation = master.random_range(0.0..PI);
        let mut params = if cfg.hard {
            SynthParams::hard(Label::Spoof, seed)
        } else {
            SynthParams::strong(Label::Spoof, seed)
        };
        params.orientation = orientation;
        params.frames = cfg.frames;
        params.width = cfg.width;
        params.height = cfg.height;
        let materials = cfg.materials.max(1);
        let material = format!("mat{:02}", i % materials);
        let variant = format!("v{}", (i / materials) % 2 + 1);
        let subject = format!("batch{:02}", i % 3);
        records.push(emit(
            &mut params,
            format!("spoof{i:04}"),
            subject,
            Some(material),
            Some(variant),
        )?);
    }

    let manifest = Manifest::validate(records)?;
    ingest::save_manifest(&manifest, &out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demosaic::demosaic_bilinear;
    use crate::minutiae::{detect_minutiae_cn, downscale_half, to_native, DetectorParams};

    #[test]
    fn same_seed_bit_identical() {
        let params = SynthParams::strong(Label::Live, 77);
        let a = generate_presentation(&params).unwrap();
        let b = generate_presentation(&params).unwrap();
        assert_eq!(a.sequence.frames, b.sequence.frames);
        assert_eq!(a.ground_truth, b.ground_truth);
    }

    #[test]
    fn spoof_zero_jitter_frames_identical() {
        let mut params = SynthParams::strong(Label::Spoof, 5);
        params.jitter = 0.0;
        let p = generate_presentation(&params).unwrap();
        for frame in &p.sequence.frames[1..] {
            assert_eq!(frame, &p.sequence.frames[0]);
        }
    }

    #[test]
    fn spoof_with_cues_rejected() {
        let mut params = SynthParams::strong(Label::Spoof, 5);
        params.blanching_ramp = 0.9;
        assert!(matches!(
            SynthScene::from_params(&params),
            Err(SynthError::SpoofWithCues)
        ));
    }

    #[test]
    fn live_red_ramp_strictly_decreases() {
        let mut params = SynthParams::strong(Label::Live, 11);
        params.blanching_ramp = 0.95;
        let p = generate_presentation(&params).unwrap();
        let mut last = f64::INFINITY;
        for frame in &p.sequence.frames {
            let rgb = demosaic_bilinear(frame).unwrap();
            let mean_r =
                rgb.plane(0).iter().map(|&v| v as f64).sum::<f64>() / rgb.plane(0).len() as f64;
            assert!(mean_r < last, "mean R {mean_r} did not decrease from {last}");
            last = mean_r;
        }
    }

    #[test]
    fn mosaic_demosaic_consistent_on_smooth_regions() {
        let mut params = SynthParams::strong(Label::Spoof, 21);
        params.jitter = 0.0;
        let scene = SynthScene::from_params(&params).unwrap();
        let truth = scene.render_rgb(0);
        let recovered = demosaic_bilinear(&scene.render_bayer(0)).unwrap();
        let mask = scene.smooth_mask(0);
        let n = mask.iter().filter(|&&m| m).count();
        assert!(n > 1000, "smooth region too small: {n}");
        for c in 0..3 {
            let mut err = 0.0;
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    err += (truth.plane(c)[i] as f64 - recovered.plane(c)[i] as f64).abs();
                }
            }
            let mae = err / n as f64;
            assert!(mae <= 4.0, "channel {c} MAE {mae}");
        }
    }

    #[test]
    fn temporal_red_variance_separates_classes() {
        // strong cues, zero jitter: mean temporal R variance must split
        // the classes perfectly
        let metric = |params: &SynthParams| -> f64 {
            let p = generate_presentation(params).unwrap();
            let rgbs: Vec<_> = p
                .sequence
                .frames
                .iter()
                .map(|f| demosaic_bilinear(f).unwrap())
                .collect();
            let n = rgbs[0].plane(0).len();
            let t = rgbs.len() as f64;
            let mut total = 0.0;
            for i in 0..n {
                let mean: f64 = rgbs.iter().map(|f| f.plane(0)[i] as f64).sum::<f64>() / t;
                let var: f64 = rgbs
                    .iter()
                    .map(|f| (f.plane(0)[i] as f64 - mean).powi(2))
                    .sum::<f64>()
                    / t;
                total += var;
            }
            total / n as f64
        };
        let mut worst_live = f64::INFINITY;
        let mut worst_spoof = f64::NEG_INFINITY;
        for seed in 0..6 {
            let mut live = SynthParams::strong(Label::Live, seed);
            live.blanching_ramp = 0.9;
            live.jitter = 0.0;
            let mut spoof = SynthParams::strong(Label::Spoof, seed + 100);
            spoof.jitter = 0.0;
            worst_live = worst_live.min(metric(&live));
            worst_spoof = worst_spoof.max(metric(&spoof));
        }
        assert!(
            worst_spoof < worst_live,
            "classes overlap: spoof max {worst_spoof}, live min {worst_live}"
        );
    }

    #[test]
    fn detector_recovers_ground_truth() {
        // aggregate recall across several presentations of both classes
        let mut total = 0usize;
        let mut recovered = 0usize;
        for seed in 0..8u64 {
            let class = if seed % 2 == 0 { Label::Spoof } else { Label::Live };
            let params = SynthParams::strong(class, 1000 + seed);
            let scene = SynthScene::from_params(&params).unwrap();
            let rgb = demosaic_bilinear(&scene.render_bayer(0)).unwrap();
            let gray = downscale_half(&rgb).unwrap();
            let det = detect_minutiae_cn(&gray, &DetectorParams::default(), 0).unwrap();
            let native = to_native(&det.set).unwrap();
            for gt in &scene.ground_truth().minutiae {
                total += 1;
                let hit = native.minutiae.iter().any(|m| {
                    ((m.x - gt.x).powi(2) + (m.y - gt.y).powi(2)).sqrt() <= 10.0
                });
                if hit {
                    recovered += 1;
                }
            }
        }
        let recall = recovered as f64 / total as f64;
        assert!(
            recall >= 0.7,
            "detector recovered {recovered}/{total} ground-truth minutiae"
        );
    }

    #[test]
    fn dataset_round_trips_through_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            n_live: 8,
            n_spoof: 8,
            subjects: 4,
            materials: 2,
            seed: 3,
            frames: 4,
            ..DatasetConfig::default()
        };
        let manifest = generate_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(manifest.records.len(), 16);
        assert_eq!(manifest.materials().len(), 2);

        let back = ingest::load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(back.records.len(), 16);
        for rec in &back.records {
            let pdir = dir.path().join(&rec.path);
            let seq = ingest::load_sequence(&pdir).unwrap();
            assert_eq!(seq.frame_count(), 4);
            let sets = ingest::read_minutiae(
                &pdir.join("minutiae.csv"),
                Some((seq.width(), seq.height())),
            )
            .unwrap();
            assert_eq!(sets.len(), 1);
            assert!(!sets[0].is_empty());
        }
    }

    #[test]
    fn capacity_error_when_overpacked() {
        let mut params = SynthParams::strong(Label::Live, 1);
        params.num_minutiae = 50;
        assert!(matches!(
            SynthScene::from_params(&params),
            Err(SynthError::CapacityExceeded { .. })
        ));
    }
}
