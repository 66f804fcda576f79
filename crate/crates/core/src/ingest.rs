//! Presentation loading and dataset metadata.
//!
//! On-disk layout of one presentation:
//!
//! ```text
//! <dir>/meta.json        {"presentation_id", "fps", "ppi", "frame_count", "device_capture"}
//! <dir>/frame_00.pgm ... one binary PGM (P5) per frame
//! ```
//!
//! Dataset manifests are JSON-lines, one [`PresentationRecord`] per line.
//! Minutiae travel as CSV with a `# space=` header comment.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::pnm::{self, PnmError};

/// Native capture geometry of the fast-frame-rate reader.
pub const NATIVE_WIDTH: usize = 390;
pub const NATIVE_HEIGHT: usize = 630;
pub const NATIVE_FRAME_COUNT: usize = 10;
pub const NATIVE_FPS: f64 = 8.0;
pub const NATIVE_PPI: u32 = 1000;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error(transparent)]
    Pnm(#[from] PnmError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid metadata: {source}")]
    Meta {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing frame file {path}")]
    MissingFrame { path: String },
    #[error("frame {index} is {got_w}x{got_h}, expected {want_w}x{want_h}: dimension mismatch")]
    DimensionMismatch {
        index: usize,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("odd frame dimensions {width}x{height}")]
    OddDimensions { width: usize, height: usize },
    #[error("device capture must be {NATIVE_WIDTH}x{NATIVE_HEIGHT} with {NATIVE_FRAME_COUNT} frames, got {width}x{height} with {frames}")]
    NativeGeometry {
        width: usize,
        height: usize,
        frames: usize,
    },
    #[error("frame_count must be >= 2, got {0}")]
    BadFrameCount(usize),
    #[error("duplicate presentation id {0:?}")]
    DuplicateId(String),
    #[error("record {0:?}: live presentations must not declare a material")]
    LiveWithMaterial(String),
    #[error("record {0:?}: spoof presentations must declare a material")]
    SpoofWithoutMaterial(String),
    #[error("{path} line {line}: unreadable record: {source}")]
    BadRecord {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path} line {line}: {msg}")]
    BadMinutiaLine {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: missing `# space=` header")]
    MissingSpaceHeader { path: String },
    #[error("minutia ({x}, {y}) outside {width}x{height} bounds for {space}")]
    MinutiaOutOfBounds {
        x: f64,
        y: f64,
        width: f64,
        height: f64,
        space: CoordSpace,
    },
    #[error("cannot write minutiae sets with mixed coordinate spaces")]
    MixedSpaces,
}

fn io_err(path: &Path, source: std::io::Error) -> IngestError {
    IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One raw Bayer-mosaic frame, 8-bit, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFrame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RawFrame {
    /// Dimensions must be even (the mosaic tiles in 2x2 blocks).
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, IngestError> {
        if width % 2 != 0 || height % 2 != 0 || width == 0 || height == 0 {
            return Err(IngestError::OddDimensions { width, height });
        }
        assert_eq!(pixels.len(), width * height, "pixel buffer size");
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

/// Per-presentation metadata file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SequenceMeta {
    pub presentation_id: String,
    pub fps: f64,
    pub ppi: u32,
    pub frame_count: usize,
    pub device_capture: bool,
}

/// An ordered capture of `frame_count` Bayer frames plus metadata.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub meta: SequenceMeta,
    pub frames: Vec<RawFrame>,
}

impl FrameSequence {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }
}

/// Load a presentation directory into a validated [`FrameSequence`].
pub fn load_sequence(dir: &Path) -> Result<FrameSequence, IngestError> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: SequenceMeta = serde_json::from_str(&meta_text).map_err(|e| IngestError::Meta {
        path: meta_path.display().to_string(),
        source: e,
    })?;
    if meta.frame_count < 2 {
        return Err(IngestError::BadFrameCount(meta.frame_count));
    }

    let mut frames = Vec::with_capacity(meta.frame_count);
    for index in 0..meta.frame_count {
        let path = dir.join(frame_file_name(index));
        if !path.is_file() {
            return Err(IngestError::MissingFrame {
                path: path.display().to_string(),
            });
        }
        let (w, h, pixels) = pnm::read_pgm(&path)?;
        if let Some(first) = frames.first() {
            let first: &RawFrame = first;
            if w != first.width() || h != first.height() {
                return Err(IngestError::DimensionMismatch {
                    index,
                    got_w: w,
                    got_h: h,
                    want_w: first.width(),
                    want_h: first.height(),
                });
            }
        }
        frames.push(RawFrame::new(w, h, pixels)?);
    }

    if meta.device_capture
        && (frames[0].width() != NATIVE_WIDTH
            || frames[0].height() != NATIVE_HEIGHT
            || frames.len() != NATIVE_FRAME_COUNT)
    {
        return Err(IngestError::NativeGeometry {
            width: frames[0].width(),
            height: frames[0].height(),
            frames: frames.len(),
        });
    }

    Ok(FrameSequence { meta, frames })
}

/// Write a presentation directory (meta.json + frame PGMs).
pub fn save_sequence(seq: &FrameSequence, dir: &Path) -> Result<(), IngestError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let meta_path = dir.join("meta.json");
    let mut meta = seq.meta.clone();
    meta.frame_count = seq.frames.len();
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, text).map_err(|e| io_err(&meta_path, e))?;
    for (i, frame) in seq.frames.iter().enumerate() {
        let path = dir.join(frame_file_name(i));
        pnm::write_pgm(&path, frame.width(), frame.height(), frame.pixels())?;
    }
    Ok(())
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:02}.pgm")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Live,
    Spoof,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Live => write!(f, "live"),
            Label::Spoof => write!(f, "spoof"),
        }
    }
}

/// One dataset entry: a presentation directory plus its ground truth.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PresentationRecord {
    pub presentation_id: String,
    pub subject_id: String,
    pub label: Label,
    pub material: Option<String>,
    pub material_variant: Option<String>,
    /// Frame-directory locator, relative to the manifest's parent directory.
    pub path: String,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<PresentationRecord>,
}

impl Manifest {
    /// Validate record invariants: unique ids, live <=> no material.
    pub fn validate(records: Vec<PresentationRecord>) -> Result<Self, IngestError> {
        let mut seen = std::collections::BTreeSet::new();
        for rec in &records {
            if !seen.insert(rec.presentation_id.clone()) {
                return Err(IngestError::DuplicateId(rec.presentation_id.clone()));
            }
            match rec.label {
                Label::Live if rec.material.is_some() => {
                    return Err(IngestError::LiveWithMaterial(rec.presentation_id.clone()));
                }
                Label::Spoof if rec.material.is_none() => {
                    return Err(IngestError::SpoofWithoutMaterial(
                        rec.presentation_id.clone(),
                    ));
                }
                _ => {}
            }
        }
        Ok(Self { records })
    }

    pub fn live_records(&self) -> impl Iterator<Item = &PresentationRecord> {
        self.records.iter().filter(|r| r.label == Label::Live)
    }

    pub fn spoof_records(&self) -> impl Iterator<Item = &PresentationRecord> {
        self.records.iter().filter(|r| r.label == Label::Spoof)
    }

    /// Distinct spoof material names in first-seen order.
    pub fn materials(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for rec in self.spoof_records() {
            let m = rec.material.as_deref().expect("validated spoof record");
            if !out.iter().any(|x| x == m) {
                out.push(m.to_string());
            }
        }
        out
    }

    /// Spoof presentation counts grouped by material.
    pub fn spoof_counts_by_material(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for rec in self.spoof_records() {
            *out.entry(rec.material.clone().expect("validated")).or_insert(0) += 1;
        }
        out
    }

    pub fn get(&self, presentation_id: &str) -> Option<&PresentationRecord> {
        self.records
            .iter()
            .find(|r| r.presentation_id == presentation_id)
    }
}

/// Load a JSON-lines manifest, validating all record invariants.
pub fn load_manifest(path: &Path) -> Result<Manifest, IngestError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PresentationRecord =
            serde_json::from_str(&line).map_err(|e| IngestError::BadRecord {
                path: path.display().to_string(),
                line: i + 1,
                source: e,
            })?;
        records.push(rec);
    }
    Manifest::validate(records)
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<(), IngestError> {
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    for rec in &manifest.records {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(file, "{line}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

/// Coordinate space a minutia set lives in. Detection runs at half
/// resolution; patch extraction wants native coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoordSpace {
    #[serde(rename = "native_1000ppi")]
    Native1000ppi,
    #[serde(rename = "half_500ppi")]
    Half500ppi,
}

impl CoordSpace {
    pub fn scale(self) -> f64 {
        match self {
            CoordSpace::Native1000ppi => 1.0,
            CoordSpace::Half500ppi => 0.5,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            CoordSpace::Native1000ppi => "native_1000ppi",
            CoordSpace::Half500ppi => "half_500ppi",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "native_1000ppi" => Some(CoordSpace::Native1000ppi),
            "half_500ppi" => Some(CoordSpace::Half500ppi),
            _ => None,
        }
    }
}

impl fmt::Display for CoordSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minutia {
    pub x: f64,
    pub y: f64,
    pub theta: Option<f64>,
    pub quality: Option<f64>,
}

/// Minutiae detected in (or supplied for) one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MinutiaSet {
    pub frame_index: usize,
    pub space: CoordSpace,
    pub minutiae: Vec<Minutia>,
}

impl MinutiaSet {
    pub fn empty(frame_index: usize, space: CoordSpace) -> Self {
        Self {
            frame_index,
            space,
            minutiae: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.minutiae.len()
    }

    pub fn is_empty(&self) -> bool {
        self.minutiae.is_empty()
    }
}

/// Write minutiae sets (all in one coordinate space) as CSV:
///
/// ```text
/// # space=native_1000ppi
/// frame,x,y,theta,quality
/// 0,120.000000,48.500000,1.570796,
/// ```
pub fn write_minutiae(sets: &[MinutiaSet], path: &Path) -> Result<(), IngestError> {
    let space = match sets.first() {
        Some(s) => s.space,
        None => CoordSpace::Native1000ppi,
    };
    if sets.iter().any(|s| s.space != space) {
        return Err(IngestError::MixedSpaces);
    }
    let mut out = String::new();
    out.push_str(&format!("# space={}\n", space.tag()));
    out.push_str("frame,x,y,theta,quality\n");
    for set in sets {
        for m in &set.minutiae {
            let theta = m.theta.map(|t| format!("{t:.6}")).unwrap_or_default();
            let quality = m.quality.map(|q| format!("{q:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{}\n",
                set.frame_index, m.x, m.y, theta, quality
            ));
        }
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Read a minutiae CSV, grouping rows by frame index (ascending).
///
/// When `native_dims = Some((width, height))` every coordinate is checked
/// against the frame bounds scaled to the declared space.
pub fn read_minutiae(
    path: &Path,
    native_dims: Option<(usize, usize)>,
) -> Result<Vec<MinutiaSet>, IngestError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut space: Option<CoordSpace> = None;
    let mut by_frame: BTreeMap<usize, Vec<Minutia>> = BTreeMap::new();
    let mut saw_header = false;

    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let bad = |msg: &str| IngestError::BadMinutiaLine {
            path: path.display().to_string(),
            line: line_no,
            msg: msg.to_string(),
        };
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(tag) = rest.strip_prefix("space=") {
                space =
                    Some(CoordSpace::from_tag(tag.trim()).ok_or_else(|| bad("unknown space"))?);
            }
            continue;
        }
        if !saw_header {
            if trimmed != "frame,x,y,theta,quality" {
                return Err(bad("expected header frame,x,y,theta,quality"));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let frame: usize = fields[0].parse().map_err(|_| bad("bad frame index"))?;
        let x: f64 = fields[1].parse().map_err(|_| bad("bad x"))?;
        let y: f64 = fields[2].parse().map_err(|_| bad("bad y"))?;
        let theta = if fields[3].is_empty() {
            None
        } else {
            Some(fields[3].parse().map_err(|_| bad("bad theta"))?)
        };
        let quality = if fields[4].is_empty() {
            None
        } else {
            Some(fields[4].parse().map_err(|_| bad("bad quality"))?)
        };
        by_frame.entry(frame).or_default().push(Minutia {
            x,
            y,
            theta,
            quality,
        });
    }

    let space = space.ok_or_else(|| IngestError::MissingSpaceHeader {
        path: path.display().to_string(),
    })?;

    if let Some((w, h)) = native_dims {
        let s = space.scale();
        let (bw, bh) = (w as f64 * s, h as f64 * s);
        for minutiae in by_frame.values() {
            for m in minutiae {
                if m.x < 0.0 || m.x >= bw || m.y < 0.0 || m.y >= bh {
                    return Err(IngestError::MinutiaOutOfBounds {
                        x: m.x,
                        y: m.y,
                        width: bw,
                        height: bh,
                        space,
                    });
                }
            }
        }
    }

    Ok(by_frame
        .into_iter()
        .map(|(frame_index, minutiae)| MinutiaSet {
            frame_index,
            space,
            minutiae,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, label: Label, material: Option<&str>) -> PresentationRecord {
        PresentationRecord {
            presentation_id: id.to_string(),
            subject_id: if label == Label::Live { "s1".into() } else { "batch0".into() },
            label,
            material: material.map(String::from),
            material_variant: material.map(|_| "v1".to_string()),
            path: format!("data/{id}"),
        }
    }

    fn constant_sequence(id: &str, w: usize, h: usize, t: usize, value: u8) -> FrameSequence {
        FrameSequence {
            meta: SequenceMeta {
                presentation_id: id.to_string(),
                fps: NATIVE_FPS,
                ppi: NATIVE_PPI,
                frame_count: t,
                device_capture: false,
            },
            frames: (0..t)
                .map(|_| RawFrame::new(w, h, vec![value; w * h]).unwrap())
                .collect(),
        }
    }

    #[test]
    fn sequence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seq = constant_sequence("p0", 8, 6, 10, 100);
        save_sequence(&seq, dir.path()).unwrap();
        let back = load_sequence(dir.path()).unwrap();
        assert_eq!(back.frame_count(), 10);
        assert_eq!(back.width(), 8);
        assert_eq!(back.height(), 6);
        assert_eq!(back.frames, seq.frames);
    }

    #[test]
    fn missing_frame_detected() {
        let dir = tempfile::tempdir().unwrap();
        let seq = constant_sequence("p0", 8, 6, 10, 100);
        save_sequence(&seq, dir.path()).unwrap();
        fs::remove_file(dir.path().join("frame_07.pgm")).unwrap();
        match load_sequence(dir.path()) {
            Err(IngestError::MissingFrame { path }) => assert!(path.contains("frame_07")),
            other => panic!("expected missing frame, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let seq = constant_sequence("p0", 8, 6, 3, 100);
        save_sequence(&seq, dir.path()).unwrap();
        // overwrite frame 2 with different (still even) dims
        pnm::write_pgm(&dir.path().join("frame_02.pgm"), 8, 4, &vec![0u8; 32]).unwrap();
        assert!(matches!(
            load_sequence(dir.path()),
            Err(IngestError::DimensionMismatch { index: 2, .. })
        ));
    }

    #[test]
    fn odd_dimensions_rejected() {
        assert!(matches!(
            RawFrame::new(7, 6, vec![0; 42]),
            Err(IngestError::OddDimensions { .. })
        ));
    }

    #[test]
    fn device_capture_enforces_native_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let mut seq = constant_sequence("p0", 8, 6, 10, 1);
        seq.meta.device_capture = true;
        save_sequence(&seq, dir.path()).unwrap();
        assert!(matches!(
            load_sequence(dir.path()),
            Err(IngestError::NativeGeometry { .. })
        ));
    }

    #[test]
    fn manifest_valid_and_counts() {
        let records = vec![
            record("l1", Label::Live, None),
            record("l2", Label::Live, None),
            record("l3", Label::Live, None),
            record("s1", Label::Spoof, Some("gelatin")),
            record("s2", Label::Spoof, Some("ecoflex")),
        ];
        let m = Manifest::validate(records).unwrap();
        assert_eq!(m.records.len(), 5);
        assert_eq!(m.live_records().count(), 3);
        assert_eq!(m.spoof_records().count(), 2);
        // material group counts partition the spoof records
        let counts = m.spoof_counts_by_material();
        assert_eq!(counts.values().sum::<usize>(), m.spoof_records().count());
    }

    #[test]
    fn manifest_duplicate_id_rejected() {
        let records = vec![
            record("p01", Label::Live, None),
            record("p01", Label::Spoof, Some("gelatin")),
        ];
        assert!(matches!(
            Manifest::validate(records),
            Err(IngestError::DuplicateId(_))
        ));
    }

    #[test]
    fn manifest_live_with_material_rejected() {
        let records = vec![record("p01", Label::Live, Some("gelatin"))];
        assert!(matches!(
            Manifest::validate(records),
            Err(IngestError::LiveWithMaterial(_))
        ));
    }

    #[test]
    fn manifest_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let m = Manifest::validate(vec![
            record("l1", Label::Live, None),
            record("s1", Label::Spoof, Some("gelatin")),
        ])
        .unwrap();
        save_manifest(&m, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.records, m.records);
    }

    #[test]
    fn minutiae_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let set = MinutiaSet {
            frame_index: 3,
            space: CoordSpace::Native1000ppi,
            minutiae: vec![
                Minutia { x: 10.5, y: 20.25, theta: Some(1.234567), quality: None },
                Minutia { x: 0.0, y: 0.0, theta: None, quality: Some(0.75) },
                Minutia { x: 100.0, y: 200.0, theta: Some(-0.5), quality: Some(1.0) },
                Minutia { x: 55.125, y: 66.0, theta: None, quality: None },
                Minutia { x: 1.0, y: 2.0, theta: Some(3.141593), quality: Some(0.5) },
            ],
        };
        write_minutiae(std::slice::from_ref(&set), &path).unwrap();
        let back = read_minutiae(&path, None).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0], set);
    }

    #[test]
    fn minutiae_empty_set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        write_minutiae(&[], &path).unwrap();
        let back = read_minutiae(&path, None).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn minutiae_out_of_bounds_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oob.csv");
        let set = MinutiaSet {
            frame_index: 0,
            space: CoordSpace::Native1000ppi,
            minutiae: vec![Minutia { x: 700.0, y: 10.0, theta: None, quality: None }],
        };
        write_minutiae(std::slice::from_ref(&set), &path).unwrap();
        // fits a 800-wide frame...
        assert!(read_minutiae(&path, Some((800, 630))).is_ok());
        // ...but not a 390-wide one
        assert!(matches!(
            read_minutiae(&path, Some((390, 630))),
            Err(IngestError::MinutiaOutOfBounds { .. })
        ));
    }

    #[test]
    fn minutiae_half_space_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.csv");
        let set = MinutiaSet {
            frame_index: 0,
            space: CoordSpace::Half500ppi,
            minutiae: vec![Minutia { x: 194.0, y: 300.0, theta: None, quality: None }],
        };
        write_minutiae(std::slice::from_ref(&set), &path).unwrap();
        // half of 390x630 is 195x315, so (194, 300) is in bounds
        assert!(read_minutiae(&path, Some((390, 630))).is_ok());
    }

    #[test]
    fn minutiae_malformed_line_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(
            &path,
            "# space=native_1000ppi\nframe,x,y,theta,quality\n0,ten,4,,\n",
        )
        .unwrap();
        assert!(matches!(
            read_minutiae(&path, None),
            Err(IngestError::BadMinutiaLine { line: 3, .. })
        ));
    }

    #[test]
    fn minutiae_missing_space_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nospace.csv");
        fs::write(&path, "frame,x,y,theta,quality\n0,1.0,2.0,,\n").unwrap();
        assert!(matches!(
            read_minutiae(&path, None),
            Err(IngestError::MissingSpaceHeader { .. })
        ));
    }
}
