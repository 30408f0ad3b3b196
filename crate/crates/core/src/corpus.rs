//! Feature-sequence data model, on-disk formats, and the synthetic corpus.
//!
//! A corpus is a directory holding one feature file per video, optional
//! frame-mask files for abnormal videos, and a JSONL manifest. The synthetic
//! generator plants category-structured anomalies: a contiguous span of
//! segments gets a per-category orthonormal direction added (semantic
//! evidence) and its noise amplitude amplified (motion evidence), so both
//! halves of the pipeline have separable signal to learn from.
//!
//! File formats are bit-exact:
//! - feature file: magic `RFVD`, `u16` version (=1), `u32` T, `u32` D, then
//!   `T*D` little-endian `f32` values in row-major (segment-major) order;
//! - mask file: magic `RFVM`, `u32` length, then `length` bytes of {0,1};
//! - manifest: one JSON object per line — a header `{"C","D","T"}` followed by
//!   entries `{video_id, feature_path, label, category_id, mask_path}` with
//!   paths relative to the manifest's directory.

use crate::error::{Error, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

const FEATURE_MAGIC: [u8; 4] = *b"RFVD";
const MASK_MAGIC: [u8; 4] = *b"RFVM";
const FEATURE_VERSION: u16 = 1;

/// Video-level weak label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Label::Normal),
            "abnormal" => Ok(Label::Abnormal),
            other => Err(Error::Corpus(format!("unknown label {other:?}"))),
        }
    }
}

/// One video: `T x D` segment features plus weak supervision and, for
/// evaluation only, an optional frame-level ground-truth mask.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub video_id: String,
    pub features: Array2<f32>,
    pub frames_per_segment: usize,
    pub label: Label,
    pub category_id: Option<usize>,
    pub frame_mask: Option<Vec<u8>>,
}

impl FeatureSequence {
    pub fn num_segments(&self) -> usize {
        self.features.dim().0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim().1
    }

    pub fn validate(&self, num_categories: usize) -> Result<()> {
        let (t, d) = self.features.dim();
        if t < 2 || d < 1 {
            return Err(Error::Shape(format!(
                "{}: need T >= 2 and D >= 1, got {t}x{d}",
                self.video_id
            )));
        }
        if !self.features.iter().all(|v| v.is_finite()) {
            return Err(Error::Corpus(format!(
                "{}: non-finite feature entry",
                self.video_id
            )));
        }
        match self.label {
            Label::Normal => {
                if self.category_id.is_some() {
                    return Err(Error::Corpus(format!(
                        "{}: normal video with a category_id",
                        self.video_id
                    )));
                }
                if let Some(mask) = &self.frame_mask {
                    if mask.iter().any(|&m| m != 0) {
                        return Err(Error::Corpus(format!(
                            "{}: normal video with nonzero mask frames",
                            self.video_id
                        )));
                    }
                }
            }
            Label::Abnormal => match self.category_id {
                Some(c) if c < num_categories => {}
                Some(c) => {
                    return Err(Error::Corpus(format!(
                        "{}: category_id {c} out of range [0, {num_categories})",
                        self.video_id
                    )))
                }
                None => {
                    return Err(Error::Corpus(format!(
                        "{}: abnormal video without category_id",
                        self.video_id
                    )))
                }
            },
        }
        if let Some(mask) = &self.frame_mask {
            if mask.len() != t * self.frames_per_segment {
                return Err(Error::Corpus(format!(
                    "{}: mask length {} != T*fps = {}",
                    self.video_id,
                    mask.len(),
                    t * self.frames_per_segment
                )));
            }
            if mask.iter().any(|&m| m > 1) {
                return Err(Error::Corpus(format!(
                    "{}: mask bytes must be 0 or 1",
                    self.video_id
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Binary file formats
// ---------------------------------------------------------------------------

/// Write a `T x D` feature matrix in the RFVD format.
pub fn write_feature_file(path: &Path, features: &Array2<f32>) -> Result<()> {
    let (t, d) = features.dim();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(t as u32).to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    for &v in features.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read an RFVD feature file back into a `T x D` matrix.
pub fn read_feature_file(path: &Path) -> Result<Array2<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, 4)?;
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            expected: FEATURE_MAGIC,
            found: magic,
        });
    }
    let version = read_u16(&mut r)?;
    if version != FEATURE_VERSION {
        return Err(Error::BadVersion(version));
    }
    let t = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Corpus(format!("feature header overflow: T={t}, D={d}")))?;
    let mut payload = vec![0u8; expected];
    read_exact_or_truncated(&mut r, &mut payload, expected)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::PayloadMismatch {
            header: expected,
            payload: expected + 1,
        });
    }
    let mut data = Vec::with_capacity(t * d);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    Array2::from_shape_vec((t, d), data)
        .map_err(|e| Error::Shape(format!("feature file shape: {e}")))
}

/// Write a frame mask in the RFVM format.
pub fn write_mask_file(path: &Path, mask: &[u8]) -> Result<()> {
    if mask.iter().any(|&m| m > 1) {
        return Err(Error::Corpus("mask bytes must be 0 or 1".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MASK_MAGIC)?;
    w.write_all(&(mask.len() as u32).to_le_bytes())?;
    w.write_all(mask)?;
    w.flush()?;
    Ok(())
}

/// Read an RFVM mask file.
pub fn read_mask_file(path: &Path) -> Result<Vec<u8>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, 4)?;
    if magic != MASK_MAGIC {
        return Err(Error::BadMagic {
            expected: MASK_MAGIC,
            found: magic,
        });
    }
    let len = read_u32(&mut r)? as usize;
    let mut mask = vec![0u8; len];
    read_exact_or_truncated(&mut r, &mut mask, len)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::PayloadMismatch {
            header: len,
            payload: len + 1,
        });
    }
    if mask.iter().any(|&m| m > 1) {
        return Err(Error::Corpus("mask bytes must be 0 or 1".into()));
    }
    Ok(mask)
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], expected: usize) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(Error::Truncated {
                expected,
                found: filled,
            });
        }
        filled += n;
    }
    Ok(())
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact_or_truncated(r, &mut b, 2)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b, 4)?;
    Ok(u32::from_le_bytes(b))
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// One manifest row; paths are relative to the manifest's directory.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub video_id: String,
    pub feature_path: String,
    pub label: Label,
    pub category_id: Option<usize>,
    pub mask_path: Option<String>,
}

/// Corpus-level index: uniform shape plus one entry per video.
#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub num_categories: usize,
    pub feature_dim: usize,
    pub segments_per_video: usize,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    #[serde(rename = "C")]
    c: usize,
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "T")]
    t: usize,
}

#[derive(Serialize, Deserialize)]
struct EntryLine {
    video_id: String,
    feature_path: String,
    label: String,
    category_id: Option<usize>,
    mask_path: Option<String>,
}

impl CorpusManifest {
    /// Write `manifest.jsonl` into `self.root`.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join("manifest.jsonl");
        let mut w = BufWriter::new(File::create(&path)?);
        let header = HeaderLine {
            c: self.num_categories,
            d: self.feature_dim,
            t: self.segments_per_video,
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for e in &self.entries {
            let line = EntryLine {
                video_id: e.video_id.clone(),
                feature_path: e.feature_path.clone(),
                label: e.label.as_str().to_string(),
                category_id: e.category_id,
                mask_path: e.mask_path.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
        w.flush()?;
        Ok(path)
    }

    /// Load a manifest file and validate entry-level invariants.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: HeaderLine = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Corpus("empty manifest".into()))?,
        )?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut entries = Vec::new();
        for line in lines {
            let raw: EntryLine = serde_json::from_str(line)?;
            let label = Label::parse(&raw.label)?;
            if let Some(c) = raw.category_id {
                if c >= header.c {
                    return Err(Error::Corpus(format!(
                        "{}: category_id {c} out of range [0, {})",
                        raw.video_id, header.c
                    )));
                }
            }
            entries.push(ManifestEntry {
                video_id: raw.video_id,
                feature_path: raw.feature_path,
                label,
                category_id: raw.category_id,
                mask_path: raw.mask_path,
            });
        }
        Ok(CorpusManifest {
            root,
            num_categories: header.c,
            feature_dim: header.d,
            segments_per_video: header.t,
            entries,
        })
    }

    /// Read every referenced file, validating shapes against the header.
    /// `default_fps` applies to videos without a mask (masks pin fps exactly).
    pub fn load_sequences(&self, default_fps: usize) -> Result<Vec<FeatureSequence>> {
        let mut out = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let features = read_feature_file(&self.root.join(&e.feature_path))?;
            let (t, d) = features.dim();
            if t != self.segments_per_video || d != self.feature_dim {
                return Err(Error::Shape(format!(
                    "{}: file is {t}x{d} but manifest declares {}x{}",
                    e.video_id, self.segments_per_video, self.feature_dim
                )));
            }
            let frame_mask = match &e.mask_path {
                Some(p) => Some(read_mask_file(&self.root.join(p))?),
                None => None,
            };
            let frames_per_segment = match &frame_mask {
                Some(mask) => {
                    if mask.len() % t != 0 || mask.is_empty() {
                        return Err(Error::Corpus(format!(
                            "{}: mask length {} not divisible by T={t}",
                            e.video_id,
                            mask.len()
                        )));
                    }
                    mask.len() / t
                }
                None => default_fps,
            };
            let seq = FeatureSequence {
                video_id: e.video_id.clone(),
                features,
                frames_per_segment,
                label: e.label,
                category_id: e.category_id,
                frame_mask,
            };
            seq.validate(self.num_categories)?;
            out.push(seq);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Parameters of the planted-anomaly generator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    pub num_categories: usize,
    pub feature_dim: usize,
    pub segments_per_video: usize,
    pub n_normal: usize,
    pub n_abnormal: usize,
    /// Inclusive range of planted-span lengths, in segments.
    pub anomaly_span: (usize, usize),
    pub signal_gain: f64,
    pub motion_gain: f64,
    pub noise_scale: f64,
    pub frames_per_segment: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_categories: 4,
            feature_dim: 64,
            segments_per_video: 32,
            n_normal: 200,
            n_abnormal: 200,
            anomaly_span: (6, 12),
            signal_gain: 2.0,
            motion_gain: 0.8,
            noise_scale: 0.7,
            frames_per_segment: 16,
            seed: 7,
        }
    }
}

// Base-trajectory shape: a slow random walk so normal videos drift smoothly.
const WALK_START_STD: f64 = 0.5;
const WALK_STEP_STD: f64 = 0.05;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_categories == 0 {
            return Err(Error::Config("num_categories must be >= 1".into()));
        }
        if self.num_categories > self.feature_dim {
            return Err(Error::Config(format!(
                "cannot build {} orthogonal category directions in {} dimensions",
                self.num_categories, self.feature_dim
            )));
        }
        if self.segments_per_video < 2 {
            return Err(Error::Config("segments_per_video must be >= 2".into()));
        }
        let (lo, hi) = self.anomaly_span;
        if lo == 0 || lo > hi || hi > self.segments_per_video {
            return Err(Error::Config(format!(
                "anomaly_span ({lo}, {hi}) must satisfy 1 <= lo <= hi <= T={}",
                self.segments_per_video
            )));
        }
        if self.signal_gain <= 0.0 || self.motion_gain <= 0.0 || self.noise_scale <= 0.0 {
            return Err(Error::Config(
                "signal_gain, motion_gain, noise_scale must be positive".into(),
            ));
        }
        if self.frames_per_segment == 0 {
            return Err(Error::Config("frames_per_segment must be >= 1".into()));
        }
        Ok(())
    }
}

/// Pairwise-orthonormal category directions via Gram-Schmidt on Gaussian
/// draws. Deterministic given the rng state.
fn category_directions(rng: &mut ChaCha8Rng, c: usize, d: usize) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(c);
    while dirs.len() < c {
        let mut v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        for u in &dirs {
            let dot: f64 = v.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u.iter()) {
                *vi -= dot * ui;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // astronomically unlikely; redraw
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        dirs.push(v);
    }
    dirs
}

/// Everything the generator decides about one video, before serialization.
#[derive(Debug, Clone)]
pub struct GeneratedVideo {
    pub sequence: FeatureSequence,
    /// Planted span in segment indices, half-open; None for normal videos.
    pub span: Option<(usize, usize)>,
}

/// Generate the corpus in memory. Output order: all normal videos, then all
/// abnormal videos; abnormal video `i` gets category `i mod C`.
pub fn generate_sequences(spec: &SyntheticSpec) -> Result<Vec<GeneratedVideo>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let dirs = category_directions(&mut rng, spec.num_categories, spec.feature_dim);
    let (t, d) = (spec.segments_per_video, spec.feature_dim);
    let fps = spec.frames_per_segment;

    let mut out = Vec::with_capacity(spec.n_normal + spec.n_abnormal);
    for i in 0..spec.n_normal + spec.n_abnormal {
        let abnormal = i >= spec.n_normal;
        let (video_id, category, span) = if abnormal {
            let idx = i - spec.n_normal;
            let category = idx % spec.num_categories;
            let (lo, hi) = spec.anomaly_span;
            let len = rng.gen_range(lo..=hi);
            let start = rng.gen_range(0..=t - len);
            (format!("abnormal_{idx:04}"), Some(category), Some((start, start + len)))
        } else {
            (format!("normal_{i:04}"), None, None)
        };

        // Slow random-walk base trajectory.
        let mut base: Vec<f64> = (0..d).map(|_| WALK_START_STD * normal.sample(&mut rng)).collect();
        // Span-local deviation walk: inside the span the step-to-step
        // increment magnitude of the sequence is multiplied by
        // (1 + motion_gain). A normal interior step has variance
        // step^2 + 2*noise^2 (base step plus the iid noise delta), so the
        // deviation walk tops that up to the amplified target; the sequence
        // rejoins the base trajectory when the span ends. Early span rows are
        // thus near-indistinguishable row-wise, and the elevated motion is
        // carried by the temporal increments. The walk is kept orthogonal to
        // the planted category direction (variance renormalized) so the
        // motion and semantic axes stay separable evidence.
        let base_delta_var =
            WALK_STEP_STD * WALK_STEP_STD + 2.0 * spec.noise_scale * spec.noise_scale;
        let g = 1.0 + spec.motion_gain;
        let dev_step =
            ((g * g - 1.0) * base_delta_var * d as f64 / (d as f64 - 1.0).max(1.0)).sqrt();
        let mut dev: Vec<f64> = vec![0.0; d];
        let mut features = Array2::<f32>::zeros((t, d));
        for ti in 0..t {
            if ti > 0 {
                for b in base.iter_mut() {
                    *b += WALK_STEP_STD * normal.sample(&mut rng);
                }
            }
            let in_span = span.is_some_and(|(a, b)| ti >= a && ti < b);
            if in_span {
                if span.is_some_and(|(a, _)| ti > a) {
                    let u = &dirs[category.unwrap()];
                    let step: Vec<f64> =
                        (0..d).map(|_| dev_step * normal.sample(&mut rng)).collect();
                    let along: f64 = step.iter().zip(u.iter()).map(|(s, u)| s * u).sum();
                    for (w, (s, uj)) in dev.iter_mut().zip(step.iter().zip(u.iter())) {
                        *w += s - along * uj;
                    }
                }
            } else {
                dev.fill(0.0);
            }
            for j in 0..d {
                let mut v = base[j] + spec.noise_scale * normal.sample(&mut rng);
                if in_span {
                    v += dev[j] + spec.signal_gain * dirs[category.unwrap()][j];
                }
                features[(ti, j)] = v as f32;
            }
        }

        let frame_mask = span.map(|(a, b)| {
            let mut mask = vec![0u8; t * fps];
            for m in mask.iter_mut().take(b * fps).skip(a * fps) {
                *m = 1;
            }
            mask
        });

        let sequence = FeatureSequence {
            video_id,
            features,
            frames_per_segment: fps,
            label: if abnormal { Label::Abnormal } else { Label::Normal },
            category_id: category,
            frame_mask,
        };
        sequence.validate(spec.num_categories)?;
        out.push(GeneratedVideo { sequence, span });
    }
    Ok(out)
}

/// Generate and serialize a corpus into `out_dir` (created if missing):
/// `features/*.rfvd`, `masks/*.rfvm`, and `manifest.jsonl`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, out_dir: &Path) -> Result<CorpusManifest> {
    let videos = generate_sequences(spec)?;
    fs::create_dir_all(out_dir.join("features"))?;
    if videos.iter().any(|v| v.sequence.frame_mask.is_some()) {
        fs::create_dir_all(out_dir.join("masks"))?;
    }
    let mut entries = Vec::with_capacity(videos.len());
    for v in &videos {
        let seq = &v.sequence;
        let feature_path = format!("features/{}.rfvd", seq.video_id);
        write_feature_file(&out_dir.join(&feature_path), &seq.features)?;
        let mask_path = match &seq.frame_mask {
            Some(mask) => {
                let p = format!("masks/{}.rfvm", seq.video_id);
                write_mask_file(&out_dir.join(&p), mask)?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            video_id: seq.video_id.clone(),
            feature_path,
            label: seq.label,
            category_id: seq.category_id,
            mask_path,
        });
    }
    let manifest = CorpusManifest {
        root: out_dir.to_path_buf(),
        num_categories: spec.num_categories,
        feature_dim: spec.feature_dim,
        segments_per_video: spec.segments_per_video,
        entries,
    };
    manifest.save()?;
    Ok(manifest)
}

/// Repeat each segment score `frames_per_segment` times, preserving order.
pub fn expand_to_frames(segment_scores: &[f64], frames_per_segment: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(segment_scores.len() * frames_per_segment);
    for &s in segment_scores {
        for _ in 0..frames_per_segment {
            out.push(s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use tempfile::tempdir;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_normal: 6,
            n_abnormal: 6,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn feature_file_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.rfvd");
        let m = array![[1.0f32, -2.5, 3.25], [f32::MIN_POSITIVE, 0.0, -0.0]];
        write_feature_file(&path, &m).unwrap();
        let back = read_feature_file(&path).unwrap();
        assert_eq!(m.dim(), back.dim());
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn wrong_magic_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.rfvd");
        fs::write(&path, b"XXXX\x01\x00\x02\x00\x00\x00\x01\x00\x00\x00").unwrap();
        match read_feature_file(&path) {
            Err(Error::BadMagic { found, .. }) => assert_eq!(&found, b"XXXX"),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("short.rfvd");
        // Header T=2, D=2 (16 payload bytes expected) but only 4 provided.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RFVD");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 4]);
        fs::write(&path, bytes).unwrap();
        match read_feature_file(&path) {
            Err(Error::Truncated { expected, found }) => {
                assert_eq!(expected, 16);
                assert_eq!(found, 4);
            }
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn oversized_payload_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("long.rfvd");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RFVD");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 5]); // one extra byte
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_feature_file(&path),
            Err(Error::PayloadMismatch { .. })
        ));
    }

    #[test]
    fn bad_version_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v9.rfvd");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RFVD");
        bytes.extend_from_slice(&9u16.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_feature_file(&path), Err(Error::BadVersion(9))));
    }

    #[test]
    fn mask_round_trip_and_validation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.rfvm");
        let mask = vec![0u8, 1, 1, 0, 1];
        write_mask_file(&path, &mask).unwrap();
        assert_eq!(read_mask_file(&path).unwrap(), mask);
        assert!(write_mask_file(&path, &[0, 2]).is_err());
    }

    #[test]
    fn all_normal_spec_has_no_masks_or_categories() {
        let spec = SyntheticSpec {
            n_normal: 5,
            n_abnormal: 0,
            ..SyntheticSpec::default()
        };
        let vids = generate_sequences(&spec).unwrap();
        assert_eq!(vids.len(), 5);
        for v in &vids {
            assert_eq!(v.sequence.label, Label::Normal);
            assert!(v.sequence.category_id.is_none());
            assert!(v.sequence.frame_mask.is_none());
            assert!(v.span.is_none());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate_sequences(&spec).unwrap();
        let b = generate_sequences(&spec).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.sequence.video_id, y.sequence.video_id);
            for (p, q) in x.sequence.features.iter().zip(y.sequence.features.iter()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
            assert_eq!(x.span, y.span);
        }
    }

    #[test]
    fn too_many_categories_is_an_error() {
        let spec = SyntheticSpec {
            num_categories: 65,
            feature_dim: 64,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_sequences(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn in_span_motion_variance_exceeds_off_span_for_every_abnormal_video() {
        // Independent oracle: per-segment delta variance computed directly on
        // the emitted features, then averaged inside and outside the span.
        let vids = generate_sequences(&small_spec()).unwrap();
        let mut checked = 0;
        for v in vids.iter().filter(|v| v.span.is_some()) {
            let x = &v.sequence.features;
            let (t, d) = x.dim();
            let (a, b) = v.span.unwrap();
            let mut in_span = Vec::new();
            let mut off_span = Vec::new();
            for ti in 1..t {
                let delta: Vec<f64> = (0..d)
                    .map(|j| (x[(ti, j)] - x[(ti - 1, j)]) as f64)
                    .collect();
                let mean = delta.iter().sum::<f64>() / d as f64;
                let var = delta.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                // A step is "inside" if both endpoints are inside the span.
                if ti > a && ti < b {
                    in_span.push(var);
                } else if ti > b || ti < a {
                    off_span.push(var);
                }
            }
            if in_span.is_empty() || off_span.is_empty() {
                continue;
            }
            let mi = in_span.iter().sum::<f64>() / in_span.len() as f64;
            let mo = off_span.iter().sum::<f64>() / off_span.len() as f64;
            assert!(
                mi > mo,
                "{}: in-span motion variance {mi} <= off-span {mo}",
                v.sequence.video_id
            );
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn planted_direction_projection_peaks_inside_the_span() {
        // signal_gain = 2.0 >= 2 * noise_scale = 1.0 holds for the defaults.
        for seed in [7u64, 11, 23] {
            let spec = SyntheticSpec {
                seed,
                ..small_spec()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let dirs = category_directions(&mut rng, spec.num_categories, spec.feature_dim);
            let vids = generate_sequences(&spec).unwrap();
            for v in vids.iter().filter(|v| v.span.is_some()) {
                let (a, b) = v.span.unwrap();
                let c = v.sequence.category_id.unwrap();
                let x = &v.sequence.features;
                let proj = |ti: usize| -> f64 {
                    (0..spec.feature_dim)
                        .map(|j| x[(ti, j)] as f64 * dirs[c][j])
                        .sum()
                };
                let max_in = (a..b).map(proj).fold(f64::NEG_INFINITY, f64::max);
                let max_out = (0..spec.segments_per_video)
                    .filter(|ti| *ti < a || *ti >= b)
                    .map(proj)
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(
                    max_in > max_out,
                    "{}: projection peak outside span",
                    v.sequence.video_id
                );
            }
        }
    }

    #[test]
    fn orthonormal_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dirs = category_directions(&mut rng, 4, 16);
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = dirs[i].iter().zip(dirs[j].iter()).map(|(a, b)| a * b).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn corpus_directory_round_trip() {
        let dir = tempdir().unwrap();
        let spec = small_spec();
        let manifest = generate_synthetic_corpus(&spec, dir.path()).unwrap();
        let loaded = CorpusManifest::load(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(loaded.num_categories, manifest.num_categories);
        assert_eq!(loaded.entries.len(), manifest.entries.len());
        let seqs = loaded.load_sequences(spec.frames_per_segment).unwrap();
        assert_eq!(seqs.len(), 12);
        let in_memory = generate_sequences(&spec).unwrap();
        for (a, b) in seqs.iter().zip(in_memory.iter()) {
            assert_eq!(a.video_id, b.sequence.video_id);
            for (p, q) in a.features.iter().zip(b.sequence.features.iter()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
            assert_eq!(a.frame_mask, b.sequence.frame_mask);
            // fps is recovered from the masks for abnormal videos.
            assert_eq!(a.frames_per_segment, spec.frames_per_segment);
        }
    }

    #[test]
    fn manifest_rejects_out_of_range_category() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        fs::write(
            &path,
            concat!(
                "{\"C\":2,\"D\":4,\"T\":8}\n",
                "{\"video_id\":\"v\",\"feature_path\":\"f\",\"label\":\"abnormal\",\"category_id\":5,\"mask_path\":null}\n"
            ),
        )
        .unwrap();
        assert!(matches!(CorpusManifest::load(&path), Err(Error::Corpus(_))));
    }

    #[test]
    fn expand_to_frames_examples() {
        assert_eq!(expand_to_frames(&[0.2, 0.8], 2), vec![0.2, 0.2, 0.8, 0.8]);
        let v = vec![0.3, 0.9, 0.1];
        assert_eq!(expand_to_frames(&v, 1), v);
        let out = expand_to_frames(&v, 5);
        let mean_in: f64 = v.iter().sum::<f64>() / v.len() as f64;
        let mean_out: f64 = out.iter().sum::<f64>() / out.len() as f64;
        assert!((mean_in - mean_out).abs() < 1e-12);
        assert_eq!(
            out.iter().cloned().fold(f64::INFINITY, f64::min),
            v.iter().cloned().fold(f64::INFINITY, f64::min)
        );
        assert_eq!(
            out.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        );
    }

    #[test]
    fn mask_marks_exactly_the_span_frames() {
        let vids = generate_sequences(&small_spec()).unwrap();
        let fps = 16;
        for v in vids.iter().filter(|v| v.span.is_some()) {
            let (a, b) = v.span.unwrap();
            let mask = v.sequence.frame_mask.as_ref().unwrap();
            for (f, &m) in mask.iter().enumerate() {
                let expect = f >= a * fps && f < b * fps;
                assert_eq!(m == 1, expect, "frame {f}");
            }
        }
    }
}
