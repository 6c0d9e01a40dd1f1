//! File formats: feature payloads, annotations, proposals, reports.
//!
//! Features are either a CSV (T rows of C decimal floats) or raw
//! little-endian float32, row-major, described by a JSON sidecar stored
//! next to the payload as `<stem>.meta.json`.

use anyhow::{bail, Context, Result};
use atag_core::data::{FeatureSequence, GroundTruth, Instance};
use atag_core::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub video_id: String,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub frame_interval: u32,
}

pub fn sidecar_path(payload: &Path) -> PathBuf {
    payload.with_extension("meta.json")
}

fn stem_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "video".to_string())
}

/// Load a feature sequence from a CSV or raw-f32 payload.
///
/// CSV payloads may omit the sidecar; the video id then falls back to the
/// file stem and the frame interval to 1. Raw payloads require it.
pub fn load_features(payload: &Path) -> Result<FeatureSequence<f64>> {
    let is_csv = payload
        .extension()
        .map(|e| e.eq_ignore_ascii_case("csv"))
        .unwrap_or(false);
    let meta = read_meta(payload)?;
    if is_csv {
        load_csv(payload, meta)
    } else {
        let meta = meta.with_context(|| {
            format!(
                "raw feature payload {} requires a sidecar at {}",
                payload.display(),
                sidecar_path(payload).display()
            )
        })?;
        load_raw(payload, meta)
    }
}

fn read_meta(payload: &Path) -> Result<Option<FeatureMeta>> {
    let side = sidecar_path(payload);
    if !side.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&side)
        .with_context(|| format!("cannot read sidecar {}", side.display()))?;
    let meta: FeatureMeta = serde_json::from_str(&text)
        .with_context(|| format!("malformed sidecar {}", side.display()))?;
    Ok(Some(meta))
}

fn load_csv(payload: &Path, meta: Option<FeatureMeta>) -> Result<FeatureSequence<f64>> {
    let text = fs::read_to_string(payload)
        .with_context(|| format!("cannot read features {}", payload.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().with_context(|| {
                    format!(
                        "{}: line {}: bad float '{}'",
                        payload.display(),
                        lineno + 1,
                        cell.trim()
                    )
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                bail!(
                    "{}: line {} has {} columns, expected {}",
                    payload.display(),
                    lineno + 1,
                    row.len(),
                    first.len()
                );
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("{}: no feature rows", payload.display());
    }
    let (t, c) = (rows.len(), rows[0].len());
    let (video_id, frame_interval) = match meta {
        Some(m) => {
            if m.t != t || m.c != c {
                bail!(
                    "{}: payload is {}x{} but sidecar declares {}x{}",
                    payload.display(),
                    t,
                    c,
                    m.t,
                    m.c
                );
            }
            (m.video_id, m.frame_interval)
        }
        None => (stem_id(payload), 1),
    };
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    let features = Tensor::new(vec![t, c], data)?;
    Ok(FeatureSequence::new(video_id, features, frame_interval)?)
}

fn load_raw(payload: &Path, meta: FeatureMeta) -> Result<FeatureSequence<f64>> {
    let bytes =
        fs::read(payload).with_context(|| format!("cannot read features {}", payload.display()))?;
    let want = meta.t * meta.c * 4;
    if bytes.len() != want {
        bail!(
            "{}: payload is {} bytes but sidecar declares T={} C={} float32 ({} bytes)",
            payload.display(),
            bytes.len(),
            meta.t,
            meta.c,
            want
        );
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|ch| f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]) as f64)
        .collect();
    let features = Tensor::new(vec![meta.t, meta.c], data)?;
    Ok(FeatureSequence::new(
        meta.video_id,
        features,
        meta.frame_interval,
    )?)
}

/// Write a feature sequence as a raw-f32 payload plus sidecar.
pub fn save_features_raw(payload: &Path, f: &FeatureSequence<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(f.features.numel() * 4);
    for &x in f.features.data() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(payload, bytes).with_context(|| format!("cannot write {}", payload.display()))?;
    let meta = FeatureMeta {
        video_id: f.video_id.clone(),
        t: f.t(),
        c: f.c(),
        frame_interval: f.frame_interval,
    };
    let side = sidecar_path(payload);
    fs::write(&side, serde_json::to_string_pretty(&meta)?)
        .with_context(|| format!("cannot write {}", side.display()))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationInstance {
    start: f64,
    end: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationVideo {
    video_id: String,
    #[serde(rename = "T")]
    t: usize,
    instances: Vec<AnnotationInstance>,
}

/// One annotated video: its ground truth and declared snippet count.
#[derive(Debug, Clone)]
pub struct Annotation {
    pub gt: GroundTruth,
    pub t: usize,
}

pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read annotations {}", path.display()))?;
    let raw: Vec<AnnotationVideo> = serde_json::from_str(&text)
        .with_context(|| format!("malformed annotations {}", path.display()))?;
    raw.into_iter()
        .map(|v| {
            let gt = GroundTruth {
                video_id: v.video_id,
                instances: v
                    .instances
                    .into_iter()
                    .map(|i| Instance::new(i.start, i.end))
                    .collect(),
            };
            gt.validate(v.t).with_context(|| {
                format!("annotations {}: video '{}'", path.display(), gt.video_id)
            })?;
            Ok(Annotation { gt, t: v.t })
        })
        .collect()
}

pub fn save_annotations(path: &Path, videos: &[(GroundTruth, usize)]) -> Result<()> {
    let raw: Vec<AnnotationVideo> = videos
        .iter()
        .map(|(gt, t)| AnnotationVideo {
            video_id: gt.video_id.clone(),
            t: *t,
            instances: gt
                .instances
                .iter()
                .map(|i| AnnotationInstance {
                    start: i.start,
                    end: i.end,
                })
                .collect(),
        })
        .collect();
    fs::write(path, serde_json::to_string_pretty(&raw)?)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// One line of the proposal JSONL output. Times are snippet indices unless
/// the writer converted them to seconds via the frame interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub video_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub score: f64,
    pub p_s: f64,
    pub p_e: f64,
    pub p_cc: f64,
    pub p_cr: f64,
}

pub fn write_proposals(path: &Path, records: &[ProposalRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn read_proposals(path: &Path) -> Result<Vec<ProposalRecord>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read proposals {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(lineno, line)| {
            serde_json::from_str(line)
                .with_context(|| format!("{}: line {}", path.display(), lineno + 1))
        })
        .collect()
}

/// Evaluation report with fixed AR@AN keys plus AUC, serialized as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "AR@1")]
    pub ar_1: f64,
    #[serde(rename = "AR@5")]
    pub ar_5: f64,
    #[serde(rename = "AR@10")]
    pub ar_10: f64,
    #[serde(rename = "AR@50")]
    pub ar_50: f64,
    #[serde(rename = "AR@100")]
    pub ar_100: f64,
    #[serde(rename = "AUC")]
    pub auc: f64,
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)?)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn write_ar_curve(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let mut out = String::from("an,ar\n");
    for (an, ar) in curve {
        out.push_str(&format!("{an},{ar}\n"));
    }
    fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Append one training log line; stdout mirrors the file.
pub fn log_line(file: Option<&mut fs::File>, line: &str) {
    println!("{line}");
    if let Some(f) = file {
        let _ = writeln!(f, "{line}");
    }
}
