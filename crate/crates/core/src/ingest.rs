//! Builds the face corpus: sample frames from every manifest video, detect
//! and crop faces, and write them under `real/` or `fake/` together with an
//! `index.csv` listing every crop.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::faces::{crop_face, detect_faces, FaceDetector, DEFAULT_CROP_MARGIN};
use crate::manifest::{Label, Manifest, ManifestEntry, Split};
use crate::video::open_video;

pub const DEFAULT_FRAMES_PER_VIDEO: usize = 10;
pub const DEFAULT_CROP_SIZE: u32 = 256;
pub const INDEX_FILE: &str = "index.csv";
pub const INDEX_COLUMNS: [&str; 6] = ["crop_path", "video", "label", "split", "frame_index", "box_index"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("empty manifest")]
    EmptyManifest,
    #[error("video has no frames")]
    NoFrames,
    #[error("frame count must be at least 1")]
    ZeroFrameRequest,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("index {path}: {message}")]
    Index { path: PathBuf, message: String },
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Evenly strided frames; the corpus-building default.
    #[default]
    Uniform,
    /// Seeded sample without replacement.
    Random,
}

impl FromStr for SamplingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(SamplingMode::Uniform),
            "random" => Ok(SamplingMode::Random),
            other => Err(format!("unknown sampling mode `{other}` (expected uniform or random)")),
        }
    }
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::Uniform => "uniform",
            SamplingMode::Random => "random",
        })
    }
}

/// Picks `min(n, total_frames)` distinct frame indices in ascending order.
pub fn sample_frame_indices(
    total_frames: usize,
    n: usize,
    mode: SamplingMode,
    seed: u64,
) -> Result<Vec<usize>, IngestError> {
    if total_frames == 0 {
        return Err(IngestError::NoFrames);
    }
    if n == 0 {
        return Err(IngestError::ZeroFrameRequest);
    }
    let k = n.min(total_frames);
    Ok(match mode {
        SamplingMode::Uniform => (0..k).map(|i| i * total_frames / k).collect(),
        SamplingMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = sample(&mut rng, total_frames, k).into_vec();
            picked.sort_unstable();
            picked
        }
    })
}

/// One crop listed in `index.csv`. `crop_path` is relative to the index
/// file's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRow {
    pub crop_path: String,
    pub video: String,
    pub label: Label,
    pub split: Split,
    pub frame_index: usize,
    pub box_index: usize,
}

/// The parsed sidecar index plus the directory crop paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct CropIndex {
    pub root: PathBuf,
    pub rows: Vec<IndexRow>,
}

impl CropIndex {
    pub fn resolve(&self, row: &IndexRow) -> PathBuf {
        self.root.join(&row.crop_path)
    }

    pub fn split_rows(&self, split: Split) -> Vec<IndexRow> {
        self.rows.iter().filter(|r| r.split == split).cloned().collect()
    }
}

pub fn write_index(path: &Path, rows: &[IndexRow]) -> Result<(), IngestError> {
    let index_err = |e: csv::Error| IngestError::Index {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(false)
        .from_path(path)
        .map_err(index_err)?;
    w.write_record(INDEX_COLUMNS).map_err(index_err)?;
    for r in rows {
        w.serialize(r).map_err(index_err)?;
    }
    w.flush().map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads an `index.csv` written by [`ingest_videos`].
pub fn read_index(path: &Path) -> Result<CropIndex, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().from_path(path).map_err(|e| IngestError::Index {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| IngestError::Index {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    if header != INDEX_COLUMNS {
        return Err(IngestError::Index {
            path: path.to_path_buf(),
            message: format!("unexpected header `{}`", header.join(",")),
        });
    }
    let rows = rdr
        .deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| IngestError::Index {
                path: path.to_path_buf(),
                message: format!("row {}: {e}", i + 1),
            })
        })
        .collect::<Result<Vec<IndexRow>, _>>()?;
    Ok(CropIndex {
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    pub frames_per_video: usize,
    pub sampling: SamplingMode,
    pub seed: u64,
    pub crop_size: u32,
    pub crop_margin: f64,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            frames_per_video: DEFAULT_FRAMES_PER_VIDEO,
            sampling: SamplingMode::Uniform,
            seed: 0,
            crop_size: DEFAULT_CROP_SIZE,
            crop_margin: DEFAULT_CROP_MARGIN,
            workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedVideo {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub videos_processed: usize,
    pub videos_failed: Vec<FailedVideo>,
    pub frames_sampled: usize,
    /// Sampled frames in which the detector found nothing.
    pub frames_without_faces: usize,
    pub faces_written: BTreeMap<Label, usize>,
    pub output_root: PathBuf,
}

impl IngestReport {
    pub fn faces_total(&self) -> usize {
        self.faces_written.values().sum()
    }
}

struct VideoOutcome {
    rows: Vec<IndexRow>,
    frames_sampled: usize,
    frames_without_faces: usize,
}

/// File name of one crop: `<video>__f<frame>__b<box>.png`.
pub fn crop_file_name(video: &str, frame_index: usize, box_index: usize) -> String {
    let stem = video.replace(['/', '\\'], "_");
    format!("{stem}__f{frame_index}__b{box_index}.png")
}

fn video_seed(seed: u64, position: usize) -> u64 {
    seed ^ (position as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn ingest_one(
    entry: &ManifestEntry,
    position: usize,
    video_root: &Path,
    output_root: &Path,
    opts: &IngestOptions,
    detector: &dyn FaceDetector,
) -> Result<VideoOutcome, String> {
    let mut video = open_video(&video_root.join(&entry.name)).map_err(|e| e.to_string())?;
    let indices = sample_frame_indices(
        video.frame_count(),
        opts.frames_per_video,
        opts.sampling,
        video_seed(opts.seed, position),
    )
    .map_err(|e| e.to_string())?;
    // decode everything first so a broken video leaves no partial output
    let frames = indices
        .iter()
        .map(|&i| video.frame(i).map(|f| (i, f)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;

    let mut crops = Vec::new();
    let mut frames_without_faces = 0;
    for (frame_index, frame) in &frames {
        let boxes = detect_faces(frame, detector).map_err(|e| e.to_string())?;
        if boxes.is_empty() {
            frames_without_faces += 1;
            continue;
        }
        for (box_index, b) in boxes.iter().enumerate() {
            let crop = crop_face(frame, b, opts.crop_margin, opts.crop_size).map_err(|e| e.to_string())?;
            crops.push((*frame_index, box_index, crop));
        }
    }

    let dir = entry.label.dir_name();
    let mut rows = Vec::with_capacity(crops.len());
    for (frame_index, box_index, crop) in crops {
        let rel = format!("{dir}/{}", crop_file_name(&entry.name, frame_index, box_index));
        crop.save(output_root.join(&rel)).map_err(|e| format!("writing {rel}: {e}"))?;
        rows.push(IndexRow {
            crop_path: rel,
            video: entry.name.clone(),
            label: entry.label,
            split: entry.split,
            frame_index,
            box_index,
        });
    }
    Ok(VideoOutcome {
        rows,
        frames_sampled: frames.len(),
        frames_without_faces,
    })
}

/// Runs the whole corpus build. Unreadable videos are recorded in the report
/// rather than aborting the run; the index is written in manifest order.
pub fn ingest_videos(
    manifest: &Manifest,
    video_root: &Path,
    output_root: &Path,
    opts: &IngestOptions,
    detector: &dyn FaceDetector,
) -> Result<IngestReport, IngestError> {
    if manifest.entries.is_empty() {
        return Err(IngestError::EmptyManifest);
    }
    if opts.frames_per_video == 0 {
        return Err(IngestError::ZeroFrameRequest);
    }
    for label in Label::ALL {
        let dir = output_root.join(label.dir_name());
        std::fs::create_dir_all(&dir).map_err(|source| IngestError::Io { path: dir, source })?;
    }

    let run = || -> Vec<Result<VideoOutcome, String>> {
        manifest
            .entries
            .par_iter()
            .enumerate()
            .map(|(i, e)| ingest_one(e, i, video_root, output_root, opts, detector))
            .collect()
    };
    let outcomes = match opts.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| IngestError::Pool(e.to_string()))?
            .install(run),
        None => run(),
    };

    let mut report = IngestReport {
        videos_processed: 0,
        videos_failed: Vec::new(),
        frames_sampled: 0,
        frames_without_faces: 0,
        faces_written: Label::ALL.iter().map(|&l| (l, 0)).collect(),
        output_root: output_root.to_path_buf(),
    };
    let mut rows = Vec::new();
    for (entry, outcome) in manifest.entries.iter().zip(outcomes) {
        match outcome {
            Ok(o) => {
                debug!(video = %entry.name, crops = o.rows.len(), "ingested");
                report.videos_processed += 1;
                report.frames_sampled += o.frames_sampled;
                report.frames_without_faces += o.frames_without_faces;
                *report.faces_written.entry(entry.label).or_insert(0) += o.rows.len();
                rows.extend(o.rows);
            }
            Err(reason) => {
                warn!(video = %entry.name, %reason, "skipping video");
                report.videos_failed.push(FailedVideo {
                    name: entry.name.clone(),
                    reason,
                });
            }
        }
    }
    write_index(&output_root.join(INDEX_FILE), &rows)?;
    Ok(report)
}
