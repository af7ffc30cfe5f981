//! Frame access for the media types the pipeline understands.
//!
//! Two containers are decoded natively: a directory of numbered PNG frames
//! (`frame_00000.png`, `frame_00001.png`, ...) and animated GIF. Codec-backed
//! containers such as MP4 are recognised by magic bytes so callers can
//! report them as unsupported rather than as garbage.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::gif::{GifDecoder, GifEncoder, Repeat};
use image::{AnimationDecoder, DynamicImage, Frame, ImageFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::RgbImage;

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {what}: {message}")]
    Decode { what: String, message: String },
    #[error("unsupported media format: {0}")]
    Unsupported(String),
    #[error("video has no frames")]
    NoFrames,
    #[error("frame {index} out of range (video has {count})")]
    FrameOutOfRange { index: usize, count: usize },
}

/// Random access to the frames of one video.
pub trait VideoSource: Send {
    fn frame_count(&self) -> usize;
    fn frame(&mut self, index: usize) -> Result<RgbImage, VideoError>;
}

/// A video stored as a directory of `frame_*.png` files in name order.
#[derive(Debug)]
pub struct FrameDirVideo {
    frames: Vec<PathBuf>,
}

impl FrameDirVideo {
    pub fn open(dir: &Path) -> Result<Self, VideoError> {
        let entries = std::fs::read_dir(dir).map_err(|source| VideoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut frames: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("frame_") && n.ends_with(".png"))
            })
            .collect();
        frames.sort();
        if frames.is_empty() {
            return Err(VideoError::NoFrames);
        }
        Ok(Self { frames })
    }
}

impl VideoSource for FrameDirVideo {
    fn frame_count(&self) -> usize {
        self.frames.len()
    }

    fn frame(&mut self, index: usize) -> Result<RgbImage, VideoError> {
        let path = self.frames.get(index).ok_or(VideoError::FrameOutOfRange {
            index,
            count: self.frames.len(),
        })?;
        image::open(path)
            .map(|img| img.to_rgb8())
            .map_err(|e| VideoError::Decode {
                what: path.display().to_string(),
                message: e.to_string(),
            })
    }
}

/// A fully decoded in-memory clip.
#[derive(Debug, Clone)]
pub struct MemoryVideo {
    frames: Vec<RgbImage>,
}

impl MemoryVideo {
    pub fn new(frames: Vec<RgbImage>) -> Result<Self, VideoError> {
        if frames.is_empty() {
            return Err(VideoError::NoFrames);
        }
        Ok(Self { frames })
    }

    /// Decodes every frame of an animated GIF.
    pub fn from_gif(bytes: &[u8]) -> Result<Self, VideoError> {
        let decode_err = |e: image::ImageError| VideoError::Decode {
            what: "gif".into(),
            message: e.to_string(),
        };
        let decoder = GifDecoder::new(Cursor::new(bytes)).map_err(decode_err)?;
        let frames = decoder
            .into_frames()
            .map(|f| f.map(|f| DynamicImage::ImageRgba8(f.into_buffer()).to_rgb8()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(decode_err)?;
        Self::new(frames)
    }
}

impl VideoSource for MemoryVideo {
    fn frame_count(&self) -> usize {
        self.frames.len()
    }

    fn frame(&mut self, index: usize) -> Result<RgbImage, VideoError> {
        self.frames.get(index).cloned().ok_or(VideoError::FrameOutOfRange {
            index,
            count: self.frames.len(),
        })
    }
}

/// Opens the video at `path`: a frame directory or an animated GIF.
pub fn open_video(path: &Path) -> Result<Box<dyn VideoSource>, VideoError> {
    if path.is_dir() {
        return Ok(Box::new(FrameDirVideo::open(path)?));
    }
    let bytes = std::fs::read(path).map_err(|source| VideoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    match sniff_container(&bytes) {
        Some(Container::Gif) => Ok(Box::new(MemoryVideo::from_gif(&bytes)?)),
        Some(other) => Err(VideoError::Unsupported(format!(
            "{} ({other:?} container; convert to a frame directory or GIF)",
            path.display()
        ))),
        None => Err(VideoError::Unsupported(path.display().to_string())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediaKind {
    Image,
    Video,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Container {
    Still(ImageFormat),
    Gif,
    Mp4,
    Matroska,
    Avi,
}

/// Identifies a payload by its leading bytes.
pub fn sniff_container(bytes: &[u8]) -> Option<Container> {
    if bytes.len() >= 12 && &bytes[4..8] == b"ftyp" {
        return Some(Container::Mp4);
    }
    if bytes.starts_with(&[0x1A, 0x45, 0xDF, 0xA3]) {
        return Some(Container::Matroska);
    }
    if bytes.len() >= 12 && &bytes[0..4] == b"RIFF" && &bytes[8..11] == b"AVI" {
        return Some(Container::Avi);
    }
    match image::guess_format(bytes).ok()? {
        ImageFormat::Gif => Some(Container::Gif),
        f @ (ImageFormat::Png | ImageFormat::Jpeg | ImageFormat::Bmp | ImageFormat::WebP) => Some(Container::Still(f)),
        _ => None,
    }
}

const VIDEO_EXTENSIONS: [&str; 6] = ["mp4", "mov", "avi", "mkv", "webm", "gif"];
const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "webp"];

/// Decides whether a payload is a still image or a video. Magic bytes win;
/// the filename extension is only consulted for unknown signatures. A GIF
/// with more than one frame is a video.
pub fn detect_media_kind(bytes: &[u8], filename: Option<&str>) -> Option<MediaKind> {
    match sniff_container(bytes) {
        Some(Container::Still(_)) => Some(MediaKind::Image),
        Some(Container::Gif) => {
            let frames = GifDecoder::new(Cursor::new(bytes))
                .ok()
                .map(|d| d.into_frames().take(2).count())
                .unwrap_or(0);
            Some(if frames > 1 { MediaKind::Video } else { MediaKind::Image })
        }
        Some(_) => Some(MediaKind::Video),
        None => {
            let ext = Path::new(filename?).extension()?.to_str()?.to_ascii_lowercase();
            if VIDEO_EXTENSIONS.contains(&ext.as_str()) {
                Some(MediaKind::Video)
            } else if IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                Some(MediaKind::Image)
            } else {
                None
            }
        }
    }
}

/// Decodes a still image payload.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage, VideoError> {
    image::load_from_memory(bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| VideoError::Decode {
            what: "image".into(),
            message: e.to_string(),
        })
}

/// Decodes a video payload held in memory.
pub fn decode_video(bytes: &[u8]) -> Result<MemoryVideo, VideoError> {
    match sniff_container(bytes) {
        Some(Container::Gif) => MemoryVideo::from_gif(bytes),
        Some(Container::Still(_)) => Ok(MemoryVideo::new(vec![decode_image(bytes)?])?),
        Some(other) => Err(VideoError::Unsupported(format!("{other:?} container"))),
        None => Err(VideoError::Unsupported("unrecognised payload".into())),
    }
}

/// Encodes frames as an animated GIF (fastest quantiser setting).
pub fn encode_gif(frames: &[RgbImage]) -> Result<Vec<u8>, VideoError> {
    let mut out = Vec::new();
    {
        let mut enc = GifEncoder::new_with_speed(&mut out, 30);
        enc.set_repeat(Repeat::Infinite).map_err(|e| VideoError::Decode {
            what: "gif".into(),
            message: e.to_string(),
        })?;
        let frames = frames
            .iter()
            .map(|f| Frame::new(DynamicImage::ImageRgb8(f.clone()).to_rgba8()));
        enc.encode_frames(frames).map_err(|e| VideoError::Decode {
            what: "gif".into(),
            message: e.to_string(),
        })?;
    }
    Ok(out)
}

/// Writes frames as a frame directory readable by [`FrameDirVideo`].
pub fn write_frame_dir(dir: &Path, frames: &[RgbImage]) -> Result<(), VideoError> {
    std::fs::create_dir_all(dir).map_err(|source| VideoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for (i, f) in frames.iter().enumerate() {
        let path = dir.join(format!("frame_{i:05}.png"));
        f.save(&path).map_err(|e| VideoError::Decode {
            what: path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    Ok(())
}

/// Encodes a single raster as PNG bytes.
pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory png encoding");
    out.into_inner()
}
