//! Synthetic, linearly separable corpora for smoke tests and demos.
//!
//! Each "video" is a directory of numbered PNG frames on a grey noise
//! background with one face-sized patch outlined in the stub detector's
//! marker colour. FAKE patches are bright noise, REAL patches dark noise.

use std::path::Path;

use image::Rgb;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::faces::draw_marker;
use crate::imaging::RgbImage;
use crate::ingest::{write_index, CropIndex, IndexRow, INDEX_FILE};
use crate::manifest::{Label, Manifest, ManifestEntry, Split};
use crate::video::{write_frame_dir, VideoError};

pub const FRAME_WIDTH: u32 = 160;
pub const FRAME_HEIGHT: u32 = 120;
pub const FACE_SIDE: u32 = 48;

fn noise_level(label: Label) -> (u8, u8) {
    match label {
        Label::Fake => (170, 255),
        Label::Real => (0, 85),
    }
}

/// A square of uniform noise in the label's brightness band.
pub fn noise_patch(side: u32, label: Label, rng: &mut impl Rng) -> RgbImage {
    let (lo, hi) = noise_level(label);
    RgbImage::from_fn(side, side, |_, _| {
        Rgb([rng.random_range(lo..=hi), rng.random_range(lo..=hi), rng.random_range(lo..=hi)])
    })
}

/// One frame with a single outlined face patch at `(x, y)`.
pub fn frame_with_face(label: Label, x: u32, y: u32, rng: &mut impl Rng) -> RgbImage {
    frame_with_faces(&[(label, x, y)], rng)
}

/// One frame with an outlined face patch per `(label, x, y)`.
pub fn frame_with_faces(faces: &[(Label, u32, u32)], rng: &mut impl Rng) -> RgbImage {
    let mut img = RgbImage::from_fn(FRAME_WIDTH, FRAME_HEIGHT, |_, _| {
        let v = rng.random_range(100..=140);
        Rgb([v, v, v])
    });
    for &(label, x, y) in faces {
        let patch = noise_patch(FACE_SIDE, label, rng);
        image::imageops::replace(&mut img, &patch, x as i64, y as i64);
        draw_marker(&mut img, x, y, FACE_SIDE, FACE_SIDE, 2);
    }
    img
}

/// Split for the `i`-th video of each label: 60 % train, 20 % val, 20 % test.
fn split_for(i: usize, per_label: usize) -> Split {
    let train = (per_label * 3).div_ceil(5);
    let val = (per_label - train).div_ceil(2);
    if i < train {
        Split::Train
    } else if i < train + val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Writes `videos` frame-directory videos (half FAKE, half REAL) with
/// `frames` frames each under `root`, returning their manifest.
pub fn write_video_corpus(root: &Path, videos: usize, frames: usize, seed: u64) -> Result<Manifest, VideoError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_label = videos.div_ceil(2);
    let mut entries = Vec::with_capacity(videos);
    for v in 0..videos {
        let label = if v % 2 == 0 { Label::Fake } else { Label::Real };
        let name = format!("{}_{:03}", label.dir_name(), v);
        let frames: Vec<RgbImage> = (0..frames)
            .map(|_| {
                let x = rng.random_range(4..FRAME_WIDTH - FACE_SIDE - 4);
                let y = rng.random_range(4..FRAME_HEIGHT - FACE_SIDE - 4);
                frame_with_face(label, x, y, &mut rng)
            })
            .collect();
        write_frame_dir(&root.join(&name), &frames)?;
        entries.push(ManifestEntry {
            name,
            label,
            split: split_for(v / 2, per_label),
            original: None,
        });
    }
    Ok(Manifest::from_entries(entries, "<synthetic>").expect("generated names are unique"))
}

/// Writes `n` crops directly (no ingest step) with an `index.csv`; samples
/// alternate FAKE/REAL and are spread 60/20/20 over the splits.
pub fn write_crop_corpus(root: &Path, n: usize, side: u32, seed: u64) -> std::io::Result<CropIndex> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in Label::ALL {
        std::fs::create_dir_all(root.join(l.dir_name()))?;
    }
    let per_label = n.div_ceil(2);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let label = if i % 2 == 0 { Label::Fake } else { Label::Real };
        let rel = format!("{}/s{i:04}.png", label.dir_name());
        noise_patch(side, label, &mut rng)
            .save(root.join(&rel))
            .map_err(std::io::Error::other)?;
        rows.push(IndexRow {
            crop_path: rel,
            video: format!("s{i:04}"),
            label,
            split: split_for(i / 2, per_label),
            frame_index: 0,
            box_index: 0,
        });
    }
    write_index(&root.join(INDEX_FILE), &rows).map_err(std::io::Error::other)?;
    Ok(CropIndex {
        root: root.to_path_buf(),
        rows,
    })
}
