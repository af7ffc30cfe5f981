//! Batched, shuffled, cached and prefetched access to an ingested corpus.
//!
//! A [`BatchStream`] covers one split of a [`CropIndex`]. Each call to
//! [`BatchStream::epoch`] yields every sample of the split exactly once in
//! `ceil(N / batch_size)` batches; only the last batch may be short.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::{Arc, OnceLock};
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::imaging::{resize_bilinear, RgbImage};
use crate::ingest::{CropIndex, IndexRow};
use crate::manifest::Split;
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("split `{0}` has no samples")]
    EmptySplit(&'static str),
    #[error("batch_size must be at least 1")]
    ZeroBatch,
    #[error("target_size must be at least 1")]
    ZeroTarget,
    #[error("cannot read crop {path}: {message}")]
    Decode { path: PathBuf, message: String },
}

/// Resizes a crop to `target × target` and scales pixels into `[0, 1]`,
/// row-major HWC with RGB channel order.
pub fn preprocess_sample<T: Scalar>(crop: &RgbImage, target: u32) -> Vec<T> {
    let resized = if crop.dimensions() == (target, target) {
        crop.clone()
    } else {
        resize_bilinear(crop, target, target)
    };
    let k = T::of(1.0 / 255.0);
    resized.as_raw().iter().map(|&b| T::of(b as f64) * k).collect()
}

/// Reads crop images from storage.
pub trait CropLoader: Send + Sync {
    fn load(&self, path: &Path) -> Result<RgbImage, DataError>;
}

/// Decodes crops from disk with the `image` crate.
#[derive(Debug, Default, Clone, Copy)]
pub struct FileLoader;

impl CropLoader for FileLoader {
    fn load(&self, path: &Path) -> Result<RgbImage, DataError> {
        image::open(path).map(|i| i.to_rgb8()).map_err(|e| DataError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Wraps another loader and counts decode calls.
#[derive(Debug, Default)]
pub struct CountingLoader<L> {
    inner: L,
    count: AtomicUsize,
}

impl<L> CountingLoader<L> {
    pub fn new(inner: L) -> Self {
        Self {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }
}

impl<L: CropLoader> CropLoader for CountingLoader<L> {
    fn load(&self, path: &Path) -> Result<RgbImage, DataError> {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.inner.load(path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    pub split: Split,
    pub batch_size: usize,
    pub target_size: u32,
    /// `None` keeps index order.
    pub shuffle_seed: Option<u64>,
    /// Keep decoded, preprocessed samples in memory after their first use.
    pub cache: bool,
    /// Batches prepared ahead of the consumer; 0 disables the worker thread.
    pub prefetch_depth: usize,
    /// Random horizontal flips with probability 0.5.
    pub augment: bool,
}

impl StreamConfig {
    /// Defaults for `split`: batch 32, prefetch 2, caching on, shuffling and
    /// flips for the training split only.
    pub fn new(split: Split, target_size: u32) -> Self {
        let train = split == Split::Train;
        Self {
            split,
            batch_size: 32,
            target_size,
            shuffle_seed: train.then_some(0),
            cache: true,
            prefetch_depth: 2,
            augment: train,
        }
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.shuffle_seed = seed;
        self
    }
}

/// One mini-batch. `pixels` is `len × S × S × 3` in HWC order per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub pixels: Vec<T>,
    pub labels: Vec<T>,
    pub source_ids: Vec<String>,
    pub target_size: u32,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let per = self.sample_len();
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn sample_len(&self) -> usize {
        let s = self.target_size as usize;
        s * s * 3
    }
}

struct Shared<T> {
    rows: Vec<IndexRow>,
    paths: Vec<PathBuf>,
    config: StreamConfig,
    loader: Arc<dyn CropLoader>,
    cache: Option<Vec<OnceLock<Arc<Vec<T>>>>>,
}

impl<T: Scalar> Shared<T> {
    fn sample(&self, i: usize) -> Result<Arc<Vec<T>>, DataError> {
        if let Some(hit) = self.cache.as_ref().and_then(|c| c[i].get()) {
            return Ok(hit.clone());
        }
        let img = self.loader.load(&self.paths[i])?;
        let s = Arc::new(preprocess_sample(&img, self.config.target_size));
        if let Some(c) = &self.cache {
            let _ = c[i].set(s.clone());
        }
        Ok(s)
    }

    fn batch(&self, order: &[usize], flips: &[bool]) -> Result<Batch<T>, DataError> {
        let samples = order
            .par_iter()
            .map(|&i| self.sample(i))
            .collect::<Result<Vec<_>, _>>()?;
        let side = self.config.target_size as usize;
        let mut pixels = Vec::with_capacity(samples.len() * side * side * 3);
        for (s, &flip) in samples.iter().zip(flips) {
            if flip {
                for row in s.chunks_exact(side * 3) {
                    for px in row.chunks_exact(3).rev() {
                        pixels.extend_from_slice(px);
                    }
                }
            } else {
                pixels.extend_from_slice(s);
            }
        }
        Ok(Batch {
            pixels,
            labels: order.iter().map(|&i| T::of(self.rows[i].label.target())).collect(),
            source_ids: order.iter().map(|&i| self.rows[i].crop_path.clone()).collect(),
            target_size: self.config.target_size,
        })
    }
}

/// Re-iterable batch source over one split.
pub struct BatchStream<T> {
    shared: Arc<Shared<T>>,
    epoch: u64,
}

impl<T: Scalar> BatchStream<T> {
    pub fn new(index: &CropIndex, config: StreamConfig) -> Result<Self, DataError> {
        Self::with_loader(index, config, Arc::new(FileLoader))
    }

    pub fn with_loader(
        index: &CropIndex,
        config: StreamConfig,
        loader: Arc<dyn CropLoader>,
    ) -> Result<Self, DataError> {
        Self::from_rows(&index.root, index.split_rows(config.split), config, loader)
    }

    /// Builds a stream over explicit rows; every row is used regardless of
    /// its split.
    pub fn from_rows(
        root: &Path,
        rows: Vec<IndexRow>,
        config: StreamConfig,
        loader: Arc<dyn CropLoader>,
    ) -> Result<Self, DataError> {
        if config.batch_size == 0 {
            return Err(DataError::ZeroBatch);
        }
        if config.target_size == 0 {
            return Err(DataError::ZeroTarget);
        }
        if rows.is_empty() {
            return Err(DataError::EmptySplit(config.split.as_str()));
        }
        let paths = rows.iter().map(|r| root.join(&r.crop_path)).collect();
        let cache = config
            .cache
            .then(|| (0..rows.len()).map(|_| OnceLock::new()).collect());
        Ok(Self {
            shared: Arc::new(Shared {
                rows,
                paths,
                config,
                loader,
                cache,
            }),
            epoch: 0,
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.shared.config
    }

    pub fn rows(&self) -> &[IndexRow] {
        &self.shared.rows
    }

    pub fn len(&self) -> usize {
        self.shared.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shared.rows.is_empty()
    }

    pub fn num_batches(&self) -> usize {
        self.len().div_ceil(self.shared.config.batch_size)
    }

    /// Sample order for a given epoch.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = self.shared.config.shuffle_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch);
            order.shuffle(&mut rng);
        }
        order
    }

    fn epoch_flips(&self, epoch: u64) -> Vec<bool> {
        if !self.shared.config.augment {
            return vec![false; self.len()];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.shared.config.shuffle_seed.unwrap_or(0) ^ 0xF11F);
        rng.set_stream(epoch);
        (0..self.len()).map(|_| rng.random_bool(0.5)).collect()
    }

    /// Starts the next epoch.
    pub fn epoch(&mut self) -> Epoch<'_, T> {
        let epoch = self.epoch;
        self.epoch += 1;
        let order = self.epoch_order(epoch);
        let flips = self.epoch_flips(epoch);
        let bs = self.shared.config.batch_size;
        let plan: Vec<(Vec<usize>, Vec<bool>)> = order
            .chunks(bs)
            .zip(flips.chunks(bs))
            .map(|(o, f)| (o.to_vec(), f.to_vec()))
            .collect();
        let depth = self.shared.config.prefetch_depth;
        let mode = if depth == 0 {
            Mode::Inline {
                shared: self.shared.clone(),
                plan: plan.into_iter(),
            }
        } else {
            // a rendezvous channel of capacity depth-1 plus the batch the
            // worker is holding keeps at most `depth` batches ahead
            let (tx, rx) = sync_channel(depth - 1);
            let shared = self.shared.clone();
            let handle = std::thread::spawn(move || {
                for (o, f) in plan {
                    let b = shared.batch(&o, &f);
                    let failed = b.is_err();
                    if tx.send(b).is_err() || failed {
                        break;
                    }
                }
            });
            Mode::Prefetch {
                rx: Some(rx),
                handle: Some(handle),
            }
        };
        Epoch {
            mode,
            _stream: std::marker::PhantomData,
        }
    }
}

enum Mode<T> {
    Inline {
        shared: Arc<Shared<T>>,
        plan: std::vec::IntoIter<(Vec<usize>, Vec<bool>)>,
    },
    Prefetch {
        rx: Option<Receiver<Result<Batch<T>, DataError>>>,
        handle: Option<JoinHandle<()>>,
    },
}

/// Iterator over one epoch's batches. Borrows the stream so epochs never
/// overlap.
pub struct Epoch<'a, T> {
    mode: Mode<T>,
    _stream: std::marker::PhantomData<&'a mut BatchStream<T>>,
}

impl<T: Scalar> Iterator for Epoch<'_, T> {
    type Item = Result<Batch<T>, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        match &mut self.mode {
            Mode::Inline { shared, plan } => plan.next().map(|(o, f)| shared.batch(&o, &f)),
            Mode::Prefetch { rx, .. } => rx.as_ref()?.recv().ok(),
        }
    }
}

impl<T> Drop for Epoch<'_, T> {
    fn drop(&mut self) {
        if let Mode::Prefetch { rx, handle } = &mut self.mode {
            // closing the receiver unblocks a worker waiting on send
            drop(rx.take());
            if let Some(h) = handle.take() {
                let _ = h.join();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::Label;
    use image::Rgb;

    fn corpus(n: usize) -> (tempfile::TempDir, CropIndex) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("fake")).unwrap();
        let rows = (0..n)
            .map(|i| {
                let rel = format!("fake/c{i}.png");
                RgbImage::from_fn(12, 12, |x, _| Rgb([i as u8, x as u8 * 10, 0]))
                    .save(dir.path().join(&rel))
                    .unwrap();
                IndexRow {
                    crop_path: rel,
                    video: format!("v{i}"),
                    label: if i % 2 == 0 { Label::Fake } else { Label::Real },
                    split: Split::Train,
                    frame_index: 0,
                    box_index: 0,
                }
            })
            .collect();
        let idx = CropIndex {
            root: dir.path().to_path_buf(),
            rows,
        };
        (dir, idx)
    }

    #[test]
    fn preprocess_is_unit_range_hwc() {
        let img = RgbImage::from_fn(2, 2, |x, y| Rgb([255, (x * 100) as u8, (y * 51) as u8]));
        let v: Vec<f64> = preprocess_sample(&img, 2);
        assert_eq!(v.len(), 12);
        assert_eq!(v[0], 1.0);
        assert!((v[4] - 100.0 / 255.0).abs() < 1e-15);
        assert!((v[8] - 51.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn preprocess_resizes_to_target() {
        let img = RgbImage::from_pixel(256, 256, Rgb([255, 255, 255]));
        let v: Vec<f32> = preprocess_sample(&img, 299);
        assert_eq!(v.len(), 299 * 299 * 3);
        assert!(v.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn prefetch_preserves_order() {
        let (_d, idx) = corpus(13);
        let run = |depth: usize| {
            let mut cfg = StreamConfig::new(Split::Train, 6).with_batch_size(3).with_seed(Some(11));
            cfg.prefetch_depth = depth;
            let mut s = BatchStream::<f64>::new(&idx, cfg).unwrap();
            (0..2)
                .flat_map(|_| s.epoch().map(Result::unwrap).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        let inline = run(0);
        assert_eq!(inline, run(1));
        assert_eq!(inline, run(4));
        assert!(inline.iter().flat_map(|b| &b.labels).all(|&y| y == 0.0 || y == 1.0));
    }

    #[test]
    fn batch_sizes_round_up() {
        let (_d, idx) = corpus(100);
        let mut s = BatchStream::<f32>::new(&idx, StreamConfig::new(Split::Train, 2)).unwrap();
        let sizes: Vec<usize> = s.epoch().map(|b| b.unwrap().len()).collect();
        assert_eq!(sizes, vec![32, 32, 32, 4]);
    }

    #[test]
    fn batches_cover_split_once() {
        let (_d, idx) = corpus(10);
        let cfg = StreamConfig::new(Split::Train, 8).with_batch_size(4).with_seed(Some(3));
        let mut s = BatchStream::<f64>::new(&idx, cfg).unwrap();
        assert_eq!(s.num_batches(), 3);
        let batches: Vec<_> = s.epoch().map(Result::unwrap).collect();
        assert_eq!(batches.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut ids: Vec<_> = batches.iter().flat_map(|b| b.source_ids.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10);
    }

    #[test]
    fn shuffle_differs_by_epoch_and_repeats_by_seed() {
        let (_d, idx) = corpus(30);
        let cfg = StreamConfig::new(Split::Train, 4).with_seed(Some(9));
        let a = BatchStream::<f32>::new(&idx, cfg.clone()).unwrap();
        let b = BatchStream::<f32>::new(&idx, cfg).unwrap();
        assert_eq!(a.epoch_order(0), b.epoch_order(0));
        assert_ne!(a.epoch_order(0), a.epoch_order(1));
    }

    #[test]
    fn cache_decodes_each_crop_once() {
        let (_d, idx) = corpus(9);
        let loader = Arc::new(CountingLoader::new(FileLoader));
        let cfg = StreamConfig::new(Split::Train, 6).with_batch_size(2);
        let mut s = BatchStream::<f64>::with_loader(&idx, cfg, loader.clone()).unwrap();
        for _ in 0..3 {
            for b in s.epoch() {
                b.unwrap();
            }
        }
        assert_eq!(loader.count(), 9);
    }

    #[test]
    fn flip_mirrors_rows() {
        let (_d, idx) = corpus(1);
        let mut cfg = StreamConfig::new(Split::Train, 12).with_batch_size(1);
        cfg.prefetch_depth = 0;
        let mut plain = cfg.clone();
        plain.augment = false;
        let mut s = BatchStream::<f64>::new(&idx, plain).unwrap();
        let base = s.epoch().next().unwrap().unwrap();
        let mut a = BatchStream::<f64>::new(&idx, cfg).unwrap();
        let flipped = (0..16)
            .map(|_| a.epoch().next().unwrap().unwrap())
            .find(|b| b.pixels != base.pixels)
            .expect("some epoch flips");
        for x in 0..12 {
            let l = &base.pixels[x * 3..x * 3 + 3];
            let r = &flipped.pixels[(11 - x) * 3..(11 - x) * 3 + 3];
            assert_eq!(l, r);
        }
    }

    #[test]
    fn empty_split_and_bad_crop() {
        let (d, idx) = corpus(2);
        assert!(matches!(
            BatchStream::<f64>::new(&idx, StreamConfig::new(Split::Val, 4)),
            Err(DataError::EmptySplit("val"))
        ));
        std::fs::write(d.path().join("fake/c1.png"), b"junk").unwrap();
        let mut s = BatchStream::<f64>::new(&idx, StreamConfig::new(Split::Train, 4)).unwrap();
        let err = s.epoch().find_map(|b| b.err()).unwrap();
        assert!(err.to_string().contains("c1.png"), "{err}");
    }
}
