use std::path::Path;

use veriframe::faces::StubDetector;
use veriframe::ingest::{ingest_videos, read_index, IngestOptions, INDEX_FILE};
use veriframe::manifest::{Label, Manifest, ManifestEntry, Split};
use veriframe::synth::{frame_with_face, write_video_corpus};
use veriframe::video::write_frame_dir;

fn png_count(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .map(|d| d.filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count())
        .unwrap_or(0)
}

#[test]
fn one_fake_video_yields_ten_crops() {
    let videos = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let mut manifest = write_video_corpus(videos.path(), 1, 30, 1).unwrap();
    assert_eq!(manifest.entries[0].label, Label::Fake);
    manifest.entries[0].split = Split::Train;

    let report = ingest_videos(&manifest, videos.path(), out.path(), &IngestOptions::default(), &StubDetector::default()).unwrap();
    assert_eq!(report.videos_processed, 1);
    assert_eq!(report.frames_sampled, 10);
    assert_eq!(report.faces_written[&Label::Fake], 10);
    assert_eq!(png_count(&out.path().join("fake")), 10);
    assert_eq!(png_count(&out.path().join("real")), 0);

    let index = read_index(&out.path().join(INDEX_FILE)).unwrap();
    assert_eq!(index.rows.len(), 10);
    for row in &index.rows {
        let img = image::open(index.resolve(row)).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (256, 256));
        assert!(row.crop_path.starts_with("fake/fake_000__f"));
    }
}

#[test]
fn faceless_video_still_counts_as_processed() {
    let videos = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let blank = image::RgbImage::from_pixel(64, 48, image::Rgb([30, 30, 30]));
    write_frame_dir(&videos.path().join("blank"), &vec![blank; 4]).unwrap();
    let manifest = Manifest::from_entries(
        vec![ManifestEntry {
            name: "blank".into(),
            label: Label::Real,
            split: Split::Test,
            original: None,
        }],
        "m.csv",
    )
    .unwrap();
    let r = ingest_videos(&manifest, videos.path(), out.path(), &IngestOptions::default(), &StubDetector::default()).unwrap();
    assert_eq!(r.videos_processed, 1);
    assert_eq!(r.faces_total(), 0);
    assert_eq!(r.frames_without_faces, 4);
}

#[test]
fn missing_video_is_recorded_not_fatal() {
    let videos = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let mut manifest = write_video_corpus(videos.path(), 2, 5, 2).unwrap();
    manifest.entries.push(ManifestEntry {
        name: "ghost".into(),
        label: Label::Fake,
        split: Split::Train,
        original: None,
    });
    let r = ingest_videos(&manifest, videos.path(), out.path(), &IngestOptions::default(), &StubDetector::default()).unwrap();
    assert_eq!(r.videos_processed, 2);
    assert_eq!(r.videos_failed.len(), 1);
    assert_eq!(r.videos_failed[0].name, "ghost");
    assert!(r.frames_sampled <= r.videos_processed * 10);
}

#[test]
fn index_is_identical_across_runs_and_worker_counts() {
    let videos = tempfile::tempdir().unwrap();
    let manifest = write_video_corpus(videos.path(), 6, 12, 3).unwrap();
    let mut indexes = Vec::new();
    for workers in [Some(1), Some(4), None] {
        let out = tempfile::tempdir().unwrap();
        let opts = IngestOptions {
            frames_per_video: 5,
            sampling: veriframe::ingest::SamplingMode::Random,
            seed: 42,
            workers,
            ..IngestOptions::default()
        };
        ingest_videos(&manifest, videos.path(), out.path(), &opts, &StubDetector::default()).unwrap();
        indexes.push(std::fs::read(out.path().join(INDEX_FILE)).unwrap());
    }
    assert_eq!(indexes[0], indexes[1]);
    assert_eq!(indexes[0], indexes[2]);
}

#[test]
fn every_frame_face_is_found_with_its_label() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let videos = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let frames: Vec<_> = (0..3).map(|i| frame_with_face(Label::Real, 10 + i * 20, 30, &mut rng)).collect();
    write_frame_dir(&videos.path().join("r"), &frames).unwrap();
    let manifest = Manifest::from_entries(
        vec![ManifestEntry {
            name: "r".into(),
            label: Label::Real,
            split: Split::Val,
            original: None,
        }],
        "m.csv",
    )
    .unwrap();
    let r = ingest_videos(&manifest, videos.path(), out.path(), &IngestOptions::default(), &StubDetector::default()).unwrap();
    assert_eq!(r.faces_written[&Label::Real], 3);
    let idx = read_index(&out.path().join(INDEX_FILE)).unwrap();
    assert_eq!(idx.rows.iter().map(|r| r.frame_index).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(idx.rows.iter().all(|r| r.label == Label::Real && r.split == Split::Val));
}

#[test]
fn empty_manifest_is_rejected() {
    let manifest = Manifest {
        entries: Vec::new(),
        source_path: "m.csv".into(),
    };
    let d = tempfile::tempdir().unwrap();
    let err = ingest_videos(&manifest, d.path(), d.path(), &IngestOptions::default(), &StubDetector::default()).unwrap_err();
    assert_eq!(err.to_string(), "empty manifest");
}
