//! Per-request inference: decode the upload, sample frames, find and score
//! faces, and average the scores. Nothing is written to disk.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datapipe::preprocess_sample;
use crate::faces::{crop_face, detect_faces, FaceBox, FaceDetector, FaceError};
use crate::imaging::RgbImage;
use crate::ingest::{sample_frame_indices, SamplingMode};
use crate::manifest::Label;
use crate::model::ModelError;
use crate::trainer::LoadedModel;
use crate::video::{decode_image, decode_video, MediaKind, VideoError, VideoSource};
use crate::Scalar;

pub const DEFAULT_FRAMES: usize = 10;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Media(#[from] VideoError),
    #[error(transparent)]
    Face(#[from] FaceError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl ServiceError {
    /// True when the payload itself is at fault rather than the server.
    pub fn is_client_error(&self) -> bool {
        matches!(
            self,
            ServiceError::InvalidParams(_)
                | ServiceError::Media(VideoError::Decode { .. } | VideoError::Unsupported(_) | VideoError::NoFrames)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictParams {
    pub frames: usize,
    pub threshold: f64,
    /// Frame-sampling seed; a fresh one is drawn per request when absent.
    pub seed: Option<u64>,
}

impl Default for PredictParams {
    fn default() -> Self {
        Self {
            frames: DEFAULT_FRAMES,
            threshold: 0.5,
            seed: None,
        }
    }
}

impl PredictParams {
    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.frames == 0 {
            return Err(ServiceError::InvalidParams("frames must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ServiceError::InvalidParams(format!(
                "threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateStatus {
    Ok,
    NoFaceDetected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceVerdict {
    pub frame_index: usize,
    #[serde(rename = "box")]
    pub face_box: FaceBox,
    pub probability_fake: f64,
    pub label: Label,
}

/// `probability_fake` and `label` are null when no face was found.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub probability_fake: Option<f64>,
    pub label: Option<Label>,
    pub threshold: f64,
    pub status: AggregateStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub media_type: MediaKind,
    pub frames_analyzed: usize,
    pub faces: Vec<FaceVerdict>,
    pub aggregate: Aggregate,
    pub model_id: String,
}

pub fn label_for(probability_fake: f64, threshold: f64) -> Label {
    if probability_fake >= threshold {
        Label::Fake
    } else {
        Label::Real
    }
}

/// Mean over all faces with the thresholded label.
pub fn aggregate(probabilities: &[f64], threshold: f64) -> Aggregate {
    if probabilities.is_empty() {
        return Aggregate {
            probability_fake: None,
            label: None,
            threshold,
            status: AggregateStatus::NoFaceDetected,
        };
    }
    let mean = probabilities.iter().sum::<f64>() / probabilities.len() as f64;
    Aggregate {
        probability_fake: Some(mean),
        label: Some(label_for(mean, threshold)),
        threshold,
        status: AggregateStatus::Ok,
    }
}

/// Decodes `payload` into `(frame_index, frame)` pairs.
fn frames_of(payload: &[u8], kind: MediaKind, params: &PredictParams) -> Result<Vec<(usize, RgbImage)>, ServiceError> {
    match kind {
        MediaKind::Image => Ok(vec![(0, decode_image(payload)?)]),
        MediaKind::Video => {
            let mut video = decode_video(payload)?;
            let seed = params.seed.unwrap_or_else(rand::random);
            let picked = sample_frame_indices(video.frame_count(), params.frames, SamplingMode::Random, seed)
                .map_err(|_| VideoError::NoFrames)?;
            picked
                .into_iter()
                .map(|i| Ok((i, video.frame(i)?)))
                .collect()
        }
    }
}

/// Runs the full inference workflow on an uploaded payload.
pub fn classify_media<T: Scalar>(
    payload: &[u8],
    kind: MediaKind,
    model: &LoadedModel<T>,
    detector: &dyn FaceDetector,
    params: &PredictParams,
) -> Result<PredictionReport, ServiceError> {
    params.validate()?;
    let prep = model.preprocessing();
    let frames = frames_of(payload, kind, params)?;

    let mut located = Vec::new();
    let mut pixels: Vec<T> = Vec::new();
    for (frame_index, frame) in &frames {
        for b in detect_faces(frame, detector)? {
            let crop = crop_face(frame, &b, prep.crop_margin, prep.crop_size)?;
            pixels.extend(preprocess_sample::<T>(&crop, prep.input_size));
            located.push((*frame_index, b));
        }
    }
    let probs: Vec<f64> = if located.is_empty() {
        Vec::new()
    } else {
        model
            .model
            .predict(&pixels, located.len())?
            .into_iter()
            .map(Scalar::as_f64)
            .collect()
    };

    let faces = located
        .into_iter()
        .zip(&probs)
        .map(|((frame_index, face_box), &p)| FaceVerdict {
            frame_index,
            face_box,
            probability_fake: p,
            label: label_for(p, params.threshold),
        })
        .collect();
    Ok(PredictionReport {
        media_type: kind,
        frames_analyzed: frames.len(),
        faces,
        aggregate: aggregate(&probs, params.threshold),
        model_id: model.model_id().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::faces::{draw_marker, StubDetector};
    use crate::model::{build_model, Backbone, ModelConfig};
    use crate::trainer::{export_model, load_model, Preprocessing};
    use crate::video::{encode_gif, encode_png};
    use image::Rgb;
    use proptest::prelude::*;

    fn loaded() -> (tempfile::TempDir, LoadedModel<f64>) {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model::<f64>(&ModelConfig::new(Backbone::TinyTest)).unwrap();
        export_model(&m, &Preprocessing::for_model(&m), dir.path()).unwrap();
        let l = load_model(dir.path()).unwrap();
        (dir, l)
    }

    fn frame(faces: &[(u32, u32)]) -> RgbImage {
        let mut img = RgbImage::from_pixel(200, 160, Rgb([90, 90, 90]));
        for &(x, y) in faces {
            draw_marker(&mut img, x, y, 40, 40, 2);
        }
        img
    }

    #[test]
    fn two_face_mean_at_threshold_is_fake() {
        let a = aggregate(&[0.2, 0.8], 0.5);
        assert!((a.probability_fake.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(a.label, Some(Label::Fake));
        assert_eq!(a.status, AggregateStatus::Ok);
    }

    #[test]
    fn blank_image_reports_no_face() {
        let (_d, m) = loaded();
        let png = encode_png(&frame(&[]));
        let r = classify_media(&png, MediaKind::Image, &m, &StubDetector::default(), &PredictParams::default()).unwrap();
        assert!(r.faces.is_empty());
        assert_eq!(r.frames_analyzed, 1);
        assert_eq!(r.aggregate.status, AggregateStatus::NoFaceDetected);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["aggregate"]["status"], "no_face_detected");
        assert!(json["aggregate"]["probability_fake"].is_null());
    }

    #[test]
    fn image_faces_are_scored_and_averaged() {
        let (_d, m) = loaded();
        let png = encode_png(&frame(&[(10, 10), (120, 90)]));
        let r = classify_media(&png, MediaKind::Image, &m, &StubDetector::default(), &PredictParams::default()).unwrap();
        assert_eq!(r.faces.len(), 2);
        let mean = r.faces.iter().map(|f| f.probability_fake).sum::<f64>() / 2.0;
        assert!((r.aggregate.probability_fake.unwrap() - mean).abs() < 1e-12);
        for f in &r.faces {
            assert_eq!(f.label, label_for(f.probability_fake, 0.5));
        }
        assert_eq!(r.model_id, m.model_id());
    }

    #[test]
    fn video_samples_requested_frames_deterministically() {
        let (_d, m) = loaded();
        let frames: Vec<RgbImage> = (0..30).map(|i| frame(&[(10 + i * 3, 20)])).collect();
        let gif = encode_gif(&frames).unwrap();
        let params = PredictParams {
            frames: 10,
            threshold: 0.5,
            seed: Some(4),
        };
        let a = classify_media(&gif, MediaKind::Video, &m, &StubDetector::default(), &params).unwrap();
        let b = classify_media(&gif, MediaKind::Video, &m, &StubDetector::default(), &params).unwrap();
        assert_eq!(a.frames_analyzed, 10);
        assert_eq!(a.media_type, MediaKind::Video);
        assert_eq!(a, b);
    }

    #[test]
    fn undecodable_payload_is_a_client_error() {
        let (_d, m) = loaded();
        let err = classify_media(b"nope", MediaKind::Image, &m, &StubDetector::default(), &PredictParams::default())
            .unwrap_err();
        assert!(err.is_client_error());
        let bad = PredictParams {
            threshold: 2.0,
            ..PredictParams::default()
        };
        assert!(classify_media(b"", MediaKind::Image, &m, &StubDetector::default(), &bad).is_err());
    }

    proptest! {
        #[test]
        fn aggregate_is_permutation_invariant(mut ps in prop::collection::vec(0.0f64..=1.0, 1..40), t in 0.0f64..=1.0) {
            let a = aggregate(&ps, t);
            ps.reverse();
            let b = aggregate(&ps, t);
            prop_assert!((a.probability_fake.unwrap() - b.probability_fake.unwrap()).abs() <= 1e-12);
            let mean = ps.iter().sum::<f64>() / ps.len() as f64;
            prop_assert!((a.probability_fake.unwrap() - mean).abs() <= 1e-12);
        }
    }
}
