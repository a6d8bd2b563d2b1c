use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_yaml, write_yaml, ClassTable, SCHEMA_VERSION};
use crate::camera::PixelPoint;
use crate::error::{Error, Result};

/// Box center `(x, y)` and size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn center(&self) -> PixelPoint {
        PixelPoint::new(self.x, self.y)
    }
}

/// One 2D detection of an object in one camera image.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_name: String,
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub timestamp: f64,
    pub camera_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFrame {
    pub timestamp: f64,
    pub detections: Vec<Detection>,
}

/// All detections of one camera, ordered by timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionStream {
    pub camera_id: String,
    pub frames: Vec<DetectionFrame>,
    /// Detections dropped on read because their class is not in the vocabulary.
    pub skipped_unknown: usize,
}

impl DetectionStream {
    pub fn detection_count(&self) -> usize {
        self.frames.iter().map(|f| f.detections.len()).sum()
    }

    pub fn count_by_class(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for d in self.frames.iter().flat_map(|f| &f.detections) {
            *counts.entry(d.class_name.clone()).or_insert(0) += 1;
        }
        counts
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionsDoc {
    version: u32,
    camera: String,
    frames: Vec<FrameDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameDoc {
    timestamp: f64,
    detections: Vec<DetectionDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionDoc {
    name: String,
    xywh: [f64; 4],
    conf: f64,
}

/// Reads a per-camera detection file. Detections of classes missing from
/// `vocabulary` are skipped with a warning and counted.
pub fn read_detections(path: &Path, vocabulary: Option<&ClassTable>) -> Result<DetectionStream> {
    let doc: DetectionsDoc = read_yaml(path)?;
    let mut skipped = 0;
    let mut frames = Vec::with_capacity(doc.frames.len());
    for (i, frame) in doc.frames.into_iter().enumerate() {
        if !frame.timestamp.is_finite() {
            return Err(Error::parse(
                path,
                format!("frame {i}: non-finite timestamp"),
            ));
        }
        let mut detections = Vec::with_capacity(frame.detections.len());
        for (j, d) in frame.detections.into_iter().enumerate() {
            let [x, y, w, h] = d.xywh;
            let ctx = || {
                format!(
                    "frame {i} (t = {}), detection {j} (`{}`)",
                    frame.timestamp, d.name
                )
            };
            if !(0.0..=1.0).contains(&d.conf) {
                return Err(Error::parse(
                    path,
                    format!("{}: confidence {} outside [0, 1]", ctx(), d.conf),
                ));
            }
            if !d.xywh.iter().all(|v| v.is_finite()) || w < 0.0 || h < 0.0 {
                return Err(Error::parse(
                    path,
                    format!("{}: invalid box {:?}", ctx(), d.xywh),
                ));
            }
            if vocabulary.is_some_and(|v| !v.contains_key(&d.name)) {
                tracing::warn!(file = %path.display(), class = %d.name, "skipping detection of unknown class");
                skipped += 1;
                continue;
            }
            detections.push(Detection {
                class_name: d.name,
                bbox: BoundingBox { x, y, w, h },
                confidence: d.conf,
                timestamp: frame.timestamp,
                camera_id: doc.camera.clone(),
            });
        }
        frames.push(DetectionFrame {
            timestamp: frame.timestamp,
            detections,
        });
    }
    frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(DetectionStream {
        camera_id: doc.camera,
        frames,
        skipped_unknown: skipped,
    })
}

pub fn write_detections(path: &Path, stream: &DetectionStream) -> Result<()> {
    let doc = DetectionsDoc {
        version: SCHEMA_VERSION,
        camera: stream.camera_id.clone(),
        frames: stream
            .frames
            .iter()
            .map(|f| FrameDoc {
                timestamp: f.timestamp,
                detections: f
                    .detections
                    .iter()
                    .map(|d| DetectionDoc {
                        name: d.class_name.clone(),
                        xywh: [d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h],
                        conf: d.confidence,
                    })
                    .collect(),
            })
            .collect(),
    };
    write_yaml(path, &doc)
}

/// Detections of all cameras falling into one quantized frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBatch {
    pub index: i64,
    pub time: f64,
    /// Ordered by camera id, then by order within the source file.
    pub detections: Vec<Detection>,
}

/// Groups the frames of several cameras by quantized frame index
/// (`round(timestamp * frame_rate)`). A frame present in any stream, even
/// with no detections, yields a batch.
pub fn merge_streams(streams: &[DetectionStream], frame_rate: f64) -> Vec<FrameBatch> {
    let mut ordered: Vec<&DetectionStream> = streams.iter().collect();
    ordered.sort_by(|a, b| a.camera_id.cmp(&b.camera_id));
    let mut batches: BTreeMap<i64, Vec<Detection>> = BTreeMap::new();
    for stream in ordered {
        for frame in &stream.frames {
            let index = (frame.timestamp * frame_rate).round() as i64;
            batches
                .entry(index)
                .or_default()
                .extend(frame.detections.iter().cloned());
        }
    }
    batches
        .into_iter()
        .map(|(index, detections)| FrameBatch {
            index,
            time: index as f64 / frame_rate,
            detections,
        })
        .collect()
}
