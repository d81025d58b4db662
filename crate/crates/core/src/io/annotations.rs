//! JSON-lines annotations, one image per line:
//!
//! ```text
//! {"image":"img_00000.pgm","boxes":[{"cx":0.5,"cy":0.5,"w":0.1,"h":0.1,"class":0}]}
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, GroundTruth};
use crate::error::{Error, Result};
use crate::io::pgm::GrayImage;
use crate::tensor::{Real, Tensor};

pub const ANNOTATION_FILE: &str = "annotations.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image: String,
    pub boxes: Vec<AnnotationBox>,
}

impl AnnotationRecord {
    pub fn new(image: impl Into<String>, gts: &[GroundTruth]) -> Self {
        Self {
            image: image.into(),
            boxes: gts
                .iter()
                .map(|g| AnnotationBox {
                    cx: g.bbox.cx,
                    cy: g.bbox.cy,
                    w: g.bbox.w,
                    h: g.bbox.h,
                    class: g.class_id,
                })
                .collect(),
        }
    }

    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.boxes
            .iter()
            .map(|b| GroundTruth {
                bbox: BBox::new(b.cx, b.cy, b.w, b.h),
                class_id: b.class,
            })
            .collect()
    }
}

/// Parses annotation text; blank lines are skipped, line numbers are 1-based.
pub fn parse(text: &str) -> Result<Vec<AnnotationRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Annotation { line: i + 1, msg };
        let record: AnnotationRecord =
            serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        for g in record.ground_truth() {
            g.bbox.validate().map_err(|e| bad(e.to_string()))?;
        }
        records.push(record);
    }
    Ok(records)
}

pub fn render(records: &[AnnotationRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

pub fn write(path: impl AsRef<Path>, records: &[AnnotationRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render(records)?).map_err(|e| Error::io(path, e))
}

/// Images and their annotations, loaded from a dataset directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub names: Vec<String>,
    pub images: Vec<GrayImage>,
    pub ground_truth: Vec<Vec<GroundTruth>>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let records = read(root.join(ANNOTATION_FILE))?;
        let mut names = Vec::with_capacity(records.len());
        let mut images = Vec::with_capacity(records.len());
        let mut ground_truth = Vec::with_capacity(records.len());
        for r in records {
            images.push(GrayImage::read(root.join(&r.image))?);
            ground_truth.push(r.ground_truth());
            names.push(r.image);
        }
        Ok(Self {
            root,
            names,
            images,
            ground_truth,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `N x 1 x H x W` batch of the listed images.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let tensors: Vec<Tensor<T>> = indices
            .iter()
            .map(|&i| self.images[i].to_tensor())
            .collect();
        Tensor::stack(&tensors.iter().collect::<Vec<_>>())
    }

    /// Keeps the first `n` images.
    pub fn truncate(&mut self, n: usize) {
        self.names.truncate(n);
        self.images.truncate(n);
        self.ground_truth.truncate(n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let gts = vec![GroundTruth {
            bbox: BBox::new(0.1 + 0.2, 1.0 / 3.0, 0.0625, 0.07),
            class_id: 0,
        }];
        let records = vec![
            AnnotationRecord::new("a.pgm", &gts),
            AnnotationRecord::new("b.pgm", &[]),
        ];
        let text = render(&records).unwrap();
        let back = parse(&text).unwrap();
        assert_eq!(back, records);
        assert_eq!(back[0].ground_truth(), gts);
        assert_eq!(render(&back).unwrap(), text);
    }

    #[test]
    fn reports_line_number() {
        let text = "{\"image\":\"a.pgm\",\"boxes\":[]}\n\n{\"image\":\"b.pgm\",\"boxes\":[{\"cx\":0.5}]}\n";
        match parse(text) {
            Err(Error::Annotation { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let invalid = "{\"image\":\"a.pgm\",\"boxes\":[{\"cx\":0.5,\"cy\":0.5,\"w\":-1,\"h\":0.1,\"class\":0}]}";
        assert!(matches!(
            parse(invalid),
            Err(Error::Annotation { line: 1, .. })
        ));
    }
}
