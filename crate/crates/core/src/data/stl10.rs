//! STL-10 binary reader.
//!
//! Each record is 27,648 bytes: three 96x96 channel planes in R, G, B order,
//! each plane stored column-major (byte index within a plane = col*96 + row).
//! Labels, where present, live in a parallel file of one byte per record,
//! 1-based.

use super::ImageSet;
use crate::error::{Error, Result};
use ndarray::Array4;
use std::fs;
use std::path::Path;

pub const STL10_CLASS_NAMES: [&str; 10] = [
    "airplane", "bird", "car", "cat", "deer", "dog", "horse", "monkey", "ship", "truck",
];

const SIDE: usize = 96;
const PLANE: usize = SIDE * SIDE;
const RECORD: usize = 3 * PLANE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stl10Split {
    Train,
    Test,
    Unlabeled,
}

impl Stl10Split {
    fn image_file(&self) -> &'static str {
        match self {
            Stl10Split::Train => "train_X.bin",
            Stl10Split::Test => "test_X.bin",
            Stl10Split::Unlabeled => "unlabeled_X.bin",
        }
    }

    fn label_file(&self) -> Option<&'static str> {
        match self {
            Stl10Split::Train => Some("train_y.bin"),
            Stl10Split::Test => Some("test_y.bin"),
            Stl10Split::Unlabeled => None,
        }
    }
}

pub fn load_stl10(path: &Path, split: Stl10Split) -> Result<ImageSet> {
    let image_path = path.join(split.image_file());
    let bytes = fs::read(&image_path)
        .map_err(|e| Error::data(format!("reading {}: {e}", image_path.display())))?;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(Error::data(format!(
            "{}: size {} is not a positive multiple of the {RECORD}-byte record",
            image_path.display(),
            bytes.len()
        )));
    }
    let count = bytes.len() / RECORD;

    let mut images = Array4::<f32>::zeros((count, 3, SIDE, SIDE));
    {
        let out = images.as_slice_mut().expect("contiguous image buffer");
        for i in 0..count {
            let rec = &bytes[i * RECORD..(i + 1) * RECORD];
            for c in 0..3 {
                let plane = &rec[c * PLANE..(c + 1) * PLANE];
                let dst = &mut out[(i * 3 + c) * PLANE..(i * 3 + c + 1) * PLANE];
                for col in 0..SIDE {
                    for row in 0..SIDE {
                        dst[row * SIDE + col] = plane[col * SIDE + row] as f32 / 255.0;
                    }
                }
            }
        }
    }

    let labels = match split.label_file() {
        None => None,
        Some(name) => {
            let label_path = path.join(name);
            let raw = fs::read(&label_path)
                .map_err(|e| Error::data(format!("reading {}: {e}", label_path.display())))?;
            if raw.len() != count {
                return Err(Error::data(format!(
                    "{}: {} labels for {count} images",
                    label_path.display(),
                    raw.len()
                )));
            }
            let mut labels = Vec::with_capacity(count);
            for (i, &b) in raw.iter().enumerate() {
                if !(1..=10).contains(&b) {
                    return Err(Error::data(format!(
                        "{}: label byte {b} at record {i} outside 1..=10",
                        label_path.display()
                    )));
                }
                labels.push(b as usize - 1);
            }
            Some(labels)
        }
    };

    let class_names = labels
        .is_some()
        .then(|| STL10_CLASS_NAMES.iter().map(|s| s.to_string()).collect());
    ImageSet::new(images, labels, class_names)
}
