//! Image corpora and neural recordings: domain types plus loaders for the
//! STL-10 binary format, the portable recording container, and the
//! procedural synthetic generators used by desk-scale tests.

mod container;
mod stl10;
mod synth;

pub use container::{load_neural_recording, load_neural_recording_with, write_neural_recording};
pub use stl10::{load_stl10, Stl10Split, STL10_CLASS_NAMES};
pub use synth::{synth_image_set, synth_neural_recording, SynthRecording};

use crate::error::{Error, Result};
use ndarray::{Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

/// A set of decoded images, channel-first `[count, 3, k, k]`, pixels in
/// `[0, 1]`. Labels, when present, are class indices aligned with `images`.
#[derive(Clone)]
pub struct ImageSet {
    pub images: Array4<f32>,
    pub labels: Option<Vec<usize>>,
    pub class_names: Option<Vec<String>>,
}

impl ImageSet {
    pub fn new(
        images: Array4<f32>,
        labels: Option<Vec<usize>>,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let set = ImageSet { images, labels, class_names };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        let (count, channels, h, w) = self.images.dim();
        if channels != 3 {
            return Err(Error::data(format!("expected 3 channels, got {channels}")));
        }
        if h != w {
            return Err(Error::data(format!("non-square images {h}x{w}")));
        }
        if let Some(bad) = self.images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::data(format!("pixel value {bad} outside [0,1]")));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != count {
                return Err(Error::data(format!(
                    "{} labels for {count} images",
                    labels.len()
                )));
            }
            if let Some(n_classes) = self.n_classes() {
                if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
                    return Err(Error::data(format!(
                        "label {bad} out of range for {n_classes} classes"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.images.dim().0
    }

    /// Image side length k.
    pub fn size(&self) -> usize {
        self.images.dim().2
    }

    pub fn n_classes(&self) -> Option<usize> {
        match (&self.class_names, &self.labels) {
            (Some(names), _) => Some(names.len()),
            (None, Some(labels)) => labels.iter().max().map(|m| m + 1),
            (None, None) => None,
        }
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f32> {
        self.images.index_axis(Axis(0), i)
    }

    /// Single image widened to f64 for graph-entry math.
    pub fn image_f64(&self, i: usize) -> Array3<f64> {
        self.image(i).mapv(f64::from)
    }

    /// Gather a batch of images as f64 `[batch, 3, k, k]`.
    pub fn gather_f64(&self, indices: &[usize]) -> Array4<f64> {
        let (_, c, h, w) = self.images.dim();
        let mut out = Array4::zeros((indices.len(), c, h, w));
        for (row, &i) in indices.iter().enumerate() {
            out.index_axis_mut(Axis(0), row)
                .assign(&self.image(i).mapv(f64::from));
        }
        out
    }

    /// Subset by stimulus indices, carrying labels along.
    pub fn subset(&self, indices: &[usize]) -> ImageSet {
        let (_, c, h, w) = self.images.dim();
        let mut images = Array4::zeros((indices.len(), c, h, w));
        for (row, &i) in indices.iter().enumerate() {
            images.index_axis_mut(Axis(0), row).assign(&self.image(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        ImageSet { images, labels, class_names: self.class_names.clone() }
    }
}

/// Cortical region a recording was taken from, ordered along the ventral
/// stream hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    V1,
    V2,
    V4,
    IT,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::V1, Region::V2, Region::V4, Region::IT];

    pub fn as_str(&self) -> &'static str {
        match self {
            Region::V1 => "V1",
            Region::V2 => "V2",
            Region::V4 => "V4",
            Region::IT => "IT",
        }
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Region {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "V1" => Ok(Region::V1),
            "V2" => Ok(Region::V2),
            "V4" => Ok(Region::V4),
            "IT" => Ok(Region::IT),
            other => Err(Error::data(format!("unknown region {other:?}"))),
        }
    }
}

/// Recorded (or synthesized) neural responses to a fixed stimulus set:
/// `responses[stimulus, neuron, repetition]`.
#[derive(Clone)]
pub struct NeuralRecording {
    pub responses: Array3<f32>,
    pub stimuli: ImageSet,
    pub region: Region,
    pub neuron_ids: Vec<String>,
}

impl NeuralRecording {
    pub fn new(
        responses: Array3<f32>,
        stimuli: ImageSet,
        region: Region,
        neuron_ids: Vec<String>,
    ) -> Result<Self> {
        let (n_stimuli, n_neurons, n_reps) = responses.dim();
        if n_reps < 2 {
            return Err(Error::data(format!(
                "noise-ceiling estimation needs >= 2 repetitions, got {n_reps}"
            )));
        }
        if stimuli.count() != n_stimuli {
            return Err(Error::data(format!(
                "{} stimuli for {n_stimuli} response rows",
                stimuli.count()
            )));
        }
        if neuron_ids.len() != n_neurons {
            return Err(Error::data(format!(
                "{} neuron ids for {n_neurons} neurons",
                neuron_ids.len()
            )));
        }
        if responses.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("non-finite response values"));
        }
        Ok(NeuralRecording { responses, stimuli, region, neuron_ids })
    }

    pub fn n_stimuli(&self) -> usize {
        self.responses.dim().0
    }

    pub fn n_neurons(&self) -> usize {
        self.responses.dim().1
    }

    pub fn n_repetitions(&self) -> usize {
        self.responses.dim().2
    }

    pub fn responses_f64(&self) -> Array3<f64> {
        self.responses.mapv(f64::from)
    }

    /// Repetition-averaged responses `[n_stimuli, n_neurons]`.
    pub fn mean_over_reps(&self) -> ndarray::Array2<f64> {
        let r = self.responses_f64();
        r.mean_axis(Axis(2)).expect("n_repetitions >= 2")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn image_set_rejects_out_of_range_pixels() {
        let mut images = Array4::<f32>::zeros((2, 3, 4, 4));
        images[[0, 0, 0, 0]] = 1.5;
        assert!(ImageSet::new(images, None, None).is_err());
    }

    #[test]
    fn image_set_rejects_label_count_mismatch() {
        let images = Array4::<f32>::zeros((2, 3, 4, 4));
        assert!(ImageSet::new(images, Some(vec![0]), None).is_err());
    }

    #[test]
    fn image_set_rejects_label_beyond_classes() {
        let images = Array4::<f32>::zeros((2, 3, 4, 4));
        let names = Some(vec!["a".into(), "b".into()]);
        assert!(ImageSet::new(images, Some(vec![0, 2]), names).is_err());
    }

    #[test]
    fn recording_requires_two_repetitions() {
        let images = Array4::<f32>::zeros((2, 3, 4, 4));
        let stimuli = ImageSet::new(images, None, None).unwrap();
        let responses = Array3::<f32>::zeros((2, 3, 1));
        let ids = vec!["n0".into(), "n1".into(), "n2".into()];
        assert!(NeuralRecording::new(responses, stimuli, Region::V1, ids).is_err());
    }

    #[test]
    fn recording_rejects_nan() {
        let images = Array4::<f32>::zeros((2, 3, 4, 4));
        let stimuli = ImageSet::new(images, None, None).unwrap();
        let mut responses = Array3::<f32>::zeros((2, 1, 2));
        responses[[0, 0, 0]] = f32::NAN;
        assert!(NeuralRecording::new(responses, stimuli, Region::V1, vec!["n0".into()]).is_err());
    }

    #[test]
    fn region_round_trips_through_str() {
        for r in Region::ALL {
            assert_eq!(r.as_str().parse::<Region>().unwrap(), r);
        }
        assert!("V3".parse::<Region>().is_err());
    }

    #[test]
    fn subset_carries_labels() {
        let mut images = Array4::<f32>::zeros((3, 3, 4, 4));
        for i in 0..3 {
            images[[i, 0, 0, 0]] = i as f32 * 0.25;
        }
        let set = ImageSet::new(images, Some(vec![0, 1, 2]), None).unwrap();
        let sub = set.subset(&[2, 0]);
        assert_eq!(sub.labels.as_ref().unwrap(), &vec![2, 0]);
        assert_eq!(sub.images[[0, 0, 0, 0]], 0.5);
        assert_eq!(sub.images[[1, 0, 0, 0]], 0.0);
    }
}
