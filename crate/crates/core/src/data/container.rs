//! Portable neural-recording container: a directory holding `manifest.json`,
//! `responses.bin` (float32 little-endian, C-order [stimuli][neurons]
//! [repetitions]), and `stimuli/` PNG images ordered by the manifest's
//! stimulus list.

use super::{ImageSet, NeuralRecording, Region};
use crate::error::{Error, Result};
use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct Manifest {
    region: String,
    n_stimuli: usize,
    n_neurons: usize,
    n_repetitions: usize,
    dtype: String,
    byte_order: String,
    #[serde(default)]
    neuron_ids: Option<Vec<String>>,
    #[serde(default)]
    stimuli: Option<Vec<String>>,
}

pub fn load_neural_recording(path: &Path) -> Result<NeuralRecording> {
    load_neural_recording_with(path, false)
}

/// `drop_nan_neurons` removes neurons containing any non-finite value
/// instead of rejecting the whole recording.
pub fn load_neural_recording_with(path: &Path, drop_nan_neurons: bool) -> Result<NeuralRecording> {
    let manifest_path = path.join("manifest.json");
    let manifest_text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::data(format!("reading {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::data(format!("{}: {e}", manifest_path.display())))?;

    if manifest.dtype != "float32" {
        return Err(Error::data(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    if manifest.byte_order != "little-endian" {
        return Err(Error::data(format!(
            "unsupported byte order {:?}",
            manifest.byte_order
        )));
    }
    if manifest.n_repetitions < 2 {
        return Err(Error::data(format!(
            "manifest declares {} repetitions; noise ceiling needs >= 2",
            manifest.n_repetitions
        )));
    }
    let region: Region = manifest.region.parse()?;

    let bin_path = path.join("responses.bin");
    let raw = fs::read(&bin_path)
        .map_err(|e| Error::data(format!("reading {}: {e}", bin_path.display())))?;
    let expect = manifest.n_stimuli * manifest.n_neurons * manifest.n_repetitions * 4;
    if raw.len() != expect {
        return Err(Error::data(format!(
            "{}: {} bytes, manifest implies {expect}",
            bin_path.display(),
            raw.len()
        )));
    }
    let floats: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut responses = Array3::from_shape_vec(
        (manifest.n_stimuli, manifest.n_neurons, manifest.n_repetitions),
        floats,
    )
    .expect("length checked above");

    let mut neuron_ids = manifest
        .neuron_ids
        .unwrap_or_else(|| (0..manifest.n_neurons).map(|i| format!("n{i}")).collect());
    if neuron_ids.len() != manifest.n_neurons {
        return Err(Error::data(format!(
            "{} neuron ids for {} neurons",
            neuron_ids.len(),
            manifest.n_neurons
        )));
    }

    if drop_nan_neurons {
        let keep: Vec<usize> = (0..manifest.n_neurons)
            .filter(|&n| {
                responses
                    .index_axis(Axis(1), n)
                    .iter()
                    .all(|v| v.is_finite())
            })
            .collect();
        if keep.is_empty() {
            return Err(Error::data("every neuron contains non-finite values"));
        }
        if keep.len() != manifest.n_neurons {
            responses = responses.select(Axis(1), &keep);
            neuron_ids = keep.iter().map(|&n| neuron_ids[n].clone()).collect();
        }
    }

    let stimulus_files = match manifest.stimuli {
        Some(list) => list,
        None => {
            let dir = path.join("stimuli");
            let mut names: Vec<String> = fs::read_dir(&dir)
                .map_err(|e| Error::data(format!("reading {}: {e}", dir.display())))?
                .filter_map(|entry| entry.ok())
                .map(|entry| format!("stimuli/{}", entry.file_name().to_string_lossy()))
                .collect();
            names.sort();
            names
        }
    };
    if stimulus_files.len() != manifest.n_stimuli {
        return Err(Error::data(format!(
            "{} stimulus files for {} stimuli",
            stimulus_files.len(),
            manifest.n_stimuli
        )));
    }
    let stimuli = load_stimulus_images(path, &stimulus_files)?;

    NeuralRecording::new(responses, stimuli, region, neuron_ids)
}

fn load_stimulus_images(root: &Path, files: &[String]) -> Result<ImageSet> {
    let mut images: Option<Array4<f32>> = None;
    for (i, rel) in files.iter().enumerate() {
        let p = root.join(rel);
        let img = image::open(&p)
            .map_err(|e| Error::data(format!("decoding {}: {e}", p.display())))?
            .to_rgb16();
        let (w, h) = img.dimensions();
        if w != h {
            return Err(Error::data(format!(
                "{}: non-square stimulus {w}x{h}",
                p.display()
            )));
        }
        let k = h as usize;
        let store = images.get_or_insert_with(|| Array4::zeros((files.len(), 3, k, k)));
        if store.dim().2 != k {
            return Err(Error::data(format!(
                "{}: size {k} differs from first stimulus size {}",
                p.display(),
                store.dim().2
            )));
        }
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                store[[i, c, y as usize, x as usize]] = px.0[c] as f32 / 65535.0;
            }
        }
    }
    let images = images.ok_or_else(|| Error::data("recording has no stimuli"))?;
    ImageSet::new(images, None, None)
}

/// Write a recording so that [`load_neural_recording`] reproduces the
/// response array bit-identically. Stimulus pixels are stored as 16-bit PNG;
/// values on the 1/255 grid survive exactly, arbitrary values are quantized
/// once and stable thereafter.
pub fn write_neural_recording(rec: &NeuralRecording, path: &Path) -> Result<()> {
    fs::create_dir_all(path.join("stimuli"))
        .map_err(|e| Error::data(format!("creating {}: {e}", path.display())))?;

    let stimulus_files: Vec<String> = (0..rec.n_stimuli())
        .map(|i| format!("stimuli/{i:05}.png"))
        .collect();
    let manifest = Manifest {
        region: rec.region.to_string(),
        n_stimuli: rec.n_stimuli(),
        n_neurons: rec.n_neurons(),
        n_repetitions: rec.n_repetitions(),
        dtype: "float32".into(),
        byte_order: "little-endian".into(),
        neuron_ids: Some(rec.neuron_ids.clone()),
        stimuli: Some(stimulus_files.clone()),
    };
    let manifest_path = path.join("manifest.json");
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::data(format!("writing {}: {e}", manifest_path.display())))?;

    let mut bytes = Vec::with_capacity(rec.responses.len() * 4);
    for &v in rec.responses.as_slice().expect("contiguous responses") {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path.join("responses.bin"), bytes)
        .map_err(|e| Error::data(format!("writing responses.bin: {e}")))?;

    let k = rec.stimuli.size() as u32;
    for (i, rel) in stimulus_files.iter().enumerate() {
        let mut img = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(k, k);
        let src = rec.stimuli.image(i);
        for (x, y, px) in img.enumerate_pixels_mut() {
            for c in 0..3 {
                let v = src[[c, y as usize, x as usize]];
                px.0[c] = (f64::from(v) * 65535.0).round().clamp(0.0, 65535.0) as u16;
            }
        }
        let p = path.join(rel);
        img.save(&p)
            .map_err(|e| Error::data(format!("writing {}: {e}", p.display())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use tempfile::TempDir;

    fn u8_grid_stimuli(count: usize, k: usize) -> ImageSet {
        let mut images = Array4::<f32>::zeros((count, 3, k, k));
        for i in 0..count {
            for c in 0..3 {
                for y in 0..k {
                    for x in 0..k {
                        let v = ((i * 31 + c * 17 + y * 7 + x * 3) % 256) as f32 / 255.0;
                        images[[i, c, y, x]] = v;
                    }
                }
            }
        }
        ImageSet::new(images, None, None).unwrap()
    }

    fn sample_recording() -> NeuralRecording {
        let stimuli = u8_grid_stimuli(4, 8);
        let mut responses = Array3::<f32>::zeros((4, 3, 2));
        for (idx, v) in responses.iter_mut().enumerate() {
            *v = (idx as f32 * 0.37 - 2.0).sin();
        }
        NeuralRecording::new(
            responses,
            stimuli,
            Region::IT,
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let rec = sample_recording();
        let dir = TempDir::new().unwrap();
        write_neural_recording(&rec, dir.path()).unwrap();
        let back = load_neural_recording(dir.path()).unwrap();
        assert_eq!(back.region, Region::IT);
        assert_eq!(back.neuron_ids, rec.neuron_ids);
        assert_eq!(
            rec.responses.as_slice().unwrap(),
            back.responses.as_slice().unwrap()
        );
        assert_eq!(
            rec.stimuli.images.as_slice().unwrap(),
            back.stimuli.images.as_slice().unwrap()
        );
    }

    #[test]
    fn quantization_is_idempotent_for_arbitrary_pixels() {
        let mut images = Array4::<f32>::zeros((1, 3, 4, 4));
        for (idx, v) in images.iter_mut().enumerate() {
            *v = ((idx as f32 * 0.618).sin() * 0.5 + 0.5).clamp(0.0, 1.0);
        }
        let stimuli = ImageSet::new(images, None, None).unwrap();
        let responses = Array3::<f32>::zeros((1, 1, 2));
        let rec =
            NeuralRecording::new(responses, stimuli, Region::V4, vec!["n".into()]).unwrap();

        let dir1 = TempDir::new().unwrap();
        write_neural_recording(&rec, dir1.path()).unwrap();
        let once = load_neural_recording(dir1.path()).unwrap();

        let dir2 = TempDir::new().unwrap();
        write_neural_recording(&once, dir2.path()).unwrap();
        let twice = load_neural_recording(dir2.path()).unwrap();
        assert_eq!(
            once.stimuli.images.as_slice().unwrap(),
            twice.stimuli.images.as_slice().unwrap()
        );
    }

    #[test]
    fn rejects_single_repetition_manifest() {
        let rec = sample_recording();
        let dir = TempDir::new().unwrap();
        write_neural_recording(&rec, dir.path()).unwrap();
        let manifest_path = dir.path().join("manifest.json");
        let text = fs::read_to_string(&manifest_path)
            .unwrap()
            .replace("\"n_repetitions\": 2", "\"n_repetitions\": 1");
        fs::write(&manifest_path, text).unwrap();
        assert!(load_neural_recording(dir.path()).is_err());
    }

    #[test]
    fn rejects_length_mismatch() {
        let rec = sample_recording();
        let dir = TempDir::new().unwrap();
        write_neural_recording(&rec, dir.path()).unwrap();
        let bin = dir.path().join("responses.bin");
        let mut raw = fs::read(&bin).unwrap();
        raw.truncate(raw.len() - 4);
        fs::write(&bin, raw).unwrap();
        assert!(load_neural_recording(dir.path()).is_err());
    }

    #[test]
    fn rejects_nan_by_default_drops_with_flag() {
        let rec = sample_recording();
        let dir = TempDir::new().unwrap();
        write_neural_recording(&rec, dir.path()).unwrap();
        // poison neuron 1's first value
        let bin = dir.path().join("responses.bin");
        let mut raw = fs::read(&bin).unwrap();
        let nan = f32::NAN.to_le_bytes();
        // stimulus 0, neuron 1, rep 0 -> flat index (0*3 + 1)*2 + 0 = 2
        raw[2 * 4..3 * 4].copy_from_slice(&nan);
        fs::write(&bin, raw).unwrap();

        assert!(load_neural_recording(dir.path()).is_err());
        let dropped = load_neural_recording_with(dir.path(), true).unwrap();
        assert_eq!(dropped.n_neurons(), 2);
        assert_eq!(dropped.neuron_ids, vec!["a".to_string(), "c".to_string()]);
    }
}
