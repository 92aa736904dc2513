//! On-disk dataset access: manifest parsing and sample loading.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::img_io;
use crate::scalar::Scalar;
use crate::synth::Split;
use crate::tensor::Tensor;

/// One manifest row. For image datasets `image`/`mask` are files; for
/// video datasets they are the frames/ and masks/ directories.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub split: Split,
    pub image: PathBuf,
    pub expr: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Read `<dir>/manifest.tsv`.
    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join("manifest.tsv");
        let text =
            std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Data(format!(
                    "{}: line {}: expected 4 tab-separated fields",
                    path.display(),
                    lineno + 1
                )));
            }
            let split = Split::parse(fields[0]).ok_or_else(|| {
                Error::Data(format!(
                    "{}: line {}: unknown split '{}'",
                    path.display(),
                    lineno + 1,
                    fields[0]
                ))
            })?;
            entries.push(ManifestEntry {
                split,
                image: dir.join(fields[1]),
                expr: dir.join(fields[2]),
                mask: dir.join(fields[3]),
            });
        }
        if entries.is_empty() {
            return Err(Error::Data(format!("{}: empty manifest", path.display())));
        }
        Ok(Manifest {
            root: dir.to_path_buf(),
            entries,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

/// A loaded image sample.
pub struct ImageSample<T: Scalar> {
    /// [3, H, W] in [0, 1].
    pub image: Tensor<T>,
    pub expression: String,
    /// Binary [H, W].
    pub mask: Tensor<T>,
}

pub fn load_image_sample<T: Scalar>(entry: &ManifestEntry) -> Result<ImageSample<T>> {
    let (w, h, rgb) = img_io::read_ppm(&entry.image)?;
    let expression = read_expression(&entry.expr)?;
    let (mw, mh, gray) = img_io::read_pgm(&entry.mask)?;
    if (mw, mh) != (w, h) {
        return Err(Error::Data(format!(
            "{}: mask {}x{} does not match image {}x{}",
            entry.mask.display(),
            mw,
            mh,
            w,
            h
        )));
    }
    Ok(ImageSample {
        image: img_io::rgb_to_tensor(&rgb, w, h),
        expression,
        mask: img_io::gray_to_mask_tensor(&gray, mw, mh),
    })
}

/// A loaded video sample: per-frame images and referent masks.
pub struct VideoSampleData<T: Scalar> {
    pub frames: Vec<Tensor<T>>,
    pub expression: String,
    pub masks: Vec<Tensor<T>>,
}

pub fn load_video_sample<T: Scalar>(entry: &ManifestEntry) -> Result<VideoSampleData<T>> {
    let frame_files = numbered_files(&entry.image)?;
    let mask_files = numbered_files(&entry.mask)?;
    if frame_files.is_empty() {
        return Err(Error::Data(format!(
            "{}: no frames found",
            entry.image.display()
        )));
    }
    if frame_files.len() != mask_files.len() {
        return Err(Error::Data(format!(
            "{}: {} frames but {} masks",
            entry.image.display(),
            frame_files.len(),
            mask_files.len()
        )));
    }
    let expression = read_expression(&entry.expr)?;
    let mut frames = Vec::with_capacity(frame_files.len());
    let mut masks = Vec::with_capacity(mask_files.len());
    for (f, m) in frame_files.iter().zip(mask_files.iter()) {
        let (w, h, rgb) = img_io::read_ppm(f)?;
        frames.push(img_io::rgb_to_tensor(&rgb, w, h));
        let (mw, mh, gray) = img_io::read_pgm(m)?;
        if (mw, mh) != (w, h) {
            return Err(Error::Data(format!(
                "{}: mask size mismatch",
                m.display()
            )));
        }
        masks.push(img_io::gray_to_mask_tensor(&gray, mw, mh));
    }
    Ok(VideoSampleData {
        frames,
        expression,
        masks,
    })
}

fn read_expression(path: &Path) -> Result<String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let line = text.lines().next().unwrap_or("").trim().to_string();
    if line.is_empty() {
        return Err(Error::Data(format!(
            "{}: empty expression file",
            path.display()
        )));
    }
    Ok(line)
}

/// Files of a directory sorted by name (frame_00000..., deterministic).
pub fn numbered_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_dataset, gen_video_dataset, SynthConfig};

    #[test]
    fn image_dataset_roundtrip() {
        let dir = std::env::temp_dir().join(format!("cmsa-data-img-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        gen_dataset(6, (0.5, 0.25, 0.25), 9, &dir, &SynthConfig::default()).unwrap();
        let manifest = Manifest::load(&dir).unwrap();
        assert_eq!(manifest.entries.len(), 6);
        assert_eq!(manifest.split(Split::Train).len(), 3);
        let sample: ImageSample<f32> = load_image_sample(manifest.split(Split::Train)[0]).unwrap();
        assert_eq!(sample.image.shape(), &[3, 64, 64]);
        assert_eq!(sample.mask.shape(), &[64, 64]);
        assert!(!sample.expression.is_empty());
        assert!(sample.mask.data().iter().any(|&v| v == 1.0));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn video_dataset_roundtrip() {
        let dir = std::env::temp_dir().join(format!("cmsa-data-vid-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = SynthConfig {
            video_frames: 4,
            ..SynthConfig::default()
        };
        gen_video_dataset(2, (0.5, 0.5, 0.0), 3, &dir, &cfg).unwrap();
        let manifest = Manifest::load(&dir).unwrap();
        assert_eq!(manifest.entries.len(), 2);
        let clip: VideoSampleData<f32> = load_video_sample(&manifest.entries[0]).unwrap();
        assert_eq!(clip.frames.len(), 4);
        assert_eq!(clip.masks.len(), 4);
        assert_eq!(clip.frames[0].shape(), &[3, 64, 64]);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn malformed_manifest_is_data_error() {
        let dir = std::env::temp_dir().join(format!("cmsa-data-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("manifest.tsv"), "train\tonly-two-fields\n").unwrap();
        assert!(Manifest::load(&dir).is_err());
        std::fs::write(dir.join("manifest.tsv"), "dev\ta\tb\tc\n").unwrap();
        assert!(Manifest::load(&dir).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
