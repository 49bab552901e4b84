//! Synthetic dataset generation, on-disk format, labeled/unlabeled splitting
//! and the weak/strong augmentation pipelines.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/train/annotations.json
//! <dir>/train/images/<image_id>.png
//! <dir>/test/annotations.json
//! <dir>/test/images/<image_id>.png
//! ```

mod augment;
mod shapes;

use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::boxgeom::Annotation;
use crate::error::{Error, Result};
use crate::pixels::Image;
use crate::rng::stream_rng;

pub use augment::{
    cutout, flip_decision, gaussian_blur, strong_augment, weak_augment, AugmentationConfig,
};
pub use shapes::{render_scene, ShapeKind, ShapesConfig};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub pixels: Image,
    pub annotations: Vec<Annotation>,
}

/// One record of a split's annotation document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<Annotation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitRole {
    TrainLabeled,
    TrainUnlabeled,
    Test,
}

/// Provenance of a labeled/unlabeled partition of the training images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSplit {
    pub fraction: f64,
    pub seed: u64,
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub generator_seed: u64,
    pub generator: ShapesConfig,
    pub class_names: Vec<String>,
    pub image_size: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled: Option<LabeledSplit>,
}

impl DatasetManifest {
    pub fn role_of(&self, image_id: &str) -> Option<SplitRole> {
        if self.test_ids.iter().any(|i| i == image_id) {
            return Some(SplitRole::Test);
        }
        let split = self.labeled.as_ref()?;
        if split.labeled_ids.iter().any(|i| i == image_id) {
            Some(SplitRole::TrainLabeled)
        } else if split.unlabeled_ids.iter().any(|i| i == image_id) {
            Some(SplitRole::TrainUnlabeled)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<AnnotatedImage>,
    pub test: Vec<AnnotatedImage>,
}

/// Renders the whole dataset in memory; deterministic in `(config, seed)`.
pub fn generate_dataset(config: &ShapesConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let train: Vec<AnnotatedImage> = (0..config.n_train)
        .map(|i| render_scene(config, seed, "train", i))
        .collect();
    let test: Vec<AnnotatedImage> = (0..config.n_test)
        .map(|i| render_scene(config, seed, "test", i))
        .collect();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        generator_seed: seed,
        generator: config.clone(),
        class_names: config.class_names(),
        image_size: config.image_size,
        train_ids: train.iter().map(|a| a.image_id.clone()).collect(),
        test_ids: test.iter().map(|a| a.image_id.clone()).collect(),
        labeled: None,
    };
    Ok(Dataset {
        manifest,
        train,
        test,
    })
}

/// Picks `floor(fraction * N)` training ids uniformly without replacement as
/// labeled; the rest are unlabeled. Ids keep dataset order within each side.
pub fn split_labeled(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "labeled fraction {fraction} must lie in (0, 1)"
        )));
    }
    let n = manifest.train_ids.len();
    let k = (fraction * n as f64).floor() as usize;
    if k == 0 {
        return Err(Error::Config(format!(
            "labeled fraction {fraction} of {n} images selects no image"
        )));
    }
    let mut rng = stream_rng(seed, "split", &[]);
    let mut chosen = vec![false; n];
    for i in sample(&mut rng, n, k) {
        chosen[i] = true;
    }
    let (mut labeled_ids, mut unlabeled_ids) = (Vec::with_capacity(k), Vec::with_capacity(n - k));
    for (id, &c) in manifest.train_ids.iter().zip(&chosen) {
        if c {
            labeled_ids.push(id.clone());
        } else {
            unlabeled_ids.push(id.clone());
        }
    }
    Ok(DatasetManifest {
        labeled: Some(LabeledSplit {
            fraction,
            seed,
            labeled_ids,
            unlabeled_ids,
        }),
        ..manifest.clone()
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    read_json(&dir.join("manifest.json"))
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    read_json(path)
}

fn save_png(path: &Path, img: &Image) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let px = std::array::from_fn(|c| (img.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn load_png(path: &Path) -> Result<Image> {
    let buf = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut img = Image::new(3, h, w);
    for (x, y, p) in buf.enumerate_pixels() {
        for c in 0..3 {
            img.set(c, y as usize, x as usize, p.0[c] as f32 / 255.0);
        }
    }
    Ok(img)
}

fn records(images: &[AnnotatedImage]) -> Vec<AnnotationRecord> {
    images
        .iter()
        .map(|a| AnnotationRecord {
            image_id: a.image_id.clone(),
            width: a.pixels.width,
            height: a.pixels.height,
            objects: a.annotations.clone(),
        })
        .collect()
}

pub fn write_split(dir: &Path, split: &str, images: &[AnnotatedImage]) -> Result<()> {
    let img_dir = dir.join(split).join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for a in images {
        save_png(&img_dir.join(format!("{}.png", a.image_id)), &a.pixels)?;
    }
    write_json(&dir.join(split).join("annotations.json"), &records(images))
}

pub fn read_split(dir: &Path, split: &str) -> Result<Vec<AnnotatedImage>> {
    let recs = read_annotations(&dir.join(split).join("annotations.json"))?;
    recs.into_iter()
        .map(|r| {
            let path = dir.join(split).join("images").join(format!("{}.png", r.image_id));
            let pixels = load_png(&path)?;
            if pixels.width != r.width || pixels.height != r.height {
                return Err(Error::Config(format!(
                    "{}: annotation says {}x{}, image is {}x{}",
                    r.image_id, r.width, r.height, pixels.width, pixels.height
                )));
            }
            Ok(AnnotatedImage {
                image_id: r.image_id,
                pixels,
                annotations: r.objects,
            })
        })
        .collect()
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    write_split(dir, "train", &ds.train)?;
    write_split(dir, "test", &ds.test)?;
    write_json(&dir.join("manifest.json"), &ds.manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Config(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    Ok(Dataset {
        train: read_split(dir, "train")?,
        test: read_split(dir, "test")?,
        manifest,
    })
}
