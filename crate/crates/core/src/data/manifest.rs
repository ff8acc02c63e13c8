//! On-disk dataset layout: PNG images, VOC XML annotations and a JSON
//! manifest tying them together.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::voc::{parse_voc_annotation, write_voc_annotation, ClassMap, VocAnnotation};
use super::{AnnotatedImage, ImageSource};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub image_path: PathBuf,
    pub annotation_path: PathBuf,
    pub split: Split,
    #[serde(default = "default_source")]
    pub source: ImageSource,
}

fn default_source() -> ImageSource {
    ImageSource::Real
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn ids(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Writes `img` as `images/<id>.png` + `annotations/<id>.xml` under `root`
/// and returns the manifest entry.
pub fn write_sample(root: &Path, img: &AnnotatedImage, split: Split) -> Result<ManifestEntry> {
    let image_path = PathBuf::from("images").join(format!("{}.png", img.id));
    let annotation_path = PathBuf::from("annotations").join(format!("{}.xml", img.id));
    for dir in ["images", "annotations"] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    img.image.save(root.join(&image_path))?;
    let ann = VocAnnotation {
        filename: format!("{}.png", img.id),
        width: img.width(),
        height: img.height(),
        objects: img.boxes.clone(),
    };
    let p = root.join(&annotation_path);
    std::fs::write(&p, write_voc_annotation(&ann)).map_err(|e| Error::io(&p, e))?;
    Ok(ManifestEntry {
        id: img.id.clone(),
        image_path,
        annotation_path,
        split,
        source: img.source,
    })
}

pub fn read_sample(root: &Path, entry: &ManifestEntry, classes: &ClassMap) -> Result<AnnotatedImage> {
    let image = image::open(root.join(&entry.image_path))?.to_rgb8();
    let p = root.join(&entry.annotation_path);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let ann = parse_voc_annotation(&text, classes)?;
    if (ann.width, ann.height) != (image.width(), image.height()) {
        return Err(Error::Validation(format!(
            "{}: annotation says {}x{}, image is {}x{}",
            entry.id,
            ann.width,
            ann.height,
            image.width(),
            image.height()
        )));
    }
    let img = AnnotatedImage {
        id: entry.id.clone(),
        image,
        boxes: ann.objects,
        source: entry.source,
    };
    img.validate()?;
    Ok(img)
}
