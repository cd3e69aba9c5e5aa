use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{resize, tile_image, ClassRecords, Dataset, LabeledImage};
use crate::error::{DarnetError, Result};

/// On-disk layout: `<root>/<class>/images/*.{png,jpg,jpeg}` with masks at
/// `<root>/<class>/masks/<stem>.png`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetLayout {
    pub root: PathBuf,
    /// Cut each record into square tiles of this size before resizing.
    #[serde(default)]
    pub tile: Option<usize>,
    #[serde(default)]
    pub resize: Option<usize>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = std::fs::read_dir(dir)
        .map_err(|e| DarnetError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| DarnetError::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| DarnetError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read_record(
    image_path: &Path,
    mask_path: &Path,
    class_id: usize,
    source_id: String,
) -> Result<LabeledImage> {
    let rgb = open(image_path)?.to_rgb8();
    let luma = open(mask_path)?.to_luma8();
    let (w, h) = rgb.dimensions();
    if luma.dimensions() != (w, h) {
        return Err(DarnetError::ShapeMismatch(format!(
            "{}: image {w}x{h} vs mask {}x{}",
            image_path.display(),
            luma.width(),
            luma.height()
        )));
    }
    let (h, w) = (h as usize, w as usize);
    let image = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    });
    let mask = Array2::from_shape_fn((h, w), |(y, x)| {
        u8::from(luma.get_pixel(x as u32, y as u32)[0] > 0)
    });
    LabeledImage::new(image, mask, class_id, source_id)
}

/// Loads every class directory under the root, in sorted order.
pub fn load_dataset(layout: &DatasetLayout) -> Result<Dataset> {
    let mut classes = Vec::new();
    for class_dir in sorted_entries(&layout.root)? {
        if !class_dir.is_dir() {
            continue;
        }
        let name = class_dir
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        let class_id = classes.len();
        let mut records = Vec::new();
        for image_path in sorted_entries(&class_dir.join("images"))? {
            if !is_image(&image_path) {
                continue;
            }
            let stem = image_path
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            let mask_path = class_dir.join("masks").join(format!("{stem}.png"));
            if !mask_path.exists() {
                return Err(DarnetError::MissingMask { class: name, stem });
            }
            let record = read_record(&image_path, &mask_path, class_id, format!("{name}/{stem}"))?;
            let pieces = match layout.tile {
                Some(t) => tile_image(&record, t)?,
                None => vec![record],
            };
            records.extend(pieces.into_iter().map(|r| match layout.resize {
                Some(size) => resize(&r, size),
                None => r,
            }));
        }
        classes.push(ClassRecords { name, records });
    }
    Ok(Dataset::new(classes))
}
