use ndarray::{s, Array2, Array3};

use super::LabeledImage;
use crate::error::{DarnetError, Result};

/// Cuts the record into non-overlapping `tile`×`tile` pieces in row-major
/// order, dropping tiles whose mask holds a single value.
pub fn tile_image(img: &LabeledImage, tile: usize) -> Result<Vec<LabeledImage>> {
    let (h, w) = (img.height(), img.width());
    if tile == 0 || h % tile != 0 || w % tile != 0 {
        return Err(DarnetError::NonDivisibleTile {
            tile,
            height: h,
            width: w,
        });
    }
    let mut tiles = Vec::new();
    for ty in 0..h / tile {
        for tx in 0..w / tile {
            let (y0, x0) = (ty * tile, tx * tile);
            let mask = img.mask.slice(s![y0..y0 + tile, x0..x0 + tile]).to_owned();
            let first = mask[[0, 0]];
            if mask.iter().all(|&m| m == first) {
                continue;
            }
            tiles.push(LabeledImage {
                image: img
                    .image
                    .slice(s![y0..y0 + tile, x0..x0 + tile, ..])
                    .to_owned(),
                mask,
                class_id: img.class_id,
                source_id: format!("{}#{ty}_{tx}", img.source_id),
            });
        }
    }
    Ok(tiles)
}

fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5
}

/// Bilinear resampling (half-pixel centers, edge clamped) of an H×W×C array.
pub(crate) fn bilinear(image: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = image.dim();
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let mut out = Array3::zeros((out_h, out_w, c));
    for y in 0..out_h {
        let sy = source_coord(y, h, out_h).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for x in 0..out_w {
            let sx = source_coord(x, w, out_w).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let top = image[[y0, x0, ch]] * (1.0 - fx) + image[[y0, x1, ch]] * fx;
                let bottom = image[[y1, x0, ch]] * (1.0 - fx) + image[[y1, x1, ch]] * fx;
                out[[y, x, ch]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Bilinear resize of a single-channel map.
pub(crate) fn bilinear2(map: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let as3 = map
        .view()
        .into_shape_with_order((h, w, 1))
        .expect("shape")
        .to_owned();
    bilinear(&as3, out_h, out_w)
        .into_shape_with_order((out_h, out_w))
        .expect("shape")
}

/// Resizes to `size`×`size`: bilinear for the image, nearest for the mask.
pub fn resize(img: &LabeledImage, size: usize) -> LabeledImage {
    let size = size.max(1);
    LabeledImage {
        image: bilinear(&img.image, size, size),
        mask: crate::prototype_matching::downsample_mask(img.mask.view(), size, size),
        class_id: img.class_id,
        source_id: img.source_id.clone(),
    }
}
