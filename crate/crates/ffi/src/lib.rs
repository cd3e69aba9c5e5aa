//! C ABI over `darnet-core`.
//!
//! Every fallible function returns a [`DarnetStatus`]; on failure the message
//! is available from [`darnet_last_error_message`] on the same thread. Handles
//! are opaque and owned by the caller once returned; release them with the
//! matching `_free` function. Images are row-major H×W×3 `double` in [0, 1],
//! masks row-major H×W bytes holding 0 or 1.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use darnet_core::arsm::adaptive_delta;
use darnet_core::backbone::{load_feature_file, save_feature_file};
use darnet_core::checkpoint::{load_checkpoint, save_checkpoint};
use darnet_core::config::Config;
use darnet_core::episode_store::{Episode, LabeledImage};
use darnet_core::eval_harness::{binarize, iou, upsample_prediction};
use darnet_core::model::{AblationFlags, DarnetModel as CoreModel};
use darnet_core::prototype_matching::{cosine_map, masked_average_pool};
use darnet_core::tta_driver::TtaConfig;
use darnet_core::{DarnetError, FeatureMap};
use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DarnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    MalformedFile = 5,
    DegenerateInput = 6,
    InvalidConfig = 7,
    Panic = 8,
    Internal = 9,
}

/// Model with its configuration.
pub struct DarnetModel {
    model: CoreModel,
    tta: TtaConfig,
    flags: AblationFlags,
}

/// A C×H×W feature map.
pub struct DarnetFeatureMap(FeatureMap);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &DarnetError) -> DarnetStatus {
    match e {
        DarnetError::Io { .. } | DarnetError::Image { .. } => DarnetStatus::Io,
        DarnetError::MalformedFeatureFile(_) | DarnetError::MalformedCheckpoint(_) => {
            DarnetStatus::MalformedFile
        }
        DarnetError::ShapeMismatch(_)
        | DarnetError::ChannelMismatch { .. }
        | DarnetError::NonDivisibleTile { .. } => DarnetStatus::ShapeMismatch,
        DarnetError::DegenerateEpisode(_)
        | DarnetError::InvalidPrototype(_)
        | DarnetError::InsufficientRecords { .. }
        | DarnetError::MissingMask { .. } => DarnetStatus::DegenerateInput,
        DarnetError::InvalidConfig(_) => DarnetStatus::InvalidConfig,
        _ => DarnetStatus::Internal,
    }
}

struct Fail(DarnetStatus, String);

impl From<DarnetError> for Fail {
    fn from(e: DarnetError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

type FfiResult = std::result::Result<(), Fail>;

fn guard(f: impl FnOnce() -> FfiResult) -> DarnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DarnetStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            DarnetStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(DarnetStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(DarnetStatus::InvalidArgument, msg.into())
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> std::result::Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(
    p: *mut T,
    len: usize,
    what: &str,
) -> std::result::Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> std::result::Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> std::result::Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not UTF-8")))
}

fn area(h: usize, w: usize) -> std::result::Result<usize, Fail> {
    h.checked_mul(w)
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid(format!("bad size {h}x{w}")))
}

/// Message of the last failed call on this thread, or "" after a success.
/// The pointer stays valid until the next call into this library.
#[no_mangle]
pub extern "C" fn darnet_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static, nul-terminated library version.
#[no_mangle]
pub extern "C" fn darnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn model_from_config(cfg: &Config) -> std::result::Result<DarnetModel, Fail> {
    let mut model = cfg.build_model()?;
    if let Some(ck) = &cfg.eval.checkpoint {
        load_checkpoint(ck, &mut model)?;
    }
    Ok(DarnetModel {
        model,
        tta: cfg.tta.clone(),
        flags: cfg.flags()?,
    })
}

/// Builds a model from a TOML configuration file, loading
/// `eval.checkpoint` when set.
///
/// # Safety
/// `config_path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn darnet_model_from_config_file(
    config_path: *const c_char,
    out: *mut *mut DarnetModel,
) -> DarnetStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg = Config::load(str_arg(config_path, "config_path")?)?;
        *out = Box::into_raw(Box::new(model_from_config(&cfg)?));
        Ok(())
    })
}

/// Builds a model from TOML text; an empty string gives the defaults.
///
/// # Safety
/// `toml` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn darnet_model_from_config_str(
    toml: *const c_char,
    out: *mut *mut DarnetModel,
) -> DarnetStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg = Config::from_toml(str_arg(toml, "toml")?)?;
        *out = Box::into_raw(Box::new(model_from_config(&cfg)?));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn darnet_model_free(model: *mut DarnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn darnet_model_load_checkpoint(
    model: *mut DarnetModel,
    path: *const c_char,
) -> DarnetStatus {
    guard(|| {
        let m = out_ptr(model, "model")?;
        load_checkpoint(str_arg(path, "path")?, &mut m.model)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn darnet_model_save_checkpoint(
    model: *const DarnetModel,
    path: *const c_char,
) -> DarnetStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        save_checkpoint(str_arg(path, "path")?, &m.model)?;
        Ok(())
    })
}

/// Sets the ablation flags used by [`darnet_segment`], e.g. "sm,arsm,tta"
/// or "baseline".
///
/// # Safety
/// `model` must be a live handle and `flags` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn darnet_model_set_flags(
    model: *mut DarnetModel,
    flags: *const c_char,
) -> DarnetStatus {
    guard(|| {
        let m = out_ptr(model, "model")?;
        m.flags = str_arg(flags, "flags")?.parse()?;
        Ok(())
    })
}

/// Number of feature channels the extractor produces.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn darnet_model_feature_channels(
    model: *const DarnetModel,
    out: *mut usize,
) -> DarnetStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out_ptr(out, "out")? = m.model.extractor.out_channels();
        Ok(())
    })
}

unsafe fn image_arg(
    p: *const f64,
    h: usize,
    w: usize,
    what: &str,
) -> std::result::Result<Array3<f64>, Fail> {
    let n = area(h, w)?
        .checked_mul(3)
        .ok_or_else(|| invalid("image too large"))?;
    let data = slice(p, n, what)?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(invalid(format!("`{what}` holds non-finite values")));
    }
    Ok(Array3::from_shape_vec((h, w, 3), data.to_vec()).expect("length checked"))
}

unsafe fn mask_arg(
    p: *const u8,
    h: usize,
    w: usize,
    what: &str,
) -> std::result::Result<Array2<u8>, Fail> {
    let data = slice(p, area(h, w)?, what)?;
    if data.iter().any(|&v| v > 1) {
        return Err(invalid(format!("`{what}` must hold only 0 and 1")));
    }
    Ok(Array2::from_shape_vec((h, w), data.to_vec()).expect("length checked"))
}

/// Runs the extractor (inference mode) on one image.
///
/// # Safety
/// `image` must point to `height*width*3` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn darnet_model_extract(
    model: *const DarnetModel,
    image: *const f64,
    height: usize,
    width: usize,
    out: *mut *mut DarnetFeatureMap,
) -> DarnetStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out_ptr(out, "out")?;
        let img = image_arg(image, height, width, "image")?;
        let f = m.model.features(&img, &mut ChaCha8Rng::seed_from_u64(0))?;
        *out = Box::into_raw(Box::new(DarnetFeatureMap(f)));
        Ok(())
    })
}

/// Segments one query from `k_shot` labeled supports of the same size.
///
/// `support_images` holds `k_shot` images back to back and `support_masks`
/// the matching masks. `out_mask` receives the binary prediction at image
/// resolution; `out_fg`, when non-null, the foreground confidence. `seed`
/// drives the test-time augmentations.
///
/// # Safety
/// All buffers must have the sizes stated above.
#[no_mangle]
pub unsafe extern "C" fn darnet_segment(
    model: *const DarnetModel,
    support_images: *const f64,
    support_masks: *const u8,
    k_shot: usize,
    query_image: *const f64,
    height: usize,
    width: usize,
    seed: u64,
    out_mask: *mut u8,
    out_fg: *mut f64,
) -> DarnetStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if k_shot == 0 {
            return Err(invalid("k_shot must be positive"));
        }
        let n = area(height, width)?;
        let imgs = slice(
            support_images,
            n.checked_mul(3 * k_shot)
                .ok_or_else(|| invalid("too large"))?,
            "support_images",
        )?;
        let masks = slice(support_masks, n * k_shot, "support_masks")?;
        let mut support = Vec::with_capacity(k_shot);
        for k in 0..k_shot {
            let img = image_arg(imgs[k * 3 * n..].as_ptr(), height, width, "support_images")?;
            let mask = mask_arg(masks[k * n..].as_ptr(), height, width, "support_masks")?;
            support.push(LabeledImage::new(img, mask, 0, format!("support{k}"))?);
        }
        let query = LabeledImage::new(
            image_arg(query_image, height, width, "query_image")?,
            Array2::zeros((height, width)),
            0,
            "query",
        )?;
        let out_mask = slice_mut(out_mask, n, "out_mask")?;
        let episode = Episode {
            support,
            query: vec![query],
            n_way: 1,
            k_shot,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = m
            .model
            .predict_episode(&episode, m.flags, &m.tta, &mut rng)?;
        let up = upsample_prediction(&pred.queries[0].prediction, height, width);
        out_mask.copy_from_slice(binarize(&up).as_slice().expect("standard layout"));
        if !out_fg.is_null() {
            slice_mut(out_fg, n, "out_fg")?
                .iter_mut()
                .zip(up.fg.iter())
                .for_each(|(o, &v)| *o = v);
        }
        Ok(())
    })
}

/// Copies a row-major C×H×W buffer into a new feature map.
///
/// # Safety
/// `data` must point to `channels*height*width` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn darnet_feature_map_new(
    data: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut *mut DarnetFeatureMap,
) -> DarnetStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let n = area(height, width)?
            .checked_mul(channels)
            .filter(|&n| n > 0)
            .ok_or_else(|| invalid("bad feature map size"))?;
        let values = slice(data, n, "data")?.to_vec();
        let arr = Array3::from_shape_vec((channels, height, width), values).expect("length checked");
        *out = Box::into_raw(Box::new(DarnetFeatureMap(FeatureMap::new(arr, 1)?)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn darnet_feature_map_load(
    path: *const c_char,
    out: *mut *mut DarnetFeatureMap,
) -> DarnetStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let f = load_feature_file(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(DarnetFeatureMap(f)));
        Ok(())
    })
}

/// # Safety
/// `map` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn darnet_feature_map_save(
    map: *const DarnetFeatureMap,
    path: *const c_char,
) -> DarnetStatus {
    guard(|| {
        let f = map.as_ref().ok_or_else(|| null("map"))?;
        save_feature_file(str_arg(path, "path")?, &f.0)?;
        Ok(())
    })
}

/// # Safety
/// `map` must be a live handle; each output pointer must be valid.
#[no_mangle]
pub unsafe extern "C" fn darnet_feature_map_shape(
    map: *const DarnetFeatureMap,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> DarnetStatus {
    guard(|| {
        let f = &map.as_ref().ok_or_else(|| null("map"))?.0;
        *out_ptr(channels, "channels")? = f.channels();
        *out_ptr(height, "height")? = f.height();
        *out_ptr(width, "width")? = f.width();
        Ok(())
    })
}

/// Copies the values out in C×H×W order. `len` must equal C·H·W.
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn darnet_feature_map_data(
    map: *const DarnetFeatureMap,
    out: *mut f64,
    len: usize,
) -> DarnetStatus {
    guard(|| {
        let f = &map.as_ref().ok_or_else(|| null("map"))?.0;
        if len != f.data().len() {
            return Err(Fail(
                DarnetStatus::ShapeMismatch,
                format!("buffer holds {len} values, map has {}", f.data().len()),
            ));
        }
        let out = slice_mut(out, len, "out")?;
        for (o, v) in out.iter_mut().zip(f.data().iter()) {
            *o = *v;
        }
        Ok(())
    })
}

/// # Safety
/// `map` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn darnet_feature_map_free(map: *mut DarnetFeatureMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Masked average pooling. `mask` is H×W at the map's resolution; `out`
/// receives C values and `out_count` the number of masked pixels. An empty
/// mask yields a zero vector and a count of zero.
///
/// # Safety
/// `mask` must hold H·W bytes and `out` C doubles.
#[no_mangle]
pub unsafe extern "C" fn darnet_masked_average_pool(
    map: *const DarnetFeatureMap,
    mask: *const u8,
    out: *mut f64,
    out_count: *mut usize,
) -> DarnetStatus {
    guard(|| {
        let f = &map.as_ref().ok_or_else(|| null("map"))?.0;
        let m = slice(mask, f.height() * f.width(), "mask")?;
        let view = ArrayView2::from_shape(f.spatial(), m).expect("length checked");
        let (p, count) = masked_average_pool(f, view)?;
        slice_mut(out, f.channels(), "out")?.copy_from_slice(p.as_slice().expect("contiguous"));
        if !out_count.is_null() {
            *out_count = count;
        }
        Ok(())
    })
}

/// Cosine similarity of a C-vector with every pixel; `out` receives H·W values.
///
/// # Safety
/// `prototype` must hold `channels` doubles and `out` H·W doubles.
#[no_mangle]
pub unsafe extern "C" fn darnet_cosine_map(
    map: *const DarnetFeatureMap,
    prototype: *const f64,
    channels: usize,
    out: *mut f64,
) -> DarnetStatus {
    guard(|| {
        let f = &map.as_ref().ok_or_else(|| null("map"))?.0;
        let p = Array1::from(slice(prototype, channels, "prototype")?.to_vec());
        let cm = cosine_map(&p, f)?;
        slice_mut(out, f.height() * f.width(), "out")?
            .copy_from_slice(cm.as_slice().expect("standard layout"));
        Ok(())
    })
}

/// Adaptive threshold shift δ for one episode.
///
/// # Safety
/// `out_delta` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn darnet_adaptive_delta(
    fb_q: f64,
    fb_s: f64,
    sim_num: usize,
    union_num: usize,
    kappa: f64,
    lambda_mix: f64,
    out_delta: *mut f64,
) -> DarnetStatus {
    guard(|| {
        let out = out_ptr(out_delta, "out_delta")?;
        *out = adaptive_delta(fb_q, fb_s, sim_num, union_num, kappa, lambda_mix)?.delta;
        Ok(())
    })
}

/// IoU of two binary H×W masks; two empty masks score 1.
///
/// # Safety
/// `pred` and `gt` must each hold H·W bytes.
#[no_mangle]
pub unsafe extern "C" fn darnet_iou(
    pred: *const u8,
    gt: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
) -> DarnetStatus {
    guard(|| {
        let n = area(height, width)?;
        let p = ArrayView2::from_shape((height, width), slice(pred, n, "pred")?).expect("sized");
        let g = ArrayView2::from_shape((height, width), slice(gt, n, "gt")?).expect("sized");
        *out_ptr(out, "out")? = iou(p, g)?;
        Ok(())
    })
}
