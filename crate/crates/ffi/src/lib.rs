//! C ABI over the endoseg pipeline.
//!
//! Objects cross the boundary as opaque handles released with the matching
//! `*_free`. Every fallible call
//! returns an [`EndosegStatus`]; on failure the message is available from
//! [`endoseg_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use endoseg::annotation::{self, Edit, EditSession, Outcome};
use endoseg::distance_codec;
use endoseg::grid::{Grid, Roi};
use endoseg::image_io::{GrayImage, Scale, SegMasks};
use endoseg::morphometry::{self, HexNeighbors, MorphoReport};
use endoseg::pipeline;
use endoseg::postprocess::{self, LabelMap, RegionClass};
use endoseg::unet::{self, Net};
use endoseg::Error;

/// Result codes. Zero is success; all failures are negative.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndosegStatus {
    Ok = 0,
    /// The edit was valid but changed nothing (e.g. a cut that does not
    /// disconnect its region).
    Unchanged = 1,
    NullPointer = -1,
    InvalidArgument = -2,
    Io = -3,
    Format = -4,
    Weights = -5,
    UnknownLabel = -6,
    NotAdjacent = -7,
    CrossClassMerge = -8,
    EmptyHistory = -9,
    InvalidMasks = -10,
    Panic = -98,
    Other = -99,
}

impl From<&Error> for EndosegStatus {
    fn from(e: &Error) -> Self {
        match e.kind() {
            "io" => EndosegStatus::Io,
            "codec" | "json" | "unsupported_format" | "page_count" => EndosegStatus::Format,
            "weights" => EndosegStatus::Weights,
            "unknown_label" => EndosegStatus::UnknownLabel,
            "not_adjacent" => EndosegStatus::NotAdjacent,
            "cross_class_merge" => EndosegStatus::CrossClassMerge,
            "empty_history" => EndosegStatus::EmptyHistory,
            "invalid_masks" => EndosegStatus::InvalidMasks,
            "invalid_argument" | "dimension_mismatch" | "config" | "empty_input" | "roi_too_small" => {
                EndosegStatus::InvalidArgument
            }
            _ => EndosegStatus::Other,
        }
    }
}

/// Region class codes used across the ABI.
pub const ENDOSEG_CLASS_NONE: u8 = 0;
pub const ENDOSEG_CLASS_CELL: u8 = 1;
pub const ENDOSEG_CLASS_GUTTA: u8 = 2;

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| {
        let mut bytes = msg.into_bytes();
        bytes.retain(|&b| b != 0);
        bytes.push(0);
        *e.borrow_mut() = bytes;
    });
}

fn fail(status: EndosegStatus, msg: impl Into<String>) -> EndosegStatus {
    set_error(msg.into());
    status
}

fn fail_with(e: Error) -> EndosegStatus {
    let status = EndosegStatus::from(&e);
    fail(status, e.to_string())
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<EndosegStatus, EndosegStatus>) -> EndosegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) | Ok(Err(s)) => s,
        Err(_) => fail(EndosegStatus::Panic, "internal panic"),
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, EndosegStatus>;
}

impl<T> OrStatus<T> for endoseg::Result<T> {
    fn or_status(self) -> Result<T, EndosegStatus> {
        self.map_err(fail_with)
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, EndosegStatus> {
    if p.is_null() {
        return Err(fail(EndosegStatus::NullPointer, "path is null"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(EndosegStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], EndosegStatus> {
    if p.is_null() {
        return Err(fail(EndosegStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, EndosegStatus> {
    p.as_ref().ok_or_else(|| fail(EndosegStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, EndosegStatus> {
    p.as_mut().ok_or_else(|| fail(EndosegStatus::NullPointer, format!("{what} is null")))
}

fn pixels(width: usize, height: usize) -> Result<usize, EndosegStatus> {
    width
        .checked_mul(height)
        .filter(|&n| n > 0)
        .ok_or_else(|| fail(EndosegStatus::InvalidArgument, format!("bad image size {width}x{height}")))
}

fn class_code(c: Option<RegionClass>) -> u8 {
    match c {
        None => ENDOSEG_CLASS_NONE,
        Some(RegionClass::Cell) => ENDOSEG_CLASS_CELL,
        Some(RegionClass::Gutta) => ENDOSEG_CLASS_GUTTA,
    }
}

fn class_from(code: u8) -> Result<RegionClass, EndosegStatus> {
    match code {
        ENDOSEG_CLASS_CELL => Ok(RegionClass::Cell),
        ENDOSEG_CLASS_GUTTA => Ok(RegionClass::Gutta),
        _ => Err(fail(EndosegStatus::InvalidArgument, format!("bad class code {code}"))),
    }
}

/// Copies the calling thread's last error message (NUL-terminated, truncated
/// to `cap` bytes) into `buf`. Returns the full message length without the
/// terminator; 0 when there is none.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn endoseg_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let len = e.len().saturating_sub(1);
        if !buf.is_null() && cap > 0 {
            let n = len.min(cap - 1);
            ptr::copy_nonoverlapping(e.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        len
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn endoseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Trained network.
pub struct EndosegModel(Net);

/// Labeled regions with their classes.
pub struct EndosegLabelMap(LabelMap);

/// Annotation editing session.
pub struct EndosegSession(EditSession);

/// Morphometry summary. Undefined parameters are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct EndosegReport {
    pub cd: f64,
    pub mca: f64,
    pub hex_pct: f64,
    pub cv_pct: f64,
    pub gar_pct: f64,
    pub n_cells: u32,
    pub n_guttae: u32,
    pub analyzed_area_mm2: f64,
}

impl From<&MorphoReport> for EndosegReport {
    fn from(r: &MorphoReport) -> Self {
        EndosegReport {
            cd: r.cd,
            mca: r.mca.unwrap_or(f64::NAN),
            hex_pct: r.hex_pct.unwrap_or(f64::NAN),
            cv_pct: r.cv_pct.unwrap_or(f64::NAN),
            gar_pct: r.gar_pct,
            n_cells: r.n_cells as u32,
            n_guttae: r.n_guttae as u32,
            analyzed_area_mm2: r.analyzed_area_mm2,
        }
    }
}

/// Loads a weights file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn endoseg_model_load(path: *const c_char, out: *mut *mut EndosegModel) -> EndosegStatus {
    guard(|| {
        let out = handle_mut(out, "out")?;
        let model = unet::load_model(path_arg(path)?).or_status()?;
        *out = Box::into_raw(Box::new(EndosegModel(model)));
        Ok(EndosegStatus::Ok)
    })
}

/// # Safety
/// `model` must be null or a handle from [`endoseg_model_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn endoseg_model_free(model: *mut EndosegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Segments a row-major `width`×`height` image.
///
/// # Safety
/// `image` must hold `width*height` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn endoseg_segment(
    model: *const EndosegModel,
    image: *const f32,
    width: usize,
    height: usize,
    out: *mut *mut EndosegLabelMap,
) -> EndosegStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let out = handle_mut(out, "out")?;
        let px = slice_arg(image, pixels(width, height)?, "image")?;
        let grid = Grid::from_vec(width, height, px.to_vec()).or_status()?;
        let map = pipeline::segment(&model.0, &GrayImage::new(grid, Scale::default()), &Default::default()).or_status()?;
        *out = Box::into_raw(Box::new(EndosegLabelMap(map)));
        Ok(EndosegStatus::Ok)
    })
}

/// Encodes binary masks (nonzero = foreground) as a signed distance map
/// written to `out_map` (`width*height` floats).
///
/// # Safety
/// `cells`, `guttae` must hold `width*height` bytes and `out_map` as many
/// floats.
#[no_mangle]
pub unsafe extern "C" fn endoseg_encode_masks(
    cells: *const u8,
    guttae: *const u8,
    width: usize,
    height: usize,
    out_map: *mut f32,
) -> EndosegStatus {
    guard(|| {
        let n = pixels(width, height)?;
        let c = slice_arg(cells, n, "cells")?;
        let g = slice_arg(guttae, n, "guttae")?;
        if out_map.is_null() {
            return Err(fail(EndosegStatus::NullPointer, "out_map is null"));
        }
        let to_grid = |s: &[u8]| Grid::from_vec(width, height, s.iter().map(|&v| v != 0).collect());
        let masks = SegMasks::new(to_grid(c).or_status()?, to_grid(g).or_status()?, Roi::full(width, height)).or_status()?;
        let map = distance_codec::encode(&masks).or_status()?;
        std::slice::from_raw_parts_mut(out_map, n).copy_from_slice(map.values());
        Ok(EndosegStatus::Ok)
    })
}

/// Decodes a signed distance map into regions by marker watershed.
///
/// # Safety
/// `map` must hold `width*height` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn endoseg_decode_distance_map(
    map: *const f32,
    width: usize,
    height: usize,
    out: *mut *mut EndosegLabelMap,
) -> EndosegStatus {
    guard(|| {
        let out = handle_mut(out, "out")?;
        let values = slice_arg(map, pixels(width, height)?, "map")?;
        let grid = Grid::from_vec(width, height, values.to_vec()).or_status()?;
        let labels = postprocess::watershed_decode(&distance_codec::SignedDistMap::from_grid(grid));
        *out = Box::into_raw(Box::new(EndosegLabelMap(labels)));
        Ok(EndosegStatus::Ok)
    })
}

/// # Safety
/// `map` must be null or a live label map handle.
#[no_mangle]
pub unsafe extern "C" fn endoseg_labelmap_free(map: *mut EndosegLabelMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Number of regions; 0 for a null handle.
///
/// # Safety
/// `map` must be null or a live label map handle.
#[no_mangle]
pub unsafe extern "C" fn endoseg_labelmap_region_count(map: *const EndosegLabelMap) -> usize {
    map.as_ref().map_or(0, |m| m.0.region_count())
}

/// Copies the label grid (row-major, 0 = boundary/background) into `out`,
/// which must hold `len >= width*height` values.
///
/// # Safety
/// `out` must point to `len` writable `u32`s.
#[no_mangle]
pub unsafe extern "C" fn endoseg_labelmap_labels(map: *const EndosegLabelMap, out: *mut u32, len: usize) -> EndosegStatus {
    guard(|| {
        let map = handle(map, "map")?;
        let src = map.0.labels().as_slice();
        if out.is_null() {
            return Err(fail(EndosegStatus::NullPointer, "out is null"));
        }
        if len < src.len() {
            return Err(fail(EndosegStatus::InvalidArgument, format!("buffer holds {len}, need {}", src.len())));
        }
        std::slice::from_raw_parts_mut(out, src.len()).copy_from_slice(src);
        Ok(EndosegStatus::Ok)
    })
}

/// Class code of `label` (`ENDOSEG_CLASS_NONE` when absent).
///
/// # Safety
/// `map` must be null or a live label map handle.
#[no_mangle]
pub unsafe extern "C" fn endoseg_labelmap_class(map: *const EndosegLabelMap, label: u32) -> u8 {
    class_code(map.as_ref().and_then(|m| m.0.class_of(label)))
}

/// Morphometry over the whole map at the given pixel size.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn endoseg_labelmap_report(
    map: *const EndosegLabelMap,
    um_per_px_x: f64,
    um_per_px_y: f64,
    out: *mut EndosegReport,
) -> EndosegStatus {
    guard(|| {
        let map = handle(map, "map")?;
        let out = handle_mut(out, "out")?;
        let scale = Scale::new(um_per_px_x, um_per_px_y).or_status()?;
        let roi = Roi::full(map.0.width(), map.0.height());
        let report = morphometry::analyze(&map.0, roi, scale, HexNeighbors::default()).or_status()?;
        *out = EndosegReport::from(&report);
        Ok(EndosegStatus::Ok)
    })
}

/// Opens an editing session on an image file; an initial segmentation in
/// the file pre-populates the regions.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn endoseg_session_open(path: *const c_char, out: *mut *mut EndosegSession) -> EndosegStatus {
    guard(|| {
        let out = handle_mut(out, "out")?;
        let (image, masks) = pipeline::load_any(&path_arg(path)?).or_status()?;
        let session = annotation::begin_session(image, masks).or_status()?;
        *out = Box::into_raw(Box::new(EndosegSession(session)));
        Ok(EndosegStatus::Ok)
    })
}

/// # Safety
/// `session` must be null or a live session handle.
#[no_mangle]
pub unsafe extern "C" fn endoseg_session_free(session: *mut EndosegSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

fn outcome_status(o: Outcome) -> EndosegStatus {
    match o {
        Outcome::Applied { .. } => EndosegStatus::Ok,
        Outcome::Unchanged { warning } => {
            set_error(warning);
            EndosegStatus::Unchanged
        }
    }
}

unsafe fn apply(session: *mut EndosegSession, edit: impl FnOnce() -> Result<Edit, EndosegStatus>) -> EndosegStatus {
    guard(|| {
        let s = handle_mut(session, "session")?;
        let edit = edit()?;
        Ok(outcome_status(s.0.apply(edit).or_status()?))
    })
}

unsafe fn points(xy: *const i64, n_points: usize) -> Result<Vec<(i64, i64)>, EndosegStatus> {
    let len = n_points
        .checked_mul(2)
        .ok_or_else(|| fail(EndosegStatus::InvalidArgument, "too many points"))?;
    Ok(slice_arg(xy, len, "points")?.chunks_exact(2).map(|p| (p[0], p[1])).collect())
}

/// Cuts `label` along a polyline of `n_points` interleaved `x, y` pairs.
/// Returns `Unchanged` when the cut does not disconnect the region.
///
/// # Safety
/// `xy` must hold `2*n_points` values.
#[no_mangle]
pub unsafe extern "C" fn endoseg_session_split(session: *mut EndosegSession, label: u32, xy: *const i64, n_points: usize) -> EndosegStatus {
    apply(session, || Ok(Edit::Split { label, polyline: points(xy, n_points)? }))
}

/// Merges `b` into `a`; `force` allows different classes.
///
/// # Safety
/// `session` must be a live session handle.
#[no_mangle]
pub unsafe extern "C" fn endoseg_session_merge(session: *mut EndosegSession, a: u32, b: u32, force: bool) -> EndosegStatus {
    apply(session, || Ok(Edit::Merge { a, b, force }))
}

/// # Safety
/// `session` must be a live session handle.
#[no_mangle]
pub unsafe extern "C" fn endoseg_session_set_class(session: *mut EndosegSession, label: u32, class_code: u8) -> EndosegStatus {
    apply(session, || Ok(Edit::SetClass { label, class: class_from(class_code)? }))
}

/// Paints a brush stroke; `label` 0 creates new regions of `class_code`.
///
/// # Safety
/// `xy` must hold `2*n_points` values.
#[no_mangle]
pub unsafe extern "C" fn endoseg_session_draw(
    session: *mut EndosegSession,
    class_code: u8,
    label: u32,
    xy: *const i64,
    n_points: usize,
    radius: u32,
) -> EndosegStatus {
    apply(session, || {
        Ok(Edit::Draw {
            class: class_from(class_code)?,
            label: (label != 0).then_some(label),
            points: points(xy, n_points)?,
            radius,
        })
    })
}

/// # Safety
/// `xy` must hold `2*n_points` values.
#[no_mangle]
pub unsafe extern "C" fn endoseg_session_erase(session: *mut EndosegSession, xy: *const i64, n_points: usize, radius: u32) -> EndosegStatus {
    apply(session, || Ok(Edit::Erase { points: points(xy, n_points)?, radius }))
}

/// # Safety
/// `session` must be a live session handle.
#[no_mangle]
pub unsafe extern "C" fn endoseg_session_undo(session: *mut EndosegSession) -> EndosegStatus {
    guard(|| {
        handle_mut(session, "session")?.0.undo().or_status()?;
        Ok(EndosegStatus::Ok)
    })
}

/// Copies the current regions into a new label map handle.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn endoseg_session_labelmap(session: *const EndosegSession, out: *mut *mut EndosegLabelMap) -> EndosegStatus {
    guard(|| {
        let s = handle(session, "session")?;
        let out = handle_mut(out, "out")?;
        *out = Box::into_raw(Box::new(EndosegLabelMap(s.0.label_map().clone())));
        Ok(EndosegStatus::Ok)
    })
}

/// Live morphometry of the session.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn endoseg_session_report(session: *const EndosegSession, out: *mut EndosegReport) -> EndosegStatus {
    guard(|| {
        let s = handle(session, "session")?;
        let out = handle_mut(out, "out")?;
        let live = s.0.live_report(HexNeighbors::default()).or_status()?;
        *out = EndosegReport::from(&live.report);
        Ok(EndosegStatus::Ok)
    })
}

/// Writes the three-page export; an existing file is kept as `<path>.bak`.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn endoseg_session_export(session: *mut EndosegSession, path: *const c_char) -> EndosegStatus {
    guard(|| {
        let s = handle_mut(session, "session")?;
        s.0.export(path_arg(path)?).or_status()?;
        Ok(EndosegStatus::Ok)
    })
}
