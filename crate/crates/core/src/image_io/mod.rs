//! Image and mask ingestion, ROI/patch extraction, normalization and augmentation.
//!
//! Microscope exports are grayscale TIFFs whose first page (or channel) is
//! the endothelium image. Annotated ground truth is a three-page TIFF:
//! image, cell mask, guttae mask (foreground 255, background 0). PNG files
//! are accepted in place of TIFF; a three-page PNG set is stored as
//! `<stem>.png`, `<stem>_cells.png` and `<stem>_guttae.png`.

mod augment;
mod png_io;
mod tiff_io;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distance_codec::{self, SignedDistMap};
use crate::error::{Error, Result};
use crate::grid::{BinaryGrid, Grid, Roi};

pub use augment::{augment, Dihedral};
pub use png_io::encode_rgba;

pub(crate) fn write_u16_png(path: &Path, grid: &Grid<u16>) -> Result<()> {
    png_io::write_u16(path, grid)
}

pub(crate) fn read_gray_png(path: &Path) -> Result<Grid<f32>> {
    png_io::read_gray(path)
}

/// Side length of training and inference patches.
pub const PATCH_SIZE: usize = 96;

/// Default horizontal pixel pitch: 0.5 mm across 640 px.
pub const DEFAULT_SCALE_X_UM: f64 = 500.0 / 640.0;
/// Default vertical pixel pitch: 0.25 mm across 480 px.
pub const DEFAULT_SCALE_Y_UM: f64 = 250.0 / 480.0;

/// Physical pixel pitch in micrometres per pixel along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub x_um: f64,
    pub y_um: f64,
}

impl Default for Scale {
    fn default() -> Self {
        Scale {
            x_um: DEFAULT_SCALE_X_UM,
            y_um: DEFAULT_SCALE_Y_UM,
        }
    }
}

impl Scale {
    pub fn new(x_um: f64, y_um: f64) -> Result<Self> {
        if !(x_um > 0.0 && y_um > 0.0 && x_um.is_finite() && y_um.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "pixel scale must be positive, got {x_um} x {y_um} um"
            )));
        }
        Ok(Scale { x_um, y_um })
    }

    pub fn uniform(um: f64) -> Self {
        Scale { x_um: um, y_um: um }
    }

    /// Area of one pixel in square micrometres.
    pub fn pixel_area_um2(&self) -> f64 {
        self.x_um * self.y_um
    }
}

/// Grayscale image with physical scale metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub pixels: Grid<f32>,
    pub scale: Scale,
}

impl GrayImage {
    pub fn new(pixels: Grid<f32>, scale: Scale) -> Self {
        GrayImage { pixels, scale }
    }

    pub fn from_vec(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        Ok(GrayImage {
            pixels: Grid::from_vec(width, height, pixels)?,
            scale: Scale::default(),
        })
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn crop(&self, roi: Roi) -> GrayImage {
        GrayImage {
            pixels: self.pixels.crop(roi),
            scale: self.scale,
        }
    }
}

/// Cell and guttae masks over one region of interest.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMasks {
    pub cells: BinaryGrid,
    pub guttae: BinaryGrid,
    pub roi: Roi,
}

impl SegMasks {
    /// Validates dimensions, disjointness, and that all foreground lies in `roi`.
    pub fn new(cells: BinaryGrid, guttae: BinaryGrid, roi: Roi) -> Result<Self> {
        if !cells.same_dims(&guttae) {
            return Err(Error::DimensionMismatch(format!(
                "cell mask {}x{} vs guttae mask {}x{}",
                cells.width(),
                cells.height(),
                guttae.width(),
                guttae.height()
            )));
        }
        if !roi.fits_in(cells.width(), cells.height()) {
            return Err(Error::InvalidArgument(format!(
                "roi {roi:?} exceeds {}x{} grid",
                cells.width(),
                cells.height()
            )));
        }
        let overlap = cells.and_count(&guttae);
        if overlap > 0 {
            return Err(Error::MaskOverlap { count: overlap });
        }
        let w = cells.width();
        let outside = (0..cells.len())
            .filter(|&i| {
                (cells.as_slice()[i] || guttae.as_slice()[i]) && !roi.contains(i % w, i / w)
            })
            .count();
        if outside > 0 {
            return Err(Error::ForegroundOutsideRoi { count: outside });
        }
        Ok(SegMasks { cells, guttae, roi })
    }

    /// Masks whose roi is the bounding box of the union of both foregrounds
    /// (the whole grid when both are empty).
    pub fn with_bbox_roi(cells: BinaryGrid, guttae: BinaryGrid) -> Result<Self> {
        if !cells.same_dims(&guttae) {
            return SegMasks::new(cells, guttae, Roi::full(0, 0));
        }
        let roi = cells
            .or(&guttae)
            .bounding_box()
            .unwrap_or(Roi::full(cells.width(), cells.height()));
        SegMasks::new(cells, guttae, roi)
    }

    pub fn empty(width: usize, height: usize) -> Self {
        SegMasks {
            cells: Grid::filled(width, height, false),
            guttae: Grid::filled(width, height, false),
            roi: Roi::full(width, height),
        }
    }

    pub fn width(&self) -> usize {
        self.cells.width()
    }

    pub fn height(&self) -> usize {
        self.cells.height()
    }

    pub fn foreground(&self) -> BinaryGrid {
        self.cells.or(&self.guttae)
    }

    /// Masks restricted to `window`, with the roi clipped and translated.
    pub fn crop(&self, window: Roi) -> SegMasks {
        let x0 = self.roi.x.max(window.x);
        let y0 = self.roi.y.max(window.y);
        let x1 = (self.roi.x + self.roi.width).min(window.x + window.width);
        let y1 = (self.roi.y + self.roi.height).min(window.y + window.height);
        let roi = if x1 > x0 && y1 > y0 {
            Roi::new(x0 - window.x, y0 - window.y, x1 - x0, y1 - y0)
        } else {
            Roi::new(0, 0, 0, 0)
        };
        SegMasks {
            cells: self.cells.crop(window),
            guttae: self.guttae.crop(window),
            roi,
        }
    }
}

/// Training (or inference) sample: a fixed-size image crop and its target map.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image: GrayImage,
    pub target: Option<SignedDistMap>,
}

impl Patch {
    pub fn new(image: GrayImage, target: Option<SignedDistMap>) -> Result<Self> {
        let ok = |w: usize, h: usize| w == PATCH_SIZE && h == PATCH_SIZE;
        if !ok(image.width(), image.height())
            || target.as_ref().is_some_and(|t| !ok(t.width(), t.height()))
        {
            return Err(Error::DimensionMismatch(format!(
                "patches must be {PATCH_SIZE}x{PATCH_SIZE}"
            )));
        }
        Ok(Patch { image, target })
    }
}

/// JSON sidecar carrying scale metadata and the analysed roi.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub scale_x_um: f64,
    pub scale_y_um: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<[usize; 4]>,
}

impl Sidecar {
    pub fn scale(&self) -> Result<Scale> {
        Scale::new(self.scale_x_um, self.scale_y_um)
    }

    pub fn roi(&self) -> Option<Roi> {
        self.roi.map(|[x, y, w, h]| Roi::new(x, y, w, h))
    }
}

/// `<dir>/<stem>.json` next to an image file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn read_sidecar(path: &Path) -> Result<Option<Sidecar>> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&side)?;
    Ok(Some(serde_json::from_str(&text)?))
}

pub fn write_sidecar(path: &Path, scale: Scale, roi: Option<Roi>) -> Result<()> {
    let side = Sidecar {
        scale_x_um: scale.x_um,
        scale_y_um: scale.y_um,
        roi: roi.map(|r| [r.x, r.y, r.width, r.height]),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Raw grayscale pages of a TIFF (or the single page of a PNG), as f32 intensities.
pub(crate) fn read_pages(path: &Path) -> Result<Vec<Grid<f32>>> {
    let pages = if is_png(path) {
        vec![png_io::read_gray(path)?]
    } else {
        tiff_io::read_pages(path)?
    };
    Ok(pages)
}

fn binarize(page: &Grid<f32>) -> BinaryGrid {
    page.map(|&v| v > 0.0)
}

fn check_same_dims(pages: &[Grid<f32>]) -> Result<()> {
    if let Some(first) = pages.first() {
        if let Some(bad) = pages.iter().find(|p| !p.same_dims(first)) {
            return Err(Error::DimensionMismatch(format!(
                "page of {}x{} next to page of {}x{}",
                bad.width(),
                bad.height(),
                first.width(),
                first.height()
            )));
        }
    }
    Ok(())
}

fn apply_sidecar(path: &Path, image: &mut GrayImage) -> Result<Option<Roi>> {
    match read_sidecar(path)? {
        Some(side) => {
            image.scale = side.scale()?;
            Ok(side.roi())
        }
        None => Ok(None),
    }
}

/// Reads a microscope export: page (or channel) 1 is the image, the optional
/// page 2 is an initial cell segmentation binarized at intensity > 0.
pub fn load_microscope_tiff(path: impl AsRef<Path>) -> Result<(GrayImage, Option<SegMasks>)> {
    let path = path.as_ref();
    let inner = || -> Result<(GrayImage, Option<SegMasks>)> {
        let mut pages = read_pages(path)?;
        check_same_dims(&pages)?;
        if pages.is_empty() || pages.len() > 2 {
            return Err(Error::PageCount {
                expected: 2,
                found: pages.len(),
            });
        }
        let overlay = (pages.len() == 2).then(|| pages.pop().expect("two pages"));
        let mut image = GrayImage::new(pages.pop().expect("one page"), Scale::default());
        let roi = apply_sidecar(path, &mut image)?;
        let masks = match overlay {
            Some(page) => {
                let cells = binarize(&page);
                let guttae = Grid::filled(cells.width(), cells.height(), false);
                Some(match roi {
                    Some(roi) => SegMasks::new(cells, guttae, roi)?,
                    None => SegMasks::with_bbox_roi(cells, guttae)?,
                })
            }
            None => None,
        };
        Ok((image, masks))
    };
    inner().map_err(|e| e.at_path(path))
}

/// Reads an annotated three-page file: image, cell mask, guttae mask.
pub fn load_three_page_mask(path: impl AsRef<Path>) -> Result<(GrayImage, SegMasks)> {
    let path = path.as_ref();
    let inner = || -> Result<(GrayImage, SegMasks)> {
        let pages = if is_png(path) {
            let (cells, guttae) = png_mask_paths(path);
            vec![
                png_io::read_gray(path)?,
                png_io::read_gray(&cells)?,
                png_io::read_gray(&guttae)?,
            ]
        } else {
            tiff_io::read_pages(path)?
        };
        if pages.len() != 3 {
            return Err(Error::PageCount {
                expected: 3,
                found: pages.len(),
            });
        }
        check_same_dims(&pages)?;
        let mut it = pages.into_iter();
        let mut image = GrayImage::new(it.next().expect("page 1"), Scale::default());
        let cells = binarize(&it.next().expect("page 2"));
        let guttae = binarize(&it.next().expect("page 3"));
        let masks = match apply_sidecar(path, &mut image)? {
            Some(roi) => SegMasks::new(cells, guttae, roi)?,
            None => SegMasks::with_bbox_roi(cells, guttae)?,
        };
        Ok((image, masks))
    };
    inner().map_err(|e| e.at_path(path))
}

/// Writes image, cell mask and guttae mask as a three-page file plus a JSON
/// sidecar holding the scale and roi, so that loading restores both exactly.
pub fn save_three_page_mask(
    path: impl AsRef<Path>,
    image: &GrayImage,
    masks: &SegMasks,
) -> Result<()> {
    let path = path.as_ref();
    if !image.pixels.same_dims(&masks.cells) {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs masks {}x{}",
            image.width(),
            image.height(),
            masks.width(),
            masks.height()
        )));
    }
    let to_page = |m: &BinaryGrid| m.map(|&b| if b { 255u8 } else { 0u8 });
    if is_png(path) {
        let (cells, guttae) = png_mask_paths(path);
        png_io::write_image(path, &image.pixels)?;
        png_io::write_u8(&cells, &to_page(&masks.cells))?;
        png_io::write_u8(&guttae, &to_page(&masks.guttae))?;
    } else {
        tiff_io::write_three_pages(
            path,
            &image.pixels,
            &to_page(&masks.cells),
            &to_page(&masks.guttae),
        )?;
    }
    write_sidecar(path, image.scale, Some(masks.roi))
}

/// Writes a single-page grayscale image (TIFF or PNG by extension).
pub fn save_image(path: impl AsRef<Path>, image: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    if is_png(path) {
        png_io::write_image(path, &image.pixels)?;
    } else {
        tiff_io::write_pages(path, &[&image.pixels])?;
    }
    write_sidecar(path, image.scale, None)
}

/// Writes a two-page microscope-style export (image + initial cell overlay).
pub fn save_microscope_tiff(
    path: impl AsRef<Path>,
    image: &GrayImage,
    overlay: Option<&BinaryGrid>,
) -> Result<()> {
    let path = path.as_ref();
    match overlay {
        Some(mask) => {
            let page = mask.map(|&b| if b { 255.0f32 } else { 0.0 });
            tiff_io::write_pages(path, &[&image.pixels, &page])
        }
        None => tiff_io::write_pages(path, &[&image.pixels]),
    }
}

fn png_mask_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string();
    (
        path.with_file_name(format!("{stem}_cells.png")),
        path.with_file_name(format!("{stem}_guttae.png")),
    )
}

/// Z-scores the image and squashes it into (-1, 1) with tanh.
pub fn normalize(image: &GrayImage) -> GrayImage {
    let px = image.pixels.as_slice();
    let n = px.len() as f64;
    let mean = px.iter().map(|&p| p as f64).sum::<f64>() / n;
    let var = px.iter().map(|&p| (p as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    // largest f32 strictly below 1
    let bound = 1.0f32 - f32::EPSILON / 2.0;
    GrayImage {
        pixels: image
            .pixels
            .map(|&p| (((p as f64 - mean) / std).tanh() as f32).clamp(-bound, bound)),
        scale: image.scale,
    }
}

/// Top-left corners of every sliding window of `size` that fits in `extent`.
fn window_starts(origin: usize, extent: usize, size: usize, stride: usize) -> Vec<usize> {
    if extent < size {
        return Vec::new();
    }
    (0..=(extent - size) / stride)
        .map(|k| origin + k * stride)
        .collect()
}

/// Number of patches `extract_patches` produces for an roi of the given size.
pub fn patch_count(roi_width: usize, roi_height: usize, stride: usize) -> usize {
    if roi_width < PATCH_SIZE || roi_height < PATCH_SIZE || stride == 0 {
        return 0;
    }
    ((roi_width - PATCH_SIZE) / stride + 1) * ((roi_height - PATCH_SIZE) / stride + 1)
}

/// Sliding-window patches fully inside the roi, each paired with the signed
/// distance map of its cropped masks.
pub fn extract_patches(image: &GrayImage, masks: &SegMasks, stride: usize) -> Result<Vec<Patch>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    if !image.pixels.same_dims(&masks.cells) {
        return Err(Error::DimensionMismatch(
            "image and masks differ in size".into(),
        ));
    }
    let roi = masks.roi;
    if roi.width < PATCH_SIZE || roi.height < PATCH_SIZE {
        return Err(Error::RoiTooSmall {
            width: roi.width,
            height: roi.height,
            patch: PATCH_SIZE,
        });
    }
    let xs = window_starts(roi.x, roi.width, PATCH_SIZE, stride);
    let ys = window_starts(roi.y, roi.height, PATCH_SIZE, stride);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            let window = Roi::new(x, y, PATCH_SIZE, PATCH_SIZE);
            let target = distance_codec::encode(&masks.crop(window))?;
            out.push(Patch {
                image: image.crop(window),
                target: Some(target),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn masks_with_roi(w: usize, h: usize, roi: Roi) -> SegMasks {
        let cells = Grid::from_fn(w, h, |x, y| roi.contains(x, y) && (x + y) % 7 == 0);
        SegMasks::new(cells, Grid::filled(w, h, false), roi).unwrap()
    }

    #[test]
    fn normalize_constant_is_zero() {
        let img = GrayImage::from_vec(4, 4, vec![128.0; 16]).unwrap();
        assert!(normalize(&img).pixels.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_two_values_symmetric() {
        let px: Vec<f32> = (0..16).map(|i| if i % 2 == 0 { 10.0 } else { 50.0 }).collect();
        let out = normalize(&GrayImage::from_vec(4, 4, px).unwrap());
        let a = out.pixels.as_slice()[0];
        let b = out.pixels.as_slice()[1];
        assert!((a + b).abs() < 1e-7);
        assert!(a < 0.0 && b > 0.0);
    }

    #[test]
    fn normalize_outliers_stay_open_interval() {
        let mut px = vec![0.0f32; 96 * 96];
        px[0] = 1e6;
        let out = normalize(&GrayImage::from_vec(96, 96, px).unwrap());
        assert!(out.pixels.as_slice().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn patch_counts() {
        let img = GrayImage::from_vec(200, 100, vec![0.0; 200 * 100]).unwrap();
        let exact = masks_with_roi(200, 100, Roi::new(10, 2, 96, 96));
        assert_eq!(extract_patches(&img, &exact, 13).unwrap().len(), 1);
        let two = masks_with_roi(200, 100, Roi::new(0, 0, 192, 96));
        assert_eq!(extract_patches(&img, &two, 96).unwrap().len(), 2);
        let small = masks_with_roi(200, 100, Roi::new(0, 0, 95, 96));
        assert!(matches!(
            extract_patches(&img, &small, 8),
            Err(Error::RoiTooSmall { .. })
        ));
    }

    #[test]
    fn full_frame_patch_count_formula() {
        assert_eq!(
            patch_count(640, 480, 48),
            ((640 - 96) / 48 + 1) * ((480 - 96) / 48 + 1)
        );
        assert_eq!(patch_count(640, 480, 48), 12 * 9);
    }

    #[test]
    fn masks_reject_overlap_and_outside_roi() {
        let a = Grid::from_fn(4, 4, |x, _| x == 1);
        let b = Grid::from_fn(4, 4, |x, y| x == 1 && y == 2);
        assert!(matches!(
            SegMasks::new(a.clone(), b, Roi::full(4, 4)),
            Err(Error::MaskOverlap { count: 1 })
        ));
        assert!(matches!(
            SegMasks::new(a, Grid::filled(4, 4, false), Roi::new(2, 0, 2, 4)),
            Err(Error::ForegroundOutsideRoi { count: 4 })
        ));
    }

    #[test]
    fn default_scale_covers_frame() {
        let s = Scale::default();
        assert!((640.0 * s.x_um - 500.0).abs() < 1e-9);
        assert!((480.0 * s.y_um - 250.0).abs() < 1e-9);
    }
}
