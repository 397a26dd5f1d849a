//! Clinical morphometry from a labeled segmentation: cell density (CD), mean
//! cell area (MCA), hexagonality (HEX%), coefficient of variation of cell
//! area (CV%) and guttae area ratio (GAR%).
//!
//! Cells touching the roi border are partial and are left out of CD, MCA,
//! HEX% and CV%. Guttae count toward GAR% wherever they are.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Roi;
use crate::image_io::{Scale, SegMasks};
use crate::postprocess::{LabelMap, RegionClass};

/// Which adjacent regions count as sides when judging hexagonality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HexNeighbors {
    /// Cells and guttae both count as sides.
    #[default]
    AllRegions,
    /// Only neighbouring cells count.
    CellsOnly,
}

/// Radius (Chebyshev, px) of the dilation used to find neighbours across a
/// 1-px watershed line.
pub const NEIGHBOR_RADIUS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub label: u32,
    pub class: RegionClass,
    pub area_px: usize,
    pub area_um2: f64,
    pub touches_border: bool,
    pub neighbor_labels: BTreeSet<u32>,
    pub neighbor_classes: BTreeMap<u32, RegionClass>,
}

impl RegionStats {
    pub fn neighbor_count(&self, convention: HexNeighbors) -> usize {
        match convention {
            HexNeighbors::AllRegions => self.neighbor_labels.len(),
            HexNeighbors::CellsOnly => self
                .neighbor_classes
                .values()
                .filter(|&&c| c == RegionClass::Cell)
                .count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphoReport {
    /// Cells per mm².
    pub cd: f64,
    /// Mean cell area in µm²; absent without cells.
    pub mca: Option<f64>,
    pub hex_pct: Option<f64>,
    pub cv_pct: Option<f64>,
    pub gar_pct: f64,
    pub n_cells: usize,
    pub n_guttae: usize,
    pub analyzed_area_mm2: f64,
}

const CSV_HEADER: &str = "cd,mca,hex_pct,cv_pct,gar_pct,n_cells,n_guttae,analyzed_area_mm2";

impl MorphoReport {
    pub fn csv_header() -> &'static str {
        CSV_HEADER
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.cd,
            opt(self.mca),
            opt(self.hex_pct),
            opt(self.cv_pct),
            self.gar_pct,
            self.n_cells,
            self.n_guttae,
            self.analyzed_area_mm2
        )
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        writeln!(out, "{}", self.csv_row())?;
        Ok(())
    }
}

impl fmt::Display for MorphoReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CD: {:.0} cells/mm²", self.cd)?;
        match self.mca {
            Some(m) => write!(f, "  MCA: {m:.1} µm²")?,
            None => write!(f, "  MCA: -")?,
        }
        write!(f, "  GAR: {:.2}%", self.gar_pct)?;
        if let Some(h) = self.hex_pct {
            write!(f, "  HEX: {h:.1}%")?;
        }
        if let Some(c) = self.cv_pct {
            write!(f, "  CV: {c:.1}%")?;
        }
        write!(f, "  ({} cells, {} guttae)", self.n_cells, self.n_guttae)
    }
}

/// Per-region areas, border flags and adjacency, restricted to pixels inside `roi`.
pub fn region_stats(map: &LabelMap, roi: Roi, scale: Scale) -> Vec<RegionStats> {
    let labels = map.labels();
    let (w, h) = labels.dims();
    let mut area: BTreeMap<u32, usize> = BTreeMap::new();
    let mut border: BTreeSet<u32> = BTreeSet::new();
    let mut neighbors: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    let r = NEIGHBOR_RADIUS as isize;
    for y in 0..h {
        for x in 0..w {
            let l = *labels.get(x, y);
            if l == 0 {
                continue;
            }
            if !roi.contains(x, y) || roi.on_boundary(x, y) {
                border.insert(l);
            }
            if !roi.contains(x, y) {
                continue;
            }
            *area.entry(l).or_insert(0) += 1;
            let set = neighbors.entry(l).or_default();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let m = *labels.get(nx as usize, ny as usize);
                    if m != 0 && m != l {
                        set.insert(m);
                    }
                }
            }
        }
    }
    let px_area = scale.pixel_area_um2();
    area.into_iter()
        .filter_map(|(label, area_px)| {
            let class = map.class_of(label)?;
            let neighbor_labels = neighbors.remove(&label).unwrap_or_default();
            let neighbor_classes = neighbor_labels
                .iter()
                .filter_map(|&n| map.class_of(n).map(|c| (n, c)))
                .collect();
            Some(RegionStats {
                label,
                class,
                area_px,
                area_um2: area_px as f64 * px_area,
                touches_border: border.contains(&label),
                neighbor_labels,
                neighbor_classes,
            })
        })
        .collect()
}

/// Population mean and standard deviation of pixel counts. Integer sums
/// keep the result independent of region order.
fn mean_std_px(areas: &[usize]) -> (f64, f64) {
    let n = areas.len() as u128;
    let sum: u128 = areas.iter().map(|&a| a as u128).sum();
    let sq: u128 = areas.iter().map(|&a| (a as u128) * (a as u128)).sum();
    let mean = sum as f64 / n as f64;
    let var = (n * sq - sum * sum) as f64 / (n * n) as f64;
    (mean, var.sqrt())
}

/// Morphometric parameters over an analysed area given in mm².
pub fn compute_report(
    stats: &[RegionStats],
    scale: Scale,
    analyzed_area_mm2: f64,
    convention: HexNeighbors,
) -> Result<MorphoReport> {
    if !(analyzed_area_mm2 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "analyzed area must be positive, got {analyzed_area_mm2}"
        )));
    }
    let cells: Vec<&RegionStats> = stats
        .iter()
        .filter(|s| s.class == RegionClass::Cell && !s.touches_border)
        .collect();
    let gutta_px: usize = stats.iter().filter(|s| s.class == RegionClass::Gutta).map(|s| s.area_px).sum();
    let px_um2 = scale.pixel_area_um2();
    let gutta_area_um2 = gutta_px as f64 * px_um2;
    let n_guttae = stats.iter().filter(|s| s.class == RegionClass::Gutta).count();
    let n_cells = cells.len();
    let analyzed_um2 = analyzed_area_mm2 * 1e6;
    let gar_pct = (gutta_area_um2 / analyzed_um2 * 100.0).clamp(0.0, 100.0);
    let cd = n_cells as f64 / analyzed_area_mm2;
    if n_cells == 0 {
        return Ok(MorphoReport {
            cd,
            mca: None,
            hex_pct: None,
            cv_pct: None,
            gar_pct,
            n_cells,
            n_guttae,
            analyzed_area_mm2,
        });
    }
    let areas: Vec<usize> = cells.iter().map(|s| s.area_px).collect();
    let (mean_px, std_px) = mean_std_px(&areas);
    let hexagonal = cells
        .iter()
        .filter(|s| s.neighbor_count(convention) == 6)
        .count();
    Ok(MorphoReport {
        cd,
        mca: Some(mean_px * px_um2),
        hex_pct: Some(hexagonal as f64 / n_cells as f64 * 100.0),
        cv_pct: Some(std_px / mean_px * 100.0),
        gar_pct,
        n_cells,
        n_guttae,
        analyzed_area_mm2,
    })
}

/// Area of the roi rectangle in mm².
pub fn roi_area_mm2(roi: Roi, scale: Scale) -> f64 {
    roi.width as f64 * scale.x_um * roi.height as f64 * scale.y_um / 1e6
}

/// Area in mm² of the tight bounding box of all annotated foreground.
pub fn bounding_box_area(masks: &SegMasks, scale: Scale) -> Result<f64> {
    let bbox = masks
        .foreground()
        .bounding_box()
        .ok_or_else(|| Error::Empty("masks have no foreground".into()))?;
    Ok(roi_area_mm2(bbox, scale))
}

/// Region statistics and report over `roi`, using the roi area as the analysed area.
pub fn analyze(map: &LabelMap, roi: Roi, scale: Scale, convention: HexNeighbors) -> Result<MorphoReport> {
    let stats = region_stats(map, roi, scale);
    compute_report(&stats, scale, roi_area_mm2(roi, scale), convention)
}
