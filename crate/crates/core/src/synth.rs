//! Synthetic specular-microscopy images with exact ground truth.
//!
//! A Lloyd-relaxed Voronoi tessellation supplies the cell mosaic; dark
//! boundaries separate cells, and guttae are smooth unions of disks that
//! replace the cells they cover. Cell masks are the tessellation interiors,
//! guttae masks are the blob supports, and the two are separated by a 1-px gap.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryGrid, Grid, Roi};
use crate::image_io::{self, GrayImage, Scale, SegMasks};
use crate::morphometry::{self, HexNeighbors, MorphoReport};
use crate::postprocess::{connected_components, LabelMap};

const LLOYD_ITERATIONS: usize = 2;
const MIN_CELL_PX: usize = 20;
const MIN_GUTTA_PX: usize = 12;
/// Accepted deviation of the measured guttae area ratio, in percentage points.
pub const GAR_TOLERANCE_PCT: f64 = 2.0;
const MAX_BLOB_ATTEMPTS: usize = 400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub n_cells: usize,
    /// Requested guttae area ratio in percent, in `[0, 80]`.
    pub guttae_fraction: f64,
    /// Standard deviation of additive noise on the [0, 1] intensity scale.
    pub intensity_noise: f64,
    /// Brightness change across the image width on the [0, 1] scale.
    pub illumination_gradient: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 640,
            height: 480,
            n_cells: 300,
            guttae_fraction: 0.0,
            intensity_noise: 0.03,
            illumination_gradient: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cells == 0 {
            return Err(Error::InvalidArgument("n_cells must be at least 1".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("image must be non-empty".into()));
        }
        if !(0.0..=80.0).contains(&self.guttae_fraction) {
            return Err(Error::InvalidArgument(format!(
                "guttae_fraction {} outside [0, 80]",
                self.guttae_fraction
            )));
        }
        if self.intensity_noise < 0.0 {
            return Err(Error::InvalidArgument("intensity_noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Severity band of a generated image, by requested guttae area ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    Mild,
    Moderate,
    Severe,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::Mild, Stratum::Moderate, Stratum::Severe];

    /// Range of requested GAR% for the band.
    pub fn gar_band(self) -> (f64, f64) {
        match self {
            Stratum::Mild => (0.0, 5.0),
            Stratum::Moderate => (8.0, 18.0),
            Stratum::Severe => (22.0, 35.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stratum::Mild => "mild",
            Stratum::Moderate => "moderate",
            Stratum::Severe => "severe",
        }
    }
}

fn nearest_owner(seeds: &[(f64, f64)], w: usize, h: usize) -> Grid<u32> {
    // bucket the seeds on a coarse grid so each query scans a few buckets
    let spacing = ((w * h) as f64 / seeds.len() as f64).sqrt().max(1.0);
    let bw = (w as f64 / spacing).ceil().max(1.0) as usize;
    let bh = (h as f64 / spacing).ceil().max(1.0) as usize;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); bw * bh];
    let bucket_of = |x: f64, y: f64| {
        let bx = ((x / spacing) as usize).min(bw - 1);
        let by = ((y / spacing) as usize).min(bh - 1);
        (bx, by)
    };
    for (i, &(x, y)) in seeds.iter().enumerate() {
        let (bx, by) = bucket_of(x, y);
        buckets[by * bw + bx].push(i);
    }
    Grid::from_fn(w, h, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let (bx, by) = bucket_of(px, py);
        let mut best = (f64::INFINITY, 0usize);
        let mut ring = 0usize;
        loop {
            let x0 = bx.saturating_sub(ring);
            let y0 = by.saturating_sub(ring);
            let x1 = (bx + ring).min(bw - 1);
            let y1 = (by + ring).min(bh - 1);
            for cy in y0..=y1 {
                for cx in x0..=x1 {
                    if cx.abs_diff(bx) != ring && cy.abs_diff(by) != ring {
                        continue;
                    }
                    for &i in &buckets[cy * bw + cx] {
                        let (sx, sy) = seeds[i];
                        let d = (sx - px).powi(2) + (sy - py).powi(2);
                        if d < best.0 || (d == best.0 && i < best.1) {
                            best = (d, i);
                        }
                    }
                }
            }
            // every unscanned seed is at least `ring * spacing` away
            let covered = ring as f64 * spacing;
            if best.0.is_finite() && best.0 <= covered * covered {
                break;
            }
            if x0 == 0 && y0 == 0 && x1 == bw - 1 && y1 == bh - 1 {
                break;
            }
            ring += 1;
        }
        best.1 as u32
    })
}

fn lloyd(seeds: &mut [(f64, f64)], w: usize, h: usize) -> Grid<u32> {
    let mut owner = nearest_owner(seeds, w, h);
    for _ in 0..LLOYD_ITERATIONS {
        let mut sum = vec![(0.0f64, 0.0f64, 0usize); seeds.len()];
        for y in 0..h {
            for x in 0..w {
                let s = &mut sum[*owner.get(x, y) as usize];
                s.0 += x as f64 + 0.5;
                s.1 += y as f64 + 0.5;
                s.2 += 1;
            }
        }
        for (seed, &(sx, sy, n)) in seeds.iter_mut().zip(&sum) {
            if n > 0 {
                *seed = (sx / n as f64, sy / n as f64);
            }
        }
        owner = nearest_owner(seeds, w, h);
    }
    owner
}

fn disk(mask: &mut BinaryGrid, cx: f64, cy: f64, r: f64) {
    let (w, h) = mask.dims();
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize).min(w.saturating_sub(1));
    let y1 = ((cy + r).ceil() as usize).min(h.saturating_sub(1));
    if cx + r < 0.0 || cy + r < 0.0 {
        return;
    }
    for y in y0..=y1 {
        for x in x0..=x1 {
            if (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2) <= r * r {
                mask.set(x, y, true);
            }
        }
    }
}

fn dilate8(mask: &BinaryGrid) -> BinaryGrid {
    let mut out = mask.clone();
    for i in 0..mask.len() {
        if mask.as_slice()[i] {
            for n in mask.neighbors8(i) {
                out.as_mut_slice()[n] = true;
            }
        }
    }
    out
}

/// Drops 4-connected components smaller than `min_px`.
fn drop_small(mask: &BinaryGrid, min_px: usize) -> BinaryGrid {
    let (labels, n) = connected_components(mask);
    let mut sizes = vec![0usize; n as usize + 1];
    for &l in labels.as_slice() {
        sizes[l as usize] += 1;
    }
    labels.map(|&l| l != 0 && sizes[l as usize] >= min_px)
}

/// Places guttae blobs until their area ratio is within tolerance of `target_pct`.
fn place_guttae(
    rng: &mut ChaCha8Rng,
    w: usize,
    h: usize,
    target_pct: f64,
    cell_radius: f64,
) -> Result<(BinaryGrid, Vec<(BinaryGrid, f32)>)> {
    let mut union = Grid::filled(w, h, false);
    let mut blobs = Vec::new();
    if target_pct <= 0.0 {
        return Ok((union, blobs));
    }
    let total = (w * h) as f64;
    let measure = |m: &BinaryGrid| m.count() as f64 / total * 100.0;
    let mut attempts = 0;
    while measure(&union) < target_pct - GAR_TOLERANCE_PCT * 0.5 {
        attempts += 1;
        if attempts > MAX_BLOB_ATTEMPTS {
            return Err(Error::GuttaePlacement {
                target: target_pct,
                reached: measure(&union),
            });
        }
        let remaining = target_pct - measure(&union);
        // shrink blobs as the target gets close so the last one does not overshoot
        let max_r = (remaining / 100.0 * total / std::f64::consts::PI)
            .sqrt()
            .min(cell_radius * 2.5)
            .max(cell_radius * 0.8);
        let r = rng.random_range(cell_radius * 0.8..=max_r.max(cell_radius * 0.8 + 1e-6));
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let mut blob = Grid::filled(w, h, false);
        disk(&mut blob, cx, cy, r);
        for _ in 0..rng.random_range(1..=3) {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let d = r * rng.random_range(0.4..0.9);
            disk(&mut blob, cx + d * a.cos(), cy + d * a.sin(), r * rng.random_range(0.5..0.9));
        }
        let candidate = union.or(&blob);
        if measure(&drop_small(&candidate, MIN_GUTTA_PX)) > target_pct + GAR_TOLERANCE_PCT * 0.5 {
            continue;
        }
        union = candidate;
        blobs.push((blob, rng.random_range(0.05f32..0.25)));
    }
    Ok((drop_small(&union, MIN_GUTTA_PX), blobs))
}

fn box_blur(grid: &Grid<f32>) -> Grid<f32> {
    let (w, h) = grid.dims();
    Grid::from_fn(w, h, |x, y| {
        let mut sum = 0.0;
        let mut n = 0.0;
        for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                let wgt = if nx == x && ny == y { 4.0 } else if nx == x || ny == y { 2.0 } else { 1.0 };
                sum += grid.get(nx, ny) * wgt;
                n += wgt;
            }
        }
        sum / n
    })
}

/// One synthetic image with its ground-truth masks (roi = whole frame).
/// Intensities are 8-bit values stored as `f32`.
pub fn generate(config: &SynthConfig) -> Result<(GrayImage, SegMasks)> {
    config.validate()?;
    let (w, h) = (config.width, config.height);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut seeds: Vec<(f64, f64)> = (0..config.n_cells)
        .map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
        .collect();
    let owner = lloyd(&mut seeds, w, h);

    let interior = Grid::from_fn(w, h, |x, y| {
        let o = *owner.get(x, y);
        owner.neighbors8(owner.index(x, y)).all(|n| owner.as_slice()[n] == o)
    });

    let cell_radius = ((w * h) as f64 / config.n_cells as f64 / std::f64::consts::PI).sqrt();
    let (guttae, blobs) = place_guttae(&mut rng, w, h, config.guttae_fraction, cell_radius)?;
    let gap = dilate8(&guttae);

    // one component per tessellation cell, large enough to be a real cell
    let mut cells = Grid::filled(w, h, false);
    let kept = Grid::from_fn(w, h, |x, y| *interior.get(x, y) && !*gap.get(x, y));
    let (components, n) = connected_components(&kept);
    let mut best: std::collections::HashMap<u32, (usize, u32)> = std::collections::HashMap::new();
    let mut sizes = vec![0usize; n as usize + 1];
    for &c in components.as_slice() {
        sizes[c as usize] += 1;
    }
    for (i, &c) in components.as_slice().iter().enumerate() {
        if c == 0 {
            continue;
        }
        let o = owner.as_slice()[i];
        let e = best.entry(o).or_insert((0, 0));
        if sizes[c as usize] > e.0 {
            *e = (sizes[c as usize], c);
        }
    }
    for (i, &c) in components.as_slice().iter().enumerate() {
        if c != 0 {
            let (size, keep) = best[&owner.as_slice()[i]];
            if keep == c && size >= MIN_CELL_PX {
                cells.as_mut_slice()[i] = true;
            }
        }
    }

    // intensities on the [0, 1] scale
    let cell_level: Vec<f32> = (0..config.n_cells).map(|_| rng.random_range(0.55f32..0.8)).collect();
    let boundary_level: f32 = rng.random_range(0.2..0.35);
    let mut gutta_level = Grid::filled(w, h, f32::NAN);
    for (blob, level) in &blobs {
        for (i, &b) in blob.as_slice().iter().enumerate() {
            if b && guttae.as_slice()[i] && gutta_level.as_slice()[i].is_nan() {
                gutta_level.as_mut_slice()[i] = *level;
            }
        }
    }
    let base = Grid::from_fn(w, h, |x, y| {
        let i = y * w + x;
        if guttae.as_slice()[i] {
            let g = gutta_level.as_slice()[i];
            if g.is_nan() { 0.15 } else { g }
        } else if cells.as_slice()[i] {
            cell_level[owner.as_slice()[i] as usize]
        } else {
            boundary_level
        }
    });
    let smooth = box_blur(&base);
    let noise = Normal::new(0.0, config.intensity_noise.max(1e-12)).expect("finite sigma");
    let pixels = Grid::from_fn(w, h, |x, y| {
        let ramp = config.illumination_gradient * ((x as f64 + 0.5) / w as f64 - 0.5);
        let n = if config.intensity_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        let v = (*smooth.get(x, y) as f64 + ramp + n).clamp(0.0, 1.0);
        (v * 255.0).round() as f32
    });

    let masks = SegMasks::new(cells, guttae, Roi::full(w, h))?;
    Ok((GrayImage::new(pixels, Scale::default()), masks))
}

/// Guttae area ratio of ground-truth masks over their roi, in percent.
pub fn measured_gar(masks: &SegMasks) -> f64 {
    let roi = masks.roi;
    let inside = (0..masks.height())
        .flat_map(|y| (0..masks.width()).map(move |x| (x, y)))
        .filter(|&(x, y)| roi.contains(x, y) && *masks.guttae.get(x, y))
        .count();
    inside as f64 / roi.area() as f64 * 100.0
}

/// Derives the seed of item `index` of a dataset.
pub fn item_seed(dataset_seed: u64, index: usize) -> u64 {
    // splitmix64 step
    let mut z = dataset_seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A generated image together with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthItem {
    pub image: GrayImage,
    pub masks: SegMasks,
    pub config: SynthConfig,
    pub stratum: Option<Stratum>,
}

/// `count` images from one template; item `i` uses seed `item_seed(seed, i)`.
pub fn generate_dataset(template: &SynthConfig, count: usize, seed: u64) -> Result<Vec<(GrayImage, SegMasks)>> {
    (0..count)
        .map(|i| {
            let cfg = SynthConfig {
                seed: item_seed(seed, i),
                ..template.clone()
            };
            generate(&cfg)
        })
        .collect()
}

/// `count` images cycling through the severity strata; each draws its
/// requested GAR uniformly inside its band.
pub fn generate_stratified(template: &SynthConfig, count: usize, seed: u64) -> Result<Vec<SynthItem>> {
    (0..count)
        .map(|i| {
            let item = item_seed(seed, i);
            let stratum = Stratum::ALL[i % Stratum::ALL.len()];
            let (lo, hi) = stratum.gar_band();
            let mut rng = ChaCha8Rng::seed_from_u64(item ^ 0x5EED);
            let config = SynthConfig {
                seed: item,
                guttae_fraction: if hi > lo { rng.random_range(lo..hi) } else { lo },
                ..template.clone()
            };
            let (image, masks) = generate(&config)?;
            Ok(SynthItem {
                image,
                masks,
                config,
                stratum: Some(stratum),
            })
        })
        .collect()
}

/// Sizes of the train / validation / test partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for Split {
    fn default() -> Self {
        Split {
            train: 57,
            val: 10,
            test: 23,
        }
    }
}

impl Split {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn part_of(&self, index: usize) -> &'static str {
        if index < self.train {
            "train"
        } else if index < self.train + self.val {
            "val"
        } else {
            "test"
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub split: String,
    pub seed: u64,
    pub requested_gar_pct: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stratum: Option<Stratum>,
    pub report: MorphoReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_seed: u64,
    pub template: SynthConfig,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn files(&self, root: &Path, split: &str) -> Vec<PathBuf> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| root.join(&e.file))
            .collect()
    }
}

/// Ground-truth morphometry of generated masks over their roi.
pub fn ground_truth_report(masks: &SegMasks, scale: Scale) -> Result<MorphoReport> {
    let map = LabelMap::from_masks(masks)?;
    morphometry::analyze(&map, masks.roi, scale, HexNeighbors::default())
}

/// Writes each item as `<split>/<index>.tif` under `dir` plus `manifest.json`.
pub fn write_dataset(dir: &Path, items: &[SynthItem], split: Split, dataset_seed: u64, template: &SynthConfig) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let part = split.part_of(i);
        std::fs::create_dir_all(dir.join(part))?;
        let file = format!("{part}/{i:03}.tif");
        image_io::save_three_page_mask(dir.join(&file), &item.image, &item.masks)?;
        entries.push(ManifestEntry {
            file,
            split: part.to_string(),
            seed: item.config.seed,
            requested_gar_pct: item.config.guttae_fraction,
            stratum: item.stratum,
            report: ground_truth_report(&item.masks, item.image.scale)?,
        });
    }
    let manifest = Manifest {
        dataset_seed,
        template: template.clone(),
        entries,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
