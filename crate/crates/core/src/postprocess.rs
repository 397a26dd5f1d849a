//! Decoding of predicted signed distance maps into labeled cell and guttae
//! regions: two thresholds produce markers, then a marker-controlled
//! priority flood over `-|map|` assigns every pixel to a region, leaving
//! 1-px watershed lines (label 0) where regions meet.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distance_codec::SignedDistMap;
use crate::error::{Error, Result};
use crate::grid::{BinaryGrid, Grid, Roi};
use crate::image_io::SegMasks;

/// Default marker threshold for cells, in pixel units of the distance map.
pub const CELL_THRESHOLD: f32 = 0.2;
/// Regions smaller than this many pixels are dissolved after flooding.
pub const MIN_REGION_PX: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionClass {
    Cell,
    Gutta,
}

/// Instance labeling: `0` marks watershed lines and unassigned pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    labels: Grid<u32>,
    classes: BTreeMap<u32, RegionClass>,
}

impl LabelMap {
    /// Builds a label map, checking every structural invariant.
    pub fn new(labels: Grid<u32>, classes: BTreeMap<u32, RegionClass>) -> Result<Self> {
        let map = LabelMap { labels, classes };
        map.validate()?;
        Ok(map)
    }

    pub(crate) fn from_parts_unchecked(labels: Grid<u32>, classes: BTreeMap<u32, RegionClass>) -> Self {
        LabelMap { labels, classes }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        LabelMap {
            labels: Grid::new(width, height),
            classes: BTreeMap::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn labels(&self) -> &Grid<u32> {
        &self.labels
    }

    pub fn classes(&self) -> &BTreeMap<u32, RegionClass> {
        &self.classes
    }

    pub fn class_of(&self, label: u32) -> Option<RegionClass> {
        self.classes.get(&label).copied()
    }

    pub fn region_count(&self) -> usize {
        self.classes.len()
    }

    pub fn count_class(&self, class: RegionClass) -> usize {
        self.classes.values().filter(|&&c| c == class).count()
    }

    pub fn next_label(&self) -> u32 {
        self.classes.keys().next_back().map_or(1, |&l| l + 1)
    }

    /// Checks: each label present in the grid has exactly one class and vice
    /// versa, each label is one 4-connected component, and no two distinct
    /// regions of the same class are 4-adjacent.
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.labels.dims();
        let mut first_pixel: HashMap<u32, usize> = HashMap::new();
        let mut sizes: HashMap<u32, usize> = HashMap::new();
        for (i, &l) in self.labels.as_slice().iter().enumerate() {
            if l == 0 {
                continue;
            }
            first_pixel.entry(l).or_insert(i);
            *sizes.entry(l).or_insert(0) += 1;
            if !self.classes.contains_key(&l) {
                return Err(Error::InvalidArgument(format!("label {l} has no class")));
            }
            let x = i % w;
            let y = i / w;
            let right = (x + 1 < w).then(|| i + 1);
            let down = (y + 1 < h).then(|| i + w);
            for j in [right, down].into_iter().flatten() {
                let m = self.labels.as_slice()[j];
                if m != 0 && m != l && self.classes.get(&m) == self.classes.get(&l) {
                    return Err(Error::InvalidArgument(format!(
                        "regions {l} and {m} of the same class touch"
                    )));
                }
            }
        }
        if let Some(&l) = self.classes.keys().find(|l| !sizes.contains_key(l)) {
            return Err(Error::InvalidArgument(format!("class entry {l} has no pixels")));
        }
        let mut seen = vec![false; self.labels.len()];
        let mut queue = VecDeque::new();
        for (&l, &start) in &first_pixel {
            let mut reached = 0;
            seen[start] = true;
            queue.push_back(start);
            while let Some(p) = queue.pop_front() {
                reached += 1;
                for n in self.labels.neighbors4(p) {
                    if !seen[n] && self.labels.as_slice()[n] == l {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                }
            }
            if reached != sizes[&l] {
                return Err(Error::InvalidArgument(format!(
                    "label {l} is split into several components"
                )));
            }
        }
        Ok(())
    }

    /// Pixel count of every region.
    pub fn areas(&self) -> BTreeMap<u32, usize> {
        let mut out: BTreeMap<u32, usize> = self.classes.keys().map(|&l| (l, 0)).collect();
        for &l in self.labels.as_slice() {
            if l != 0 {
                *out.entry(l).or_insert(0) += 1;
            }
        }
        out
    }

    pub fn class_mask(&self, class: RegionClass) -> BinaryGrid {
        self.labels
            .map(|l| *l != 0 && self.classes.get(l) == Some(&class))
    }

    /// Cell and guttae masks with the given roi.
    pub fn to_masks(&self, roi: Roi) -> Result<SegMasks> {
        SegMasks::new(
            self.class_mask(RegionClass::Cell),
            self.class_mask(RegionClass::Gutta),
            roi,
        )
    }

    /// Regions from the 4-connected components of each mask.
    pub fn from_masks(masks: &SegMasks) -> Result<LabelMap> {
        let overlap = masks.cells.and_count(&masks.guttae);
        if overlap > 0 {
            return Err(Error::MaskOverlap { count: overlap });
        }
        let (cells, n_cells) = connected_components(&masks.cells);
        let (guttae, _) = connected_components(&masks.guttae);
        let mut classes = BTreeMap::new();
        let labels = Grid::from_fn(masks.width(), masks.height(), |x, y| {
            let c = *cells.get(x, y);
            let g = *guttae.get(x, y);
            if c != 0 {
                classes.insert(c, RegionClass::Cell);
                c
            } else if g != 0 {
                classes.insert(g + n_cells, RegionClass::Gutta);
                g + n_cells
            } else {
                0
            }
        });
        Ok(relabel_sequential(&LabelMap { labels, classes }))
    }

    /// 16-bit grayscale PNG of labels plus `<stem>.classes.json`.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if self.classes.keys().next_back().is_some_and(|&l| l > u16::MAX as u32) {
            return Err(Error::InvalidArgument(
                "more than 65535 labels cannot be stored as 16-bit png".into(),
            ));
        }
        crate::image_io::write_u16_png(path, &self.labels.map(|&l| l as u16))?;
        std::fs::write(classes_path(path), serde_json::to_string_pretty(&self.classes_json())?)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let grid = crate::image_io::read_gray_png(path)?;
        let labels = grid.map(|&v| v as u32);
        let json: BTreeMap<String, RegionClass> =
            serde_json::from_str(&std::fs::read_to_string(classes_path(path))?)?;
        let classes = json
            .into_iter()
            .map(|(k, v)| {
                k.parse::<u32>()
                    .map(|l| (l, v))
                    .map_err(|_| Error::InvalidArgument(format!("bad label key {k:?}")))
            })
            .collect::<Result<_>>()?;
        LabelMap::new(labels, classes)
    }

    /// `{ "1": "cell", "2": "gutta", ... }`
    pub fn classes_json(&self) -> BTreeMap<String, RegionClass> {
        self.classes.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }
}

fn classes_path(path: &Path) -> std::path::PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("labels");
    path.with_file_name(format!("{stem}.classes.json"))
}

/// 4-connected component labeling in raster order; returns labels (0 = background) and count.
pub fn connected_components(mask: &BinaryGrid) -> (Grid<u32>, u32) {
    let mut labels: Grid<u32> = Grid::new(mask.width(), mask.height());
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask.as_slice()[start] || labels.as_slice()[start] != 0 {
            continue;
        }
        next += 1;
        labels.as_mut_slice()[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for n in mask.neighbors4(p) {
                if mask.as_slice()[n] && labels.as_slice()[n] == 0 {
                    labels.as_mut_slice()[n] = next;
                    queue.push_back(n);
                }
            }
        }
    }
    (labels, next)
}

/// Foreground where the map exceeds the cell threshold.
pub fn threshold_cells(map: &SignedDistMap) -> BinaryGrid {
    threshold_cells_at(map, CELL_THRESHOLD)
}

pub fn threshold_cells_at(map: &SignedDistMap, threshold: f32) -> BinaryGrid {
    map.grid().map(|&v| v > threshold)
}

/// Foreground where the map is negative.
pub fn threshold_guttae(map: &SignedDistMap) -> BinaryGrid {
    map.grid().map(|&v| v < 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub cell_threshold: f32,
    pub min_region_px: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            cell_threshold: CELL_THRESHOLD,
            min_region_px: MIN_REGION_PX,
        }
    }
}

#[derive(Clone, Copy)]
struct FloodKey {
    elevation: f32,
    index: usize,
}

impl PartialEq for FloodKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for FloodKey {}

impl PartialOrd for FloodKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for FloodKey {
    // reversed: BinaryHeap pops the lowest elevation, then the lowest raster index
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .elevation
            .total_cmp(&self.elevation)
            .then_with(|| other.index.cmp(&self.index))
    }
}

/// Marker-controlled priority flood. Unlabeled pixels are claimed by the
/// region of their labeled neighbours in order of (elevation, raster index);
/// a pixel reached by two different regions becomes a watershed line (0).
pub fn flood(markers: &Grid<u32>, elevation: &Grid<f32>) -> Grid<u32> {
    debug_assert!(markers.same_dims(elevation));
    let mut labels = markers.clone();
    let mut queued = vec![false; labels.len()];
    let mut heap = BinaryHeap::new();
    let elev = elevation.as_slice();
    for i in 0..labels.len() {
        if labels.as_slice()[i] == 0 {
            continue;
        }
        queued[i] = true;
        for n in markers.neighbors4(i) {
            if labels.as_slice()[n] == 0 && !queued[n] {
                queued[n] = true;
                heap.push(FloodKey {
                    elevation: elev[n],
                    index: n,
                });
            }
        }
    }
    while let Some(FloodKey { index: p, .. }) = heap.pop() {
        let mut owner = 0u32;
        let mut conflict = false;
        for n in labels.neighbors4(p) {
            let l = labels.as_slice()[n];
            if l == 0 {
                continue;
            }
            if owner == 0 {
                owner = l;
            } else if owner != l {
                conflict = true;
            }
        }
        if conflict || owner == 0 {
            continue;
        }
        labels.as_mut_slice()[p] = owner;
        for n in markers.neighbors4(p) {
            if !queued[n] {
                queued[n] = true;
                heap.push(FloodKey {
                    elevation: elev[n],
                    index: n,
                });
            }
        }
    }
    labels
}

/// Decodes with the default cell threshold and minimum region size.
pub fn watershed_decode(map: &SignedDistMap) -> LabelMap {
    watershed_decode_with(map, &DecodeParams::default())
}

pub fn watershed_decode_with(map: &SignedDistMap, params: &DecodeParams) -> LabelMap {
    let cells = threshold_cells_at(map, params.cell_threshold);
    let guttae = threshold_guttae(map);
    let elevation = map.grid().map(|&v| -v.abs());
    decode_markers(&cells, &guttae, &elevation, params.min_region_px)
}

/// Decodes per-pixel class probabilities (channels: cell, gutta, other):
/// markers come from the arg-max classes and the flood runs over the
/// probability of the intercellular class.
pub fn decode_class_probs(probs: &[Grid<f32>; 3], min_region_px: usize) -> LabelMap {
    let [pc, pg, po] = probs;
    let argmax = |i: usize| {
        let (c, g, o) = (pc.as_slice()[i], pg.as_slice()[i], po.as_slice()[i]);
        if c >= g && c >= o {
            0
        } else if g >= o {
            1
        } else {
            2
        }
    };
    let (w, h) = pc.dims();
    let cells = Grid::from_fn(w, h, |x, y| argmax(y * w + x) == 0);
    let guttae = Grid::from_fn(w, h, |x, y| argmax(y * w + x) == 1);
    decode_markers(&cells, &guttae, po, min_region_px)
}

fn decode_markers(
    cells: &BinaryGrid,
    guttae: &BinaryGrid,
    elevation: &Grid<f32>,
    min_region_px: usize,
) -> LabelMap {
    let (cell_labels, n_cells) = connected_components(cells);
    let (gutta_labels, n_guttae) = connected_components(guttae);
    let markers = Grid::from_fn(cells.width(), cells.height(), |x, y| {
        let c = *cell_labels.get(x, y);
        let g = *gutta_labels.get(x, y);
        if c != 0 {
            c
        } else if g != 0 {
            g + n_cells
        } else {
            0
        }
    });
    let mut labels = flood(&markers, elevation);
    let mut sizes = vec![0usize; (n_cells + n_guttae + 1) as usize];
    for &l in labels.as_slice() {
        sizes[l as usize] += 1;
    }
    for l in labels.as_mut_slice() {
        if *l != 0 && sizes[*l as usize] < min_region_px {
            *l = 0;
        }
    }
    let classes = (1..=n_cells + n_guttae)
        .filter(|&l| sizes[l as usize] >= min_region_px)
        .map(|l| {
            let class = if l <= n_cells {
                RegionClass::Cell
            } else {
                RegionClass::Gutta
            };
            (l, class)
        })
        .collect();
    relabel_sequential(&LabelMap { labels, classes })
}

/// Renumbers regions 1..N in order of their first pixel in raster order.
pub fn relabel_sequential(map: &LabelMap) -> LabelMap {
    let mut remap: HashMap<u32, u32> = HashMap::new();
    let mut classes = BTreeMap::new();
    let labels = map.labels.map(|&l| {
        if l == 0 {
            return 0;
        }
        let next = remap.len() as u32 + 1;
        let new = *remap.entry(l).or_insert(next);
        if let Some(&c) = map.classes.get(&l) {
            classes.insert(new, c);
        }
        new
    });
    LabelMap { labels, classes }
}
